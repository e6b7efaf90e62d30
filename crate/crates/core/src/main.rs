fn main() -> std::process::ExitCode {
    std::process::ExitCode::from(calcseg::cli::main_with(std::env::args_os()))
}
