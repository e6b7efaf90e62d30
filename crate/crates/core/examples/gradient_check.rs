//! Finite-difference checks of every layer and of the full training loss,
//! plus a hand-built function on the tape.

use calcseg::diagnostics::{gradient_suite, GRADCHECK_TOLERANCE};
use calcseg::tensor_core::finite_diff_check;
use calcseg::tensor_core::Tensor;

fn main() -> calcseg::Result<()> {
    // f(x) = sum(sigmoid(x) * x)
    let x = Tensor::from_vec(&[2, 3], vec![-1.5, -0.2, 0.0, 0.4, 1.1, 2.5])?;
    let report = finite_diff_check(
        |tape, v| {
            let s = tape.sigmoid(v)?;
            let p = tape.mul(s, v)?;
            tape.sum_all(p)
        },
        &x,
        1e-6,
    )?;
    println!(
        "sigmoid(x) * x: max rel error {:.2e} over {} coordinates",
        report.max_rel_error, report.checked
    );

    for c in gradient_suite(0)? {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<36} {:.2e}  {verdict}", c.name, c.max_rel_error);
    }
    println!("tolerance {GRADCHECK_TOLERANCE:e}");
    Ok(())
}
