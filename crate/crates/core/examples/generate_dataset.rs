//! Writes a small phantom dataset and reports what each split contains.
//!
//! `cargo run --release --example generate_dataset -- [count] [dir]`

use calcseg::phantom::{
    generate_dataset, DatasetManifest, PhantomSpec, Split, SplitFractions, MANIFEST_FILE,
};

fn main() -> calcseg::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(10, |a| a.parse().expect("count"));
    let dir = args.next().unwrap_or_else(|| {
        std::env::temp_dir()
            .join("calcseg_phantoms")
            .display()
            .to_string()
    });

    let spec = PhantomSpec::default();
    generate_dataset(&spec, count, SplitFractions::default(), &dir)?;
    let manifest = DatasetManifest::load(std::path::Path::new(&dir).join(MANIFEST_FILE))?;
    println!("{count} phantoms of {:?} voxels in {dir}", spec.size);
    for split in [Split::Train, Split::Val, Split::Test] {
        for case in manifest.load_split(split)? {
            let bone = case
                .volume
                .data
                .iter()
                .zip(&case.label.data)
                .filter(|(&v, &l)| v > 130.0 && l == 0)
                .count();
            println!(
                "{split:?}\t{}\tlesion voxels {:>5}\tbone voxels {bone:>6}",
                case.id,
                case.label.count()
            );
        }
    }
    Ok(())
}
