//! Overlap and agreement statistics on a handful of made-up masks.

use calcseg::inference_eval::{icc, paired_ttest, EvalReport};
use calcseg::phantom::LabelVolume;

fn mask(bits: &[u8]) -> LabelVolume {
    LabelVolume::new([1, 1, bits.len()], [1.0, 0.46, 0.46], bits.to_vec()).expect("binary mask")
}

fn main() -> calcseg::Result<()> {
    let pairs = [
        (
            "a",
            mask(&[1, 1, 0, 0, 0, 0, 0, 0]),
            mask(&[1, 1, 1, 0, 0, 0, 0, 0]),
        ),
        (
            "b",
            mask(&[0, 1, 1, 1, 1, 0, 0, 0]),
            mask(&[0, 1, 1, 1, 1, 1, 0, 0]),
        ),
        (
            "c",
            mask(&[0, 0, 0, 0, 1, 0, 0, 0]),
            mask(&[0, 0, 0, 0, 0, 0, 0, 0]),
        ),
        (
            "d",
            mask(&[1, 1, 1, 1, 1, 1, 1, 0]),
            mask(&[1, 1, 1, 1, 1, 1, 1, 1]),
        ),
        (
            "e",
            mask(&[0, 0, 1, 1, 0, 0, 0, 0]),
            mask(&[0, 0, 1, 1, 0, 0, 0, 0]),
        ),
    ];
    let report = EvalReport::from_masks(pairs.iter().map(|(id, p, r)| (*id, p, r)))?;
    for r in &report.rows {
        println!(
            "{}  dice {:.3}  predicted {:.3} mm3  reference {:.3} mm3",
            r.id, r.dice, r.predicted_mm3, r.reference_mm3
        );
    }
    println!("{}", serde_json::to_string_pretty(&report.summary)?);

    let x = [10.0, 12.0, 15.0, 9.0, 20.0, 14.0];
    let y = [11.0, 12.0, 17.0, 8.0, 19.0, 16.0];
    println!(
        "ICC {:.6} (exact 188/199 = {:.6})",
        icc(&x, &y)?,
        188.0 / 199.0
    );

    let t = paired_ttest(
        &[0.81, 0.77, 0.90, 0.85, 0.79],
        &[0.78, 0.75, 0.86, 0.84, 0.74],
    )?;
    println!("paired t {:.3}  df {}  p {:.4}", t.t, t.df, t.p);
    Ok(())
}
