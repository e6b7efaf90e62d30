//! Weighted cross-entropy restricted to above-threshold voxels, and the
//! default training schedules.

use calcseg::objective::{
    masked_weighted_bce_value, schedule_value, LossMask, ScheduleKind, ScheduleSet,
};
use calcseg::tensor_core::Tensor;

fn main() -> calcseg::Result<()> {
    let hu = Tensor::from_vec(&[1, 1, 1, 6], vec![40.0, 90.0, 135.0, 300.0, 700.0, 129.0])?;
    let labels = Tensor::from_vec(&[1, 1, 1, 6], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0])?;
    let logits = Tensor::from_vec(&[1, 1, 1, 6], vec![3.0, -2.0, 0.5, 2.0, -1.0, 4.0])?;
    let mask = LossMask::above(&hu, 130.0)?;
    for pw in [1.0, 10.0, 1000.0] {
        let l = masked_weighted_bce_value(&logits, &labels, &mask, pw)?;
        println!("positive weight {pw:>6}: loss {l:.4}");
    }

    let s = ScheduleSet::default();
    println!("epoch      lr  momentum  pos_weight   aux");
    for e in [1, 5, 6, 10, 11, 25, 50] {
        println!(
            "{e:>5} {:>7} {:>9} {:>11} {:>5}",
            schedule_value(&s, ScheduleKind::Lr, e),
            schedule_value(&s, ScheduleKind::Momentum, e),
            schedule_value(&s, ScheduleKind::PosWeight, e),
            schedule_value(&s, ScheduleKind::Aux, e),
        );
    }
    Ok(())
}
