use calcseg::network::AUX_HEADS;
use calcseg::objective::*;
use calcseg::tensor_core::{Tape, Tensor};
use proptest::prelude::*;

fn grid(v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(&[1, 1, 1, v.len()], v).unwrap()
}

/// Summed cross-entropy written with logs of probabilities.
fn naive_bce(z: &[f64], y: &[f64]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

#[test]
fn full_mask_unit_weight_is_plain_bce() {
    let z: Vec<f64> = (0..40).map(|i| (i as f64 - 20.0) * 0.37).collect();
    let y: Vec<f64> = (0..40).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect();
    let got = masked_weighted_bce_value(
        &grid(z.clone()),
        &grid(y.clone()),
        &LossMask::full([1, 1, 40]),
        1.0,
    )
    .unwrap();
    let want = naive_bce(&z, &y);
    assert!((got - want).abs() <= 1e-6 * want);
}

#[test]
fn aux_gradients_scale_with_weights() {
    let grads = |a: [f64; AUX_HEADS]| {
        let mut tape = Tape::<f64>::new();
        let main = tape.leaf(Tensor::scalar(0.5));
        let aux: Vec<_> = (0..AUX_HEADS)
            .map(|i| tape.leaf(Tensor::scalar(i as f64)))
            .collect();
        let total = tape.total_loss(main, &aux, &a).unwrap();
        let g = tape.backward(total).unwrap();
        aux.iter()
            .map(|v| g.get(*v).unwrap().item().unwrap())
            .collect::<Vec<_>>()
    };
    let a = [0.0, 0.25, 0.5, 1.0, 2.0, 3.5];
    assert_eq!(grads(a), a.to_vec());
}

fn case(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<bool>)> {
    (
        prop::collection::vec(-30.0f64..30.0, n),
        prop::collection::vec(prop::bool::ANY, n),
        prop::collection::vec(prop::bool::ANY, n),
    )
        .prop_map(|(z, y, m)| (z, y.into_iter().map(|b| b as u8 as f64).collect(), m))
}

proptest! {
    #[test]
    fn outside_mask_is_ignored_bitwise(
        (z, y, keep) in case(32),
        noise in prop::collection::vec(-1e3f64..1e3, 32),
        flips in prop::collection::vec(prop::bool::ANY, 32),
        pw in 1.0f64..1000.0,
    ) {
        let mask = LossMask::new([1, 1, 32], keep.clone()).unwrap();
        let base = masked_weighted_bce_value(&grid(z.clone()), &grid(y.clone()), &mask, pw).unwrap();
        let z2: Vec<f64> = (0..32).map(|i| if keep[i] { z[i] } else { noise[i] }).collect();
        let y2: Vec<f64> = (0..32).map(|i| if keep[i] || !flips[i] { y[i] } else { 1.0 - y[i] }).collect();
        let moved = masked_weighted_bce_value(&grid(z2.clone()), &grid(y2.clone()), &mask, pw).unwrap();
        prop_assert_eq!(base.to_bits(), moved.to_bits());

        let mut tape = Tape::new();
        let v = tape.leaf(grid(z2));
        let l = tape.masked_weighted_bce(v, &grid(y2), &mask, pw).unwrap();
        prop_assert_eq!(tape.value(l.loss).item().unwrap().to_bits(), base.to_bits());
    }

    #[test]
    fn loss_is_non_negative((z, y, keep) in case(16), pw in 0.0f64..1000.0) {
        let mask = LossMask::new([1, 1, 16], keep).unwrap();
        prop_assert!(masked_weighted_bce_value(&grid(z), &grid(y), &mask, pw).unwrap() >= 0.0);
    }

    #[test]
    fn schedules_are_non_negative_and_aux_vanishes(epoch in 0usize..500) {
        let s = ScheduleSet::default();
        for k in [ScheduleKind::Lr, ScheduleKind::Momentum, ScheduleKind::PosWeight, ScheduleKind::Aux] {
            prop_assert!(schedule_value(&s, k, epoch) >= 0.0);
        }
        if epoch >= 50 {
            prop_assert_eq!(schedule_value(&s, ScheduleKind::Aux, epoch), 0.0);
        }
    }
}
