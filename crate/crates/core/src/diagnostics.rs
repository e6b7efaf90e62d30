//! Finite-difference gradient suite over every differentiable layer and the
//! full masked, deeply supervised loss, in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{Activation, BnState, Mode};
use crate::network::{ForwardOptions, Network, NetworkConfig, AUX_HEADS};
use crate::objective::LossMask;
use crate::tensor_core::{
    finite_diff_check, finite_diff_check_many, GradCheckReport, Tape, Tensor, Var,
};

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Perturbation used throughout the suite.
const EPS: f64 = 1e-4;

/// Step for the whole-network check, which uses a fourth-order stencil.
const NET_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct LayerCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
}

impl LayerCheck {
    fn new(name: &str, r: GradCheckReport) -> Self {
        Self {
            name: name.into(),
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            kinks: r.kinks.len(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate carries
/// a distinct, order-one adjoint.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(tape.value(y).shape(), 0.5, 1.5, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

type Check = (
    &'static str,
    Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradCheckReport>>,
);

fn layer_checks() -> Vec<Check> {
    vec![
        (
            "conv3d",
            Box::new(|rng| {
                let xs = [
                    uniform(&[2, 4, 5, 5], -1.0, 1.0, rng),
                    uniform(&[3, 2, 2, 3, 3], -0.5, 0.5, rng),
                    uniform(&[3], -0.5, 0.5, rng),
                ];
                finite_diff_check_many(
                    |t, v| {
                        let y = t.conv3d_valid(v[0], v[1], Some(v[2]), [1, 1, 1])?;
                        project(t, y, 1)
                    },
                    &xs,
                    EPS,
                )
            }),
        ),
        (
            "conv3d_strided",
            Box::new(|rng| {
                let xs = [
                    uniform(&[2, 5, 7, 7], -1.0, 1.0, rng),
                    uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, rng),
                ];
                finite_diff_check_many(
                    |t, v| {
                        let a = t.conv3d_valid(v[0], v[1], None, [2, 2, 2])?;
                        project(t, a, 2)
                    },
                    &xs,
                    EPS,
                )
            }),
        ),
        (
            "conv3d_inplane_stride",
            Box::new(|rng| {
                let xs = [
                    uniform(&[2, 3, 6, 6], -1.0, 1.0, rng),
                    uniform(&[2, 2, 1, 2, 2], -0.5, 0.5, rng),
                ];
                finite_diff_check_many(
                    |t, v| {
                        let a = t.conv3d_valid(v[0], v[1], None, [1, 2, 2])?;
                        project(t, a, 3)
                    },
                    &xs,
                    EPS,
                )
            }),
        ),
        (
            "batchnorm_train",
            Box::new(|rng| {
                let xs = [
                    uniform(&[3, 2, 3, 3], -2.0, 2.0, rng),
                    uniform(&[3], 0.5, 1.5, rng),
                    uniform(&[3], -0.5, 0.5, rng),
                ];
                finite_diff_check_many(
                    |t, v| {
                        let mut state = BnState::new(3);
                        let y = t.batchnorm(v[0], v[1], v[2], &mut state, Mode::Train)?;
                        project(t, y, 4)
                    },
                    &xs,
                    EPS,
                )
            }),
        ),
        (
            "batchnorm_eval",
            Box::new(|rng| {
                let mut state = BnState::new(2);
                state.running_mean = vec![0.3, -0.2];
                state.running_var = vec![1.7, 0.4];
                state.updates = 1;
                let xs = [
                    uniform(&[2, 2, 3, 3], -2.0, 2.0, rng),
                    uniform(&[2], 0.5, 1.5, rng),
                    uniform(&[2], -0.5, 0.5, rng),
                ];
                finite_diff_check_many(
                    move |t, v| {
                        let mut s = state.clone();
                        let y = t.batchnorm(v[0], v[1], v[2], &mut s, Mode::Eval)?;
                        project(t, y, 5)
                    },
                    &xs,
                    EPS,
                )
            }),
        ),
        (
            "relu",
            Box::new(|rng| {
                let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, rng);
                finite_diff_check(
                    |t, x| {
                        let y = t.activation(x, Activation::Relu)?;
                        project(t, y, 6)
                    },
                    &x,
                    EPS,
                )
            }),
        ),
        (
            "sigmoid",
            Box::new(|rng| {
                let x = uniform(&[2, 3, 4, 4], -4.0, 4.0, rng);
                finite_diff_check(
                    |t, x| {
                        let y = t.activation(x, Activation::Sigmoid)?;
                        project(t, y, 7)
                    },
                    &x,
                    EPS,
                )
            }),
        ),
        (
            "dropout",
            Box::new(|rng| {
                let x = uniform(&[2, 2, 3, 3], -1.0, 1.0, rng);
                let mask = Tensor::from_vec(
                    &[2, 2, 3, 3],
                    (0..36)
                        .map(|i| if i % 3 == 0 { 0.0 } else { 1.5 })
                        .collect(),
                )?;
                finite_diff_check(
                    move |t, x| {
                        let y = t.dropout_with_mask(x, mask.clone())?;
                        project(t, y, 8)
                    },
                    &x,
                    EPS,
                )
            }),
        ),
        (
            "crop_center",
            Box::new(|rng| {
                let x = uniform(&[2, 4, 6, 6], -1.0, 1.0, rng);
                finite_diff_check(
                    |t, x| {
                        let y = t.crop_center(x, [2, 4, 2])?;
                        project(t, y, 9)
                    },
                    &x,
                    EPS,
                )
            }),
        ),
        (
            "concat_features",
            Box::new(|rng| {
                let xs = [
                    uniform(&[2, 2, 3, 3], -1.0, 1.0, rng),
                    uniform(&[1, 2, 3, 3], -1.0, 1.0, rng),
                ];
                finite_diff_check_many(
                    |t, v| {
                        let y = t.concat_features(v[0], v[1])?;
                        project(t, y, 10)
                    },
                    &xs,
                    EPS,
                )
            }),
        ),
        (
            "upsample_nn",
            Box::new(|rng| {
                let x = uniform(&[2, 2, 3, 3], -1.0, 1.0, rng);
                finite_diff_check(
                    |t, x| {
                        let y = t.upsample_nn(x, [2, 2, 3])?;
                        project(t, y, 11)
                    },
                    &x,
                    EPS,
                )
            }),
        ),
        (
            "masked_weighted_bce",
            Box::new(|rng| {
                let z = uniform(&[1, 3, 4, 4], -3.0, 3.0, rng);
                let labels = Tensor::from_vec(
                    &[1, 3, 4, 4],
                    (0..48).map(|_| f64::from(rng.gen_bool(0.3))).collect(),
                )?;
                let mask = LossMask::new([3, 4, 4], (0..48).map(|_| rng.gen_bool(0.6)).collect())?;
                finite_diff_check(
                    move |t, z| Ok(t.masked_weighted_bce(z, &labels, &mask, 7.0)?.loss),
                    &z,
                    EPS,
                )
            }),
        ),
        (
            "total_loss",
            Box::new(|rng| {
                let xs: Vec<Tensor<f64>> = (0..=AUX_HEADS)
                    .map(|_| uniform(&[1, 2, 3, 3], -2.0, 2.0, rng))
                    .collect();
                let labels = Tensor::from_vec(
                    &[1, 2, 3, 3],
                    (0..18).map(|i| f64::from(i % 4 == 0)).collect(),
                )?;
                let mask = LossMask::new([2, 3, 3], (0..18).map(|i| i % 5 != 1).collect())?;
                let weights = [0.9, 0.7, 0.5, 0.3, 0.2, 0.1];
                finite_diff_check_many(
                    move |t, v| {
                        let main = t.masked_weighted_bce(v[0], &labels, &mask, 3.0)?.loss;
                        let aux = v[1..]
                            .iter()
                            .map(|&a| Ok(t.masked_weighted_bce(a, &labels, &mask, 3.0)?.loss))
                            .collect::<Result<Vec<_>>>()?;
                        t.total_loss(main, &aux, &weights)
                    },
                    &xs,
                    EPS,
                )
            }),
        ),
    ]
}

/// Small network exercising every node type, residual blocks with pre-add
/// dropout and six auxiliary heads.
pub fn gradcheck_network() -> NetworkConfig {
    NetworkConfig::from_json(
        r#"{
  "name": "gradcheck",
  "intensity_scale": 0.002,
  "nodes": [
    {"id": "c1", "op": "conv", "input": "input", "features": 3, "kernel": [1, 3, 3]},
    {"id": "b1", "op": "block", "input": "c1", "kind": "residual",
     "convs": [{"features": 2, "kernel": [3, 3, 3]}, {"features": 3, "kernel": [1, 1, 1]}],
     "dropout": {"position": "pre_add", "p": 0.3}},
    {"id": "d1", "op": "conv", "input": "b1", "features": 3, "kernel": [1, 2, 2], "stride": [1, 2, 2], "preact": true},
    {"id": "b2", "op": "block", "input": "d1", "kind": "plain",
     "convs": [{"features": 3, "kernel": [1, 3, 3]}, {"features": 3, "kernel": [1, 1, 1]}]},
    {"id": "u1", "op": "upsample", "input": "b2", "factor": [1, 2, 2]},
    {"id": "cat", "op": "concat", "inputs": ["b1", "u1"]},
    {"id": "f1", "op": "conv", "input": "cat", "features": 3, "kernel": [1, 1, 1], "preact": true}
  ],
  "aux_heads": ["c1", "b1", "d1", "b2", "u1", "cat"],
  "output": "f1"
}"#,
    )
    .expect("built-in config is valid")
}

/// Total training loss of `net` on one patch, with dropout masks drawn from
/// a generator reset to `seed`.
fn network_loss(
    tape: &mut Tape<f64>,
    net: &mut Network<f64>,
    patch: &Tensor<f64>,
    labels: &Tensor<f64>,
    mask: &LossMask,
    seed: u64,
) -> Result<(Var, crate::network::ForwardOutput)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = tape.constant(patch.clone());
    let out = net.forward(tape, x, ForwardOptions::train(), &mut rng)?;
    let main = tape
        .masked_weighted_bce(out.main_logits, labels, mask, 4.0)?
        .loss;
    let aux = out
        .aux_logits
        .iter()
        .map(|&l| Ok(tape.masked_weighted_bce(l, labels, mask, 4.0)?.loss))
        .collect::<Result<Vec<_>>>()?;
    let total = tape.total_loss(main, &aux, &[0.8; AUX_HEADS])?;
    Ok((total, out))
}

/// Gradient of the masked deeply supervised loss with respect to every
/// network parameter, against central differences.
pub fn check_network_loss(seed: u64) -> Result<GradCheckReport> {
    let cfg = gradcheck_network();
    let mut net: Network<f64> = Network::build(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Move off the initialization so zero-initialized shifts are generic too.
    for p in net.params_mut() {
        p.value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let size = [5, 16, 16];
    let patch = uniform(&[1, size[0], size[1], size[2]], -200.0, 900.0, &mut rng);
    let out = net.output_shape(size)?;
    let n: usize = out.iter().product();
    let labels = Tensor::from_vec(
        &[1, out[0], out[1], out[2]],
        (0..n).map(|_| f64::from(rng.gen_bool(0.3))).collect(),
    )?;
    let mask = LossMask::new(out, (0..n).map(|_| rng.gen_bool(0.7)).collect())?;

    let mut tape = Tape::new();
    let (loss, fwd) = network_loss(&mut tape, &mut net, &patch, &labels, &mask, seed)?;
    let mut grads = tape.backward(loss)?;
    let analytic = net.collect_grads(&mut grads, &fwd)?;

    // The loss is piecewise smooth; a perturbation that moves any ReLU
    // across zero changes which recorded values are exactly zero.
    let eval = |net: &mut Network<f64>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let (loss, _) = network_loss(&mut tape, net, &patch, &labels, &mask, seed)?;
        let v = tape.value(loss).item()?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("network loss became {v}")));
        }
        Ok((
            v,
            tape.values()
                .flat_map(|t| t.data().iter().map(|&x| x == 0.0))
                .collect(),
        ))
    };
    let (_, pattern) = eval(&mut net)?;
    let mut report = GradCheckReport::default();
    for (pi, g) in analytic.iter().enumerate() {
        for i in 0..g.numel() {
            let orig = net.params()[pi].value.data()[i];
            let mut f = [0.0; 4];
            let mut kink = false;
            for (k, d) in [NET_EPS, -NET_EPS, 2.0 * NET_EPS, -2.0 * NET_EPS]
                .into_iter()
                .enumerate()
            {
                net.params_mut()[pi].value.data_mut()[i] = orig + d;
                let (v, p) = eval(&mut net)?;
                f[k] = v;
                kink |= p != pattern;
            }
            net.params_mut()[pi].value.data_mut()[i] = orig;
            if kink {
                report.kinks.push((pi, i));
                continue;
            }
            // Fourth-order central difference.
            let numeric = (8.0 * (f[0] - f[1]) - (f[2] - f[3])) / (12.0 * NET_EPS);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, i));
            }
        }
    }
    Ok(report)
}

/// Runs every check from one seed.
pub fn gradient_suite(seed: u64) -> Result<Vec<LayerCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, check) in layer_checks() {
        out.push(LayerCheck::new(name, check(&mut rng)?));
    }
    out.push(LayerCheck::new(
        "network_masked_deep_supervision",
        check_network_loss(seed)?,
    ));
    Ok(out)
}
