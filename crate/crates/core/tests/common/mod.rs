//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use calcseg::layers::conv3d_forward;
use calcseg::phantom::{LabelVolume, PhantomSpec};
use calcseg::tensor_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct-loop valid cross-correlation, accumulated in f64.
pub fn naive_conv(x: &Tensor<f32>, w: &Tensor<f32>, stride: [usize; 3]) -> Vec<f32> {
    let (xs, ws) = (x.shape(), w.shape());
    let (c, d, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (k, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let od = (d - kd) / stride[0] + 1;
    let oh = (h - kh) / stride[1] + 1;
    let ow = (wd - kw) / stride[2] + 1;
    let (xv, wv) = (x.data(), w.data());
    let mut out = vec![0f32; k * od * oh * ow];
    for ko in 0..k {
        for z in 0..od {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0f64;
                    for ci in 0..c {
                        for a in 0..kd {
                            for b in 0..kh {
                                for e in 0..kw {
                                    let zi = z * stride[0] + a;
                                    let yi = y * stride[1] + b;
                                    let xi = xo * stride[2] + e;
                                    let xval = xv[((ci * d + zi) * h + yi) * wd + xi] as f64;
                                    let wval =
                                        wv[(((ko * c + ci) * kd + a) * kh + b) * kw + e] as f64;
                                    acc += xval * wval;
                                }
                            }
                        }
                    }
                    out[((ko * od + z) * oh + y) * ow + xo] = acc as f32;
                }
            }
        }
    }
    out
}

pub struct ConvCase {
    pub x: Tensor<f32>,
    pub w: Tensor<f32>,
    pub stride: [usize; 3],
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// The named 2x8x9x10 case first, then random shapes, kernels and strides.
pub fn conv_cases(count: usize, seed: u64) -> Vec<ConvCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = vec![ConvCase {
        x: random_tensor(&[2, 8, 9, 10], &mut rng),
        w: random_tensor(&[3, 2, 3, 3, 3], &mut rng),
        stride: [1, 2, 2],
    }];
    while cases.len() < count {
        let c = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=5);
        let kernel = [
            rng.gen_range(1..=3),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        ];
        let stride = [
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        ];
        let input: Vec<usize> = (0..3).map(|a| kernel[a] + rng.gen_range(0..9)).collect();
        cases.push(ConvCase {
            x: random_tensor(&[c, input[0], input[1], input[2]], &mut rng),
            w: random_tensor(&[k, c, kernel[0], kernel[1], kernel[2]], &mut rng),
            stride,
        });
    }
    cases
}

/// Largest elementwise difference between the crate's convolution and the
/// direct loops for one case.
pub fn conv_case_error(case: &ConvCase) -> f32 {
    let fast = conv3d_forward(&case.x, &case.w, None, case.stride).unwrap();
    let slow = naive_conv(&case.x, &case.w, case.stride);
    assert_eq!(fast.numel(), slow.len());
    fast.data()
        .iter()
        .zip(&slow)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f32::max)
}

/// Dice by explicit voxel sets.
pub fn set_dice(a: &[u8], b: &[u8]) -> f64 {
    let sa: std::collections::BTreeSet<usize> = (0..a.len()).filter(|&i| a[i] != 0).collect();
    let sb: std::collections::BTreeSet<usize> = (0..b.len()).filter(|&i| b[i] != 0).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

/// Two-sided Student-t p-value for four degrees of freedom from the closed
/// form `A(t|4) = sin(theta) (1 + cos^2(theta) / 2)`, `theta = atan(t / 2)`.
pub fn student_t4_two_sided(t: f64) -> f64 {
    let theta = (t.abs() / 2.0).atan();
    1.0 - theta.sin() * (1.0 + theta.cos().powi(2) / 2.0)
}

/// Six rater pairs with their variance-component table worked by hand:
/// grand mean 163/12, SS_rows 1937/12, SS_cols 3/4, SS_total 2003/12,
/// SS_err 19/4; MS_R 1937/60, MS_C 3/4, MS_E 19/20; ICC = 188/199.
pub const ICC_X: [f64; 6] = [10.0, 12.0, 15.0, 9.0, 20.0, 14.0];
pub const ICC_Y: [f64; 6] = [11.0, 12.0, 17.0, 8.0, 19.0, 16.0];
pub const ICC_EXPECTED: f64 = 188.0 / 199.0;

pub fn icc_from_table() -> f64 {
    let (ms_r, ms_c, ms_e) = (1937.0 / 60.0, 3.0 / 4.0, 19.0 / 20.0);
    (ms_r - ms_e) / (ms_r + ms_e + 2.0 / 6.0 * (ms_c - ms_e))
}

pub fn random_mask(len: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..len).map(|_| u8::from(rng.gen_bool(p))).collect()
}

pub fn mask_volume(bits: Vec<u8>, spacing: [f64; 3]) -> LabelVolume {
    LabelVolume::new([1, 1, bits.len()], spacing, bits).unwrap()
}

/// Connected components of a binary grid under 6-connectivity.
pub fn components(mask: &LabelVolume) -> Vec<Vec<[usize; 3]>> {
    let [d, h, w] = mask.dims;
    let mut seen = vec![false; d * h * w];
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !mask.get(z, y, x) || seen[idx(z, y, x)] {
                    continue;
                }
                let mut comp = Vec::new();
                let mut stack = vec![[z, y, x]];
                seen[idx(z, y, x)] = true;
                while let Some(p) = stack.pop() {
                    comp.push(p);
                    for q in neighbours6(p, mask.dims) {
                        if mask.get(q[0], q[1], q[2]) && !seen[idx(q[0], q[1], q[2])] {
                            seen[idx(q[0], q[1], q[2])] = true;
                            stack.push(q);
                        }
                    }
                }
                out.push(comp);
            }
        }
    }
    out
}

pub fn neighbours6(p: [usize; 3], dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..3).flat_map(move |a| {
        let mut v = Vec::with_capacity(2);
        if p[a] > 0 {
            let mut q = p;
            q[a] -= 1;
            v.push(q);
        }
        if p[a] + 1 < dims[a] {
            let mut q = p;
            q[a] += 1;
            v.push(q);
        }
        v
    })
}

/// Small phantoms for quick training runs.
pub fn toy_spec() -> PhantomSpec {
    PhantomSpec {
        size: [12, 40, 40],
        margin: [2, 4, 4],
        lesions: [1, 3],
        ..Default::default()
    }
}

/// Compact network training document for the toy phantoms, with a learning
/// rate suited to the summed loss.
pub fn toy_train_json(epochs: usize) -> String {
    format!(
        r#"{{
  "network": "compact",
  "patch_size": [10, 36, 36],
  "epochs": {epochs},
  "dataset": "data/manifest.csv",
  "output_dir": "run",
  "schedules": {{
    "lr": {{"before": 1e-6, "after": 1e-7, "last_epoch": 10}},
    "momentum": {{"before": 0.9, "after": 0.99, "last_epoch": 10}},
    "pos_weight": {{"before": 1000.0, "after": 10.0, "last_epoch": 5}},
    "aux": {{"start": 1.0, "epochs": 50}}
  }}
}}"#
    )
}
