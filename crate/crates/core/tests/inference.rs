mod common;

use calcseg::inference_eval::{segment, tile_predict, Prediction, Provenance};
use calcseg::network::{Network, NetworkConfig};
use calcseg::phantom::Volume;
use calcseg::tensor_core::{Scalar, Tensor};
use calcseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(
        dims,
        [1.0, 0.46, 0.46],
        (0..n).map(|_| rng.gen_range(-100.0f32..900.0)).collect(),
    )
    .unwrap()
}

/// Compact network with normalization statistics taken from one pass.
fn ready<T: Scalar>(seed: u64) -> Network<T> {
    let mut net = Network::<T>::build(&NetworkConfig::compact(), seed).unwrap();
    net.update_bn_statistics(&random_volume([8, 34, 34], seed + 100).to_tensor())
        .unwrap();
    net
}

fn valid_values(p: &Prediction) -> Vec<f32> {
    let [_, h, w] = p.dims;
    let mut out = Vec::new();
    for z in p.valid_lo[0]..p.valid_hi[0] {
        for y in p.valid_lo[1]..p.valid_hi[1] {
            for x in p.valid_lo[2]..p.valid_hi[2] {
                out.push(p.prob[(z * h + y) * w + x]);
            }
        }
    }
    out
}

#[test]
fn constant_network_gives_constant_prediction() {
    let mut net = ready::<f32>(1);
    let w = net.param_mut("head.conv.weight").unwrap();
    *w = Tensor::zeros(w.shape());
    *net.param_mut("head.conv.bias").unwrap() = Tensor::from_vec(&[1], vec![0.7]).unwrap();
    let expect = 1.0 / (1.0 + (-0.7f64).exp());
    let vol = random_volume([11, 41, 43], 2);
    for stride in [None, Some([1, 1, 1]), Some([2, 3, 1])] {
        let p = tile_predict(&mut net, &vol, [8, 34, 34], stride).unwrap();
        assert!(
            valid_values(&p)
                .iter()
                .all(|&v| (v as f64 - expect).abs() < 1e-6),
            "{stride:?}"
        );
    }
}

#[test]
fn non_overlapping_tiles_equal_single_patches() {
    let mut net = ready::<f64>(3);
    let (patch, out) = ([8, 34, 34], [2, 4, 4]);
    let vol = random_volume([10, 38, 38], 4);
    let p = tile_predict(&mut net, &vol, patch, None).unwrap();
    let [_, h, w] = vol.dims;
    for cz in [0, 2] {
        for cy in [0, 4] {
            for cx in [0, 4] {
                let mut x = Vec::new();
                for z in cz..cz + patch[0] {
                    for y in cy..cy + patch[1] {
                        x.extend(
                            vol.data[(z * h + y) * w + cx..(z * h + y) * w + cx + patch[2]]
                                .iter()
                                .map(|&v| v as f64),
                        );
                    }
                }
                let logits = net
                    .eval_logits(&Tensor::from_vec(&[1, patch[0], patch[1], patch[2]], x).unwrap())
                    .unwrap();
                let mut k = 0;
                for z in 0..out[0] {
                    for y in 0..out[1] {
                        for xx in 0..out[2] {
                            let at = ((cz + 3 + z) * h + cy + 15 + y) * w + cx + 15 + xx;
                            let want = 1.0 / (1.0 + (-logits.data()[k]).exp());
                            assert!((p.prob[at] as f64 - want).abs() < 1e-6);
                            k += 1;
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn overlapping_tiles_match_one_full_pass() {
    let mut net = ready::<f64>(5);
    let vol = random_volume([10, 40, 40], 6);
    let whole = tile_predict(&mut net, &vol, vol.dims, None).unwrap();
    for stride in [None, Some([1, 2, 2]), Some([2, 2, 4])] {
        let tiled = tile_predict(&mut net, &vol, [8, 34, 34], stride).unwrap();
        assert_eq!(
            (tiled.valid_lo, tiled.valid_hi),
            (whole.valid_lo, whole.valid_hi)
        );
        let diff = valid_values(&tiled)
            .iter()
            .zip(valid_values(&whole))
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(diff < 1e-6, "{stride:?}: {diff}");
    }
}

#[test]
fn volume_smaller_than_patch_is_a_shape_error() {
    let mut net = ready::<f32>(0);
    let vol = random_volume([6, 34, 34], 0);
    assert!(matches!(
        tile_predict(&mut net, &vol, [8, 34, 34], None),
        Err(Error::Shape(_))
    ));
}

fn prediction(dims: [usize; 3], prob: Vec<f32>) -> Prediction {
    Prediction {
        dims,
        spacing: [1.0; 3],
        prob,
        valid_lo: [0; 3],
        valid_hi: dims,
        provenance: Provenance::default(),
    }
}

#[test]
fn segment_threshold_cases() {
    let vol = Volume::new([1, 2, 2], [1.0; 3], vec![20.0, 129.0, 130.0, 100.0]).unwrap();
    let seg = segment(&prediction(vol.dims, vec![1.0; 4]), &vol, 0.5, 130.0).unwrap();
    assert_eq!(seg.count(), 0);

    let vol = Volume::new([1, 2, 2], [1.0; 3], vec![20.0, 200.0, 131.0, 700.0]).unwrap();
    let seg = segment(
        &prediction(vol.dims, vec![0.0, 0.1, 0.9, 0.3]),
        &vol,
        0.0,
        130.0,
    )
    .unwrap();
    assert_eq!(seg.data, vec![0, 1, 1, 1]);
}
