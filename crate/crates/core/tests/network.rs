use std::collections::HashMap;

use calcseg::layers::Mode;
use calcseg::network::{
    BlockKind, Checkpoint, DropoutPolicy, ForwardOptions, Network, NetworkConfig,
};
use calcseg::tensor_core::{Tape, Tensor};
use calcseg::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn tiny(kind: &str, dropout: Option<(&str, f64)>) -> NetworkConfig {
    let drop = dropout
        .map(|(pos, p)| format!(r#", "dropout": {{"position": "{pos}", "p": {p}}}"#))
        .unwrap_or_default();
    let text = format!(
        r#"{{
  "name": "tiny",
  "nodes": [
    {{"id": "c1", "op": "conv", "input": "input", "features": 4, "kernel": [1, 3, 3]}},
    {{"id": "b1", "op": "block", "input": "c1", "kind": "{kind}",
      "convs": [{{"features": 3, "kernel": [3, 3, 3]}}, {{"features": 4, "kernel": [1, 1, 1]}}]{drop}}},
    {{"id": "d1", "op": "conv", "input": "b1", "features": 4, "kernel": [1, 2, 2], "stride": [1, 2, 2], "preact": true}},
    {{"id": "b2", "op": "block", "input": "d1", "kind": "residual",
      "convs": [{{"features": 4, "kernel": [1, 3, 3]}}, {{"features": 4, "kernel": [1, 3, 3]}}]}},
    {{"id": "u1", "op": "upsample", "input": "b2", "factor": [1, 2, 2]}},
    {{"id": "cat", "op": "concat", "inputs": ["b1", "u1"]}},
    {{"id": "f1", "op": "conv", "input": "cat", "features": 4, "kernel": [1, 1, 1], "preact": true}}
  ],
  "aux_heads": ["c1", "b1", "d1", "b2", "u1", "cat"],
  "output": "f1"
}}"#
    );
    NetworkConfig::from_json(&text).unwrap()
}

fn random_volume(shape: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(
        &[1, shape[0], shape[1], shape[2]],
        (0..n).map(|_| rng.gen_range(-200.0..900.0)).collect(),
    )
    .unwrap()
}

fn window(t: &Tensor<f64>, at: [usize; 3], size: [usize; 3]) -> Tensor<f64> {
    let s = t.shape();
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Vec::with_capacity(c * size.iter().product::<usize>());
    for ci in 0..c {
        for z in at[0]..at[0] + size[0] {
            for y in at[1]..at[1] + size[1] {
                let base = ((ci * d + z) * h + y) * w;
                out.extend_from_slice(&t.data()[base + at[2]..base + at[2] + size[2]]);
            }
        }
    }
    Tensor::from_vec(&[c, size[0], size[1], size[2]], out).unwrap()
}

/// Parameter count from a walk over the raw JSON, independent of the crate's
/// own plan compiler.
fn shape_walk_param_count(text: &str) -> usize {
    let v: Value = serde_json::from_str(text).unwrap();
    let mut feat: HashMap<String, usize> = HashMap::new();
    feat.insert(
        "input".into(),
        v["input_features"].as_u64().unwrap_or(1) as usize,
    );
    let kvol = |k: &Value| -> usize {
        k.as_array()
            .unwrap()
            .iter()
            .map(|x| x.as_u64().unwrap() as usize)
            .product()
    };
    let mut total = 0;
    for n in v["nodes"].as_array().unwrap() {
        let id = n["id"].as_str().unwrap().to_string();
        let out = match n["op"].as_str().unwrap() {
            "conv" => {
                let fin = feat[n["input"].as_str().unwrap()];
                let fout = n["features"].as_u64().unwrap() as usize;
                if n["preact"].as_bool().unwrap_or(false) {
                    total += 2 * fin;
                }
                total += fin * fout * kvol(&n["kernel"]);
                fout
            }
            "block" => {
                let mut fin = feat[n["input"].as_str().unwrap()];
                for c in n["convs"].as_array().unwrap() {
                    let fout = c["features"].as_u64().unwrap() as usize;
                    total += 2 * fin + fin * fout * kvol(&c["kernel"]);
                    fin = fout;
                }
                fin
            }
            "upsample" => feat[n["input"].as_str().unwrap()],
            "concat" => n["inputs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|x| feat[x.as_str().unwrap()])
                .sum(),
            other => panic!("unknown op {other}"),
        };
        feat.insert(id, out);
    }
    let heads = v["aux_heads"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_str().unwrap())
        .chain([v["output"].as_str().unwrap()]);
    for h in heads {
        let f = feat[h];
        total += 2 * f + f + 1;
    }
    total
}

#[test]
fn reference_receptive_field_and_layout() {
    let cfg = NetworkConfig::reference();
    let net = Network::<f32>::build(&cfg, 0).unwrap();
    let rf = net.receptive_field();
    assert_eq!(rf.as_array(), [37, 85, 85]);
    assert_eq!(rf.to_string(), "85 85 37");
    assert_eq!(net.weighted_layers(), 24);
    assert_eq!(cfg.blocks().count(), 8);
    assert_eq!(cfg.aux_heads.len(), 6);
    let probs: Vec<f64> = cfg
        .blocks()
        .filter_map(|(_, b)| b.dropout.map(|d| d.p))
        .collect();
    assert_eq!(probs, calcseg::network::REFERENCE_DROPOUT);
    assert!(cfg.blocks().skip(3).all(|(_, b)| b.dropout.is_some()));
}

#[test]
fn reference_output_shape_at_training_patch() {
    // Independent shape walk of the shipped config at 98 x 178 x 178.
    let cfg = NetworkConfig::reference();
    assert_eq!(
        calcseg::network::output_shape(&cfg, [98, 178, 178]).unwrap(),
        [62, 96, 96]
    );
    assert_eq!(
        calcseg::network::output_offset(&cfg, [98, 178, 178]).unwrap(),
        [18, 41, 41]
    );
}

#[test]
fn reference_forward_matches_predicted_shape() {
    let cfg = NetworkConfig::reference();
    let mut net = Network::<f32>::build(&cfg, 3).unwrap();
    let input = [38, 86, 86];
    let x: Tensor<f32> = random_volume(input, 1).cast();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (main, aux) = net.predict(&x, Mode::Train, &mut rng).unwrap();
    let out = net.output_shape(input).unwrap();
    assert_eq!(out, [2, 4, 4]);
    assert_eq!(main.shape(), &[1, out[0], out[1], out[2]]);
    assert_eq!(aux.len(), 6);
    for a in &aux {
        assert_eq!(a.shape(), main.shape());
    }
    assert!(main.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn parameter_count_matches_shape_walk() {
    for (cfg, text) in [
        (
            NetworkConfig::reference(),
            include_str!("../configs/reference.json"),
        ),
        (
            NetworkConfig::compact(),
            include_str!("../configs/compact.json"),
        ),
    ] {
        let net = Network::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(
            net.parameter_count(),
            shape_walk_param_count(text),
            "{}",
            cfg.name
        );
    }
}

#[test]
fn same_seed_gives_identical_parameters() {
    let cfg = NetworkConfig::compact();
    let a = Network::<f32>::build(&cfg, 11).unwrap();
    let b = Network::<f32>::build(&cfg, 11).unwrap();
    let c = Network::<f32>::build(&cfg, 12).unwrap();
    assert_eq!(a.params(), b.params());
    assert_ne!(a.params(), c.params());
    assert_eq!(a.init_record().seed, 11);
}

#[test]
fn he_initialization_scale() {
    let cfg = NetworkConfig::reference();
    let net = Network::<f64>::build(&cfg, 5).unwrap();
    let w = net.param("block3.conv1.weight").unwrap();
    let fan_in: usize = w.shape()[1..].iter().product();
    let n = w.numel() as f64;
    let var = w.data().iter().map(|v| v * v).sum::<f64>() / n;
    assert!(
        (var - 2.0 / fan_in as f64).abs() < 0.1 * 2.0 / fan_in as f64,
        "{var}"
    );
    assert!(net
        .param("block3.bn1.gamma")
        .unwrap()
        .data()
        .iter()
        .all(|&g| g == 1.0));
    assert!(net
        .param("block3.bn1.beta")
        .unwrap()
        .data()
        .iter()
        .all(|&b| b == 0.0));
}

#[test]
fn seven_aux_heads_rejected() {
    let mut cfg = tiny("residual", None);
    cfg.aux_heads.push("f1".into());
    let err = Network::<f32>::build(&cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn invalid_block_is_named() {
    let mut cfg = tiny("residual", None);
    if let Some(b) = cfg.blocks_mut().next() {
        b.convs[1].features = 5;
    }
    let err = cfg.validate().unwrap_err().to_string();
    assert!(err.contains("'b1'"), "{err}");
}

#[test]
fn too_small_patch_cites_minimum() {
    let cfg = tiny("residual", None);
    let mut net = Network::<f64>::build(&cfg, 0).unwrap();
    let x = random_volume([2, 5, 5], 0);
    let err = net
        .predict(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(err.to_string().contains("receptive field"), "{err}");
}

#[test]
fn forward_shape_agrees_with_prediction() {
    let cfg = NetworkConfig::compact();
    let mut net = Network::<f32>::build(&cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (i, input) in [[7, 32, 32], [9, 36, 40], [12, 44, 36]]
        .into_iter()
        .enumerate()
    {
        let x: Tensor<f32> = random_volume(input, i as u64).cast();
        match net.output_shape(input) {
            Ok(out) => {
                let (main, aux) = net.predict(&x, Mode::Train, &mut rng).unwrap();
                assert_eq!(&main.shape()[1..], &out);
                assert!(aux.iter().all(|a| a.shape() == main.shape()));
            }
            Err(e) => {
                assert!(net.predict(&x, Mode::Train, &mut rng).is_err(), "{e}");
            }
        }
    }
}

#[test]
fn eval_is_deterministic_and_train_is_stochastic() {
    let cfg = tiny("residual", Some(("pre_add", 0.5)));
    let mut net = Network::<f64>::build(&cfg, 2).unwrap();
    let x = random_volume([5, 14, 14], 4);
    net.update_bn_statistics(&x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (e1, _) = net.predict(&x, Mode::Eval, &mut rng).unwrap();
    let (e2, _) = net.predict(&x, Mode::Eval, &mut rng).unwrap();
    assert_eq!(e1, e2);

    let mut frozen = net.clone();
    let (t1, _) = net
        .predict(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    let (t2, _) = frozen
        .predict(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2))
        .unwrap();
    assert_ne!(t1, t2);
}

#[test]
fn eval_before_statistics_update_is_rejected() {
    let cfg = tiny("residual", None);
    let mut net = Network::<f64>::build(&cfg, 2).unwrap();
    let x = random_volume([5, 14, 14], 4);
    let err = net
        .predict(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

fn block_output(
    cfg: &NetworkConfig,
    net: &mut Network<f64>,
    x: &Tensor<f64>,
    policy: DropoutPolicy,
) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let opts = ForwardOptions {
        mode: Mode::Train,
        dropout: policy,
        aux_heads: false,
        track_params: true,
    };
    let out = net
        .forward(&mut tape, xv, opts, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let b1 = out.activation(cfg, "b1").unwrap();
    let c1 = out.activation(cfg, "c1").unwrap();
    let (_, dims) = tape.value(b1).dims4().unwrap();
    let skip = tape.crop_center(c1, dims).unwrap();
    let loss = tape.sum_all(b1).unwrap();
    let grads = tape.backward(loss).unwrap();
    (
        tape.value(b1).clone(),
        tape.value(skip).clone(),
        grads.get(xv).unwrap().clone(),
    )
}

#[test]
fn zero_branch_reduces_residual_block_to_skip() {
    let cfg = tiny("residual", None);
    let mut net = Network::<f64>::build(&cfg, 3).unwrap();
    let w = net.param_mut("b1.conv2.weight").unwrap();
    *w = Tensor::zeros(w.shape());
    let x = random_volume([5, 14, 14], 1);
    let (out, skip, _) = block_output(&cfg, &mut net, &x, DropoutPolicy::Sample);
    assert_eq!(out, skip);
}

#[test]
fn dropped_pre_add_branch_keeps_skip_gradient() {
    let cfg = tiny("residual", Some(("pre_add", 0.4)));
    let mut net = Network::<f64>::build(&cfg, 3).unwrap();
    let x = random_volume([5, 14, 14], 1);
    let (out, skip, grad) = block_output(&cfg, &mut net, &x, DropoutPolicy::DropAll);
    assert_eq!(out, skip);
    assert!(grad.data().iter().any(|&g| g != 0.0));

    let plain = cfg.with_block_kind(BlockKind::Plain);
    let mut net = Network::<f64>::build(&plain, 3).unwrap();
    let (out, _, grad) = block_output(&plain, &mut net, &x, DropoutPolicy::DropAll);
    assert!(out.data().iter().all(|&v| v == 0.0));
    assert!(grad.data().iter().all(|&g| g == 0.0));
}

#[test]
fn residual_minus_skip_equals_plain_branch() {
    let res = tiny("residual", None);
    let plain = res.with_block_kind(BlockKind::Plain);
    let x = random_volume([5, 14, 14], 8);
    let (r, skip, _) = block_output(
        &res,
        &mut Network::build(&res, 4).unwrap(),
        &x,
        DropoutPolicy::Sample,
    );
    let (p, _, _) = block_output(
        &plain,
        &mut Network::build(&plain, 4).unwrap(),
        &x,
        DropoutPolicy::Sample,
    );
    let branch = r.zip_map(&skip, |a, b| a - b).unwrap();
    assert!(branch.max_abs_diff(&p).unwrap() < 1e-12);
}

#[test]
fn translation_covariance_at_total_stride() {
    let cfg = tiny("residual", None);
    let mut net = Network::<f64>::build(&cfg, 6).unwrap();
    let big = random_volume([8, 24, 24], 3);
    net.update_bn_statistics(&big).unwrap();
    let stride = net.total_stride();
    assert_eq!(stride, [1, 2, 2]);
    let size = [5, 16, 16];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (base, _) = net
        .predict(&window(&big, [0, 0, 0], size), Mode::Eval, &mut rng)
        .unwrap();
    let out = net.output_shape(size).unwrap();
    for axis in 0..3 {
        let mut at = [0; 3];
        at[axis] = stride[axis];
        let (shifted, _) = net
            .predict(&window(&big, at, size), Mode::Eval, &mut rng)
            .unwrap();
        let mut keep = out;
        keep[axis] -= stride[axis];
        let a = window(&base, at, keep);
        let b = window(&shifted, [0, 0, 0], keep);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12, "axis {axis}");
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = NetworkConfig::compact();
    let mut net = Network::<f32>::build(&cfg, 7).unwrap();
    net.update_bn_statistics(&random_volume([9, 36, 36], 2).cast())
        .unwrap();
    let rng = ChaCha8Rng::seed_from_u64(5);
    let ck = Checkpoint::new(net, 3, Some(calcseg::network::RngState::capture(&rng)));
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    ck.save(&p1).unwrap();
    let loaded = Checkpoint::<f32>::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    assert_eq!(loaded.epoch, 3);
    assert_eq!(loaded.network.params(), ck.network.params());
    assert_eq!(loaded.network.bn_states(), ck.network.bn_states());
    let mut a = loaded.rng.unwrap().restore();
    let mut b = rng.clone();
    assert_eq!(a.gen::<u64>(), b.gen::<u64>());
}

#[test]
fn truncated_checkpoint_is_a_format_error() {
    let net = Network::<f32>::build(&NetworkConfig::compact(), 7).unwrap();
    let bytes = Checkpoint::new(net, 0, None).to_bytes();
    let err = Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");
    let err = Checkpoint::<f64>::from_bytes(&bytes).unwrap_err();
    assert!(matches!(err, Error::Format(_)), "{err}");
}
