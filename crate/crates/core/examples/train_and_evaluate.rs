//! Trains the compact network on small phantoms, then tiles it over the
//! held-out volumes and scores the masks.
//!
//! `cargo run --release --example train_and_evaluate -- [epochs]`

use calcseg::inference_eval::{evaluate_network, EvalSettings};
use calcseg::network::{Network, NetworkConfig};
use calcseg::phantom::{generate_dataset, PhantomSpec, Split, SplitFractions};
use calcseg::trainer::{train_with, ArtifactWriter, TrainConfig};

fn main() -> calcseg::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .map_or(6, |a| a.parse().expect("epochs"));
    let dir = std::env::temp_dir().join("calcseg_train_example");
    let spec = PhantomSpec {
        size: [12, 40, 40],
        margin: [2, 4, 4],
        lesions: [1, 3],
        ..Default::default()
    };
    let data = generate_dataset(&spec, 10, SplitFractions::default(), dir.join("data"))?;
    let (tr, va, te) = (
        data.load_split(Split::Train)?,
        data.load_split(Split::Val)?,
        data.load_split(Split::Test)?,
    );

    let mut cfg = TrainConfig {
        network: "compact".into(),
        patch_size: [10, 36, 36],
        epochs,
        ..Default::default()
    };
    // The loss is summed over voxels, so the step sizes shrink accordingly.
    cfg.schedules = cfg.schedules.with_lr_scale(1e-5);
    cfg.schedules.pos_weight.after = 10.0;

    let net = Network::build(&NetworkConfig::compact(), cfg.seed)?;
    let mut writer = ArtifactWriter::new(dir.join("run"))?;
    writer.verbose = true;
    let mut out = train_with(&cfg, net, &tr, &va, &mut writer)?;
    println!(
        "best epoch {} of {epochs}, artifacts in {}",
        out.best_epoch,
        writer.dir.display()
    );

    let settings = EvalSettings {
        patch: spec.size,
        stride: None,
        prob_thresh: 0.5,
        hu_thresh: 130.0,
    };
    let report = evaluate_network(&mut out.best.network, &te, &settings)?;
    for r in &report.rows {
        println!(
            "{}  dice {:.3}  voxels {} / {}",
            r.id, r.dice, r.predicted_voxels, r.reference_voxels
        );
    }
    println!("mean dice {:.3}", report.summary.mean_dice);
    Ok(())
}
