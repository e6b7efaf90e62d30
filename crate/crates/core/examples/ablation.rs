//! The four cumulative training variants on small phantoms, each scored on
//! the same test images and compared with paired t-tests.

use calcseg::ablation::{run_ablation, AblationConfig};
use calcseg::network::NetworkConfig;
use calcseg::phantom::{generate_dataset, PhantomSpec, Split, SplitFractions};
use calcseg::trainer::TrainConfig;

fn main() -> calcseg::Result<()> {
    let epochs: usize = std::env::args()
        .nth(1)
        .map_or(3, |a| a.parse().expect("epochs"));
    let dir = std::env::temp_dir().join("calcseg_ablation_example");
    let spec = PhantomSpec {
        size: [12, 40, 40],
        margin: [2, 4, 4],
        lesions: [1, 3],
        ..Default::default()
    };
    let data = generate_dataset(&spec, 12, SplitFractions::default(), dir.join("data"))?;
    let (tr, va, te) = (
        data.load_split(Split::Train)?,
        data.load_split(Split::Val)?,
        data.load_split(Split::Test)?,
    );

    let mut train = TrainConfig {
        network: "compact".into(),
        patch_size: [10, 36, 36],
        epochs,
        ..Default::default()
    };
    train.schedules = train.schedules.with_lr_scale(1e-5);
    train.schedules.pos_weight.after = 10.0;
    let cfg = AblationConfig {
        train,
        ..Default::default()
    };
    let report = run_ablation(&cfg, &NetworkConfig::compact(), &tr, &va, &te)?;
    print!("{}", report.table());
    report.write(dir.join("ablation"))?;
    Ok(())
}
