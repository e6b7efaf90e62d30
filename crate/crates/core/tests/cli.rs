mod common;

use std::path::Path;

use calcseg::ablation::AblationReport;
use calcseg::cli::{main_with, rf_report, run, Cli, RunManifest, RUN_MANIFEST};
use calcseg::inference_eval::Summary;
use calcseg::network::NetworkConfig;
use calcseg::phantom::{DatasetManifest, LabelVolume, MANIFEST_FILE};
use clap::Parser;

fn call(dir: &Path, args: &[&str]) -> u8 {
    let owned: Vec<String> = std::iter::once("calcseg".to_string())
        .chain(args.iter().map(|a| a.replace("{d}", dir.to_str().unwrap())))
        .collect();
    main_with(owned)
}

fn error_of(dir: &Path, args: &[&str]) -> calcseg::Error {
    let owned: Vec<String> = std::iter::once("calcseg".to_string())
        .chain(args.iter().map(|a| a.replace("{d}", dir.to_str().unwrap())))
        .collect();
    let cli = Cli::try_parse_from(&owned).unwrap();
    run(&cli, owned[1..].to_vec()).unwrap_err()
}

/// Toy dataset plus training document inside `dir`.
fn toy_setup(dir: &Path, count: usize, epochs: usize) {
    std::fs::write(
        dir.join("spec.json"),
        serde_json::to_string(&common::toy_spec()).unwrap(),
    )
    .unwrap();
    std::fs::write(dir.join("train.json"), common::toy_train_json(epochs)).unwrap();
    assert_eq!(
        call(
            dir,
            &[
                "generate",
                "--spec",
                "{d}/spec.json",
                "--count",
                &count.to_string(),
                "--out",
                "{d}/data"
            ]
        ),
        0
    );
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn generate_one_pair() {
    let t = tempfile::tempdir().unwrap();
    toy_setup(t.path(), 1, 0);
    let data = t.path().join("data");
    assert_eq!(
        files(&data),
        [
            "case_0000.json",
            "case_0000.raw",
            "case_0000_label.json",
            "case_0000_label.raw",
            MANIFEST_FILE,
            RUN_MANIFEST
        ]
    );
    let m = RunManifest::load(data.join(RUN_MANIFEST)).unwrap();
    assert_eq!(m.subcommand, "generate");
    assert_eq!(m.artifacts.len(), 5);
}

#[test]
fn generate_twice_gives_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    toy_setup(a.path(), 3, 0);
    toy_setup(b.path(), 3, 0);
    let (ma, mb) = (
        RunManifest::load(a.path().join("data").join(RUN_MANIFEST)).unwrap(),
        RunManifest::load(b.path().join("data").join(RUN_MANIFEST)).unwrap(),
    );
    assert_eq!(ma.artifacts, mb.artifacts);
}

#[test]
fn generate_zero_writes_empty_manifest() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(
        call(t.path(), &["generate", "--count", "0", "--out", "{d}/data"]),
        0
    );
    let m = DatasetManifest::load(t.path().join("data").join(MANIFEST_FILE)).unwrap();
    assert!(m.entries.is_empty());
}

#[test]
fn generate_error_codes() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(
        t.path().join("bad.json"),
        r#"{"lesion_hu": [100.0, 800.0]}"#,
    )
    .unwrap();
    assert_eq!(
        call(
            t.path(),
            &[
                "generate",
                "--spec",
                "{d}/bad.json",
                "--count",
                "1",
                "--out",
                "{d}/o"
            ]
        ),
        2
    );
    std::fs::write(t.path().join("file"), "x").unwrap();
    assert_eq!(
        call(
            t.path(),
            &["generate", "--count", "1", "--out", "{d}/file/sub"]
        ),
        3
    );
    assert_eq!(
        call(
            t.path(),
            &[
                "generate",
                "--spec",
                "{d}/missing.json",
                "--count",
                "1",
                "--out",
                "{d}/o"
            ]
        ),
        3
    );
}

#[test]
fn train_zero_epochs_writes_initial_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    toy_setup(t.path(), 3, 0);
    assert_eq!(call(t.path(), &["train", "--config", "{d}/train.json"]), 0);
    let run_dir = t.path().join("run");
    assert!(run_dir.join("best.ckpt").exists() && run_dir.join("last.ckpt").exists());
    let m = RunManifest::load(run_dir.join(RUN_MANIFEST)).unwrap();
    assert_eq!(m.config["train"]["epochs"], 0);
    assert!(m.artifacts.contains_key("best.ckpt"));
}

#[test]
fn train_validation_and_numeric_failures() {
    let t = tempfile::tempdir().unwrap();
    toy_setup(t.path(), 3, 1);
    let text = common::toy_train_json(1).replace("[10, 36, 36]", "[4, 36, 36]");
    std::fs::write(t.path().join("small.json"), text).unwrap();
    let err = error_of(t.path(), &["train", "--config", "{d}/small.json"]);
    assert!(err.to_string().contains("patch_size"), "{err}");
    assert_eq!(call(t.path(), &["train", "--config", "{d}/small.json"]), 2);

    let text = common::toy_train_json(1).replace("\"before\": 1e-6", "\"before\": 1e30");
    std::fs::write(t.path().join("wild.json"), text).unwrap();
    assert_eq!(
        call(
            t.path(),
            &[
                "train",
                "--config",
                "{d}/wild.json",
                "--out",
                "{d}/wild",
                "--epochs",
                "4"
            ]
        ),
        4
    );
    assert!(t.path().join("wild").join("last.ckpt").exists());
}

#[test]
fn infer_is_deterministic_and_evaluate_scores_labels() {
    let t = tempfile::tempdir().unwrap();
    toy_setup(t.path(), 4, 1);
    assert_eq!(call(t.path(), &["train", "--config", "{d}/train.json"]), 0);
    for out in ["p1", "p2"] {
        let o = format!("{{d}}/{out}");
        let args = [
            "infer",
            "--checkpoint",
            "{d}/run/best.ckpt",
            "--manifest",
            "{d}/data/manifest.csv",
            "--out",
            &o,
            "--patch",
            "10",
            "36",
            "36",
        ];
        assert_eq!(call(t.path(), &args), 0);
    }
    let (a, b) = (
        RunManifest::load(t.path().join("p1").join(RUN_MANIFEST)).unwrap(),
        RunManifest::load(t.path().join("p2").join(RUN_MANIFEST)).unwrap(),
    );
    assert_eq!(a.artifacts.len(), 16);
    assert_eq!(a.artifacts, b.artifacts);

    let data = DatasetManifest::load(t.path().join("data").join(MANIFEST_FILE)).unwrap();
    let perfect = t.path().join("perfect");
    std::fs::create_dir(&perfect).unwrap();
    for e in &data.entries {
        let l = LabelVolume::load(data.root.join(&e.label)).unwrap();
        l.save(perfect.join(format!("{}_seg.json", e.id))).unwrap();
    }
    assert_eq!(
        call(
            t.path(),
            &[
                "evaluate",
                "--pred-dir",
                "{d}/perfect",
                "--label-dir",
                "{d}/data",
                "--out",
                "{d}/ev",
                "--bins",
                "2"
            ]
        ),
        0
    );
    let s: Summary = serde_json::from_str(
        &std::fs::read_to_string(t.path().join("ev").join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(s.images, 4);
    assert_eq!(s.mean_dice, 1.0);
    assert_eq!(
        files(&t.path().join("ev")),
        [
            "histogram.csv",
            "per_image.csv",
            RUN_MANIFEST,
            "summary.json"
        ]
    );

    assert_eq!(
        call(
            t.path(),
            &[
                "evaluate",
                "--pred-dir",
                "{d}/p1",
                "--label-dir",
                "{d}/data",
                "--out",
                "{d}/ev2"
            ]
        ),
        0
    );
}

#[test]
fn rf_and_gradcheck() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(
        rf_report(&NetworkConfig::reference(), None)
            .unwrap()
            .lines()
            .next(),
        Some("85 85 37")
    );
    assert_eq!(call(t.path(), &["rf"]), 0);
    assert_eq!(call(t.path(), &["rf", "{d}/missing.json"]), 3);
    assert_eq!(call(t.path(), &["gradcheck"]), 0);
}

#[test]
fn ablate_single_variant_has_no_tests() {
    let t = tempfile::tempdir().unwrap();
    toy_setup(t.path(), 6, 1);
    let train = common::toy_train_json(1);
    std::fs::write(
        t.path().join("ablate.json"),
        format!(r#"{{"train": {train}, "variants": ["plain"]}}"#),
    )
    .unwrap();
    assert_eq!(
        call(
            t.path(),
            &["ablate", "--config", "{d}/ablate.json", "--out", "{d}/ab"]
        ),
        0
    );
    let ab = t.path().join("ab");
    let report: AblationReport =
        serde_json::from_str(&std::fs::read_to_string(ab.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(report.results.len(), 1);
    assert!(report.comparisons.is_empty());
    assert!(report.is_consistent());
    assert_eq!(
        std::fs::read_to_string(ab.join("table.txt"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    assert!(ab.join(RUN_MANIFEST).exists());
}
