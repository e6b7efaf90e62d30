//! Command-line front end. Every subcommand that writes a directory also
//! writes a [`RunManifest`] into it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ablation::{run_ablation, AblationConfig};
use crate::diagnostics::{gradient_suite, GRADCHECK_TOLERANCE};
use crate::error::{Error, Result};
use crate::inference_eval::{evaluate_dirs, segment, tile_predict_checkpoint, write_histogram};
use crate::network::{Checkpoint, Network, NetworkConfig};
use crate::objective::CALCIFICATION_HU;
use crate::phantom::{
    generate_dataset, DatasetManifest, PhantomSpec, Split, SplitFractions, Volume, MANIFEST_FILE,
};
use crate::trainer::{train_with, ArtifactWriter, TrainConfig, DEFAULT_PATCH};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "calcseg",
    version,
    about = "Calcification segmentation on synthetic CT phantoms"
)]
pub struct Cli {
    /// Overrides the seed of the configuration document.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Forces deterministic execution (the default for training configs).
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads. Execution is single-threaded; the value is recorded.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes a phantom dataset and its manifest.
    Generate(GenerateArgs),
    /// Trains a network from a configuration document.
    Train(TrainArgs),
    /// Predicts probability maps and masks for volumes.
    Infer(InferArgs),
    /// Scores predicted masks against reference labels.
    Evaluate(EvaluateArgs),
    /// Prints the receptive field and an output-shape table.
    Rf(RfArgs),
    /// Runs the finite-difference gradient suite.
    Gradcheck,
    /// Trains and compares the ablation variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Phantom settings document; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0 / 6.0)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 1.0 / 6.0)]
    pub test_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Print one line per epoch.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Volume sidecars; ids are the file stems.
    pub volumes: Vec<PathBuf>,
    /// Dataset manifest to take volumes from instead.
    #[arg(long, conflicts_with = "volumes")]
    pub manifest: Option<PathBuf>,
    /// Restricts `--manifest` to one split.
    #[arg(long, value_parser = parse_split, requires = "manifest")]
    pub split: Option<Split>,
    #[arg(long)]
    pub out: PathBuf,
    /// Tile extent `D H W`; defaults to the whole volume.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub patch: Option<Vec<usize>>,
    /// Tile stride `D H W`; defaults to the tile output extent.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub stride: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.5)]
    pub prob_thresh: f64,
    #[arg(long, default_value_t = CALCIFICATION_HU)]
    pub hu_thresh: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of `<id>_seg.json` masks.
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Directory of `<id>_label.json` masks.
    #[arg(long)]
    pub label_dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct RfArgs {
    /// `reference`, `compact` or a network document.
    #[arg(default_value = "reference")]
    pub config: String,
    /// Extra input extents `D H W` for the shape table.
    #[arg(long, num_args = 3, value_names = ["D", "H", "W"])]
    pub input: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split '{s}' (train, val or test)")),
    }
}

/// Stable process exit status for an error: 3 for I/O, 4 for numeric
/// failures, 2 for everything else.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 2,
    }
}

/// What produced an output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub arguments: Vec<String>,
    /// Resolved configuration after flag overrides.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub deterministic: bool,
    pub threads: Option<usize>,
    /// SHA-256 of every file in the directory, by relative path.
    pub artifacts: BTreeMap<String, String>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// SHA-256 of every regular file under `dir` except the run manifest.
pub fn hash_artifacts(dir: &Path) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .unwrap_or(&path)
                .to_string_lossy()
                .replace('\\', "/");
            if rel == RUN_MANIFEST {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

struct Run<'a> {
    cli: &'a Cli,
    subcommand: &'static str,
    arguments: Vec<String>,
    started: f64,
}

impl Run<'_> {
    fn finish(&self, dir: &Path, config: serde_json::Value, seeds: &[(&str, u64)]) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.into(),
            arguments: self.arguments.clone(),
            config,
            seeds: seeds.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            deterministic: self.cli.deterministic,
            threads: self.cli.threads,
            artifacts: hash_artifacts(dir)?,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let path = dir.join(RUN_MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_array(v: &Option<Vec<usize>>) -> Option<[usize; 3]> {
    v.as_ref().map(|v| [v[0], v[1], v[2]])
}

/// Parses `args` (program name first) and runs the subcommand, returning
/// the process exit status. Errors are reported on stderr.
pub fn main_with<I, S>(args: I) -> u8
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args: Vec<std::ffi::OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let arguments = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    match run(&cli, arguments) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs one parsed invocation. `arguments` is recorded in the manifest.
pub fn run(cli: &Cli, arguments: Vec<String>) -> Result<()> {
    let run = Run {
        cli,
        subcommand: match cli.command {
            Command::Generate(_) => "generate",
            Command::Train(_) => "train",
            Command::Infer(_) => "infer",
            Command::Evaluate(_) => "evaluate",
            Command::Rf(_) => "rf",
            Command::Gradcheck => "gradcheck",
            Command::Ablate(_) => "ablate",
        },
        arguments,
        started: unix_now(),
    };
    match &cli.command {
        Command::Generate(a) => generate(&run, a),
        Command::Train(a) => train_cmd(&run, a),
        Command::Infer(a) => infer(&run, a),
        Command::Evaluate(a) => evaluate(&run, a),
        Command::Rf(a) => rf(a),
        Command::Gradcheck => gradcheck(cli.seed.unwrap_or(0)),
        Command::Ablate(a) => ablate(&run, a),
    }
}

fn generate(run: &Run, a: &GenerateArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            PhantomSpec::from_json(&text)?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = run.cli.seed {
        spec.seed = s;
    }
    let fractions = SplitFractions {
        val: a.val_fraction,
        test: a.test_fraction,
    };
    let m = generate_dataset(&spec, a.count, fractions, &a.out)?;
    println!(
        "wrote {} phantoms to {}",
        m.entries.len(),
        a.out.join(MANIFEST_FILE).display()
    );
    let config = serde_json::json!({ "spec": spec, "count": a.count, "fractions": fractions });
    run.finish(&a.out, config, &[("phantom", spec.seed)])
}

fn train_cmd(run: &Run, a: &TrainArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&a.config)?;
    if let Some(s) = run.cli.seed {
        cfg.seed = s;
    }
    if run.cli.deterministic {
        cfg.deterministic = true;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    let net_cfg = cfg.network_config()?;
    cfg.validate(&net_cfg)?;
    let data = DatasetManifest::load(&cfg.dataset)?;
    let train_set = data.load_split(Split::Train)?;
    let val_set = data.load_split(Split::Val)?;
    let net = Network::build(&net_cfg, cfg.seed)?;
    let mut writer = ArtifactWriter::new(&cfg.output_dir)?;
    writer.verbose = a.verbose;
    let out = train_with(&cfg, net, &train_set, &val_set, &mut writer)?;
    println!(
        "trained {} epochs ({} steps, {} skipped); best epoch {}",
        out.log.len(),
        out.steps,
        out.skipped,
        out.best_epoch
    );
    let config = serde_json::json!({ "train": cfg, "network": net_cfg });
    run.finish(&cfg.output_dir, config, &[("train", cfg.seed)])
}

fn infer(run: &Run, a: &InferArgs) -> Result<()> {
    let mut ck = Checkpoint::<f32>::load(&a.checkpoint)?;
    let inputs: Vec<(String, PathBuf)> = match &a.manifest {
        Some(m) => {
            let data = DatasetManifest::load(m)?;
            data.entries
                .iter()
                .filter(|e| a.split.map_or(true, |s| e.split == s))
                .map(|e| (e.id.clone(), data.root.join(&e.volume)))
                .collect()
        }
        None => a
            .volumes
            .iter()
            .map(|p| {
                let id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                (id, p.clone())
            })
            .collect(),
    };
    if inputs.is_empty() {
        return Err(Error::Contract("no volumes to predict".into()));
    }
    create_dir(&a.out)?;
    let patch = to_array(&a.patch);
    let stride = to_array(&a.stride);
    for (id, path) in &inputs {
        let vol = Volume::load(path)?;
        let pred = tile_predict_checkpoint(&mut ck, &vol, patch.unwrap_or(vol.dims), stride)?;
        let seg = segment(&pred, &vol, a.prob_thresh, a.hu_thresh)?;
        pred.to_volume()
            .save(a.out.join(format!("{id}_prob.json")))?;
        seg.save(a.out.join(format!("{id}_seg.json")))?;
        println!("{id}: {} voxels segmented", seg.count());
    }
    let config = serde_json::json!({
        "checkpoint": a.checkpoint,
        "checkpoint_sha256": ck.hash(),
        "volumes": inputs.iter().map(|(id, p)| serde_json::json!({ "id": id, "path": p })).collect::<Vec<_>>(),
        "patch": patch,
        "stride": stride,
        "prob_thresh": a.prob_thresh,
        "hu_thresh": a.hu_thresh,
    });
    run.finish(&a.out, config, &[])
}

fn evaluate(run: &Run, a: &EvaluateArgs) -> Result<()> {
    let report = evaluate_dirs(&a.pred_dir, &a.label_dir)?;
    create_dir(&a.out)?;
    report.write(&a.out)?;
    write_histogram(
        &report.volume_histogram(a.bins)?,
        a.out.join("histogram.csv"),
    )?;
    let s = &report.summary;
    println!(
        "{} images  mean dice {:.4}  absolute dice {:.4}  icc {}",
        s.images,
        s.mean_dice,
        s.absolute_dice,
        s.icc.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    let config = serde_json::json!({
        "pred_dir": a.pred_dir,
        "label_dir": a.label_dir,
        "bins": a.bins,
    });
    run.finish(&a.out, config, &[])
}

fn resolve_network(name: &str) -> Result<NetworkConfig> {
    match name {
        "reference" => Ok(NetworkConfig::reference()),
        "compact" => Ok(NetworkConfig::compact()),
        path => NetworkConfig::load(path),
    }
}

/// The text printed by `rf`: the receptive field (in-plane axes first),
/// then output extents for a few inputs.
pub fn rf_report(cfg: &NetworkConfig, extra: Option<[usize; 3]>) -> Result<String> {
    use std::fmt::Write;
    let rf = crate::network::receptive_field(cfg)?;
    let mut s = format!("{rf}\n");
    let stride = crate::network::total_stride(cfg)?;
    // Smallest valid extent per axis, probing with the default patch on the
    // other axes.
    let mut base = rf.as_array();
    for a in 0..3 {
        let mut probe = DEFAULT_PATCH;
        probe[a] = base[a];
        while crate::network::output_shape(cfg, probe).is_err()
            && probe[a] < base[a] + 4 * stride[a]
        {
            probe[a] += 1;
        }
        base[a] = probe[a];
    }
    let mut inputs = vec![base];
    inputs.extend((1..=2).map(|k| [0, 1, 2].map(|a| base[a] + k * stride[a])));
    inputs.push(DEFAULT_PATCH);
    inputs.extend(extra);
    writeln!(s, "{:>16}  {:>16}", "input D H W", "output D H W").expect("string write");
    for i in inputs {
        let cell = |v: [usize; 3]| format!("{} {} {}", v[0], v[1], v[2]);
        let out = match crate::network::output_shape(cfg, i) {
            Ok(o) => cell(o),
            Err(_) => "invalid".into(),
        };
        writeln!(s, "{:>16}  {:>16}", cell(i), out).expect("string write");
    }
    Ok(s)
}

fn rf(a: &RfArgs) -> Result<()> {
    let cfg = resolve_network(&a.config)?;
    print!("{}", rf_report(&cfg, to_array(&a.input))?);
    Ok(())
}

fn gradcheck(seed: u64) -> Result<()> {
    let checks = gradient_suite(seed)?;
    let mut failed = Vec::new();
    for c in &checks {
        println!(
            "{:<36} max rel error {:.3e}  checked {:>5}  kinks {:>3}  {}",
            c.name,
            c.max_rel_error,
            c.checked,
            c.kinks,
            if c.passed() { "ok" } else { "FAIL" }
        );
        if !c.passed() {
            failed.push(c.name.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks below {GRADCHECK_TOLERANCE:e}", checks.len());
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn ablate(run: &Run, a: &AblateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let mut cfg: AblationConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", a.config.display())))?;
    let base = a.config.parent().unwrap_or(Path::new(""));
    cfg.train.dataset = base.join(&cfg.train.dataset);
    if !matches!(cfg.train.network.as_str(), "reference" | "compact") {
        cfg.train.network = base.join(&cfg.train.network).to_string_lossy().into_owned();
    }
    if let Some(s) = run.cli.seed {
        cfg.train.seed = s;
    }
    if run.cli.deterministic {
        cfg.train.deterministic = true;
    }
    cfg.validate()?;
    let net_cfg = cfg.train.network_config()?;
    cfg.train.validate(&net_cfg)?;
    let data = DatasetManifest::load(&cfg.train.dataset)?;
    let train_set = data.load_split(Split::Train)?;
    let val_set = data.load_split(Split::Val)?;
    let test_set = data.load_split(Split::Test)?;
    let report = run_ablation(&cfg, &net_cfg, &train_set, &val_set, &test_set)?;
    create_dir(&a.out)?;
    report.write(&a.out)?;
    print!("{}", report.table());
    let config = serde_json::json!({ "ablation": cfg, "network": net_cfg });
    run.finish(&a.out, config, &[("train", cfg.train.seed)])
}
