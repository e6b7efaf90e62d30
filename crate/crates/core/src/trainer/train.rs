//! The training loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference_eval::{csv_error, dice, segment, tile_average, Prediction, Provenance};
use crate::layers::{sigmoid, Mode};
use crate::network::{Checkpoint, DropoutPolicy, ForwardOptions, Network, RngState, AUX_HEADS};
use crate::objective::{masked_weighted_bce_value, LossMask, ScheduleKind};
use crate::phantom::Case;
use crate::tensor_core::{Tape, Tensor};
use crate::trainer::config::TrainConfig;
use crate::trainer::optimizer::{sgd_momentum_step, OptimizerState};
use crate::trainer::patch::{augment_flip, sample_patch, PatchGeometry, PatchSample};

/// Stream of the training generator; stream 0 of the same seed initializes
/// the weights.
const TRAIN_STREAM: u64 = 1;

/// One row of the per-epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub pos_weight: f64,
    pub aux_weight: f64,
    /// Mean total loss over the steps taken.
    pub train_loss: f64,
    /// Mean per-volume main-head loss; NaN without a validation set.
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Minimum validation loss (the last epoch when there is no validation).
    pub best: Checkpoint<f32>,
    pub best_epoch: usize,
    pub last: Checkpoint<f32>,
    pub log: Vec<EpochLog>,
    pub steps: usize,
    /// Patches skipped because their loss mask was empty.
    pub skipped: usize,
}

/// Receives training progress. Errors abort training.
pub trait TrainObserver {
    fn start(&mut self, _initial: &Checkpoint<f32>) -> Result<()> {
        Ok(())
    }

    fn epoch_end(
        &mut self,
        _row: &EpochLog,
        _last: &Checkpoint<f32>,
        _improved: bool,
    ) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Writes `log.csv`, `last.ckpt` and `best.ckpt` into a directory as
/// training goes, so an aborted run keeps its latest state.
pub struct ArtifactWriter {
    pub dir: PathBuf,
    rows: Vec<EpochLog>,
    /// Echo each row to stderr.
    pub verbose: bool,
}

pub const LOG_FILE: &str = "log.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

impl ArtifactWriter {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            rows: Vec::new(),
            verbose: false,
        })
    }

    fn write_log(&self) -> Result<()> {
        write_log(&self.rows, &self.dir.join(LOG_FILE))
    }
}

pub fn write_log(rows: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record([
        "epoch",
        "lr",
        "momentum",
        "pos_weight",
        "aux_weight",
        "train_loss",
        "val_loss",
        "val_dice",
    ])
    .map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl TrainObserver for ArtifactWriter {
    fn start(&mut self, initial: &Checkpoint<f32>) -> Result<()> {
        initial.save(self.dir.join(LAST_CHECKPOINT))?;
        initial.save(self.dir.join(BEST_CHECKPOINT))?;
        self.write_log()
    }

    fn epoch_end(&mut self, row: &EpochLog, last: &Checkpoint<f32>, improved: bool) -> Result<()> {
        if self.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.3e}  mu {:.2}  w+ {:>6}  aux {:.2}  train {:.4e}  val {:.4e}  dice {:.4}",
                row.epoch, row.lr, row.momentum, row.pos_weight, row.aux_weight, row.train_loss, row.val_loss, row.val_dice
            );
        }
        self.rows.push(row.clone());
        last.save(self.dir.join(LAST_CHECKPOINT))?;
        if improved {
            last.save(self.dir.join(BEST_CHECKPOINT))?;
        }
        self.write_log()
    }
}

/// Validation loss and Dice of one network over a set of cases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub dice: f64,
}

/// Eval-mode pass over whole volumes with non-overlapping tiles. The loss
/// is the main head's, with a fixed positive weight so epochs compare.
pub fn validate(
    net: &mut Network<f32>,
    cases: &[Case],
    patch: [usize; 3],
    pos_weight: f64,
    hu_threshold: f64,
    masked: bool,
) -> Result<Validation> {
    if cases.is_empty() {
        return Ok(Validation {
            loss: f64::NAN,
            dice: f64::NAN,
        });
    }
    let mut loss = 0.0;
    let mut dice_sum = 0.0;
    for case in cases {
        let (logits, lo, hi) = tile_average(net, &case.volume, patch, None, |z| z)?;
        let pred = Prediction {
            dims: case.volume.dims,
            spacing: case.volume.spacing,
            prob: Vec::new(),
            valid_lo: lo,
            valid_hi: hi,
            provenance: Provenance::default(),
        };
        let d = case.volume.dims;
        let mut keep = Vec::with_capacity(logits.len());
        let mut prob = Vec::with_capacity(logits.len());
        let mut i = 0;
        for z in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    let valid = pred.is_valid(z, y, x);
                    keep.push(valid && (!masked || case.volume.data[i] as f64 > hu_threshold));
                    prob.push(if valid {
                        sigmoid(logits[i]) as f32
                    } else {
                        0.0
                    });
                    i += 1;
                }
            }
        }
        let shape = [1, d[0], d[1], d[2]];
        let mask = LossMask::new(d, keep)?;
        let labels: Vec<f64> = case.label.data.iter().map(|&v| v as f64).collect();
        loss += masked_weighted_bce_value(
            &Tensor::from_vec(&shape, logits)?,
            &Tensor::from_vec(&shape, labels)?,
            &mask,
            pos_weight,
        )?;
        let seg = segment(
            &Prediction { prob, ..pred },
            &case.volume,
            0.5,
            hu_threshold,
        )?;
        dice_sum += dice(&seg, &case.label)?;
    }
    let n = cases.len() as f64;
    Ok(Validation {
        loss: loss / n,
        dice: dice_sum / n,
    })
}

/// Schedule values in force during `epoch`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochSettings {
    pub lr: f64,
    pub momentum: f64,
    pub pos_weight: f64,
    pub aux_weight: f64,
}

impl EpochSettings {
    pub fn at(cfg: &TrainConfig, epoch: usize) -> Self {
        let s = &cfg.schedules;
        Self {
            lr: s.value(ScheduleKind::Lr, epoch),
            momentum: s.value(ScheduleKind::Momentum, epoch),
            pos_weight: s.value(ScheduleKind::PosWeight, epoch),
            aux_weight: if cfg.deep_supervision {
                s.value(ScheduleKind::Aux, epoch)
            } else {
                0.0
            },
        }
    }
}

/// One optimizer step on `sample`. `None` when the loss mask is empty and
/// the step was skipped.
pub fn train_step(
    net: &mut Network<f32>,
    state: &mut OptimizerState<f32>,
    sample: &PatchSample<f32>,
    settings: EpochSettings,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    let (_, out) = sample.labels.dims4()?;
    let mask = if cfg.masked {
        LossMask::above(&sample.intensity, cfg.hu_threshold)?
    } else {
        LossMask::full(out)
    };
    if mask.is_empty() {
        return Ok(None);
    }
    let aux = settings.aux_weight > 0.0;
    let mut tape = Tape::new();
    let x = tape.constant(sample.input.clone());
    let opts = ForwardOptions {
        mode: Mode::Train,
        dropout: DropoutPolicy::Sample,
        aux_heads: aux,
        track_params: true,
    };
    let fwd = net.forward(&mut tape, x, opts, rng)?;
    let main = tape
        .masked_weighted_bce(fwd.main_logits, &sample.labels, &mask, settings.pos_weight)?
        .loss;
    let total = if aux {
        let losses = fwd
            .aux_logits
            .iter()
            .map(|&l| {
                Ok(tape
                    .masked_weighted_bce(l, &sample.labels, &mask, settings.pos_weight)?
                    .loss)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.total_loss(main, &losses, &[settings.aux_weight; AUX_HEADS])?
    } else {
        main
    };
    let value = tape.value(total).item()? as f64;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("training loss became {value}")));
    }
    let mut grads = tape.backward(total)?;
    let grads = net.collect_grads(&mut grads, &fwd)?;
    sgd_momentum_step(
        net.params_mut(),
        &grads,
        state,
        settings.lr,
        settings.momentum,
    )?;
    Ok(Some(value))
}

fn check_fits(name: &str, size: [usize; 3], cases: &[Case]) -> Result<()> {
    for c in cases {
        if (0..3).any(|a| size[a] > c.volume.dims[a]) {
            return Err(Error::Config(format!(
                "{name} {size:?} exceeds volume '{}' of size {:?}",
                c.id, c.volume.dims
            )));
        }
        if c.volume.dims != c.label.dims {
            return Err(Error::Contract(format!(
                "'{}': volume and label differ in size",
                c.id
            )));
        }
    }
    Ok(())
}

/// [`train_with`] without an observer.
pub fn train(
    cfg: &TrainConfig,
    net: Network<f32>,
    train_set: &[Case],
    val_set: &[Case],
) -> Result<TrainOutcome> {
    train_with(cfg, net, train_set, val_set, &mut ())
}

/// Runs `cfg.epochs` epochs. Each epoch visits the training volumes in a
/// shuffled order and takes `patches_per_volume` steps per volume, then
/// validates. Epochs are numbered from 1.
pub fn train_with(
    cfg: &TrainConfig,
    mut net: Network<f32>,
    train_set: &[Case],
    val_set: &[Case],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate(net.config())?;
    if train_set.is_empty() {
        return Err(Error::Config("dataset has no training volumes".into()));
    }
    check_fits("patch_size", cfg.patch_size, train_set)?;
    check_fits("eval_patch_size", cfg.eval_patch(), val_set)?;
    let geom = PatchGeometry::new(&net, cfg.patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let mut state = OptimizerState::new(&net);

    let initial = Checkpoint::new(net.clone(), 0, Some(RngState::capture(&rng)));
    observer.start(&initial)?;
    let mut best = initial.clone();
    let mut best_epoch = 0;
    let mut best_loss = f64::INFINITY;
    let mut last = initial;
    let mut log = Vec::with_capacity(cfg.epochs);
    let (mut steps, mut skipped) = (0, 0);
    let val_weight = cfg.schedules.pos_weight.after;

    for epoch in 1..=cfg.epochs {
        let settings = EpochSettings::at(cfg, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut taken) = (0.0, 0usize);
        for &i in &order {
            let case = &train_set[i];
            for _ in 0..cfg.patches_per_volume {
                let mut sample = sample_patch(&case.volume, &case.label, &geom, &mut rng)?;
                if cfg.augment {
                    augment_flip(&mut sample, &mut rng);
                }
                match train_step(&mut net, &mut state, &sample, settings, cfg, &mut rng)? {
                    Some(l) => {
                        loss_sum += l;
                        taken += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
        steps += taken;
        let v = if steps > 0 {
            validate(
                &mut net,
                val_set,
                cfg.eval_patch(),
                val_weight,
                cfg.hu_threshold,
                cfg.masked,
            )?
        } else {
            Validation {
                loss: f64::NAN,
                dice: f64::NAN,
            }
        };
        let row = EpochLog {
            epoch,
            lr: settings.lr,
            momentum: settings.momentum,
            pos_weight: settings.pos_weight,
            aux_weight: settings.aux_weight,
            train_loss: if taken > 0 {
                loss_sum / taken as f64
            } else {
                f64::NAN
            },
            val_loss: v.loss,
            val_dice: v.dice,
        };
        last = Checkpoint::new(net.clone(), epoch, Some(RngState::capture(&rng)));
        let improved = if val_set.is_empty() {
            true
        } else {
            v.loss < best_loss
        };
        if improved {
            best_loss = v.loss;
            best = last.clone();
            best_epoch = epoch;
        }
        observer.epoch_end(&row, &last, improved)?;
        log.push(row);
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        last,
        log,
        steps,
        skipped,
    })
}
