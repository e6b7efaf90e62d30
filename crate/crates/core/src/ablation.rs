//! Variant grid that adds one training technique at a time and compares
//! the variants on held-out images.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference_eval::{evaluate_network, paired_ttest, write_json, EvalReport, EvalSettings};
use crate::network::{BlockKind, Network, NetworkConfig};
use crate::objective::CALCIFICATION_HU;
use crate::phantom::Case;
use crate::trainer::{train, TrainConfig};

/// Cumulative variants, each adding one technique to the previous.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain blocks, no dropout, one output, loss on every voxel.
    Plain,
    /// Adds the auxiliary heads.
    DeepSupervision,
    /// Adds the above-threshold loss mask.
    Masked,
    /// Adds residual blocks with dropout before the addition.
    ResnetDropout,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Plain,
        Variant::DeepSupervision,
        Variant::Masked,
        Variant::ResnetDropout,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::DeepSupervision => "deep_supervision",
            Variant::Masked => "masked",
            Variant::ResnetDropout => "resnet_dropout",
        }
    }

    fn rank(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).expect("listed")
    }

    /// Training settings and network for this variant, derived from the
    /// full setup.
    pub fn apply(self, train: &TrainConfig, net: &NetworkConfig) -> (TrainConfig, NetworkConfig) {
        let r = self.rank();
        let mut t = train.clone();
        t.deep_supervision = r >= Variant::DeepSupervision.rank();
        t.masked = r >= Variant::Masked.rank();
        let n = if r >= Variant::ResnetDropout.rank() {
            net.with_block_kind(BlockKind::Residual)
        } else {
            net.with_block_kind(BlockKind::Plain).without_dropout()
        };
        (t, n)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub prob_thresh: f64,
    pub hu_thresh: f64,
    pub stride: Option<[usize; 3]>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            variants: Variant::ALL.to_vec(),
            prob_thresh: 0.5,
            hu_thresh: CALCIFICATION_HU,
            stride: None,
        }
    }
}

impl AblationConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config(
                "variants must list at least one variant".into(),
            ));
        }
        let mut sorted = self.variants.clone();
        sorted.sort_by_key(|v| v.rank());
        sorted.dedup();
        if sorted.len() != self.variants.len() {
            return Err(Error::Config("variants must not repeat".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub best_epoch: usize,
    pub report: EvalReport,
}

/// Paired t-test of one variant's per-image Dice against the reference
/// variant's. `t` and `p` are absent when the differences have no spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variant: Variant,
    pub against: Variant,
    pub t: Option<f64>,
    pub p: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub results: Vec<VariantResult>,
    /// Every variant against the last one listed.
    pub comparisons: Vec<Comparison>,
}

fn dice_column(r: &EvalReport) -> Vec<f64> {
    r.rows.iter().map(|row| row.dice).collect()
}

fn compare(results: &[VariantResult]) -> Result<Vec<Comparison>> {
    let Some((last, rest)) = results.split_last() else {
        return Ok(Vec::new());
    };
    let b = dice_column(&last.report);
    rest.iter()
        .map(|r| {
            let a = dice_column(&r.report);
            let (t, p) = match paired_ttest(&a, &b) {
                Ok(tt) => (Some(tt.t), Some(tt.p)),
                Err(Error::Domain(_)) => (None, None),
                Err(e) => return Err(e),
            };
            Ok(Comparison {
                variant: r.variant,
                against: last.variant,
                t,
                p,
            })
        })
        .collect()
}

impl AblationReport {
    pub fn new(results: Vec<VariantResult>) -> Result<Self> {
        let ids: Vec<&str> = results
            .first()
            .map(|r| r.report.rows.iter().map(|x| x.id.as_str()).collect())
            .unwrap_or_default();
        for r in &results {
            if !r
                .report
                .rows
                .iter()
                .map(|x| x.id.as_str())
                .eq(ids.iter().copied())
            {
                return Err(Error::Contract(
                    "variants were scored on different images".into(),
                ));
            }
        }
        let comparisons = compare(&results)?;
        Ok(Self {
            results,
            comparisons,
        })
    }

    /// Every summary and every t-test recomputes from the per-image rows.
    pub fn is_consistent(&self) -> bool {
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() <= 1e-12 * a.abs().max(1.0),
            (None, None) => true,
            _ => false,
        };
        self.results.iter().all(|r| r.report.is_consistent())
            && compare(&self.results).is_ok_and(|c| {
                c.len() == self.comparisons.len()
                    && c.iter().zip(&self.comparisons).all(|(x, y)| {
                        x.variant == y.variant
                            && x.against == y.against
                            && close(x.t, y.t)
                            && close(x.p, y.p)
                    })
            })
    }

    /// Fixed-width comparison table, one row per variant.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>15} {:>8} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}",
            "variant", "dice mean±sd", "abs", "q1", "q2", "q3", "q4", "icc", "p"
        );
        let pct = |v: f64| format!("{:.1}", 100.0 * v);
        for r in &self.results {
            let m = &r.report.summary;
            let q = m
                .quarter_dice
                .map(|q| q.map(pct))
                .unwrap_or_else(|| ["-".to_string(), "-".into(), "-".into(), "-".into()]);
            let p = self
                .comparisons
                .iter()
                .find(|c| c.variant == r.variant)
                .map(|c| c.p.map_or("n/a".into(), |p| format!("{p:.2e}")))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<18} {:>15} {:>8} {:>7} {:>7} {:>7} {:>7} {:>7} {:>9}",
                r.variant.name(),
                format!("{}±{}", pct(m.mean_dice), pct(m.sd_dice)),
                pct(m.absolute_dice),
                q[0],
                q[1],
                q[2],
                q[3],
                m.icc.map_or("-".into(), pct),
                p
            );
        }
        s
    }

    /// `<dir>/<variant>/` per-image tables, `ablation.json` and `table.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for r in &self.results {
            r.report.write(dir.join(r.variant.name()))?;
        }
        write_json(&dir.join("ablation.json"), self)?;
        let path = dir.join("table.txt");
        std::fs::write(&path, self.table()).map_err(|e| Error::io(&path, e))
    }
}

/// Trains every configured variant from the same seed and scores it on
/// `test`.
pub fn run_ablation(
    cfg: &AblationConfig,
    net: &NetworkConfig,
    train_set: &[Case],
    val_set: &[Case],
    test_set: &[Case],
) -> Result<AblationReport> {
    cfg.validate()?;
    let mut results = Vec::with_capacity(cfg.variants.len());
    for &v in &cfg.variants {
        let (tc, nc) = v.apply(&cfg.train, net);
        let init = Network::build(&nc, tc.seed)?;
        let mut out = train(&tc, init, train_set, val_set)?;
        let settings = EvalSettings {
            patch: tc.eval_patch(),
            stride: cfg.stride,
            prob_thresh: cfg.prob_thresh,
            hu_thresh: cfg.hu_thresh,
        };
        let report = evaluate_network(&mut out.best.network, test_set, &settings)?;
        results.push(VariantResult {
            variant: v,
            best_epoch: out.best_epoch,
            report,
        });
    }
    AblationReport::new(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_accumulate() {
        let t = TrainConfig::default();
        let n = NetworkConfig::reference();
        let (t0, n0) = Variant::Plain.apply(&t, &n);
        assert!(!t0.deep_supervision && !t0.masked);
        assert!(n0
            .blocks()
            .all(|(_, b)| b.kind == BlockKind::Plain && b.dropout.is_none()));
        let (t2, _) = Variant::Masked.apply(&t, &n);
        assert!(t2.deep_supervision && t2.masked);
        let (_, n3) = Variant::ResnetDropout.apply(&t, &n);
        assert_eq!(n3, n);
    }

    #[test]
    fn repeated_variant_rejected() {
        let c = AblationConfig {
            variants: vec![Variant::Plain, Variant::Plain],
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
