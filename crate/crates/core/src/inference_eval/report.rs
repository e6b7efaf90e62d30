//! Per-image evaluation tables and their aggregates.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference_eval::stats::{
    absolute_dice, hist2d_equal_count, icc, mean, quarter_dice, sample_sd, volume_mm3, Hist2d,
    Overlap,
};
use crate::inference_eval::tile::{segment, tile_predict};
use crate::network::Network;
use crate::phantom::{Case, LabelVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub dice: f64,
    pub intersection: usize,
    pub predicted_voxels: usize,
    pub reference_voxels: usize,
    pub predicted_mm3: f64,
    pub reference_mm3: f64,
}

impl ImageRow {
    pub fn new(id: impl Into<String>, pred: &LabelVolume, reference: &LabelVolume) -> Result<Self> {
        let o = Overlap::between(pred, reference)?;
        Ok(Self {
            id: id.into(),
            dice: o.dice(),
            intersection: o.intersection,
            predicted_voxels: o.predicted,
            reference_voxels: o.reference,
            predicted_mm3: volume_mm3(pred),
            reference_mm3: volume_mm3(reference),
        })
    }

    pub fn overlap(&self) -> Overlap {
        Overlap {
            intersection: self.intersection,
            predicted: self.predicted_voxels,
            reference: self.reference_voxels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub images: usize,
    pub absolute_dice: f64,
    pub mean_dice: f64,
    pub sd_dice: f64,
    /// Mean Dice per quarter of increasing reference volume; absent below
    /// four images.
    pub quarter_dice: Option<[f64; 4]>,
    /// Predicted against reference volume; absent when undefined.
    pub icc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ImageRow>,
    pub summary: Summary,
}

/// Aggregates over the rows. Every field derives from the rows alone.
pub fn summarize(rows: &[ImageRow]) -> Summary {
    let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
    let ids: Vec<String> = rows.iter().map(|r| r.id.clone()).collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.predicted_mm3).collect();
    let truth: Vec<f64> = rows.iter().map(|r| r.reference_mm3).collect();
    let overlaps: Vec<Overlap> = rows.iter().map(ImageRow::overlap).collect();
    Summary {
        images: rows.len(),
        absolute_dice: absolute_dice(&overlaps),
        mean_dice: if rows.is_empty() {
            f64::NAN
        } else {
            mean(&dice)
        },
        sd_dice: sample_sd(&dice),
        quarter_dice: quarter_dice(&ids, &dice, &truth).ok(),
        icc: icc(&pred, &truth).ok(),
    }
}

fn same(a: f64, b: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ImageRow>) -> Self {
        let summary = summarize(&rows);
        Self { rows, summary }
    }

    /// Rows from `(id, predicted, reference)` masks.
    pub fn from_masks<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a LabelVolume, &'a LabelVolume)>,
    ) -> Result<Self> {
        let rows = pairs
            .into_iter()
            .map(|(id, p, r)| ImageRow::new(id, p, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rows(rows))
    }

    /// Whether the stored summary matches one recomputed from the rows.
    pub fn is_consistent(&self) -> bool {
        let r = summarize(&self.rows);
        let s = &self.summary;
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => same(a, b),
            (None, None) => true,
            _ => false,
        };
        r.images == s.images
            && same(r.absolute_dice, s.absolute_dice)
            && same(r.mean_dice, s.mean_dice)
            && same(r.sd_dice, s.sd_dice)
            && opt(r.icc, s.icc)
            && match (r.quarter_dice, s.quarter_dice) {
                (Some(a), Some(b)) => a.iter().zip(&b).all(|(x, y)| same(*x, *y)),
                (None, None) => true,
                _ => false,
            }
    }

    /// Equal-count histogram of reference against predicted volume.
    pub fn volume_histogram(&self, bins: usize) -> Result<Hist2d> {
        let truth: Vec<f64> = self.rows.iter().map(|r| r.reference_mm3).collect();
        let pred: Vec<f64> = self.rows.iter().map(|r| r.predicted_mm3).collect();
        hist2d_equal_count(&truth, &pred, bins)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<ImageRow>> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        r.deserialize()
            .collect::<std::result::Result<Vec<ImageRow>, _>>()
            .map_err(|e| csv_error(path, e))
    }

    /// `<dir>/per_image.csv` and `<dir>/summary.json`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_csv(dir.join("per_image.csv"))?;
        write_json(&dir.join("summary.json"), &self.summary)
    }
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        _ => Error::Format(format!("{}: {msg}", path.display())),
    }
}

/// Writes a histogram as a `bins × bins` CSV count table, rows indexed by
/// the first variable.
pub fn write_histogram(h: &Hist2d, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["x_upper \\ y_upper".to_string()];
    header.extend(h.y_upper.iter().map(|v| v.to_string()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (row, xu) in h.counts.iter().zip(&h.x_upper) {
        let mut rec = vec![xu.to_string()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Pairs `<id>_seg.json` masks in `pred_dir` with `<id>_label.json` masks in
/// `label_dir`, ordered by id.
pub fn evaluate_dirs(
    pred_dir: impl AsRef<Path>,
    label_dir: impl AsRef<Path>,
) -> Result<EvalReport> {
    let (pred_dir, label_dir) = (pred_dir.as_ref(), label_dir.as_ref());
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(pred_dir).map_err(|e| Error::io(pred_dir, e))? {
        let entry = entry.map_err(|e| Error::io(pred_dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_seg.json") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    let mut rows = Vec::with_capacity(ids.len());
    for id in &ids {
        let p = LabelVolume::load(pred_dir.join(format!("{id}_seg.json")))?;
        let l = LabelVolume::load(label_dir.join(format!("{id}_label.json")))?;
        rows.push(ImageRow::new(id.clone(), &p, &l)?);
    }
    Ok(EvalReport::from_rows(rows))
}

/// Thresholds and tiling used to turn a network into masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub patch: [usize; 3],
    pub stride: Option<[usize; 3]>,
    pub prob_thresh: f64,
    pub hu_thresh: f64,
}

/// Predicts, thresholds and scores every case.
pub fn evaluate_network(
    net: &mut Network<f32>,
    cases: &[Case],
    s: &EvalSettings,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(cases.len());
    for c in cases {
        let pred = tile_predict(net, &c.volume, s.patch, s.stride)?;
        let seg = segment(&pred, &c.volume, s.prob_thresh, s.hu_thresh)?;
        rows.push(ImageRow::new(c.id.clone(), &seg, &c.label)?);
    }
    Ok(EvalReport::from_rows(rows))
}
