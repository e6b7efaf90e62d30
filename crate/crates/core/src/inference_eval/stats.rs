//! Overlap and agreement statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::phantom::LabelVolume;

/// Voxel counts behind one Dice score.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub reference: usize,
}

impl Overlap {
    pub fn between(pred: &LabelVolume, reference: &LabelVolume) -> Result<Self> {
        if pred.dims != reference.dims {
            return Err(Error::Contract(format!(
                "masks {:?} and {:?} are not aligned",
                pred.dims, reference.dims
            )));
        }
        Ok(Self::of_slices(&pred.data, &reference.data))
    }

    pub fn of_slices(a: &[u8], b: &[u8]) -> Self {
        let mut o = Self::default();
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x != 0, y != 0);
            o.intersection += usize::from(x && y);
            o.predicted += usize::from(x);
            o.reference += usize::from(y);
        }
        o
    }

    /// `2|A∩B| / (|A| + |B|)`, 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.reference;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }
}

pub fn dice(a: &LabelVolume, b: &LabelVolume) -> Result<f64> {
    Ok(Overlap::between(a, b)?.dice())
}

/// Dice of the pooled counts: `2 Σ|Aᵢ∩Bᵢ| / Σ(|Aᵢ| + |Bᵢ|)`.
pub fn absolute_dice(overlaps: &[Overlap]) -> f64 {
    let pooled = overlaps.iter().fold(Overlap::default(), |acc, o| Overlap {
        intersection: acc.intersection + o.intersection,
        predicted: acc.predicted + o.predicted,
        reference: acc.reference + o.reference,
    });
    pooled.dice()
}

/// Splits images into four near-equal groups by increasing reference
/// volume, ties broken by id. Earlier quarters take the remainder.
pub fn quarter_partition(ids: &[String], reference_volumes: &[f64]) -> Result<[Vec<usize>; 4]> {
    if ids.len() != reference_volumes.len() {
        return Err(Error::Contract("ids and volumes differ in length".into()));
    }
    let n = ids.len();
    if n < 4 {
        return Err(Error::Contract(format!(
            "quarters need at least 4 images, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        reference_volumes[a]
            .total_cmp(&reference_volumes[b])
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    let mut groups: [Vec<usize>; 4] = Default::default();
    let mut it = order.into_iter();
    for (q, g) in groups.iter_mut().enumerate() {
        let size = n / 4 + usize::from(q < n % 4);
        g.extend(it.by_ref().take(size));
    }
    Ok(groups)
}

/// Mean Dice within each volume quarter.
pub fn quarter_dice(ids: &[String], dice: &[f64], reference_volumes: &[f64]) -> Result<[f64; 4]> {
    if dice.len() != ids.len() {
        return Err(Error::Contract("ids and scores differ in length".into()));
    }
    let groups = quarter_partition(ids, reference_volumes)?;
    Ok(groups.map(|g| g.iter().map(|&i| dice[i]).sum::<f64>() / g.len() as f64))
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_sd(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Two-way, absolute-agreement, single-measure ICC for two raters.
pub fn icc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Contract(format!(
            "icc inputs differ in length: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Contract(format!(
            "icc needs at least 3 pairs, got {n}"
        )));
    }
    let k = 2.0;
    let nf = n as f64;
    let grand = (x.iter().sum::<f64>() + y.iter().sum::<f64>()) / (k * nf);
    let (mx, my) = (mean(x), mean(y));
    let ss_rows: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| ((a + b) / 2.0 - grand).powi(2))
        .sum::<f64>()
        * k;
    let ss_cols = nf * ((mx - grand).powi(2) + (my - grand).powi(2));
    let ss_total: f64 = x.iter().chain(y).map(|v| (v - grand).powi(2)).sum();
    if ss_total == 0.0 {
        return Err(Error::Domain(
            "icc is undefined for zero total variance".into(),
        ));
    }
    let ss_err = (ss_total - ss_rows - ss_cols).max(0.0);
    let ms_r = ss_rows / (nf - 1.0);
    let ms_c = ss_cols / (k - 1.0);
    let ms_e = ss_err / ((nf - 1.0) * (k - 1.0));
    let denom = ms_r + (k - 1.0) * ms_e + k / nf * (ms_c - ms_e);
    if denom == 0.0 {
        return Err(Error::Domain(
            "icc is undefined: zero variance components".into(),
        ));
    }
    Ok((ms_r - ms_e) / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: f64,
}

/// Paired Student t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Contract(format!(
            "paired t-test needs at least 2 pairs, got {n}"
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let sd = sample_sd(&d);
    // A constant shift computed in floating point leaves roundoff-sized spread.
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sd <= 64.0 * f64::EPSILON * scale || sd == 0.0 {
        return Err(Error::Domain(
            "paired differences have zero variance".into(),
        ));
    }
    let df = (n - 1) as f64;
    let t = mean(&d) / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

/// Physical volume of a mask in mm³.
pub fn volume_mm3(mask: &LabelVolume) -> f64 {
    mask.count() as f64 * mask.spacing.iter().product::<f64>()
}

/// Two-dimensional histogram whose bins along each axis hold equal counts
/// (±1): items are ranked per axis, ties broken by position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hist2d {
    pub bins: usize,
    /// Upper value of every bin along x and y.
    pub x_upper: Vec<f64>,
    pub y_upper: Vec<f64>,
    /// `counts[i][j]`: items in x-bin `i` and y-bin `j`.
    pub counts: Vec<Vec<usize>>,
}

fn rank_bins(v: &[f64], bins: usize) -> (Vec<usize>, Vec<f64>) {
    let n = v.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut bin = vec![0; n];
    let mut upper = vec![f64::NAN; bins];
    for (rank, &i) in order.iter().enumerate() {
        let b = rank * bins / n;
        bin[i] = b;
        upper[b] = v[i];
    }
    (bin, upper)
}

pub fn hist2d_equal_count(x: &[f64], y: &[f64], bins: usize) -> Result<Hist2d> {
    if x.len() != y.len() {
        return Err(Error::Contract("histogram inputs differ in length".into()));
    }
    if bins == 0 {
        return Err(Error::Contract("histogram needs at least one bin".into()));
    }
    let mut counts = vec![vec![0; bins]; bins];
    if x.is_empty() {
        return Ok(Hist2d {
            bins,
            x_upper: vec![f64::NAN; bins],
            y_upper: vec![f64::NAN; bins],
            counts,
        });
    }
    let (bx, x_upper) = rank_bins(x, bins);
    let (by, y_upper) = rank_bins(y, bins);
    for (i, j) in bx.into_iter().zip(by) {
        counts[i][j] += 1;
    }
    Ok(Hist2d {
        bins,
        x_upper,
        y_upper,
        counts,
    })
}
