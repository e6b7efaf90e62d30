//! Whole-volume prediction by overlapping patches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::sigmoid;
use crate::network::{Checkpoint, Network};
use crate::objective::CALCIFICATION_HU;
use crate::phantom::{LabelVolume, Volume};
use crate::tensor_core::{Scalar, Tensor};

/// Probability grid on the volume lattice. Voxels outside
/// `[valid_lo, valid_hi)` were not reached by any patch output and hold 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub prob: Vec<f32>,
    pub valid_lo: [usize; 3],
    pub valid_hi: [usize; 3],
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub checkpoint_hash: Option<String>,
}

impl Prediction {
    pub fn is_valid(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        (0..3).all(|a| p[a] >= self.valid_lo[a] && p[a] < self.valid_hi[a])
    }

    /// Probabilities as a float volume, for storage.
    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.prob.clone(),
        }
    }
}

/// Corners along one axis: every `stride`, with the last patch clamped to
/// end at the boundary.
pub fn tile_corners(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut c: Vec<usize> = (0..last).step_by(stride).collect();
    c.push(last);
    c
}

pub(crate) fn extract<T: Scalar>(
    vol: &[f32],
    dims: [usize; 3],
    at: [usize; 3],
    size: [usize; 3],
) -> Tensor<T> {
    let mut out = Vec::with_capacity(size.iter().product());
    for z in at[0]..at[0] + size[0] {
        for y in at[1]..at[1] + size[1] {
            let base = (z * dims[1] + y) * dims[2];
            out.extend(
                vol[base + at[2]..base + at[2] + size[2]]
                    .iter()
                    .map(|&v| T::from_f64_lossy(v as f64)),
            );
        }
    }
    Tensor::from_vec(&[1, size[0], size[1], size[2]], out).expect("window fits")
}

/// Averaged per-voxel network outputs over a patch tiling; `transform`
/// maps each output logit before averaging.
pub(crate) fn tile_average<T: Scalar>(
    net: &mut Network<T>,
    vol: &Volume,
    patch: [usize; 3],
    stride: Option<[usize; 3]>,
    transform: impl Fn(f64) -> f64,
) -> Result<(Vec<f64>, [usize; 3], [usize; 3])> {
    for a in 0..3 {
        if patch[a] > vol.dims[a] {
            return Err(Error::Shape(format!(
                "volume {:?} is smaller than patch {patch:?}",
                vol.dims
            )));
        }
    }
    let out = net.output_shape(patch)?;
    let off = [0, 1, 2].map(|a| (patch[a] - out[a]) / 2);
    let stride = stride.unwrap_or(out);
    for a in 0..3 {
        if stride[a] == 0 || stride[a] > out[a] {
            return Err(Error::Contract(format!(
                "tile stride {stride:?} must lie between 1 and the patch output {out:?}"
            )));
        }
    }
    let corners = [0, 1, 2].map(|a| tile_corners(vol.dims[a], patch[a], stride[a]));
    let n: usize = vol.dims.iter().product();
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let d = vol.dims;
    for &cz in &corners[0] {
        for &cy in &corners[1] {
            for &cx in &corners[2] {
                let x = extract::<T>(&vol.data, d, [cz, cy, cx], patch);
                let logits = net.eval_logits(&x)?;
                let l = logits.data();
                let mut k = 0;
                for z in 0..out[0] {
                    for y in 0..out[1] {
                        let base =
                            ((cz + off[0] + z) * d[1] + cy + off[1] + y) * d[2] + cx + off[2];
                        for i in 0..out[2] {
                            sum[base + i] += transform(l[k].to_f64().unwrap_or(f64::NAN));
                            count[base + i] += 1;
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    for (s, &c) in sum.iter_mut().zip(&count) {
        if c > 0 {
            *s /= c as f64;
        }
    }
    let lo = off;
    let hi = [0, 1, 2].map(|a| d[a] - patch[a] + off[a] + out[a]);
    Ok((sum, lo, hi))
}

/// Eval-mode probabilities over the whole volume: each voxel is the mean of
/// every patch output covering it. `stride` defaults to the patch output
/// extent (no overlap).
pub fn tile_predict<T: Scalar>(
    net: &mut Network<T>,
    vol: &Volume,
    patch: [usize; 3],
    stride: Option<[usize; 3]>,
) -> Result<Prediction> {
    let (avg, lo, hi) = tile_average(net, vol, patch, stride, sigmoid)?;
    Ok(Prediction {
        dims: vol.dims,
        spacing: vol.spacing,
        prob: avg.into_iter().map(|p| p as f32).collect(),
        valid_lo: lo,
        valid_hi: hi,
        provenance: Provenance {
            config_hash: net.config().hash(),
            checkpoint_hash: None,
        },
    })
}

/// [`tile_predict`] with provenance taken from a checkpoint.
pub fn tile_predict_checkpoint(
    ck: &mut Checkpoint<f32>,
    vol: &Volume,
    patch: [usize; 3],
    stride: Option<[usize; 3]>,
) -> Result<Prediction> {
    let hash = ck.hash();
    let mut p = tile_predict(&mut ck.network, vol, patch, stride)?;
    p.provenance.checkpoint_hash = Some(hash);
    Ok(p)
}

/// `probability >= prob_thresh` and `intensity > hu_thresh`.
pub fn segment(
    pred: &Prediction,
    vol: &Volume,
    prob_thresh: f64,
    hu_thresh: f64,
) -> Result<LabelVolume> {
    if pred.dims != vol.dims {
        return Err(Error::Contract(format!(
            "prediction {:?} and volume {:?} differ in size",
            pred.dims, vol.dims
        )));
    }
    let data = pred
        .prob
        .iter()
        .zip(&vol.data)
        .map(|(&p, &v)| u8::from(p as f64 >= prob_thresh && v as f64 > hu_thresh))
        .collect();
    LabelVolume::new(vol.dims, vol.spacing, data)
}

/// [`segment`] with the default thresholds (0.5 and the calcification
/// threshold).
pub fn segment_default(pred: &Prediction, vol: &Volume) -> Result<LabelVolume> {
    segment(pred, vol, 0.5, CALCIFICATION_HU)
}
