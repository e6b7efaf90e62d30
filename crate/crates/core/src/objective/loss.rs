use crate::error::{Error, Result};
use crate::tensor_core::{Backward, Scalar, Tape, Tensor, Var};

/// Clinical calcification threshold in Hounsfield units.
pub const CALCIFICATION_HU: f64 = 130.0;

/// Voxels that take part in supervision: intensity strictly above a
/// threshold, on the network's output grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LossMask {
    dims: [usize; 3],
    keep: Vec<bool>,
}

impl LossMask {
    pub fn new(dims: [usize; 3], keep: Vec<bool>) -> Result<Self> {
        if keep.len() != dims.iter().product::<usize>() {
            return Err(Error::Contract(format!(
                "mask of {} voxels does not fit dims {dims:?}",
                keep.len()
            )));
        }
        Ok(Self { dims, keep })
    }

    /// `intensity > threshold` for a `(1, D, H, W)` or `(D, H, W)` grid.
    pub fn above<T: Scalar>(intensity: &Tensor<T>, threshold: f64) -> Result<Self> {
        let s = intensity.shape();
        let dims = match s.len() {
            3 => [s[0], s[1], s[2]],
            4 if s[0] == 1 => [s[1], s[2], s[3]],
            _ => {
                return Err(Error::Contract(format!(
                    "intensity grid must be (D, H, W) or (1, D, H, W), got {s:?}"
                )))
            }
        };
        let t = T::from_f64_lossy(threshold);
        Ok(Self {
            dims,
            keep: intensity.data().iter().map(|&v| v > t).collect(),
        })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        Self {
            dims,
            keep: vec![true; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.keep.iter().any(|&k| k)
    }
}

/// A loss variable and whether its mask selected no voxel at all.
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub loss: Var,
    pub empty_mask: bool,
}

/// `log(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_aligned<T: Scalar>(logits: &Tensor<T>, labels: &Tensor<T>, mask: &LossMask) -> Result<()> {
    if logits.shape() != labels.shape() {
        return Err(Error::Contract(format!(
            "logits {:?} and labels {:?} differ in shape",
            logits.shape(),
            labels.shape()
        )));
    }
    let s = logits.shape();
    if s.len() < 3 || s[s.len() - 3..] != mask.dims || logits.numel() != mask.keep.len() {
        return Err(Error::Contract(format!(
            "logits {:?} do not match mask dims {:?}",
            logits.shape(),
            mask.dims
        )));
    }
    Ok(())
}

/// Summed weighted binary cross-entropy over masked voxels, evaluated from
/// logits in the stable softplus form. Voxels outside the mask are never
/// read.
pub fn masked_weighted_bce_value<T: Scalar>(
    logits: &Tensor<T>,
    labels: &Tensor<T>,
    mask: &LossMask,
    pos_weight: f64,
) -> Result<f64> {
    check_aligned(logits, labels, mask)?;
    let mut acc = 0.0f64;
    for ((&z, &y), &k) in logits.data().iter().zip(labels.data()).zip(&mask.keep) {
        if k {
            let z = z.to_f64().unwrap_or(f64::NAN);
            let y = y.to_f64().unwrap_or(f64::NAN);
            let w = if y > 0.5 { pos_weight } else { 1.0 };
            acc += w * (y * softplus(-z) + (1.0 - y) * softplus(z));
        }
    }
    Ok(acc)
}

struct MaskedBceRule {
    labels: Vec<f64>,
    keep: Vec<bool>,
    pos_weight: f64,
}

impl<T: Scalar> Backward<T> for MaskedBceRule {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.item()?.to_f64().unwrap_or(f64::NAN);
        let z = inputs[0];
        let data = z
            .data()
            .iter()
            .zip(&self.labels)
            .zip(&self.keep)
            .map(|((&z, &y), &k)| {
                if !k {
                    return T::zero();
                }
                let z = z.to_f64().unwrap_or(f64::NAN);
                let w = if y > 0.5 { self.pos_weight } else { 1.0 };
                T::from_f64_lossy(g * w * (crate::layers::sigmoid(z) - y))
            })
            .collect();
        Ok(vec![Some(Tensor::from_vec(z.shape(), data)?)])
    }

    fn name(&self) -> &'static str {
        "masked_weighted_bce"
    }
}

impl<T: Scalar> Tape<T> {
    /// Records the masked, positively weighted cross-entropy of `logits`
    /// against binary `labels`. An empty mask yields 0 with the flag set.
    pub fn masked_weighted_bce(
        &mut self,
        logits: Var,
        labels: &Tensor<T>,
        mask: &LossMask,
        pos_weight: f64,
    ) -> Result<MaskedLoss> {
        self.check(&[logits])?;
        let value = masked_weighted_bce_value(self.value(logits), labels, mask, pos_weight)?;
        let rule = MaskedBceRule {
            labels: labels
                .data()
                .iter()
                .map(|v| v.to_f64().unwrap_or(f64::NAN))
                .collect(),
            keep: mask.keep.clone(),
            pos_weight,
        };
        let loss = self.record(&[logits], Tensor::scalar(T::from_f64_lossy(value)), rule)?;
        Ok(MaskedLoss {
            loss,
            empty_mask: mask.is_empty(),
        })
    }

    /// `main + sum_i weights[i] * aux[i]` over exactly six auxiliary terms.
    pub fn total_loss(&mut self, main: Var, aux: &[Var], weights: &[f64]) -> Result<Var> {
        if aux.len() != crate::network::AUX_HEADS || weights.len() != aux.len() {
            return Err(Error::Contract(format!(
                "total loss needs {} auxiliary losses and weights, got {} and {}",
                crate::network::AUX_HEADS,
                aux.len(),
                weights.len()
            )));
        }
        let mut total = main;
        for (&l, &a) in aux.iter().zip(weights) {
            let term = self.scale(l, T::from_f64_lossy(a))?;
            total = self.add(total, term)?;
        }
        Ok(total)
    }
}
