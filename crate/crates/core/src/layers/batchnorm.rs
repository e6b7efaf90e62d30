//! Batch normalization over the spatial extent of a single patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::{Backward, Scalar, Tape, Tensor, Var};

/// Whether layers run with training behaviour (batch statistics, dropout)
/// or inference behaviour.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Running statistics of one normalization layer. The affine `gamma` and
/// `beta` are trainable and travel with the other parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    /// Number of train-mode passes folded into the running statistics.
    pub updates: u64,
}

impl<T: Scalar> BnState<T> {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); features],
            running_var: vec![T::one(); features],
            momentum: DEFAULT_BN_MOMENTUM,
            eps: DEFAULT_BN_EPS,
            updates: 0,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }
}

struct BnRule<T> {
    /// Normalized input, same shape as the input.
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
    train: bool,
}

impl<T: Scalar> Backward<T> for BnRule<T> {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (c, dims) = inputs[0].dims4()?;
        let n: usize = dims.iter().product();
        let gamma = inputs[1].data();
        let dy = grad.data();
        let xh = self.xhat.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = needs[0].then(|| vec![T::zero(); c * n]);
        for f in 0..c {
            let r = f * n..(f + 1) * n;
            let (mut sum_dy, mut sum_dy_xh) = (0.0f64, 0.0f64);
            for (g, x) in dy[r.clone()].iter().zip(&xh[r.clone()]) {
                let g = g.to_f64().unwrap_or(f64::NAN);
                sum_dy += g;
                sum_dy_xh += g * x.to_f64().unwrap_or(f64::NAN);
            }
            dgamma[f] = T::from_f64_lossy(sum_dy_xh);
            dbeta[f] = T::from_f64_lossy(sum_dy);
            let Some(dx) = dx.as_mut() else { continue };
            let scale = gamma[f].to_f64().unwrap_or(f64::NAN) * self.inv_std[f];
            if self.train {
                let nf = n as f64;
                let mean_dy = sum_dy / nf;
                let mean_dy_xh = sum_dy_xh / nf;
                for i in r {
                    let g = dy[i].to_f64().unwrap_or(f64::NAN);
                    let x = xh[i].to_f64().unwrap_or(f64::NAN);
                    dx[i] = T::from_f64_lossy(scale * (g - mean_dy - x * mean_dy_xh));
                }
            } else {
                let s = T::from_f64_lossy(scale);
                for i in r {
                    dx[i] = dy[i] * s;
                }
            }
        }
        Ok(vec![
            dx.map(|d| Tensor::from_vec(inputs[0].shape(), d))
                .transpose()?,
            needs[1]
                .then(|| Tensor::from_vec(&[c], dgamma))
                .transpose()?,
            needs[2]
                .then(|| Tensor::from_vec(&[c], dbeta))
                .transpose()?,
        ])
    }

    fn name(&self) -> &'static str {
        "batchnorm"
    }
}

impl<T: Scalar> Tape<T> {
    /// `y = gamma * (x - mean) / sqrt(var + eps) + beta` per feature.
    ///
    /// Train mode uses this patch's statistics and folds them into `state`;
    /// eval mode uses the running statistics and refuses to run before any
    /// train-mode update.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
    ) -> Result<Var> {
        self.check(&[x, gamma, beta])?;
        let xv = self.value(x);
        let (c, dims) = xv.dims4()?;
        if c != state.features()
            || self.value(gamma).shape() != [c]
            || self.value(beta).shape() != [c]
        {
            return Err(Error::Contract(format!(
                "batchnorm over {c} features with state/affine sized {}/{:?}/{:?}",
                state.features(),
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let n: usize = dims.iter().product();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for f in 0..c {
                    let s = &xv.data()[f * n..(f + 1) * n];
                    let m = s
                        .iter()
                        .map(|v| v.to_f64().unwrap_or(f64::NAN))
                        .sum::<f64>()
                        / n as f64;
                    let v = s
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap_or(f64::NAN) - m;
                            d * d
                        })
                        .sum::<f64>()
                        / n as f64;
                    mean[f] = m;
                    var[f] = v;
                }
                (mean, var)
            }
            Mode::Eval => {
                if state.updates == 0 {
                    return Err(Error::Contract(
                        "batchnorm in eval mode before any running-statistics update".into(),
                    ));
                }
                let conv = |v: &[T]| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
                (conv(&state.running_mean), conv(&state.running_var))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let gamma_v = self.value(gamma).data();
        let beta_v = self.value(beta).data();
        let mut xhat = Vec::with_capacity(c * n);
        let mut out = Vec::with_capacity(c * n);
        for f in 0..c {
            let (m, s) = (mean[f], inv_std[f]);
            for &v in &xv.data()[f * n..(f + 1) * n] {
                let h = T::from_f64_lossy((v.to_f64().unwrap_or(f64::NAN) - m) * s);
                xhat.push(h);
                out.push(gamma_v[f] * h + beta_v[f]);
            }
        }
        if mode == Mode::Train {
            let mo = state.momentum;
            let unbias = if n > 1 {
                n as f64 / (n as f64 - 1.0)
            } else {
                1.0
            };
            for f in 0..c {
                let rm = state.running_mean[f].to_f64().unwrap_or(f64::NAN);
                let rv = state.running_var[f].to_f64().unwrap_or(f64::NAN);
                state.running_mean[f] = T::from_f64_lossy((1.0 - mo) * rm + mo * mean[f]);
                state.running_var[f] = T::from_f64_lossy((1.0 - mo) * rv + mo * var[f] * unbias);
            }
            state.updates += 1;
        }
        let shape = xv.shape().to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        let rule = BnRule {
            xhat: Tensor::from_vec(&shape, xhat)?,
            inv_std,
            train: mode == Mode::Train,
        };
        self.record(&[x, gamma, beta], out, rule)
    }
}
