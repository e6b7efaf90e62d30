//! Inverted dropout: survivors are scaled by `1 / (1 - p)` at train time so
//! that eval mode is the identity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::batchnorm::Mode;
use crate::tensor_core::{Backward, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutVariant {
    /// Drop individual activations.
    #[default]
    Element,
    /// Drop whole feature maps.
    Spatial,
}

/// Draws a dropout mask holding `0` or `1 / (1 - p)` per element.
pub fn sample_mask<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    p: f64,
    variant: DropoutVariant,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_probability(p)?;
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let n: usize = shape.iter().product();
    let data = match variant {
        DropoutVariant::Element => (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect(),
        DropoutVariant::Spatial => {
            let features = shape.first().copied().unwrap_or(1).max(1);
            let per = n / features;
            let mut d = Vec::with_capacity(n);
            for _ in 0..features {
                let v = if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                };
                d.extend(std::iter::repeat(v).take(per));
            }
            d
        }
    };
    Tensor::from_vec(shape, data)
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Contract(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

struct MaskRule<T> {
    mask: Tensor<T>,
}

impl<T: Scalar> Backward<T> for MaskRule<T> {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.zip_map(&self.mask, |g, m| g * m)?)])
    }

    fn name(&self) -> &'static str {
        "dropout"
    }
}

impl<T: Scalar> Tape<T> {
    /// Randomly zeroes activations in train mode; identity in eval mode or
    /// when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        mode: Mode,
        variant: DropoutVariant,
        rng: &mut R,
    ) -> Result<Var> {
        self.check(&[x])?;
        check_probability(p)?;
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mask = sample_mask(self.value(x).shape(), p, variant, rng)?;
        self.dropout_with_mask(x, mask)
    }

    /// Applies a fixed multiplicative mask; the same mask gates the gradient.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).zip_map(&mask, |v, m| v * m)?;
        self.record(&[x], out, MaskRule { mask })
    }
}
