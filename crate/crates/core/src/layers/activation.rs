use crate::error::Result;
use crate::tensor_core::{Backward, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Logistic function without overflow for large `|x|`.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

struct SigmoidRule;

impl<T: Scalar> Backward<T> for SigmoidRule {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(
            grad.zip_map(output, |g, s| g * s * (T::one() - s))?,
        )])
    }

    fn name(&self) -> &'static str {
        "sigmoid"
    }
}

impl<T: Scalar> Tape<T> {
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let out = self.value(x).map(sigmoid);
        self.record(&[x], out, SigmoidRule)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_and_sigmoid_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        let r = tape.activation(x, Activation::Relu).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let lo = sigmoid(-100.0f64);
        assert!(lo > 0.0 && lo <= 1e-40, "{lo}");
        assert_eq!(sigmoid(100.0f64), 1.0);
        assert!(sigmoid(-100.0f32).is_finite());
        assert!(sigmoid(-1000.0f64).is_finite());
    }
}
