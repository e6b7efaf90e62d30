//! Heavy-ball SGD.

use crate::error::{Error, Result};
use crate::network::{Network, Param};
use crate::tensor_core::{Scalar, Tensor};

/// One velocity buffer per parameter, zero at the start of training.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(net: &Network<T>) -> Self {
        Self::for_params(net.params())
    }

    pub fn for_params(params: &[Param<T>]) -> Self {
        Self {
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }
}

/// `v <- mu v - lr g`, then `p <- p + v`.
///
/// Every gradient is checked before anything is written, so a non-finite
/// gradient leaves parameters and velocities untouched.
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
    mu: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients and {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.value.shape() != g.shape() || p.value.shape() != v.shape() {
            return Err(Error::Contract(format!(
                "parameter '{}' {:?} has gradient {:?} and velocity {:?}",
                p.name,
                p.value.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{}'",
                p.name
            )));
        }
    }
    let (lr, mu) = (T::from_f64_lossy(lr), T::from_f64_lossy(mu));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        for ((w, &g), v) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            *v = mu * *v - lr * g;
            *w = *w + *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Vec<Param<f64>> {
        vec![Param {
            name: "w".into(),
            value: Tensor::from_vec(&[v.len()], v.to_vec()).unwrap(),
        }]
    }

    fn grad(v: &[f64]) -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec(&[v.len()], v.to_vec()).unwrap()]
    }

    #[test]
    fn zero_momentum_is_gradient_descent() {
        let mut p = param(&[1.0, 2.0]);
        let mut s = OptimizerState::for_params(&p);
        sgd_momentum_step(&mut p, &grad(&[0.5, -1.0]), &mut s, 0.1, 0.0).unwrap();
        assert_eq!(p[0].value.data(), &[0.95, 2.1]);
    }

    #[test]
    fn zero_gradient_from_rest_changes_nothing() {
        let mut p = param(&[1.0, 2.0]);
        let mut s = OptimizerState::for_params(&p);
        sgd_momentum_step(&mut p, &grad(&[0.0, 0.0]), &mut s, 0.1, 0.9).unwrap();
        assert_eq!(p[0].value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn two_steps_unroll_the_recurrence() {
        let mut p = param(&[0.0]);
        let mut s = OptimizerState::for_params(&p);
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &grad(&[2.0]), &mut s, 1.0, 0.9).unwrap();
        }
        assert!((p[0].value.data()[0] + 2.9 * 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = param(&[1.0]);
        let mut s = OptimizerState::for_params(&p);
        let err = sgd_momentum_step(&mut p, &grad(&[f64::NAN]), &mut s, 0.1, 0.9).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("'w'")));
        assert_eq!(p[0].value.data(), &[1.0]);
    }
}
