//! Nearest-neighbour upsampling by integer factors.

use crate::error::{Error, Result};
use crate::tensor_core::{Backward, Scalar, Tape, Tensor, Var};

pub fn upsample_nn_forward<T: Scalar>(x: &Tensor<T>, factors: [usize; 3]) -> Result<Tensor<T>> {
    if factors.iter().any(|&f| f == 0) {
        return Err(Error::Contract(format!(
            "upsampling factors must be >= 1, got {factors:?}"
        )));
    }
    let (c, [d, h, w]) = x.dims4()?;
    if factors == [1, 1, 1] {
        return Ok(x.clone());
    }
    let [fd, fh, fw] = factors;
    let (od, oh, ow) = (d * fd, h * fh, w * fw);
    let src = x.data();
    let mut out = Vec::with_capacity(c * od * oh * ow);
    let mut row = Vec::with_capacity(ow);
    for ci in 0..c {
        for z in 0..od {
            let zs = z / fd;
            for y in 0..oh {
                let ys = y / fh;
                let base = ((ci * d + zs) * h + ys) * w;
                row.clear();
                for &v in &src[base..base + w] {
                    row.extend(std::iter::repeat(v).take(fw));
                }
                out.extend_from_slice(&row);
            }
        }
    }
    Tensor::from_vec(&[c, od, oh, ow], out)
}

struct UpsampleRule {
    factors: [usize; 3],
}

impl<T: Scalar> Backward<T> for UpsampleRule {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (c, [d, h, w]) = inputs[0].dims4()?;
        let [fd, fh, fw] = self.factors;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let g = grad.data();
        let mut dx = vec![T::zero(); c * d * h * w];
        for ci in 0..c {
            for z in 0..od {
                for y in 0..oh {
                    let base = ((ci * d + z / fd) * h + y / fh) * w;
                    let gbase = ((ci * od + z) * oh + y) * ow;
                    for x in 0..ow {
                        let t = &mut dx[base + x / fw];
                        *t = *t + g[gbase + x];
                    }
                }
            }
        }
        Ok(vec![Some(Tensor::from_vec(inputs[0].shape(), dx)?)])
    }

    fn name(&self) -> &'static str {
        "upsample_nn"
    }
}

impl<T: Scalar> Tape<T> {
    /// Replicates every voxel `factors[a]` times along axis `a`.
    pub fn upsample_nn(&mut self, x: Var, factors: [usize; 3]) -> Result<Var> {
        self.check(&[x])?;
        let out = upsample_nn_forward(self.value(x), factors)?;
        self.record(&[x], out, UpsampleRule { factors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_factors_are_identity() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(upsample_nn_forward(&x, [1, 1, 1]).unwrap(), x);
    }

    #[test]
    fn replicates_along_width() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 1, 2], vec![1., 2.]).unwrap();
        let y = upsample_nn_forward(&x, [1, 1, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 4]);
        assert_eq!(y.data(), &[1., 1., 2., 2.]);
    }

    #[test]
    fn zero_factor_rejected() {
        let x = Tensor::<f32>::ones(&[1, 1, 1, 1]);
        assert!(matches!(
            upsample_nn_forward(&x, [1, 0, 1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradient_counts_replicas() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[2, 2, 3, 2]));
        let y = tape.upsample_nn(x, [2, 3, 2]).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 12.0));
    }
}
