//! Elementwise arithmetic and reductions, recorded on a [`Tape`].

use crate::error::{Error, Result};
use crate::tensor_core::scalar::Scalar;
use crate::tensor_core::tape::{Backward, Tape, Var};
use crate::tensor_core::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    /// Multiply by a scalar operand.
    Scale,
    Exp,
    Log,
    /// `max(0, x)`, with subgradient 0 at the kink.
    Max0,
}

/// Second operand of [`Tape::elementwise`]. Unary ops ignore it.
#[derive(Clone, Copy, Debug)]
pub enum Operand<T> {
    Var(Var),
    Scalar(T),
    None,
}

struct AddRule;
struct SubRule;
struct MulRule;
struct ScaleRule<T>(T);
struct AddScalarRule;
struct ExpRule;
struct LogRule;
struct Max0Rule;
struct SumRule {
    axes: Vec<usize>,
}

impl<T: Scalar> Backward<T> for AddRule {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone()), Some(grad.clone())])
    }
    fn name(&self) -> &'static str {
        "add"
    }
}

impl<T: Scalar> Backward<T> for SubRule {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone()), needs[1].then(|| grad.map(|g| -g))])
    }
    fn name(&self) -> &'static str {
        "sub"
    }
}

impl<T: Scalar> Backward<T> for MulRule {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let ga = if needs[0] {
            Some(grad.zip_map(inputs[1], |g, b| g * b)?)
        } else {
            None
        };
        let gb = if needs[1] {
            Some(grad.zip_map(inputs[0], |g, a| g * a)?)
        } else {
            None
        };
        Ok(vec![ga, gb])
    }
    fn name(&self) -> &'static str {
        "mul"
    }
}

impl<T: Scalar> Backward<T> for ScaleRule<T> {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let s = self.0;
        Ok(vec![Some(grad.map(|g| g * s))])
    }
    fn name(&self) -> &'static str {
        "scale"
    }
}

impl<T: Scalar> Backward<T> for AddScalarRule {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.clone())])
    }
    fn name(&self) -> &'static str {
        "add_scalar"
    }
}

impl<T: Scalar> Backward<T> for ExpRule {
    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.zip_map(output, |g, y| g * y)?)])
    }
    fn name(&self) -> &'static str {
        "exp"
    }
}

impl<T: Scalar> Backward<T> for LogRule {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.zip_map(inputs[0], |g, x| g / x)?)])
    }
    fn name(&self) -> &'static str {
        "log"
    }
}

impl<T: Scalar> Backward<T> for Max0Rule {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.zip_map(inputs[0], |g, x| {
            if x > T::zero() {
                g
            } else {
                T::zero()
            }
        })?)])
    }
    fn name(&self) -> &'static str {
        "max0"
    }
}

impl<T: Scalar> Backward<T> for SumRule {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let shape = inputs[0].shape();
        let map = ReduceMap::new(shape, &self.axes);
        let g = grad.data();
        let data = (0..inputs[0].numel()).map(|i| g[map.target(i)]).collect();
        Ok(vec![Some(Tensor::from_vec(shape, data)?)])
    }
    fn name(&self) -> &'static str {
        "sum"
    }
}

/// Maps a flat input index to its flat index in the reduced output.
struct ReduceMap {
    in_strides: Vec<usize>,
    out_strides: Vec<usize>,
    shape: Vec<usize>,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let rank = shape.len();
        let mut in_strides = vec![1; rank];
        for a in (0..rank.saturating_sub(1)).rev() {
            in_strides[a] = in_strides[a + 1] * shape[a + 1];
        }
        let mut out_strides = vec![0; rank];
        let mut s = 1;
        for a in (0..rank).rev() {
            if !axes.contains(&a) {
                out_strides[a] = s;
                s *= shape[a];
            }
        }
        Self {
            in_strides,
            out_strides,
            shape: shape.to_vec(),
        }
    }

    fn target(&self, flat: usize) -> usize {
        let mut t = 0;
        for a in 0..self.shape.len() {
            let idx = (flat / self.in_strides[a]) % self.shape[a];
            t += idx * self.out_strides[a];
        }
        t
    }
}

/// Sums a tensor over `axes`, dropping them from the shape. `None` reduces
/// over every axis and yields a rank-0 tensor.
pub fn reduce_sum<T: Scalar>(a: &Tensor<T>, axes: Option<&[usize]>) -> Result<Tensor<T>> {
    let axes = normalize_axes(a.rank(), axes)?;
    let out_shape: Vec<usize> = a
        .shape()
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &n)| n)
        .collect();
    if out_shape.is_empty() {
        return Ok(Tensor::scalar(a.sum()));
    }
    let map = ReduceMap::new(a.shape(), &axes);
    let mut out = Tensor::zeros(&out_shape);
    let o = out.data_mut();
    for (i, &v) in a.data().iter().enumerate() {
        let t = map.target(i);
        o[t] = o[t] + v;
    }
    Ok(out)
}

fn normalize_axes(rank: usize, axes: Option<&[usize]>) -> Result<Vec<usize>> {
    let Some(axes) = axes else {
        return Ok((0..rank).collect());
    };
    let mut out = Vec::with_capacity(axes.len());
    for &a in axes {
        if a >= rank {
            return Err(Error::Contract(format!(
                "axis {a} out of range for rank {rank}"
            )));
        }
        if out.contains(&a) {
            return Err(Error::Contract(format!("axis {a} repeated")));
        }
        out.push(a);
    }
    Ok(out)
}

impl<T: Scalar> Tape<T> {
    /// Dispatches one of the primitive elementwise operations.
    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Operand<T>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Add, Operand::Var(b)) => self.add(a, b),
            (ElementwiseOp::Add, Operand::Scalar(s)) => self.add_scalar(a, s),
            (ElementwiseOp::Sub, Operand::Var(b)) => self.sub(a, b),
            (ElementwiseOp::Sub, Operand::Scalar(s)) => self.add_scalar(a, -s),
            (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Var(b)) => self.mul(a, b),
            (ElementwiseOp::Mul | ElementwiseOp::Scale, Operand::Scalar(s)) => self.scale(a, s),
            (ElementwiseOp::Exp, _) => self.exp(a),
            (ElementwiseOp::Log, _) => self.log(a),
            (ElementwiseOp::Max0, _) => self.relu(a),
            (op, Operand::None) => Err(Error::Contract(format!("{op:?} needs a second operand"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.record(&[a, b], out, AddRule)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.record(&[a, b], out, SubRule)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.record(&[a, b], out, MulRule)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(&[a])?;
        let out = self.value(a).map(|x| x * s);
        self.record(&[a], out, ScaleRule(s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.check(&[a])?;
        let out = self.value(a).map(|x| x + s);
        self.record(&[a], out, AddScalarRule)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let out = self.value(a).map(T::exp);
        self.record(&[a], out, ExpRule)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let x = self.value(a);
        if let Some(i) = x.data().iter().position(|&v| v <= T::zero() || v.is_nan()) {
            return Err(Error::Domain(format!(
                "log of non-positive value {} at index {i}",
                x.data()[i]
            )));
        }
        let out = x.map(T::ln);
        self.record(&[a], out, LogRule)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let out = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        self.record(&[a], out, Max0Rule)
    }

    /// Sum over the given axes, or over everything when `axes` is `None`.
    pub fn sum(&mut self, a: Var, axes: Option<&[usize]>) -> Result<Var> {
        self.check(&[a])?;
        let axes = normalize_axes(self.value(a).rank(), axes)?;
        let out = reduce_sum(self.value(a), Some(&axes))?;
        self.record(&[a], out, SumRule { axes })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.sum(a, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn add_pairs() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape
            .elementwise(ElementwiseOp::Add, a, Operand::Var(b))
            .unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let z = tape.constant(Tensor::zeros(&[3]));
        let y = tape.mul(x, z).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 3]);
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn exp_log_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..50).map(|_| rng.gen_range(0.01..10.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t(&[50], &v));
        let e = tape.exp(x).unwrap();
        let l = tape.log(e).unwrap();
        let d = tape.value(l).max_abs_diff(tape.value(x)).unwrap();
        assert!(d < 1e-6, "{d}");
    }

    #[test]
    fn shape_mismatch_and_log_domain() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(Error::Contract(_))));
        let c = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(c), Err(Error::Domain(_))));
    }

    #[test]
    fn sums() {
        let mut tape = Tape::new();
        let o = tape.leaf(Tensor::ones(&[2, 3]));
        let s = tape.sum_all(o).unwrap();
        assert_eq!(tape.value(s).item().unwrap(), 6.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(o).unwrap(), &Tensor::ones(&[2, 3]));

        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s0 = tape.sum(m, Some(&[0])).unwrap();
        assert_eq!(tape.value(s0).data(), &[4.0, 6.0]);
        assert_eq!(tape.value(s0).shape(), &[2]);
        let s1 = tape.sum(m, Some(&[1])).unwrap();
        assert_eq!(tape.value(s1).data(), &[3.0, 7.0]);
        assert!(matches!(tape.sum(m, Some(&[2])), Err(Error::Contract(_))));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let mut other = Tape::<f64>::new();
        let y = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let unused = tape.leaf(t(&[4], &[1.0; 4]));
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[4]));
        assert!(g.get(s).is_none());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum_all(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_is_repeatable_and_linear() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.3, -1.2, 2.5]));
        let e = tape.exp(x).unwrap();
        let l1 = tape.sum_all(e).unwrap();
        let sq = tape.mul(x, x).unwrap();
        let l2 = tape.sum_all(sq).unwrap();
        let total = tape.add(l1, l2).unwrap();

        let g1 = tape.backward(l1).unwrap();
        let g2 = tape.backward(l2).unwrap();
        let gt = tape.backward(total).unwrap();
        let gt_again = tape.backward(total).unwrap();
        assert_eq!(gt.get(x), gt_again.get(x));
        let sum = g1
            .get(x)
            .unwrap()
            .zip_map(g2.get(x).unwrap(), |a, b| a + b)
            .unwrap();
        assert!(sum.max_abs_diff(gt.get(x).unwrap()).unwrap() < 1e-12);
    }
}
