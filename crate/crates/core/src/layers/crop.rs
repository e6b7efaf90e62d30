//! Center cropping and feature concatenation at skip junctions.

use crate::error::{Error, Result};
use crate::tensor_core::{Backward, Scalar, Tape, Tensor, Var};

/// Per-axis leading margin of a symmetric crop from `source` to `target`.
pub fn crop_margins(source: [usize; 3], target: [usize; 3]) -> Result<[usize; 3]> {
    let mut m = [0; 3];
    for a in 0..3 {
        if target[a] > source[a] {
            return Err(Error::Shape(format!(
                "cannot crop extent {} to larger extent {} on axis {a}",
                source[a], target[a]
            )));
        }
        let diff = source[a] - target[a];
        if diff % 2 != 0 {
            return Err(Error::Shape(format!(
                "crop from {} to {} on axis {a} leaves an odd margin",
                source[a], target[a]
            )));
        }
        m[a] = diff / 2;
    }
    Ok(m)
}

/// Calls `f(big_offset, small_offset, len)` for every row of the window.
fn for_each_row(
    big: [usize; 3],
    small: [usize; 3],
    offset: [usize; 3],
    channels: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let [bd, bh, bw] = big;
    let [sd, sh, sw] = small;
    for c in 0..channels {
        for z in 0..sd {
            for y in 0..sh {
                let b = ((c * bd + z + offset[0]) * bh + y + offset[1]) * bw + offset[2];
                let s = ((c * sd + z) * sh + y) * sw;
                f(b, s, sw);
            }
        }
    }
}

pub fn crop_center_forward<T: Scalar>(x: &Tensor<T>, target: [usize; 3]) -> Result<Tensor<T>> {
    let (c, dims) = x.dims4()?;
    let off = crop_margins(dims, target)?;
    if off == [0, 0, 0] {
        return Ok(x.clone());
    }
    let mut out = vec![T::zero(); c * target.iter().product::<usize>()];
    let src = x.data();
    for_each_row(dims, target, off, c, |b, s, n| {
        out[s..s + n].copy_from_slice(&src[b..b + n])
    });
    Tensor::from_vec(&[c, target[0], target[1], target[2]], out)
}

struct CropRule {
    target: [usize; 3],
    offset: [usize; 3],
}

impl<T: Scalar> Backward<T> for CropRule {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (c, dims) = inputs[0].dims4()?;
        let mut dx = vec![T::zero(); inputs[0].numel()];
        let g = grad.data();
        for_each_row(dims, self.target, self.offset, c, |b, s, n| {
            dx[b..b + n].copy_from_slice(&g[s..s + n])
        });
        Ok(vec![Some(Tensor::from_vec(inputs[0].shape(), dx)?)])
    }

    fn name(&self) -> &'static str {
        "crop_center"
    }
}

fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, da) = a.dims4()?;
    let (cb, db) = b.dims4()?;
    if da != db {
        return Err(Error::Shape(format!(
            "concatenation needs equal spatial extents, got {da:?} and {db:?}"
        )));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(&[ca + cb, da[0], da[1], da[2]], data)
}

struct ConcatRule {
    split: usize,
}

impl<T: Scalar> Backward<T> for ConcatRule {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (head, tail) = grad.data().split_at(self.split);
        Ok(vec![
            needs[0]
                .then(|| Tensor::from_vec(inputs[0].shape(), head.to_vec()))
                .transpose()?,
            needs[1]
                .then(|| Tensor::from_vec(inputs[1].shape(), tail.to_vec()))
                .transpose()?,
        ])
    }

    fn name(&self) -> &'static str {
        "concat_features"
    }
}

impl<T: Scalar> Tape<T> {
    /// Extracts the central `target` window; margins must be even per axis.
    pub fn crop_center(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        self.check(&[x])?;
        let (_, dims) = self.value(x).dims4()?;
        if dims == target {
            return Ok(x);
        }
        let offset = crop_margins(dims, target)?;
        let out = crop_center_forward(self.value(x), target)?;
        self.record(&[x], out, CropRule { target, offset })
    }

    /// Stacks `b`'s features after `a`'s.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let out = concat_forward(self.value(a), self.value(b))?;
        let split = self.value(a).numel();
        self.record(&[a, b], out, ConcatRule { split })
    }
}
