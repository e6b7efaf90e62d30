//! Valid (unpadded) strided 3D cross-correlation.
//!
//! The kernel is lowered to a matrix product per chunk of output depth
//! slices: the receptive windows of the chunk are unfolded into a column
//! matrix of shape `(C*kd*kh*kw, slices*H'*W')`, multiplied by the weight
//! matrix `(K, C*kd*kh*kw)`, and written straight into the output planes.
//! Chunks are processed in order so every reduction is deterministic.

use crate::error::{Error, Result};
use crate::tensor_core::{Backward, Scalar, Tape, Tensor, Var};

/// Upper bound on unfolded column elements held at once.
const COL_BUDGET: usize = 1 << 21;

/// Weights, optional bias and stride of one convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    /// `(K, C, kd, kh, kw)`.
    pub weights: Tensor<T>,
    /// `(K,)`; only present where no batch normalization follows.
    pub bias: Option<Tensor<T>>,
    pub stride: [usize; 3],
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    input: [usize; 3],
    kernels: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    output: [usize; 3],
}

const AXES: [&str; 3] = ["depth", "height", "width"];

/// Output extent of a valid convolution along one axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    (input >= kernel && kernel >= 1 && stride >= 1).then(|| (input - kernel) / stride + 1)
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], stride: [usize; 3]) -> Result<Self> {
        let [c, d, h, wd] = *x else {
            return Err(Error::Contract(format!(
                "conv3d input must be (C, D, H, W), got {x:?}"
            )));
        };
        let [k, wc, kd, kh, kw] = *w else {
            return Err(Error::Contract(format!(
                "conv3d weights must be (K, C, kd, kh, kw), got {w:?}"
            )));
        };
        if wc != c {
            return Err(Error::Contract(format!(
                "conv3d input has {c} features but kernel expects {wc}"
            )));
        }
        if stride.iter().any(|&s| s == 0) || [kd, kh, kw].iter().any(|&s| s == 0) {
            return Err(Error::Contract(format!(
                "conv3d kernel {:?} and stride {stride:?} must be >= 1",
                [kd, kh, kw]
            )));
        }
        let input = [d, h, wd];
        let kernel = [kd, kh, kw];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output_extent(input[a], kernel[a], stride[a]).ok_or_else(|| {
                Error::Shape(format!(
                    "{} axis: input extent {} is smaller than kernel extent {}",
                    AXES[a], input[a], kernel[a]
                ))
            })?;
        }
        Ok(Self {
            channels: c,
            input,
            kernels: k,
            kernel,
            stride,
            output,
        })
    }

    fn taps(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    /// Output depth slices per chunk.
    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.taps() * self.plane()).max(1)).clamp(1, self.output[0])
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }
}

/// Unfolds output slices `z0..z0+nz` into `col` (`taps x nz*plane`).
fn im2col<T: Scalar>(g: &Geometry, x: &[T], z0: usize, nz: usize, col: &mut [T]) {
    let [_, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [_, oh, ow] = g.output;
    let plane = oh * ow;
    let cols = nz * plane;
    let mut r = 0;
    for c in 0..g.channels {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &mut col[r * cols..(r + 1) * cols];
                    for dz in 0..nz {
                        let zi = (z0 + dz) * sd + a;
                        let base = (c * g.input[0] + zi) * ih * iw;
                        for y in 0..oh {
                            let src = base + (y * sh + b) * iw + e;
                            let dst = &mut row[dz * plane + y * ow..dz * plane + (y + 1) * ow];
                            if sw == 1 {
                                dst.copy_from_slice(&x[src..src + ow]);
                            } else {
                                for (xo, d) in dst.iter_mut().enumerate() {
                                    *d = x[src + xo * sw];
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Adds `col` back into the input gradient; inverse scatter of [`im2col`].
fn col2im<T: Scalar>(g: &Geometry, col: &[T], z0: usize, nz: usize, dx: &mut [T]) {
    let [_, ih, iw] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [_, oh, ow] = g.output;
    let plane = oh * ow;
    let cols = nz * plane;
    let mut r = 0;
    for c in 0..g.channels {
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &col[r * cols..(r + 1) * cols];
                    for dz in 0..nz {
                        let zi = (z0 + dz) * sd + a;
                        let base = (c * g.input[0] + zi) * ih * iw;
                        for y in 0..oh {
                            let dst = base + (y * sh + b) * iw + e;
                            let src = &row[dz * plane + y * ow..dz * plane + (y + 1) * ow];
                            if sw == 1 {
                                for (d, &s) in dx[dst..dst + ow].iter_mut().zip(src) {
                                    *d = *d + s;
                                }
                            } else {
                                for (xo, &s) in src.iter().enumerate() {
                                    let d = &mut dx[dst + xo * sw];
                                    *d = *d + s;
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn forward_raw<T: Scalar>(g: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let out_len = g.out_len();
    let mut out = vec![T::zero(); g.kernels * out_len];
    let taps = g.taps();
    if g.is_pointwise() {
        // (K, C) x (C, DHW)
        unsafe {
            T::gemm(
                g.kernels,
                taps,
                out_len,
                T::one(),
                w.as_ptr(),
                taps as isize,
                1,
                x.as_ptr(),
                out_len as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                out_len as isize,
                1,
            );
        }
    } else {
        let plane = g.plane();
        let chunk = g.chunk();
        let mut col = vec![T::zero(); taps * chunk * plane];
        let mut z0 = 0;
        while z0 < g.output[0] {
            let nz = chunk.min(g.output[0] - z0);
            let cols = nz * plane;
            im2col(g, x, z0, nz, &mut col[..taps * cols]);
            unsafe {
                T::gemm(
                    g.kernels,
                    taps,
                    cols,
                    T::one(),
                    w.as_ptr(),
                    taps as isize,
                    1,
                    col.as_ptr(),
                    cols as isize,
                    1,
                    T::zero(),
                    out.as_mut_ptr().add(z0 * plane),
                    out_len as isize,
                    1,
                );
            }
            z0 += nz;
        }
    }
    if let Some(b) = bias {
        for (k, &bk) in b.iter().enumerate() {
            for v in &mut out[k * out_len..(k + 1) * out_len] {
                *v = *v + bk;
            }
        }
    }
    out
}

/// Returns `(dx, dw)`, each only when requested.
fn backward_raw<T: Scalar>(
    g: &Geometry,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let taps = g.taps();
    let out_len = g.out_len();
    let mut dx = need_dx.then(|| vec![T::zero(); g.channels * g.in_len()]);
    let mut dw = need_dw.then(|| vec![T::zero(); g.kernels * taps]);

    if g.is_pointwise() {
        if let Some(dx) = dx.as_mut() {
            // (C, K) x (K, DHW)
            unsafe {
                T::gemm(
                    taps,
                    g.kernels,
                    out_len,
                    T::one(),
                    w.as_ptr(),
                    1,
                    taps as isize,
                    dy.as_ptr(),
                    out_len as isize,
                    1,
                    T::zero(),
                    dx.as_mut_ptr(),
                    out_len as isize,
                    1,
                );
            }
        }
        if let Some(dw) = dw.as_mut() {
            // (K, DHW) x (DHW, C)
            unsafe {
                T::gemm(
                    g.kernels,
                    out_len,
                    taps,
                    T::one(),
                    dy.as_ptr(),
                    out_len as isize,
                    1,
                    x.as_ptr(),
                    1,
                    out_len as isize,
                    T::zero(),
                    dw.as_mut_ptr(),
                    taps as isize,
                    1,
                );
            }
        }
        return (dx, dw);
    }

    let plane = g.plane();
    let chunk = g.chunk();
    let mut col = vec![T::zero(); taps * chunk * plane];
    let mut z0 = 0;
    while z0 < g.output[0] {
        let nz = chunk.min(g.output[0] - z0);
        let cols = nz * plane;
        let col = &mut col[..taps * cols];
        let dy_chunk = unsafe { dy.as_ptr().add(z0 * plane) };
        if let Some(dw) = dw.as_mut() {
            im2col(g, x, z0, nz, col);
            // dW (K x taps) += dY (K x cols) . col^T (cols x taps)
            unsafe {
                T::gemm(
                    g.kernels,
                    cols,
                    taps,
                    T::one(),
                    dy_chunk,
                    out_len as isize,
                    1,
                    col.as_ptr(),
                    1,
                    cols as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    taps as isize,
                    1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcol (taps x cols) = W^T (taps x K) . dY (K x cols)
            unsafe {
                T::gemm(
                    taps,
                    g.kernels,
                    cols,
                    T::one(),
                    w.as_ptr(),
                    1,
                    taps as isize,
                    dy_chunk,
                    out_len as isize,
                    1,
                    T::zero(),
                    col.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            col2im(g, col, z0, nz, dx);
        }
        z0 += nz;
    }
    (dx, dw)
}

/// Plain forward convolution, no tape.
pub fn conv3d_forward<T: Scalar>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let g = Geometry::new(x.shape(), weights.shape(), stride)?;
    if let Some(b) = bias {
        if b.shape() != [g.kernels] {
            return Err(Error::Contract(format!(
                "bias shape {:?} does not match {} kernels",
                b.shape(),
                g.kernels
            )));
        }
    }
    let out = forward_raw(&g, x.data(), weights.data(), bias.map(|b| b.data()));
    let [d, h, w] = g.output;
    Tensor::from_vec(&[g.kernels, d, h, w], out)
}

struct ConvRule {
    geometry: Geometry,
    has_bias: bool,
}

impl<T: Scalar> Backward<T> for ConvRule {
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = &self.geometry;
        let (dx, dw) = backward_raw(
            g,
            inputs[0].data(),
            inputs[1].data(),
            grad.data(),
            needs[0],
            needs[1],
        );
        let mut out = vec![
            dx.map(|d| Tensor::from_vec(inputs[0].shape(), d))
                .transpose()?,
            dw.map(|d| Tensor::from_vec(inputs[1].shape(), d))
                .transpose()?,
        ];
        if self.has_bias {
            let db = needs[2].then(|| {
                let n = g.out_len();
                let data = grad
                    .data()
                    .chunks(n)
                    .map(|c| c.iter().copied().sum())
                    .collect();
                Tensor::from_vec(&[g.kernels], data)
            });
            out.push(db.transpose()?);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "conv3d_valid"
    }
}

impl<T: Scalar> Tape<T> {
    /// Valid cross-correlation of `x (C,D,H,W)` with `weights (K,C,kd,kh,kw)`.
    pub fn conv3d_valid(
        &mut self,
        x: Var,
        weights: Var,
        bias: Option<Var>,
        stride: [usize; 3],
    ) -> Result<Var> {
        self.check(&[x, weights])?;
        if let Some(b) = bias {
            self.check(&[b])?;
        }
        let g = Geometry::new(self.value(x).shape(), self.value(weights).shape(), stride)?;
        let out = conv3d_forward(
            self.value(x),
            self.value(weights),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        let rule = ConvRule {
            geometry: g,
            has_bias: bias.is_some(),
        };
        match bias {
            Some(b) => self.record(&[x, weights, b], out, rule),
            None => self.record(&[x, weights], out, rule),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_cube_counts_taps() {
        let x = Tensor::<f32>::ones(&[1, 3, 3, 3]);
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3, 3]);
        let y = conv3d_forward(&x, &w, None, [1, 1, 1]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let x =
            Tensor::<f32>::from_vec(&[1, 2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        let w = Tensor::<f32>::ones(&[1, 1, 1, 1, 1]);
        let y = conv3d_forward(&x, &w, None, [1, 1, 1]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn too_small_input_names_axis() {
        let x = Tensor::<f32>::ones(&[1, 4, 2, 4]);
        let w = Tensor::<f32>::ones(&[1, 1, 3, 3, 3]);
        let err = conv3d_forward(&x, &w, None, [1, 1, 1]).unwrap_err();
        assert!(
            matches!(err, Error::Shape(ref m) if m.contains("height")),
            "{err}"
        );
    }

    #[test]
    fn output_extent_formula() {
        assert_eq!(conv_output_extent(10, 3, 1), Some(8));
        assert_eq!(conv_output_extent(10, 3, 2), Some(4));
        assert_eq!(conv_output_extent(9, 2, 2), Some(4));
        assert_eq!(conv_output_extent(2, 3, 1), None);
    }

    #[test]
    fn bias_is_added_per_kernel() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let w = Tensor::<f64>::zeros(&[2, 1, 1, 1, 1]);
        let b = Tensor::from_vec(&[2], vec![1.5, -2.0]).unwrap();
        let y = conv3d_forward(&x, &w, Some(&b), [1, 1, 1]).unwrap();
        assert_eq!(&y.data()[..8], &[1.5; 8]);
        assert_eq!(&y.data()[8..], &[-2.0; 8]);
    }
}
