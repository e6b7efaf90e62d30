//! Random training patches and mirror augmentation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::inference_eval::extract;
use crate::network::Network;
use crate::phantom::{LabelVolume, Volume};
use crate::tensor_core::{Scalar, Tensor};

/// Input patch extent and where the network output sits inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub size: [usize; 3],
    pub output: [usize; 3],
    pub offset: [usize; 3],
}

impl PatchGeometry {
    pub fn new<T: Scalar>(net: &Network<T>, size: [usize; 3]) -> Result<Self> {
        let output = net.output_shape(size)?;
        Ok(Self {
            size,
            output,
            offset: [0, 1, 2].map(|a| (size[a] - output[a]) / 2),
        })
    }
}

/// One training example. Labels and intensities cover the output grid only.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample<T> {
    pub corner: [usize; 3],
    /// `(1, D, H, W)` raw intensities.
    pub input: Tensor<T>,
    pub labels: Tensor<T>,
    pub intensity: Tensor<T>,
}

/// Uniform corner draw, one integer per axis.
pub fn sample_corner<R: Rng + ?Sized>(
    dims: [usize; 3],
    size: [usize; 3],
    rng: &mut R,
) -> Result<[usize; 3]> {
    if (0..3).any(|a| size[a] > dims[a] || size[a] == 0) {
        return Err(Error::Contract(format!(
            "patch {size:?} does not fit volume {dims:?}"
        )));
    }
    Ok([0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - size[a])))
}

pub fn sample_patch<T: Scalar, R: Rng + ?Sized>(
    vol: &Volume,
    labels: &LabelVolume,
    geom: &PatchGeometry,
    rng: &mut R,
) -> Result<PatchSample<T>> {
    if vol.dims != labels.dims {
        return Err(Error::Contract(format!(
            "volume {:?} and labels {:?} differ in size",
            vol.dims, labels.dims
        )));
    }
    let corner = sample_corner(vol.dims, geom.size, rng)?;
    Ok(patch_at(vol, labels, geom, corner))
}

/// The patch whose input starts at `corner`.
pub fn patch_at<T: Scalar>(
    vol: &Volume,
    labels: &LabelVolume,
    geom: &PatchGeometry,
    corner: [usize; 3],
) -> PatchSample<T> {
    let out_at = [0, 1, 2].map(|a| corner[a] + geom.offset[a]);
    let label_f: Vec<f32> = labels.data.iter().map(|&v| v as f32).collect();
    PatchSample {
        corner,
        input: extract(&vol.data, vol.dims, corner, geom.size),
        labels: extract(&label_f, vol.dims, out_at, geom.output),
        intensity: extract(&vol.data, vol.dims, out_at, geom.output),
    }
}

/// Mirrors a `(C, D, H, W)` tensor along its last (frontal) axis.
pub fn flip_frontal<T: Scalar>(t: &mut Tensor<T>) {
    let w = *t.shape().last().expect("rank >= 1");
    if w == 0 {
        return;
    }
    t.data_mut()
        .chunks_exact_mut(w)
        .for_each(|row| row.reverse());
}

/// With probability 0.5 mirrors input, labels and intensities together.
/// Returns whether the flip happened.
pub fn augment_flip<T: Scalar, R: Rng + ?Sized>(sample: &mut PatchSample<T>, rng: &mut R) -> bool {
    let flip = rng.gen_bool(0.5);
    if flip {
        flip_frontal(&mut sample.input);
        flip_frontal(&mut sample.labels);
        flip_frontal(&mut sample.intensity);
    }
    flip
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_maps_index_to_mirror() {
        let mut t = Tensor::from_vec(&[1, 1, 2, 3], vec![0.0f32, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        flip_frontal(&mut t);
        assert_eq!(t.data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        flip_frontal(&mut t);
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn oversize_patch_is_rejected() {
        let mut rng = rand::thread_rng();
        assert!(sample_corner([4, 4, 4], [5, 4, 4], &mut rng).is_err());
        assert_eq!(
            sample_corner([4, 4, 4], [4, 4, 4], &mut rng).unwrap(),
            [0, 0, 0]
        );
    }
}
