//! Volume grids and their on-disk format: a JSON sidecar plus a raw
//! little-endian buffer, depth (longitudinal) major.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_core::{Scalar, Tensor};

/// Axis names in storage order.
pub const AXIS_ORDER: [&str; 3] = ["longitudinal", "sagittal", "frontal"];

/// Index of the left-right axis along which augmentation mirrors.
pub const FRONTAL_AXIS: usize = 2;

/// Millimetres per voxel, `[depth, height, width]`.
pub const DEFAULT_SPACING: [f64; 3] = [1.0, 0.46, 0.46];

/// CT-like intensity grid in Hounsfield units.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

/// Binary lesion mask aligned to a [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<u8>,
}

fn check_grid(dims: [usize; 3], spacing: [f64; 3], len: usize) -> Result<()> {
    if dims.iter().product::<usize>() != len {
        return Err(Error::Contract(format!(
            "grid {dims:?} needs {} elements, got {len}",
            dims.iter().product::<usize>()
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Contract(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn linear(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite intensity at element {i}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[linear(self.dims, z, y, x)]
    }

    /// `(1, D, H, W)` tensor of the raw intensities.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64))
            .collect();
        Tensor::from_vec(&[1, self.dims[0], self.dims[1], self.dims[2]], data)
            .expect("dims match data")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut raw = Vec::with_capacity(self.data.len() * 4);
        self.data
            .iter()
            .for_each(|v| raw.extend_from_slice(&v.to_le_bytes()));
        write_pair(path.as_ref(), self.dims, self.spacing, "float32", &raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, raw) = read_pair(path.as_ref(), "float32", 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(h.dims, h.spacing, data).map_err(|e| Error::Format(e.to_string()))
    }
}

impl LabelVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::Contract(format!("label element {i} is not 0 or 1")));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn empty(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self {
            dims,
            spacing,
            data: vec![0; dims.iter().product()],
        }
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[linear(self.dims, z, y, x)] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .data
            .iter()
            .map(|&v| T::from_f64_lossy(v as f64))
            .collect();
        Tensor::from_vec(&[1, self.dims[0], self.dims[1], self.dims[2]], data)
            .expect("dims match data")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pair(path.as_ref(), self.dims, self.spacing, "uint8", &self.data)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, raw) = read_pair(path.as_ref(), "uint8", 1)?;
        Self::new(h.dims, h.spacing, raw).map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    axis_order: [String; 3],
    elements: usize,
    raw: String,
}

/// Raw buffer path belonging to the sidecar at `path`.
pub fn raw_path(path: &Path) -> PathBuf {
    path.with_extension("raw")
}

fn write_pair(
    path: &Path,
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: &str,
    raw: &[u8],
) -> Result<()> {
    let raw_file = raw_path(path);
    let header = Sidecar {
        dims,
        spacing,
        dtype: dtype.into(),
        axis_order: AXIS_ORDER.map(String::from),
        elements: dims.iter().product(),
        raw: raw_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let mut text = serde_json::to_string_pretty(&header)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    std::fs::write(&raw_file, raw).map_err(|e| Error::io(&raw_file, e))
}

fn read_pair(path: &Path, dtype: &str, width: usize) -> Result<(Sidecar, Vec<u8>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let h: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if h.dtype != dtype {
        return Err(Error::Format(format!(
            "{}: dtype '{}' where '{dtype}' was expected",
            path.display(),
            h.dtype
        )));
    }
    if h.elements != h.dims.iter().product::<usize>() {
        return Err(Error::Format(format!(
            "{}: {} elements declared for dims {:?}",
            path.display(),
            h.elements,
            h.dims
        )));
    }
    let raw_file = path.with_file_name(&h.raw);
    let raw = std::fs::read(&raw_file).map_err(|e| Error::io(&raw_file, e))?;
    let expected = h.elements * width;
    if raw.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            raw_file.display(),
            raw.len()
        )));
    }
    Ok((h, raw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new(
            [2, 2, 2],
            DEFAULT_SPACING,
            (0..8).map(|i| i as f32 * 1.5 - 3.0).collect(),
        )
        .unwrap();
        let p = dir.path().join("v.json");
        v.save(&p).unwrap();
        assert_eq!(std::fs::metadata(raw_path(&p)).unwrap().len(), 32);
        assert_eq!(Volume::load(&p).unwrap(), v);

        let l = LabelVolume::new([2, 2, 2], DEFAULT_SPACING, vec![0, 1, 0, 0, 1, 1, 0, 0]).unwrap();
        let q = dir.path().join("l.json");
        l.save(&q).unwrap();
        assert_eq!(LabelVolume::load(&q).unwrap(), l);
    }

    #[test]
    fn truncated_raw_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new([2, 2, 2], DEFAULT_SPACING, vec![0.0; 8]).unwrap();
        let p = dir.path().join("v.json");
        v.save(&p).unwrap();
        std::fs::write(raw_path(&p), [0u8; 30]).unwrap();
        let err = Volume::load(&p).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        let msg = err.to_string();
        assert!(msg.contains("32") && msg.contains("30"), "{msg}");
    }

    #[test]
    fn unknown_dtype_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume::new([1, 1, 2], DEFAULT_SPACING, vec![0.0; 2]).unwrap();
        let p = dir.path().join("v.json");
        v.save(&p).unwrap();
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace("float32", "float16");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(Volume::load(&p).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(Volume::new([1, 1, 2], DEFAULT_SPACING, vec![0.0]).is_err());
        assert!(Volume::new([1, 1, 1], [1.0, 0.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new([1, 1, 1], DEFAULT_SPACING, vec![f32::NAN]).is_err());
        assert!(LabelVolume::new([1, 1, 1], DEFAULT_SPACING, vec![2]).is_err());
    }
}
