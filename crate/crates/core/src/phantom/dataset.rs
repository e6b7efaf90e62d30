//! Phantom datasets on disk, indexed by a CSV manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::generate::{generate_indexed, PhantomSpec};
use crate::phantom::volume::{LabelVolume, Volume};

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    /// Sidecar paths, relative to the manifest's directory.
    pub volume: PathBuf,
    pub label: PathBuf,
}

/// Fractions of a dataset assigned to validation and test; the rest trains.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            val: 1.0 / 6.0,
            test: 1.0 / 6.0,
        }
    }
}

impl SplitFractions {
    /// `(train, val, test)` counts for `n` items.
    pub fn counts(&self, n: usize) -> Result<(usize, usize, usize)> {
        if !(self.val >= 0.0 && self.test >= 0.0 && self.val + self.test <= 1.0) {
            return Err(Error::Config(format!(
                "split fractions val={} test={} must be non-negative and sum to at most 1",
                self.val, self.test
            )));
        }
        let val = ((n as f64 * self.val).round() as usize).min(n);
        let test = ((n as f64 * self.test).round() as usize).min(n - val);
        Ok((n - val - test, val, test))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()
            .map_err(|e| csv_error(path, e))?;
        Ok(Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        w.write_record(["id", "split", "volume", "label"])
            .map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            w.serialize(e).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(Volume, LabelVolume)> {
        let v = Volume::load(self.root.join(&entry.volume))?;
        let l = LabelVolume::load(self.root.join(&entry.label))?;
        if v.dims != l.dims {
            return Err(Error::Format(format!(
                "'{}': volume {:?} and label {:?} differ in size",
                entry.id, v.dims, l.dims
            )));
        }
        Ok((v, l))
    }

    /// Loads every pair of one split.
    pub fn load_split(&self, split: Split) -> Result<Vec<Case>> {
        self.split(split)
            .map(|e| {
                let (volume, label) = self.load_pair(e)?;
                Ok(Case {
                    id: e.id.clone(),
                    volume,
                    label,
                })
            })
            .collect()
    }
}

/// One volume with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub volume: Volume,
    pub label: LabelVolume,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let msg = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        _ => Error::Format(format!("{}: {msg}", path.display())),
    }
}

/// Writes `count` phantoms (phantom `i` from stream `i` of `spec.seed`) and
/// their manifest into `dir`. The first phantoms train, then validation,
/// then test.
pub fn generate_dataset(
    spec: &PhantomSpec,
    count: usize,
    fractions: SplitFractions,
    dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    spec.validate()?;
    let (train, val, _) = fractions.counts(count)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("case_{i:04}");
        let (v, l) = generate_indexed(spec, i as u64)?;
        let volume = PathBuf::from(format!("{id}.json"));
        let label = PathBuf::from(format!("{id}_label.json"));
        v.save(dir.join(&volume))?;
        l.save(dir.join(&label))?;
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(ManifestEntry {
            id,
            split,
            volume,
            label,
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        entries,
    };
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
