//! Synthetic CT-like phantoms with known lesion masks, and the volume file
//! format.

mod dataset;
mod generate;
mod volume;

pub use dataset::{
    generate_dataset, Case, DatasetManifest, ManifestEntry, Split, SplitFractions, MANIFEST_FILE,
};
pub use generate::{generate_indexed, generate_phantom, PhantomSpec};
pub use volume::{raw_path, LabelVolume, Volume, AXIS_ORDER, DEFAULT_SPACING, FRONTAL_AXIS};
