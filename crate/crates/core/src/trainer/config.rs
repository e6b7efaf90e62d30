//! Training configuration document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{receptive_field, NetworkConfig};
use crate::objective::{ScheduleSet, CALCIFICATION_HU};

/// Default patch extent, `[depth, height, width]`.
pub const DEFAULT_PATCH: [usize; 3] = [98, 178, 178];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// `"reference"`, `"compact"` or a path to a network document, resolved
    /// relative to the training config.
    pub network: String,
    pub patch_size: [usize; 3],
    /// Tile extent for validation passes; defaults to `patch_size`.
    pub eval_patch_size: Option<[usize; 3]>,
    pub epochs: usize,
    pub seed: u64,
    pub schedules: ScheduleSet,
    pub deterministic: bool,
    /// Random frontal-axis mirroring.
    pub augment: bool,
    /// Train the auxiliary heads with the decaying weight.
    pub deep_supervision: bool,
    /// Restrict the loss to voxels above `hu_threshold`.
    pub masked: bool,
    pub hu_threshold: f64,
    /// Training patches drawn per volume in each epoch.
    pub patches_per_volume: usize,
    /// Dataset manifest; relative paths resolve against the config.
    pub dataset: PathBuf,
    /// Where checkpoints and the epoch log go.
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: "reference".into(),
            patch_size: DEFAULT_PATCH,
            eval_patch_size: None,
            epochs: 50,
            seed: 0,
            schedules: ScheduleSet::default(),
            deterministic: true,
            augment: true,
            deep_supervision: true,
            masked: true,
            hu_threshold: CALCIFICATION_HU,
            patches_per_volume: 1,
            dataset: PathBuf::from("manifest.csv"),
            output_dir: PathBuf::from("run"),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads the document and resolves its relative paths against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.output_dir = base.join(&cfg.output_dir);
        if !matches!(cfg.network.as_str(), "reference" | "compact") {
            cfg.network = base.join(&cfg.network).to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn network_config(&self) -> Result<NetworkConfig> {
        match self.network.as_str() {
            "reference" => Ok(NetworkConfig::reference()),
            "compact" => Ok(NetworkConfig::compact()),
            path => NetworkConfig::load(path),
        }
    }

    /// Field-level checks plus the patch-versus-receptive-field constraint.
    pub fn validate(&self, net: &NetworkConfig) -> Result<()> {
        self.schedules.validate()?;
        if self.patches_per_volume == 0 {
            return Err(Error::Config("patches_per_volume must be >= 1".into()));
        }
        if !self.hu_threshold.is_finite() {
            return Err(Error::Config("hu_threshold must be finite".into()));
        }
        let rf = receptive_field(net)?.as_array();
        let sizes = [
            ("patch_size", Some(self.patch_size)),
            ("eval_patch_size", self.eval_patch_size),
        ];
        for (name, size) in sizes {
            if let Some(size) = size.filter(|s| (0..3).any(|a| s[a] < rf[a])) {
                return Err(Error::Config(format!(
                    "{name} {size:?} is smaller than the receptive field {rf:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn eval_patch(&self) -> [usize; 3] {
        self.eval_patch_size.unwrap_or(self.patch_size)
    }
}
