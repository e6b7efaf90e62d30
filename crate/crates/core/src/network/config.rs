//! Declarative network description, loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::DropoutVariant;

/// Number of auxiliary classifiers every configuration must declare.
pub const AUX_HEADS: usize = 6;

/// Identifier of the network input in `input` references.
pub const INPUT_ID: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Plain,
    Residual,
}

/// Where a block's single dropout layer sits. A dropout never feeds a
/// normalization layer directly, so the positions are after each
/// BN-ReLU pair and after the second convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPosition {
    PreConv1,
    PreConv2,
    PreAdd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub position: DropoutPosition,
    pub p: f64,
    #[serde(default)]
    pub variant: DropoutVariant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub features: usize,
    pub kernel: [usize; 3],
    #[serde(default = "unit")]
    pub stride: [usize; 3],
}

fn unit() -> [usize; 3] {
    [1, 1, 1]
}

/// Two pre-activation convolutions (BN, ReLU, conv, twice), optionally
/// added to the center-cropped block input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub convs: Vec<ConvLayerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<DropoutSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNode {
    pub input: String,
    pub features: usize,
    pub kernel: [usize; 3],
    #[serde(default = "unit")]
    pub stride: [usize; 3],
    /// Precede the convolution with BN and ReLU.
    #[serde(default)]
    pub preact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockNode {
    pub input: String,
    #[serde(flatten)]
    pub block: BlockSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpsampleNode {
    pub input: String,
    pub factor: [usize; 3],
}

/// Feature concatenation; the larger operand is center-cropped first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcatNode {
    pub inputs: [String; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum NodeOp {
    Conv(ConvNode),
    Block(BlockNode),
    Upsample(UpsampleNode),
    Concat(ConcatNode),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    #[serde(flatten)]
    pub op: NodeOp,
}

/// Layer graph in topological order plus the classifier attachment points.
///
/// Spatial triples are `[depth, height, width]`, depth being the
/// longitudinal axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub name: String,
    #[serde(default = "one")]
    pub input_features: usize,
    /// Multiplier applied to raw intensities before the first layer.
    #[serde(default = "default_intensity_scale")]
    pub intensity_scale: f64,
    pub nodes: Vec<NodeSpec>,
    /// Nodes carrying an auxiliary classifier.
    pub aux_heads: Vec<String>,
    /// Node carrying the final classifier.
    pub output: String,
}

fn one() -> usize {
    1
}

fn default_intensity_scale() -> f64 {
    1e-3
}

impl NetworkConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("network config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// The configuration shipped with the crate: 8 blocks, 24 weighted
    /// layers on the main path, receptive field 85 x 85 x 37.
    pub fn reference() -> Self {
        Self::from_json(include_str!("../../configs/reference.json"))
            .expect("bundled reference config is valid")
    }

    /// Small-receptive-field configuration used for desk-scale training.
    pub fn compact() -> Self {
        Self::from_json(include_str!("../../configs/compact.json"))
            .expect("bundled compact config is valid")
    }

    /// Checks every structural invariant, naming the offending node.
    pub fn validate(&self) -> Result<()> {
        super::plan::Plan::compile(self).map(|_| ())
    }

    pub fn blocks(&self) -> impl Iterator<Item = (&str, &BlockSpec)> {
        self.nodes.iter().filter_map(|n| match &n.op {
            NodeOp::Block(b) => Some((n.id.as_str(), &b.block)),
            _ => None,
        })
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut BlockSpec> {
        self.nodes.iter_mut().filter_map(|n| match &mut n.op {
            NodeOp::Block(b) => Some(&mut b.block),
            _ => None,
        })
    }

    /// Copy with every block switched to `kind`.
    pub fn with_block_kind(&self, kind: BlockKind) -> Self {
        let mut c = self.clone();
        c.blocks_mut().for_each(|b| b.kind = kind);
        c
    }

    /// Copy with the dropout of every block removed.
    pub fn without_dropout(&self) -> Self {
        let mut c = self.clone();
        c.blocks_mut().for_each(|b| b.dropout = None);
        c
    }

    /// Copy with dropout in the last `probs.len()` blocks at `position`.
    pub fn with_trailing_dropout(
        &self,
        probs: &[f64],
        position: DropoutPosition,
        variant: DropoutVariant,
    ) -> Self {
        let mut c = self.without_dropout();
        let n = c.blocks().count();
        let skip = n.saturating_sub(probs.len());
        for (b, &p) in c.blocks_mut().skip(skip).zip(probs) {
            b.dropout = Some(DropoutSpec {
                position,
                p,
                variant,
            });
        }
        c
    }
}

/// Dropout probabilities of blocks 4-8 in the reference setting.
pub const REFERENCE_DROPOUT: [f64; 5] = [0.3, 0.3, 0.4, 0.4, 0.5];
