//! Resolution of a [`NetworkConfig`] into indexed layers, parameter slots and
//! the receptive-field / output-shape arithmetic.

use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::conv_output_extent;
use crate::network::config::{BlockKind, DropoutSpec, NetworkConfig, NodeOp, AUX_HEADS, INPUT_ID};

/// Per-axis receptive field of the final output, in input voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ReceptiveField {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl ReceptiveField {
    pub fn as_array(&self) -> [usize; 3] {
        [self.depth, self.height, self.width]
    }
}

impl fmt::Display for ReceptiveField {
    /// In-plane axes first, longitudinal last.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.height, self.width, self.depth)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BnRef {
    pub gamma: usize,
    pub beta: usize,
    pub state: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvRef {
    pub weight: usize,
    pub stride: [usize; 3],
}

#[derive(Clone, Debug)]
pub(crate) enum PlanOp {
    Conv {
        input: usize,
        bn: Option<BnRef>,
        conv: ConvRef,
    },
    Block {
        input: usize,
        kind: BlockKind,
        bn1: BnRef,
        conv1: ConvRef,
        bn2: BnRef,
        conv2: ConvRef,
        dropout: Option<DropoutSpec>,
    },
    Upsample {
        input: usize,
        factor: [usize; 3],
    },
    Concat {
        a: usize,
        b: usize,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct PlanNode {
    pub id: String,
    pub op: PlanOp,
}

/// BN, ReLU, 1x1x1 conv with bias; aux heads are then upsampled by the
/// source jump and cropped onto the final output grid.
#[derive(Clone, Debug)]
pub(crate) struct HeadPlan {
    pub source: usize,
    pub bn: BnRef,
    pub weight: usize,
    pub bias: usize,
    pub upsample: [usize; 3],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamInit {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal {
        fan_in: usize,
    },
    Ones,
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

#[derive(Clone, Debug)]
pub(crate) struct Plan {
    /// Slot `i + 1` holds node `i`; slot 0 is the input.
    pub nodes: Vec<PlanNode>,
    pub aux: Vec<HeadPlan>,
    pub main: HeadPlan,
    pub params: Vec<ParamSpec>,
    /// Feature count of every normalization layer, in declaration order.
    pub bn_features: Vec<usize>,
    /// Receptive field and jump of every slot.
    pub rf: Vec<[usize; 3]>,
    pub jump: Vec<[usize; 3]>,
}

struct Builder {
    params: Vec<ParamSpec>,
    bn_features: Vec<usize>,
}

impl Builder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: ParamInit) -> usize {
        self.params.push(ParamSpec { name, shape, init });
        self.params.len() - 1
    }

    fn bn(&mut self, prefix: &str, features: usize) -> BnRef {
        let gamma = self.param(format!("{prefix}.gamma"), vec![features], ParamInit::Ones);
        let beta = self.param(format!("{prefix}.beta"), vec![features], ParamInit::Zeros);
        self.bn_features.push(features);
        BnRef {
            gamma,
            beta,
            state: self.bn_features.len() - 1,
        }
    }

    fn conv(&mut self, prefix: &str, inf: usize, outf: usize, kernel: [usize; 3]) -> usize {
        let fan_in = inf * kernel.iter().product::<usize>();
        self.param(
            format!("{prefix}.weight"),
            vec![outf, inf, kernel[0], kernel[1], kernel[2]],
            ParamInit::HeNormal { fan_in },
        )
    }

    fn head(&mut self, prefix: &str, source: usize, features: usize, jump: [usize; 3]) -> HeadPlan {
        let bn = self.bn(&format!("{prefix}.bn"), features);
        let weight = self.conv(&format!("{prefix}.conv"), features, 1, [1, 1, 1]);
        let bias = self.param(format!("{prefix}.conv.bias"), vec![1], ParamInit::Zeros);
        HeadPlan {
            source,
            bn,
            weight,
            bias,
            upsample: jump,
        }
    }
}

fn positive(v: &[usize]) -> bool {
    v.iter().all(|&x| x >= 1)
}

impl Plan {
    pub fn compile(cfg: &NetworkConfig) -> Result<Self> {
        let bad = |id: &str, msg: String| Error::Config(format!("node '{id}': {msg}"));
        if cfg.input_features == 0 {
            return Err(Error::Config("input_features must be >= 1".into()));
        }
        if !(cfg.intensity_scale.is_finite() && cfg.intensity_scale > 0.0) {
            return Err(Error::Config("intensity_scale must be positive".into()));
        }

        let mut slots: Vec<&str> = vec![INPUT_ID];
        let mut features = vec![cfg.input_features];
        let mut rf = vec![[1usize; 3]];
        let mut jump = vec![[1usize; 3]];
        let mut b = Builder {
            params: Vec::new(),
            bn_features: Vec::new(),
        };
        let mut nodes = Vec::with_capacity(cfg.nodes.len());
        let mut seen = HashSet::new();

        for node in &cfg.nodes {
            let id = node.id.as_str();
            if id.is_empty() || id == INPUT_ID || !seen.insert(id) {
                return Err(bad(id, "identifier is empty, reserved or repeated".into()));
            }
            let lookup = |name: &str| -> Result<usize> {
                slots.iter().position(|s| *s == name).ok_or_else(|| {
                    bad(
                        id,
                        format!("references '{name}', which is not an earlier node"),
                    )
                })
            };
            let (op, feat, node_rf, node_jump) = match &node.op {
                NodeOp::Conv(c) => {
                    let input = lookup(&c.input)?;
                    if c.features == 0 || !positive(&c.kernel) || !positive(&c.stride) {
                        return Err(bad(id, "features, kernel and stride must be >= 1".into()));
                    }
                    let inf = features[input];
                    let bn = c.preact.then(|| b.bn(&format!("{id}.bn"), inf));
                    let weight = b.conv(&format!("{id}.conv"), inf, c.features, c.kernel);
                    let (mut r, mut j) = (rf[input], jump[input]);
                    for a in 0..3 {
                        r[a] += (c.kernel[a] - 1) * j[a];
                        j[a] *= c.stride[a];
                    }
                    let op = PlanOp::Conv {
                        input,
                        bn,
                        conv: ConvRef {
                            weight,
                            stride: c.stride,
                        },
                    };
                    (op, c.features, r, j)
                }
                NodeOp::Block(bn) => {
                    let input = lookup(&bn.input)?;
                    let spec = &bn.block;
                    if spec.convs.len() != 2 {
                        return Err(bad(
                            id,
                            format!(
                                "a block holds exactly 2 convolutions, got {}",
                                spec.convs.len()
                            ),
                        ));
                    }
                    for c in &spec.convs {
                        if c.features == 0 || !positive(&c.kernel) || !positive(&c.stride) {
                            return Err(bad(id, "features, kernel and stride must be >= 1".into()));
                        }
                    }
                    if let Some(d) = &spec.dropout {
                        if !(0.0..1.0).contains(&d.p) {
                            return Err(bad(
                                id,
                                format!("dropout probability {} not in [0, 1)", d.p),
                            ));
                        }
                    }
                    let inf = features[input];
                    let (c1, c2) = (spec.convs[0], spec.convs[1]);
                    if spec.kind == BlockKind::Residual {
                        if c2.features != inf {
                            return Err(bad(
                                id,
                                format!(
                                    "residual block must return its {inf} input features, got {}",
                                    c2.features
                                ),
                            ));
                        }
                        if c1.stride != [1, 1, 1] || c2.stride != [1, 1, 1] {
                            return Err(bad(
                                id,
                                "residual block convolutions must have stride 1".into(),
                            ));
                        }
                    }
                    let bn1 = b.bn(&format!("{id}.bn1"), inf);
                    let w1 = b.conv(&format!("{id}.conv1"), inf, c1.features, c1.kernel);
                    let bn2 = b.bn(&format!("{id}.bn2"), c1.features);
                    let w2 = b.conv(&format!("{id}.conv2"), c1.features, c2.features, c2.kernel);
                    let (mut r, mut j) = (rf[input], jump[input]);
                    for c in [c1, c2] {
                        for a in 0..3 {
                            r[a] += (c.kernel[a] - 1) * j[a];
                            j[a] *= c.stride[a];
                        }
                    }
                    let op = PlanOp::Block {
                        input,
                        kind: spec.kind,
                        bn1,
                        conv1: ConvRef {
                            weight: w1,
                            stride: c1.stride,
                        },
                        bn2,
                        conv2: ConvRef {
                            weight: w2,
                            stride: c2.stride,
                        },
                        dropout: spec.dropout,
                    };
                    (op, c2.features, r, j)
                }
                NodeOp::Upsample(u) => {
                    let input = lookup(&u.input)?;
                    if !positive(&u.factor) {
                        return Err(bad(id, "upsampling factors must be >= 1".into()));
                    }
                    let mut j = jump[input];
                    for a in 0..3 {
                        if j[a] % u.factor[a] != 0 {
                            return Err(bad(
                                id,
                                format!(
                                    "upsampling by {:?} exceeds the accumulated stride {:?} (non-integer jump)",
                                    u.factor, jump[input]
                                ),
                            ));
                        }
                        j[a] /= u.factor[a];
                    }
                    let op = PlanOp::Upsample {
                        input,
                        factor: u.factor,
                    };
                    (op, features[input], rf[input], j)
                }
                NodeOp::Concat(c) => {
                    let a = lookup(&c.inputs[0])?;
                    let bb = lookup(&c.inputs[1])?;
                    if jump[a] != jump[bb] {
                        return Err(bad(
                            id,
                            format!(
                                "operands sit on different grids (jumps {:?} and {:?})",
                                jump[a], jump[bb]
                            ),
                        ));
                    }
                    let mut r = [0; 3];
                    for ax in 0..3 {
                        r[ax] = rf[a][ax].max(rf[bb][ax]);
                    }
                    (
                        PlanOp::Concat { a, b: bb },
                        features[a] + features[bb],
                        r,
                        jump[a],
                    )
                }
            };
            nodes.push(PlanNode {
                id: id.to_string(),
                op,
            });
            slots.push(id);
            features.push(feat);
            rf.push(node_rf);
            jump.push(node_jump);
        }

        if cfg.aux_heads.len() != AUX_HEADS {
            return Err(Error::Config(format!(
                "exactly {AUX_HEADS} auxiliary heads are required, got {}",
                cfg.aux_heads.len()
            )));
        }
        let find = |name: &str, what: &str| -> Result<usize> {
            slots
                .iter()
                .position(|s| *s == name && *s != INPUT_ID)
                .ok_or_else(|| Error::Config(format!("{what} attaches to unknown node '{name}'")))
        };
        let main_src = find(&cfg.output, "final head")?;
        if jump[main_src] != [1, 1, 1] {
            return Err(Error::Config(format!(
                "final head node '{}' is not on the input grid (jump {:?})",
                cfg.output, jump[main_src]
            )));
        }
        let mut aux = Vec::with_capacity(AUX_HEADS);
        let mut aux_seen = HashSet::new();
        for (i, name) in cfg.aux_heads.iter().enumerate() {
            let src = find(name, "auxiliary head")?;
            if !aux_seen.insert(src) {
                return Err(Error::Config(format!(
                    "auxiliary head attached twice to '{name}'"
                )));
            }
            aux.push(b.head(&format!("aux{}", i + 1), src, features[src], jump[src]));
        }
        let main = b.head("head", main_src, features[main_src], [1, 1, 1]);

        Ok(Self {
            nodes,
            aux,
            main,
            params: b.params,
            bn_features: b.bn_features,
            rf,
            jump,
        })
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        let r = self.rf[self.main.source];
        ReceptiveField {
            depth: r[0],
            height: r[1],
            width: r[2],
        }
    }

    /// Spatial extent of every slot for an input of extent `input`, plus the
    /// final output extent. Verifies every crop is symmetric.
    pub fn spatial_shapes(&self, input: [usize; 3]) -> Result<(Vec<[usize; 3]>, [usize; 3])> {
        let rf = self.receptive_field().as_array();
        for a in 0..3 {
            if input[a] < rf[a] {
                return Err(Error::Shape(format!(
                    "input extent {input:?} is below the receptive field {rf:?} (minimum per axis)"
                )));
            }
        }
        let too_small = |id: &str| {
            Error::Shape(format!(
                "input extent {input:?} is too small: layer '{id}' has no valid output (receptive field {rf:?})"
            ))
        };
        let conv = |x: [usize; 3], k: [usize; 3], s: [usize; 3], id: &str| -> Result<[usize; 3]> {
            let mut o = [0; 3];
            for a in 0..3 {
                o[a] = conv_output_extent(x[a], k[a], s[a]).ok_or_else(|| too_small(id))?;
            }
            Ok(o)
        };
        let mut shapes = vec![input];
        for node in &self.nodes {
            let id = node.id.as_str();
            let out = match &node.op {
                PlanOp::Conv { input, conv: c, .. } => {
                    let k = self.kernel(c.weight);
                    conv(shapes[*input], k, c.stride, id)?
                }
                PlanOp::Block {
                    input,
                    kind,
                    conv1,
                    conv2,
                    ..
                } => {
                    let h = conv(shapes[*input], self.kernel(conv1.weight), conv1.stride, id)?;
                    let h = conv(h, self.kernel(conv2.weight), conv2.stride, id)?;
                    if *kind == BlockKind::Residual {
                        crate::layers::crop_margins(shapes[*input], h).map_err(|e| {
                            Error::Shape(format!("layer '{id}' skip connection: {e}"))
                        })?;
                    }
                    h
                }
                PlanOp::Upsample { input, factor } => {
                    let s = shapes[*input];
                    [s[0] * factor[0], s[1] * factor[1], s[2] * factor[2]]
                }
                PlanOp::Concat { a, b } => {
                    let (sa, sb) = (shapes[*a], shapes[*b]);
                    let t = [sa[0].min(sb[0]), sa[1].min(sb[1]), sa[2].min(sb[2])];
                    for s in [sa, sb] {
                        crate::layers::crop_margins(s, t)
                            .map_err(|e| Error::Shape(format!("layer '{id}': {e}")))?;
                    }
                    t
                }
            };
            shapes.push(out);
        }
        let main = shapes[self.main.source];
        for (i, h) in self.aux.iter().enumerate() {
            let s = shapes[h.source];
            let up = [
                s[0] * h.upsample[0],
                s[1] * h.upsample[1],
                s[2] * h.upsample[2],
            ];
            crate::layers::crop_margins(up, main).map_err(|e| {
                Error::Shape(format!("auxiliary head {} cannot be aligned: {e}", i + 1))
            })?;
        }
        Ok((shapes, main))
    }

    fn kernel(&self, weight: usize) -> [usize; 3] {
        let s = &self.params[weight].shape;
        [s[2], s[3], s[4]]
    }

    /// Largest per-axis jump over all layers: the input shift that moves
    /// every intermediate grid by a whole number of voxels.
    pub fn total_stride(&self) -> [usize; 3] {
        let mut m = [1; 3];
        for j in &self.jump {
            for a in 0..3 {
                m[a] = m[a].max(j[a]);
            }
        }
        m
    }

    /// Number of convolutions on the main path (excluding auxiliary heads).
    pub fn weighted_layers(&self) -> usize {
        let body: usize = self
            .nodes
            .iter()
            .map(|n| match n.op {
                PlanOp::Conv { .. } => 1,
                PlanOp::Block { .. } => 2,
                _ => 0,
            })
            .sum();
        body + 1
    }
}

/// Per-axis receptive field of the final output.
pub fn receptive_field(cfg: &NetworkConfig) -> Result<ReceptiveField> {
    Ok(Plan::compile(cfg)?.receptive_field())
}

/// Input step that moves the final output grid by one voxel.
pub fn total_stride(cfg: &NetworkConfig) -> Result<[usize; 3]> {
    Ok(Plan::compile(cfg)?.total_stride())
}

/// Spatial extent of the final output for an input of extent `input`.
pub fn output_shape(cfg: &NetworkConfig, input: [usize; 3]) -> Result<[usize; 3]> {
    Ok(Plan::compile(cfg)?.spatial_shapes(input)?.1)
}

/// Offset of the output grid inside the input: output voxel `i` is centred
/// on input voxel `i + offset`.
pub fn output_offset(cfg: &NetworkConfig, input: [usize; 3]) -> Result<[usize; 3]> {
    let out = output_shape(cfg, input)?;
    Ok([
        (input[0] - out[0]) / 2,
        (input[1] - out[1]) / 2,
        (input[2] - out[2]) / 2,
    ])
}
