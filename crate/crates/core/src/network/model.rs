//! Parameterized network: initialization and the forward pass.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::layers::{BnState, Mode};
use crate::network::config::{BlockKind, DropoutPosition, DropoutSpec, NetworkConfig};
use crate::network::plan::{
    BnRef, ConvRef, HeadPlan, ParamInit, ParamSpec, Plan, PlanOp, ReceptiveField,
};
use crate::tensor_core::{Gradients, Scalar, Tape, Tensor, Var};

/// How dropout masks are drawn during a train-mode pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DropoutPolicy {
    /// Sample from the supplied generator.
    #[default]
    Sample,
    /// Force every mask to zero (drop everything).
    DropAll,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout: DropoutPolicy,
    /// Evaluate the six auxiliary heads.
    pub aux_heads: bool,
    /// Register parameters as tracked leaves so gradients can be taken.
    pub track_params: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        Self {
            mode: Mode::Train,
            dropout: DropoutPolicy::Sample,
            aux_heads: true,
            track_params: true,
        }
    }

    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            dropout: DropoutPolicy::Sample,
            aux_heads: false,
            track_params: false,
        }
    }
}

/// Variables produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub main_logits: Var,
    pub main: Var,
    /// Empty when auxiliary heads were not requested.
    pub aux_logits: Vec<Var>,
    pub aux: Vec<Var>,
    /// One variable per parameter, in declaration order.
    pub params: Vec<Var>,
    /// Output of every config node, in declaration order.
    pub activations: Vec<Var>,
}

impl ForwardOutput {
    /// Output of the node named `id`.
    pub fn activation(&self, config: &NetworkConfig, id: &str) -> Option<Var> {
        config
            .nodes
            .iter()
            .position(|n| n.id == id)
            .map(|i| self.activations[i])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// How the parameters were initialized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitRecord {
    pub seed: u64,
    pub scheme: &'static str,
}

/// A configuration bound to concrete parameters and normalization state.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    config: NetworkConfig,
    plan: Plan,
    params: Vec<Param<T>>,
    bn: Vec<BnState<T>>,
    init: InitRecord,
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    match spec.init {
        ParamInit::Ones => Tensor::ones(&spec.shape),
        ParamInit::Zeros => Tensor::zeros(&spec.shape),
        ParamInit::HeNormal { fan_in } => {
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = spec.shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::from_f64_lossy(z * std)
                })
                .collect();
            Tensor::from_vec(&spec.shape, data).expect("shape matches")
        }
    }
}

impl<T: Scalar> Network<T> {
    /// Validates `config` and draws He fan-in normal weights from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let plan = Plan::compile(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = plan
            .params
            .iter()
            .map(|spec| Param {
                name: spec.name.clone(),
                value: init_tensor(spec, &mut rng),
            })
            .collect();
        let bn = plan.bn_features.iter().map(|&f| BnState::new(f)).collect();
        Ok(Self {
            config: config.clone(),
            plan,
            params,
            bn,
            init: InitRecord {
                seed,
                scheme: "he_normal_fan_in",
            },
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn init_record(&self) -> &InitRecord {
        &self.init
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        self.plan.receptive_field()
    }

    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        Ok(self.plan.spatial_shapes(input)?.1)
    }

    /// Convolutions on the path to the final classifier, head included.
    pub fn weighted_layers(&self) -> usize {
        self.plan.weighted_layers()
    }

    /// Per-axis input shift under which outputs shift by whole voxels.
    pub fn total_stride(&self) -> [usize; 3] {
        self.plan.total_stride()
    }

    /// Copy of this network in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            plan: self.plan.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            bn: self
                .bn
                .iter()
                .map(|s| BnState {
                    running_mean: s.running_mean.iter().map(|v| lit_cast(*v)).collect(),
                    running_var: s.running_var.iter().map(|v| lit_cast(*v)).collect(),
                    momentum: s.momentum,
                    eps: s.eps,
                    updates: s.updates,
                })
                .collect(),
            init: self.init.clone(),
        }
    }

    /// Records a forward pass of `patch` (`(C, D, H, W)` raw intensities) on
    /// `tape`. Train mode updates the normalization statistics.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape<T>,
        patch: Var,
        opts: ForwardOptions,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        tape.check(&[patch])?;
        let (c, dims) = tape.value(patch).dims4()?;
        if c != self.config.input_features {
            return Err(Error::Contract(format!(
                "network expects {} input features, patch has {c}",
                self.config.input_features
            )));
        }
        let (shapes, out_dims) = self.plan.spatial_shapes(dims)?;

        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if opts.track_params {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();

        let x = tape.scale(patch, T::from_f64_lossy(self.config.intensity_scale))?;
        let mut slots = Vec::with_capacity(self.plan.nodes.len() + 1);
        slots.push(x);
        let plan = &self.plan;
        let bn = &mut self.bn;
        let mut run = Runner {
            tape,
            params: &params,
            bn,
            opts,
            rng,
        };
        for node in &plan.nodes {
            let v = match &node.op {
                PlanOp::Conv { input, bn, conv } => {
                    let mut h = slots[*input];
                    if let Some(bn) = bn {
                        h = run.bn_relu(h, *bn)?;
                    }
                    run.conv(h, conv)?
                }
                PlanOp::Block {
                    input,
                    kind,
                    bn1,
                    conv1,
                    bn2,
                    conv2,
                    dropout,
                } => run.block(slots[*input], *kind, *bn1, conv1, *bn2, conv2, *dropout)?,
                PlanOp::Upsample { input, factor } => {
                    run.tape.upsample_nn(slots[*input], *factor)?
                }
                PlanOp::Concat { a, b } => {
                    let t = shapes[slots.len()];
                    let a = run.tape.crop_center(slots[*a], t)?;
                    let b = run.tape.crop_center(slots[*b], t)?;
                    run.tape.concat_features(a, b)?
                }
            };
            slots.push(v);
        }

        let main_logits = run.head(&plan.main, &slots, out_dims)?;
        let main = run.tape.sigmoid(main_logits)?;
        let mut aux_logits = Vec::new();
        let mut aux = Vec::new();
        if opts.aux_heads {
            for h in &plan.aux {
                let l = run.head(h, &slots, out_dims)?;
                aux.push(run.tape.sigmoid(l)?);
                aux_logits.push(l);
            }
        }
        Ok(ForwardOutput {
            main_logits,
            main,
            aux_logits,
            aux,
            params,
            activations: slots[1..].to_vec(),
        })
    }

    /// Convenience wrapper returning the main and auxiliary probabilities.
    pub fn predict<R: Rng + ?Sized>(
        &mut self,
        patch: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let x = tape.constant(patch.clone());
        let opts = ForwardOptions {
            mode,
            dropout: DropoutPolicy::Sample,
            aux_heads: true,
            track_params: false,
        };
        let out = self.forward(&mut tape, x, opts, rng)?;
        let aux = out.aux.iter().map(|v| tape.value(*v).clone()).collect();
        Ok((tape.value(out.main).clone(), aux))
    }

    /// Eval-mode logits of the final classifier for one patch.
    pub fn eval_logits(&mut self, patch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(patch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, x, ForwardOptions::eval(), &mut rng)?;
        Ok(tape.value(out.main_logits).clone())
    }

    /// Folds one train-mode pass over `patch` into the normalization
    /// statistics without touching parameters or drawing dropout masks.
    pub fn update_bn_statistics(&mut self, patch: &Tensor<T>) -> Result<()> {
        let mut tape = Tape::new();
        let x = tape.constant(patch.clone());
        let opts = ForwardOptions {
            mode: Mode::Train,
            dropout: DropoutPolicy::Sample,
            aux_heads: true,
            track_params: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let saved: Vec<Option<DropoutSpec>> = self.strip_dropout();
        let r = self.forward(&mut tape, x, opts, &mut rng).map(|_| ());
        self.restore_dropout(saved);
        r
    }

    fn strip_dropout(&mut self) -> Vec<Option<DropoutSpec>> {
        self.plan
            .nodes
            .iter_mut()
            .map(|n| match &mut n.op {
                PlanOp::Block { dropout, .. } => dropout.take(),
                _ => None,
            })
            .collect()
    }

    fn restore_dropout(&mut self, saved: Vec<Option<DropoutSpec>>) {
        for (n, d) in self.plan.nodes.iter_mut().zip(saved) {
            if let PlanOp::Block { dropout, .. } = &mut n.op {
                *dropout = d;
            }
        }
    }

    /// Extracts parameter gradients in declaration order.
    pub fn collect_grads(
        &self,
        grads: &mut Gradients<T>,
        out: &ForwardOutput,
    ) -> Result<Vec<Tensor<T>>> {
        out.params
            .iter()
            .zip(&self.params)
            .map(|(v, p)| {
                grads.take(*v).ok_or_else(|| {
                    Error::Contract(format!("no gradient recorded for parameter '{}'", p.name))
                })
            })
            .collect()
    }

    /// Replaces parameters and normalization state wholesale (checkpoint load).
    pub(crate) fn set_state(&mut self, params: Vec<Tensor<T>>, bn: Vec<BnState<T>>) -> Result<()> {
        if params.len() != self.params.len() || bn.len() != self.bn.len() {
            return Err(Error::Format(
                "parameter table does not match configuration".into(),
            ));
        }
        for (p, v) in self.params.iter_mut().zip(params) {
            if p.value.shape() != v.shape() {
                return Err(Error::Format(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    p.name,
                    v.shape(),
                    p.value.shape()
                )));
            }
            p.value = v;
        }
        for (s, v) in self.bn.iter_mut().zip(bn) {
            if s.features() != v.features() {
                return Err(Error::Format("normalization state size mismatch".into()));
            }
            *s = v;
        }
        Ok(())
    }
}

fn lit_cast<T: Scalar, U: Scalar>(v: T) -> U {
    U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN))
}

struct Runner<'a, T: Scalar, R: ?Sized> {
    tape: &'a mut Tape<T>,
    params: &'a [Var],
    bn: &'a mut [BnState<T>],
    opts: ForwardOptions,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Runner<'_, T, R> {
    fn bn_relu(&mut self, x: Var, bn: BnRef) -> Result<Var> {
        let y = self.tape.batchnorm(
            x,
            self.params[bn.gamma],
            self.params[bn.beta],
            &mut self.bn[bn.state],
            self.opts.mode,
        )?;
        self.tape.relu(y)
    }

    fn conv(&mut self, x: Var, conv: &ConvRef) -> Result<Var> {
        self.tape
            .conv3d_valid(x, self.params[conv.weight], None, conv.stride)
    }

    fn drop(&mut self, x: Var, spec: &DropoutSpec) -> Result<Var> {
        if self.opts.mode == Mode::Eval {
            return Ok(x);
        }
        match self.opts.dropout {
            DropoutPolicy::Sample => {
                self.tape
                    .dropout(x, spec.p, Mode::Train, spec.variant, self.rng)
            }
            DropoutPolicy::DropAll => {
                let zeros = Tensor::zeros(self.tape.value(x).shape());
                self.tape.dropout_with_mask(x, zeros)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &mut self,
        x: Var,
        kind: BlockKind,
        bn1: BnRef,
        conv1: &ConvRef,
        bn2: BnRef,
        conv2: &ConvRef,
        dropout: Option<DropoutSpec>,
    ) -> Result<Var> {
        let at = |p: DropoutPosition| dropout.filter(|d| d.position == p);
        let mut h = self.bn_relu(x, bn1)?;
        if let Some(d) = at(DropoutPosition::PreConv1) {
            h = self.drop(h, &d)?;
        }
        h = self.conv(h, conv1)?;
        h = self.bn_relu(h, bn2)?;
        if let Some(d) = at(DropoutPosition::PreConv2) {
            h = self.drop(h, &d)?;
        }
        h = self.conv(h, conv2)?;
        if let Some(d) = at(DropoutPosition::PreAdd) {
            h = self.drop(h, &d)?;
        }
        match kind {
            BlockKind::Plain => Ok(h),
            BlockKind::Residual => {
                let (_, dims) = self.tape.value(h).dims4()?;
                let skip = self.tape.crop_center(x, dims)?;
                self.tape.add(skip, h)
            }
        }
    }

    fn head(&mut self, head: &HeadPlan, slots: &[Var], out_dims: [usize; 3]) -> Result<Var> {
        let h = self.bn_relu(slots[head.source], head.bn)?;
        let l = self.tape.conv3d_valid(
            h,
            self.params[head.weight],
            Some(self.params[head.bias]),
            [1, 1, 1],
        )?;
        let l = self.tape.upsample_nn(l, head.upsample)?;
        self.tape.crop_center(l, out_dims)
    }
}
