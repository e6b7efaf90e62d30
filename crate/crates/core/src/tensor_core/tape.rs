//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every operation applied to a [`Var`] appends a node holding its output
//! value, the indices of its inputs and a [`Backward`] rule. Calling
//! [`Tape::backward`] walks the nodes in exact reverse order of recording and
//! accumulates adjoints into per-node buffers; the adjoints of tracked leaves
//! are returned as [`Gradients`].

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor_core::scalar::Scalar;
use crate::tensor_core::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient rule of one recorded operation.
pub trait Backward<T: Scalar> {
    /// Returns one optional gradient per input. Entries whose `needs` flag is
    /// false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>>;

    fn name(&self) -> &'static str;
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

enum NodeKind<T: Scalar> {
    Leaf {
        tracked: bool,
    },
    Op {
        inputs: Vec<usize>,
        rule: Box<dyn Backward<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    requires_grad: bool,
    kind: NodeKind<T>,
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Registers a tensor whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, NodeKind::Leaf { tracked: true })
    }

    /// Registers a tensor that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, NodeKind::Leaf { tracked: false })
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, kind: NodeKind<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            kind,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded value, in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Fails when `vars` were not produced by this tape.
    pub fn check(&self, vars: &[Var]) -> Result<()> {
        for v in vars {
            if v.tape != self.id || v.index >= self.nodes.len() {
                return Err(Error::Contract(format!(
                    "variable {} does not belong to this tape",
                    v.index
                )));
            }
        }
        Ok(())
    }

    /// Value of a recorded variable.
    ///
    /// Panics when `v` comes from a different tape; operations validate their
    /// inputs with [`Tape::check`] first.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Appends an operation node. The rule is dropped when no input needs a
    /// gradient, so constant-only passes keep just the values.
    pub fn record(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        rule: impl Backward<T> + 'static,
    ) -> Result<Var> {
        self.check(inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.index].requires_grad);
        if !requires_grad {
            return Ok(self.push(output, false, NodeKind::Leaf { tracked: false }));
        }
        Ok(self.push(
            output,
            true,
            NodeKind::Op {
                inputs: inputs.iter().map(|v| v.index).collect(),
                rule: Box::new(rule),
            },
        ))
    }

    /// Propagates the adjoint of a scalar `loss` back to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.tape != self.id || loss.index >= self.nodes.len() {
            return Err(Error::Contract("loss was not recorded on this tape".into()));
        }
        let root = &self.nodes[loss.index];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut adj: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            adj[loss.index] = Some(Tensor::full(root.value.shape(), T::one()));
        }

        for i in (0..=loss.index).rev() {
            let node = &self.nodes[i];
            let NodeKind::Op { inputs, rule } = &node.kind else {
                continue;
            };
            let Some(grad) = adj[i].take() else {
                continue;
            };
            let values: Vec<&Tensor<T>> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = inputs
                .iter()
                .map(|&j| self.nodes[j].requires_grad)
                .collect();
            let grads = rule.backward(&values, &node.value, &grad, &needs)?;
            if grads.len() != inputs.len() {
                return Err(Error::Contract(format!(
                    "{} returned {} gradients for {} inputs",
                    rule.name(),
                    grads.len(),
                    inputs.len()
                )));
            }
            for ((&j, g), need) in inputs.iter().zip(grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                if g.shape() != self.nodes[j].value.shape() {
                    return Err(Error::Contract(format!(
                        "{} produced gradient of shape {:?} for input of shape {:?}",
                        rule.name(),
                        g.shape(),
                        self.nodes[j].value.shape()
                    )));
                }
                match &mut adj[j] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.kind {
                NodeKind::Leaf { tracked: true } => Some(
                    adj[i]
                        .take()
                        .unwrap_or_else(|| Tensor::zeros(n.value.shape())),
                ),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

/// Adjoints of the tracked leaves of one backward pass.
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a tracked leaf; `None` for constants and interior nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(|g| g.take())
    }
}
