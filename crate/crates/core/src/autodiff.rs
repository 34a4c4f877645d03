// SPDX-License-Identifier: Apache-2.0

//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation of the pipeline pushes one node holding its
//! forward value together with a closure computing the adjoints of its
//! parents. [`Tape::backward`] walks the nodes in exact reverse recording
//! order, which is a valid reverse topological order because a node can only
//! reference nodes recorded before it. Gradient accumulation into a shared
//! parent happens in that fixed order, so results are deterministic.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + Send + Sync>;

struct Node<T> {
    op: &'static str,
    value: Tensor<T>,
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

/// What a backward closure can see: the adjoint of its output, the values of
/// every earlier node and which of its parents actually need a gradient.
pub struct BackwardCtx<'a, T> {
    tape: &'a Tape<T>,
    pub grad: &'a Tensor<T>,
    pub out: &'a Tensor<T>,
    parents: &'a [Var],
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    pub fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.tape.nodes[v.0].value
    }

    /// Value of the `i`-th parent.
    pub fn input(&self, i: usize) -> &'a Tensor<T> {
        self.value(self.parents[i])
    }

    pub fn parents_len(&self) -> usize {
        self.parents.len()
    }

    pub fn needs(&self, i: usize) -> bool {
        self.tape.nodes[self.parents[i].0].requires_grad
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf("constant", value, false, None)
    }

    /// A free input whose gradient is reported by [`Gradients::of`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf("leaf", value, true, None)
    }

    /// Record a parameter. Frozen parameters become constants, so they get
    /// a zero gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push_leaf("param", p.value.clone(), p.trainable, Some(id))
    }

    fn push_leaf(
        &mut self,
        op: &'static str,
        value: Tensor<T>,
        requires_grad: bool,
        param: Option<ParamId>,
    ) -> Var {
        self.nodes.push(Node {
            op,
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Record an operation. `backward` returns one optional adjoint per
    /// parent, in parent order; `None` means "no contribution".
    pub fn push<F>(&mut self, op: &'static str, value: Tensor<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> + Send + Sync + 'static,
    {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            parents: parents.to_vec(),
            requires_grad,
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        debug_assert_eq!(root.value.len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&root.value.shape, T::one()));
        let mut out = Gradients {
            leaves: BTreeMap::new(),
            params: BTreeMap::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Some(f) = &node.backward {
                let ctx = BackwardCtx {
                    tape: self,
                    grad: &g,
                    out: &node.value,
                    parents: &node.parents,
                };
                let parent_grads = f(&ctx);
                debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !self.nodes[p.0].requires_grad {
                        continue;
                    }
                    if !pg.all_finite() {
                        return Err(Error::NonFiniteGradient { op: node.op });
                    }
                    debug_assert_eq!(
                        pg.len(),
                        self.nodes[p.0].value.len(),
                        "adjoint size mismatch from op {}",
                        node.op
                    );
                    match &mut grads[p.0] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            } else if let Some(pid) = node.param {
                match out.params.get_mut(&pid) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(pid, g);
                    }
                }
            } else {
                out.leaves.insert(i, g);
            }
        }
        Ok(out)
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients<T> {
    leaves: BTreeMap<usize, Tensor<T>>,
    params: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; zeros if the loss does not depend on it.
    pub fn of(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.leaves
            .get(&v.0)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&tape.value(v).shape))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Add parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            if p.trainable {
                p.grad.add_assign(g);
            }
        }
    }
}
