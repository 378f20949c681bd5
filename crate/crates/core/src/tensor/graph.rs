use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::Op;
use super::{Dims, Tensor};
use crate::error::{Error, Result};

// Ids only ever grow, so creation order is a topological order of the graph.
static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Kind of the operation that produced a [`Var`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Neg,
    Add,
    Sub,
    Scale,
    WeightedSum,
    Relu,
    Mask,
    Conv2d,
    ConvTranspose2d,
    MaxPool2d,
    ChannelMin,
    ChannelMax,
    Concat,
    Narrow,
    Upsample2x,
    Rfft2,
    Irfft2,
    BatchNorm,
    Mse,
    SumSquares,
    Gram,
    Mean,
    Sum,
}

/// A node of the gradient tape.
///
/// Nodes whose inputs are all constants are themselves constants: they keep
/// their value but drop their inputs and any saved backward context.
#[derive(Clone)]
pub struct Var(pub(crate) Rc<Node>);

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) parents: Vec<Var>,
    pub(crate) requires_grad: bool,
    pub(crate) grad: RefCell<Option<Vec<f32>>>,
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("kind", &self.kind())
            .field("dims", &self.dims())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn make(mut value: Tensor, op: Op, parents: Vec<Var>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            op,
            parents,
            requires_grad,
            grad: RefCell::new(None),
        }))
    }

    /// A value that never receives gradients.
    pub fn constant(value: Tensor) -> Var {
        Self::make(value, Op::Constant, Vec::new(), false)
    }

    /// A trainable leaf.
    pub fn parameter(value: Tensor) -> Var {
        Self::make(value, Op::Leaf, Vec::new(), true)
    }

    /// Leaf whose gradient tracking follows `tensor.requires_grad()`.
    pub fn leaf(value: Tensor) -> Var {
        if value.requires_grad() {
            Self::parameter(value)
        } else {
            Self::constant(value)
        }
    }

    pub(crate) fn from_op(value: Tensor, op: Op, parents: Vec<Var>) -> Var {
        if parents.iter().any(Var::requires_grad) {
            Self::make(value, op, parents, true)
        } else {
            Self::make(value, Op::Constant, Vec::new(), false)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn dims(&self) -> Dims {
        self.0.value.dims
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn kind(&self) -> OpKind {
        self.0.op.kind()
    }

    /// Gradient left on this leaf by the last [`Var::backward`].
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow().clone()
    }

    /// The value with its gradient attached.
    pub fn to_tensor(&self) -> Tensor {
        let mut t = self.0.value.clone();
        t.grad = self.grad();
        t
    }

    pub fn item(&self) -> f32 {
        self.0.value.item()
    }

    /// Every gradient-carrying node reachable from `self`, in creation order.
    pub fn tape(&self) -> Vec<Var> {
        let mut seen = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || seen.contains_key(&v.id()) {
                continue;
            }
            stack.extend(v.0.parents.iter().cloned());
            seen.insert(v.id(), v);
        }
        let mut nodes: Vec<Var> = seen.into_values().collect();
        nodes.sort_by_key(Var::id);
        nodes
    }

    pub fn tape_kinds(&self) -> Vec<OpKind> {
        self.tape().iter().map(Var::kind).collect()
    }

    /// Reverse-mode sweep from a single-element node.
    ///
    /// Each tape node is visited once, in reverse creation order. Leaf
    /// gradients are overwritten, so replaying the same graph twice yields
    /// identical results.
    pub fn backward(&self) -> Result<Gradients> {
        if self.0.value.numel() != 1 {
            return Err(Error::dim(
                "output",
                format!("backward needs a scalar, got dims {:?}", self.dims()),
            ));
        }
        self.backward_with(&[1.0])
    }

    /// Vector-Jacobian product: backward sweep seeded with `seed`, which must
    /// have one entry per element of `self`.
    pub fn backward_with(&self, seed: &[f32]) -> Result<Gradients> {
        if seed.len() != self.0.value.numel() {
            return Err(Error::dim(
                "output",
                format!("seed of {} values for dims {:?}", seed.len(), self.dims()),
            ));
        }
        let mut pending: HashMap<u64, Vec<f32>> = HashMap::new();
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { by_id: leaves });
        }
        pending.insert(self.id(), seed.to_vec());
        for node in self.tape().iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            if matches!(node.0.op, Op::Leaf) {
                *node.0.grad.borrow_mut() = Some(grad.clone());
                leaves.insert(node.id(), grad);
                continue;
            }
            let parent_grads = node.0.op.backward(&node.0, &grad);
            debug_assert_eq!(parent_grads.len(), node.0.parents.len());
            for (parent, pg) in node.0.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.len(), parent.value().numel());
                match pending.get_mut(&parent.id()) {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, g)| *a += g),
                    None => {
                        pending.insert(parent.id(), pg);
                    }
                }
            }
        }
        Ok(Gradients { by_id: leaves })
    }
}

/// Leaf gradients produced by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    by_id: HashMap<u64, Vec<f32>>,
}

impl Gradients {
    pub fn get(&self, var: &Var) -> Option<&[f32]> {
        self.by_id.get(&var.id()).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}
