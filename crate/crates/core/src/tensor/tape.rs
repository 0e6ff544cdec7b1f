//! Per-computation reverse-mode tape.
//!
//! Every op appends a node holding its output value and the handles of its
//! inputs. Creation order is a topological order, so the reverse sweep simply
//! walks the node list backwards and accumulates adjoints.

use std::cell::{Cell, Ref, RefCell};

use super::array::Tensor;
use super::ops::{backprop, Contribution, Op};
use super::{Real, TensorError};

pub(crate) struct Node<T: Real> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recording of one forward computation. Freed when dropped.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    spent: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) id: usize,
}

impl<T: Real> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), spent: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Const, false)
    }

    pub fn is_spent(&self) -> bool {
        self.spent.get()
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<T>>> {
        self.nodes.borrow()
    }

    pub(crate) fn check_owner(&self, v: Var<'_, T>) -> Result<(), TensorError> {
        if std::ptr::eq(self, v.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    /// Gradient of a scalar `loss` with respect to every leaf.
    ///
    /// A tape supports a single backward call; the second is rejected.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let mut out = self.backward_many(&[loss])?;
        Ok(out.pop().expect("one loss"))
    }

    /// Independent gradient maps for several scalar losses recorded on this
    /// tape (one reverse sweep each). Consumes the tape like [`Tape::backward`].
    pub fn backward_many(&self, losses: &[Var<'_, T>]) -> Result<Vec<Gradients<T>>, TensorError> {
        if self.spent.get() {
            return Err(TensorError::TapeConsumed);
        }
        for &l in losses {
            self.check_owner(l)?;
            let shape = l.shape();
            if super::array::numel(&shape) != 1 {
                return Err(TensorError::NonScalar(shape));
            }
        }
        self.spent.set(true);
        Ok(losses
            .iter()
            .map(|l| {
                let seed = Tensor::full(&l.shape(), T::one());
                self.sweep(vec![(l.id, seed)])
            })
            .collect())
    }

    /// Vector-Jacobian product: accumulates the given output cotangents and
    /// sweeps once. Consumes the tape.
    pub fn backward_seeded(&self, seeds: &[(Var<'_, T>, Tensor<T>)]) -> Result<Gradients<T>, TensorError> {
        if self.spent.get() {
            return Err(TensorError::TapeConsumed);
        }
        let mut prepared = Vec::with_capacity(seeds.len());
        for (v, s) in seeds {
            self.check_owner(*v)?;
            let shape = v.shape();
            if shape.as_slice() != s.shape() {
                return Err(TensorError::ShapeMismatch { op: "backward_seeded", lhs: shape, rhs: s.shape().to_vec() });
            }
            prepared.push((v.id, s.clone()));
        }
        self.spent.set(true);
        Ok(self.sweep(prepared))
    }

    fn sweep(&self, seeds: Vec<(usize, Tensor<T>)>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut adjoint: Vec<Option<Tensor<T>>> = Vec::new();
        adjoint.resize_with(nodes.len(), || None);
        for (id, s) in seeds {
            if nodes[id].requires_grad {
                accumulate(&mut adjoint[id], &nodes[id].value, Contribution::Dense(s));
            }
        }
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::new();
        leaves.resize_with(nodes.len(), || None);
        for id in (0..nodes.len()).rev() {
            let Some(g) = adjoint[id].take() else { continue };
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                leaves[id] = Some(g);
                continue;
            }
            for (input, contribution) in backprop(&node.op, &node.value, &g, &nodes) {
                if nodes[input].requires_grad {
                    accumulate(&mut adjoint[input], &nodes[input].value, contribution);
                }
            }
        }
        Gradients { grads: leaves }
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, like: &Tensor<T>, c: Contribution<T>) {
    match c {
        Contribution::Dense(g) => match slot {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => *slot = Some(g),
        },
        Contribution::At { offset, values } => {
            let acc = slot.get_or_insert_with(|| Tensor::zeros(like.shape()));
            for (a, &b) in acc.data_mut()[offset..offset + values.len()].iter_mut().zip(&values) {
                *a += b;
            }
        }
    }
}

/// Leaf gradients produced by one reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Runs `f` on the recorded value without copying it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> Result<T, TensorError> {
        self.with_value(|t| t.item())
    }
}
