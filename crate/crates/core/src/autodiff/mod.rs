//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] table.
//!
//! ```
//! use pglode::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod ops;
mod tensor;

use std::cell::{Cell, Ref, RefCell};

use thiserror::Error;

use crate::scalar::Scalar;

pub use gradcheck::{central_difference, grad_check, GRAD_CHECK_STEP};
pub use ops::OpKind;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },
    #[error("{op}: expected different number of inputs, got {got}")]
    Arity { op: &'static str, got: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape; call reset() first")]
    BackwardTwice,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
}

struct Node<T> {
    value: Tensor<T>,
    op: OpKind<T>,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Append-only record of a computation.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    backward_done: Cell<bool>,
}

/// Handle to a node on a tape.
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T> PartialEq for Var<'_, T> {
    fn eq(&self, other: &Self) -> bool {
        std::ptr::eq(self.tape, other.tape) && self.id == other.id
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The value of a one-element node.
    pub fn item(&self) -> Option<T> {
        self.value().item()
    }
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; `None` if no path connects it to the loss.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, materializing zeros when it is disconnected.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), backward_done: Cell::new(false) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: OpKind<T>, parents: Vec<usize>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, parents, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, OpKind::Leaf, Vec::new(), true)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, OpKind::Constant, Vec::new(), false)
    }

    pub fn op_kind(&self, var: Var<'_, T>) -> OpKind<T> {
        self.nodes.borrow()[var.id].op.clone()
    }

    fn apply(&self, op: OpKind<T>, parents: &[Var<'_, T>]) -> Result<Var<'_, T>, AutodiffError> {
        let (value, requires_grad) = {
            let nodes = self.nodes.borrow();
            let inputs: Vec<&Tensor<T>> = parents.iter().map(|p| &nodes[p.id].value).collect();
            let value = ops::forward(&op, &inputs)?;
            (value, parents.iter().any(|p| nodes[p.id].requires_grad))
        };
        Ok(self.push(value, op, parents.iter().map(|p| p.id).collect(), requires_grad))
    }

    pub fn add<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Sub, &[a, b])
    }

    /// Elementwise product of equally shaped nodes.
    pub fn mul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Mul, &[a, b])
    }

    /// `a ⊙ b` with `b: [n, 1, h, w]` broadcast over the channels of `a`.
    pub fn mul_channel<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::MulChannel, &[a, b])
    }

    /// Multiplies every element of `a` by the one-element node `s`.
    pub fn scale_by<'t>(&'t self, a: Var<'t, T>, s: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::ScaleBy, &[a, s])
    }

    pub fn scale<'t>(&'t self, a: Var<'t, T>, factor: T) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Scale(factor), &[a])
    }

    pub fn shift<'t>(&'t self, a: Var<'t, T>, offset: T) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Shift(offset), &[a])
    }

    pub fn matmul<'t>(&'t self, a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Matmul, &[a, b])
    }

    /// Stride-1 convolution with zero same-padding. `weight` is
    /// `[cout, cin, k, k]` with odd `k`, `bias` is `[cout]`.
    pub fn conv2d<'t>(
        &'t self,
        x: Var<'t, T>,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
    ) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Conv2d, &[x, weight, bias])
    }

    /// Pointwise channel mixing; `weight` must be `[cout, cin, 1, 1]`.
    pub fn conv1x1<'t>(
        &'t self,
        x: Var<'t, T>,
        weight: Var<'t, T>,
        bias: Var<'t, T>,
    ) -> Result<Var<'t, T>, AutodiffError> {
        let shape = weight.shape();
        if shape.len() != 4 || shape[2] != 1 || shape[3] != 1 {
            return Err(AutodiffError::InvalidShape {
                op: "conv1x1",
                shape,
                reason: "kernel must be [cout, cin, 1, 1]".into(),
            });
        }
        self.conv2d(x, weight, bias)
    }

    pub fn sigmoid<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn tanh<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn relu<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn exp<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Log, &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp<'t>(&'t self, a: Var<'t, T>, lo: T, hi: T) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Clamp(lo, hi), &[a])
    }

    pub fn sum<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean<'t>(&'t self, a: Var<'t, T>) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Mean, &[a])
    }

    /// Non-overlapping `size×size` max pooling.
    pub fn max_pool<'t>(&'t self, a: Var<'t, T>, size: usize) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::MaxPool(size), &[a])
    }

    /// Non-overlapping `size×size` average pooling.
    pub fn avg_pool<'t>(&'t self, a: Var<'t, T>, size: usize) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::AvgPool(size), &[a])
    }

    pub fn upsample_nearest<'t>(&'t self, a: Var<'t, T>, factor: usize) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::Upsample(factor), &[a])
    }

    pub fn concat_channels<'t>(&'t self, parts: &[Var<'t, T>]) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::ConcatChannels, parts)
    }

    pub fn slice_channels<'t>(&'t self, a: Var<'t, T>, start: usize, len: usize) -> Result<Var<'t, T>, AutodiffError> {
        self.apply(OpKind::SliceChannels { start, len }, &[a])
    }

    /// Reverse sweep from a scalar `loss`. Gradients of shared
    /// subexpressions accumulate. A tape can be swept once until [`reset`].
    ///
    /// [`reset`]: Tape::reset
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, AutodiffError> {
        if self.backward_done.get() {
            return Err(AutodiffError::BackwardTwice);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(AutodiffError::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if node.parents.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = ops::vjp(&node.op, &inputs, &node.value, &grad, &needs);
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Interior gradients are not needed after propagation, except the
            // root which callers may inspect.
            if id == loss.id {
                grads[id] = Some(grad);
            }
        }
        self.backward_done.set(true);
        Ok(Gradients { grads })
    }

    /// Allows another backward sweep.
    pub fn reset(&self) {
        self.backward_done.set(false);
    }

    /// Recomputes every derived node from its parents and reports whether
    /// all values reproduce bitwise.
    pub fn replay_matches(&self) -> Result<bool, AutodiffError> {
        let nodes = self.nodes.borrow();
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let value = if node.parents.is_empty() {
                node.value.clone()
            } else {
                let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &values[p]).collect();
                ops::forward(&node.op, &inputs)?
            };
            values.push(value);
        }
        Ok(nodes.iter().zip(&values).all(|(n, v)| n.value.data().iter().zip(v.data()).all(|(a, b)| a.to_bits_eq(*b))))
    }
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // Equal values, or both NaN. Signed zeros compare by sign.
        (self == other && self.is_sign_negative() == other.is_sign_negative()) || (self.is_nan() && other.is_nan())
    }
}
