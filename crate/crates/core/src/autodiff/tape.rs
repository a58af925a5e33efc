//! Tape, node, and variable types for reverse-mode differentiation.
//!
//! A [`Tape`] is an append-only record of operations. Every [`Var`] is an
//! index into the tape plus a reference to it; values are dense row-major
//! `f64` tensors. Backward passes append ordinary operations to the same
//! tape, so a gradient is just another `Var` and can be differentiated
//! again when requested.

use std::cell::RefCell;

use crate::autodiff::ops::Op;
use crate::error::{Error, Result};

/// A plain tensor payload, detached from any tape.
///
/// `shape == []` denotes a scalar with a single element. Rank two is the
/// highest rank the operations below support; nothing in this crate needs
/// more.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    /// Builds a tensor, checking that `data` has exactly one element per
    /// position of `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let expect: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expect,
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single element of a scalar tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.len(), 1, "expected scalar, got shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened tensor.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
    pub(crate) grad_enabled: bool,
}

/// Append-only operation record. One tape per differentiation scope; a
/// tape is confined to a single thread (`RefCell` interior mutability).
pub struct Tape {
    pub(crate) inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            inner: RefCell::new(TapeInner { nodes: Vec::new(), grad_enabled: true }),
        }
    }

    /// Number of nodes currently recorded.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checkpoint for [`Tape::truncate`].
    pub fn mark(&self) -> usize {
        self.len()
    }

    /// Drops every node recorded after `mark`, reclaiming their storage.
    ///
    /// Any `Var` with an id at or past `mark` becomes invalid; callers must
    /// only keep detached values across a truncation. This is how iterative
    /// curvature solvers bound tape growth.
    pub fn truncate(&self, mark: usize) {
        self.inner.borrow_mut().nodes.truncate(mark);
    }

    /// Records a differentiable leaf (a parameter or other input whose
    /// gradient will be requested).
    pub fn var(&self, value: TensorData) -> Var<'_> {
        let enabled = self.inner.borrow().grad_enabled;
        self.push(value.shape, value.data, Op::Leaf, enabled)
    }

    /// Records a constant leaf. Gradients treat it as fixed and report
    /// zeros for it.
    pub fn constant(&self, value: TensorData) -> Var<'_> {
        self.push(value.shape, value.data, Op::Leaf, false)
    }

    /// Scalar constant convenience.
    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(TensorData::scalar(value))
    }

    pub(crate) fn set_grad_enabled(&self, enabled: bool) -> bool {
        let mut inner = self.inner.borrow_mut();
        std::mem::replace(&mut inner.grad_enabled, enabled)
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var<'_> {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let mut inner = self.inner.borrow_mut();
        let requires_grad = requires_grad && inner.grad_enabled;
        let id = inner.nodes.len();
        inner.nodes.push(Node { shape, data, op, requires_grad });
        Var { tape: self, id }
    }
}

/// Handle to one tape node. Copyable; cloning never copies tensor data.
#[derive(Copy, Clone)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn rank(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].shape.len()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    /// Copies the node's value off the tape.
    pub fn value(&self) -> TensorData {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        TensorData { shape: node.shape.clone(), data: node.data.clone() }
    }

    /// The single element of a scalar node.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        assert_eq!(node.data.len(), 1, "expected scalar, got shape {:?}", node.shape);
        node.data[0]
    }

    /// Runs `f` over the node's data without copying it.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        let inner = self.tape.inner.borrow();
        f(&inner.nodes[self.id].data)
    }

    /// Re-enters the value as a constant leaf: same numbers, no gradient
    /// connection to this node's history.
    pub fn detach(&self) -> Var<'t> {
        let value = self.value();
        self.tape.constant(value)
    }

    /// Errors if any element is NaN or infinite; `context` names the caller.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        let ok = self.with_data(|d| d.iter().all(|v| v.is_finite()));
        if ok {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}
