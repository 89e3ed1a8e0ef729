//! Minimal reverse-mode differentiation over dense arrays.
//!
//! A [`Tensor`] is a shared handle to one node of a dynamically recorded
//! computation graph. Each operation allocates a fresh node holding its
//! result plus a closure that routes the upstream gradient to its parents;
//! [`Tensor::backward`] replays those closures in reverse topological
//! order. Gradients accumulate (add into) the `grad` buffer, so one
//! parameter feeding several consumers collects every contribution.
//!
//! Everything is generic over [`Real`]: the detector runs in `f32`, while
//! gradient checks re-run the same graph in `f64` for tight
//! finite-difference comparisons.
//!
//! Graphs and their tensors are confined to one thread (`Rc` inside);
//! independent replicas may live on independent threads.

mod ops;
pub mod checkpoint;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::rc::Rc;

/// Scalar element of a tensor: `f32` for the model, `f64` for checking.
pub trait Real:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Routes the node's accumulated gradient to the parents it captured.
type BackwardFn<S> = Box<dyn Fn(&[S])>;

struct Node<S: Real> {
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    /// Leaf parameter flag: the optimizer updates these.
    requires_grad: bool,
    /// True when a gradient must flow through this node (itself a
    /// parameter, or downstream of one).
    track: bool,
    parents: Vec<Tensor<S>>,
    backward: Option<BackwardFn<S>>,
}

/// Dense N-dimensional array with an optional gradient accumulator.
pub struct Tensor<S: Real = f32> {
    inner: Rc<Node<S>>,
}

impl<S: Real> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<S: Real> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Real> Tensor<S> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        track: bool,
        parents: Vec<Tensor<S>>,
        backward: Option<BackwardFn<S>>,
    ) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor shape {:?} does not match {} data elements",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                track,
                parents,
                backward,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Self {
        Self::new_node(shape.to_vec(), data, false, false, Vec::new(), None)
    }

    /// Leaf parameter: participates in backward and optimizer updates.
    pub fn param(shape: &[usize], data: Vec<S>) -> Self {
        Self::new_node(shape.to_vec(), data, true, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![S::ZERO; numel(shape)])
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        Self::from_vec(shape, vec![value; numel(shape)])
    }

    /// Rank-0 constant.
    pub fn scalar(value: S) -> Self {
        Self::from_vec(&[], vec![value])
    }

    /// Internal op-result constructor; `track` is derived from the parents.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let track = parents.iter().any(|p| p.inner.track);
        let backward = if track { Some(backward) } else { None };
        Self::new_node(shape, data, false, track, parents, backward)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when this node is a parameter or depends on one.
    pub fn tracked(&self) -> bool {
        self.inner.track
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    /// Replace the stored values. Only meaningful for leaves between graph
    /// builds (optimizer updates, finite-difference probes); graphs built
    /// from the old values are not re-evaluated.
    pub fn set_data(&self, new: Vec<S>) {
        assert_eq!(
            new.len(),
            self.numel(),
            "set_data length {} does not match shape {:?}",
            new.len(),
            self.shape()
        );
        *self.inner.data.borrow_mut() = new;
    }

    /// Add `delta` to one element in place (finite-difference probes).
    pub fn nudge(&self, index: usize, delta: S) {
        let mut d = self.inner.data.borrow_mut();
        d[index] += delta;
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replace the gradient buffer outright (optimizer-side rescaling).
    pub fn set_grad(&self, grad: Vec<S>) {
        assert_eq!(grad.len(), self.numel(), "set_grad length mismatch");
        *self.inner.grad.borrow_mut() = Some(grad);
    }

    /// Add a contribution into the gradient accumulator. Never overwrites:
    /// an existing buffer is summed into.
    pub(crate) fn accumulate_grad(&self, contribution: &[S]) {
        assert_eq!(contribution.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, c) in buf.iter_mut().zip(contribution) {
                    *b += *c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as *const () as usize
    }

    /// Reverse-mode sweep from a scalar root: after this call every tracked
    /// tensor reachable from the root holds `d root / d tensor` in its
    /// gradient accumulator (added to whatever was already there).
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward requires a scalar root, got shape {:?}",
            self.shape()
        );
        if !self.inner.track {
            return;
        }

        // Iterative post-order DFS over tracked parents.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr_id());
        while let Some((node, child_idx)) = stack.pop() {
            let parents = &node.inner.parents;
            if child_idx < parents.len() {
                let next = parents[child_idx].clone();
                stack.push((node, child_idx + 1));
                if next.inner.track && !visited.contains(&next.ptr_id()) {
                    visited.insert(next.ptr_id());
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }

        // Intermediate nodes start every sweep from scratch; only leaf
        // parameters accumulate across sweeps (until zero_grad).
        for node in &order {
            if !node.inner.requires_grad {
                node.zero_grad();
            }
        }

        self.accumulate_grad(&[S::ONE]);
        for node in order.iter().rev() {
            if let Some(back) = &node.inner.backward {
                let upstream = node.inner.grad.borrow().clone();
                if let Some(upstream) = upstream {
                    back(&upstream);
                }
            }
        }
    }
}

pub use ops::{concat, stable_sigmoid};
