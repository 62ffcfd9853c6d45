//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Values are stored row-major; image tensors use `[batch, channel, height, width]`
//! order. Ops that participate in a gradient computation record their parents and
//! a backward closure; [`Tensor::backward`] replays the graph in reverse
//! topological order and accumulates gradients into grad-enabled leaves.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod patch;
pub mod resize;

/// Scalar element of a tensor: `f32` for training, `f64` for gradient checking.
pub trait Element:
    num_traits::Float + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid geometry: {msg}")]
    Geometry { op: &'static str, msg: String },
    #[error("gather index {index} out of range (columns: {columns})")]
    IndexOutOfRange { index: usize, columns: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran for this node; rebuild the graph before calling again")]
    TapeConsumed,
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward closure: receives the node's output gradient and its parents,
/// and accumulates contributions into each grad-enabled parent.
pub(crate) type BackFn<E> = Box<dyn Fn(&[E], &[Tensor<E>])>;

pub(crate) struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    grad: RefCell<Option<Vec<E>>>,
    requires_grad: bool,
    parents: Vec<Tensor<E>>,
    backward: Option<BackFn<E>>,
    op_name: &'static str,
    back_done: Cell<bool>,
}

/// Dense n-dimensional array, cheaply clonable (shared storage).
pub struct Tensor<E: Element> {
    pub(crate) node: Rc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("op", &self.node.op_name)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn check_finite<E: Element>(op: &'static str, data: &[E]) {
    if cfg!(debug_assertions) {
        for v in data {
            assert!(v.is_finite(), "non-finite value produced by op `{op}`");
        }
    }
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: &[usize], data: Vec<E>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
                op_name: "leaf",
                back_done: Cell::new(false),
            }),
        }
    }

    /// Grad-enabled leaf (a parameter value or a differentiated input).
    pub fn new_with_grad(shape: &[usize], data: Vec<E>) -> Self {
        let t = Tensor::new(shape, data);
        // Rc is unique here, safe to rebuild with the flag set.
        let node = Rc::try_unwrap(t.node).ok().expect("fresh node");
        Tensor {
            node: Rc::new(Node {
                requires_grad: true,
                ..node
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape, vec![E::zero(); shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Tensor::new(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: E) -> Self {
        Tensor::new(&[1], vec![value])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<E>,
        op_name: &'static str,
        parents: Vec<Tensor<E>>,
        backward: BackFn<E>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(op_name, &data);
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: if requires_grad { parents } else { Vec::new() },
                backward: if requires_grad { Some(backward) } else { None },
                op_name,
                back_done: Cell::new(false),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<E>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.node.data.borrow().clone()
    }

    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.node.data.borrow()[0]
    }

    /// Replace the stored values. Only legal for leaves (optimizer updates).
    pub fn set_data(&self, data: Vec<E>) {
        assert!(self.node.backward.is_none(), "set_data on a non-leaf tensor");
        assert_eq!(data.len(), self.numel());
        *self.node.data.borrow_mut() = data;
    }

    /// Copy of the values as a fresh non-graph leaf.
    pub fn detach(&self) -> Tensor<E> {
        Tensor::new(&self.node.shape, self.to_vec())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self
            .node
            .data
            .borrow()
            .iter()
            .map(|v| F::from_f64(v.into_f64()))
            .collect();
        Tensor::new(&self.node.shape, data)
    }

    /// Accumulated gradient, or zeros when nothing reached this node.
    pub fn grad(&self) -> Vec<E> {
        self.node
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![E::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
        self.node.back_done.set(false);
    }

    pub(crate) fn accumulate_grad(&self, contrib: &[E]) {
        let mut g = self.node.grad.borrow_mut();
        match g.as_mut() {
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(contrib) {
                    *a = *a + *c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode gradient propagation from a scalar loss.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.node.shape.clone()));
        }
        if self.node.back_done.get() {
            return Err(TensorError::TapeConsumed);
        }
        self.node.back_done.set(true);

        // Iterative post-order DFS; reversed post-order is a valid
        // reverse-topological visit order (each node exactly once).
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.node.id);
        while let Some((t, child)) = stack.pop() {
            if child < t.node.parents.len() {
                let next = t.node.parents[child].clone();
                stack.push((t, child + 1));
                if next.requires_grad() && seen.insert(next.node.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }

        self.accumulate_grad(&[E::one()]);
        for t in order.iter().rev() {
            if let Some(back) = &t.node.backward {
                let g = t.node.grad.borrow().clone();
                if let Some(g) = g {
                    back(&g, &t.node.parents);
                }
            }
        }
        Ok(())
    }
}

/// Named trainable tensor with a persistent gradient accumulator.
#[derive(Clone)]
pub struct Parameter<E: Element> {
    name: Rc<str>,
    value: Tensor<E>,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        let value = Tensor::new_with_grad(value.shape(), value.to_vec());
        Parameter {
            name: name.into().into(),
            value,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The grad-enabled leaf; use this inside forward passes.
    pub fn tensor(&self) -> &Tensor<E> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn grad(&self) -> Vec<E> {
        self.value.grad()
    }

    pub fn zero_grad(&self) {
        self.value.zero_grad();
    }

    pub fn set_data(&self, data: Vec<E>) {
        self.value.set_data(data);
    }
}

impl<E: Element> fmt::Debug for Parameter<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.name)
            .field("shape", &self.value.shape())
            .finish()
    }
}
