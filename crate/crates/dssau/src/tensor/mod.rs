//! Dense n-d tensors with reverse-mode differentiation.
//!
//! Tensors are row-major, immutable once created (optimizer updates go
//! through [`Tensor::data_mut`] between steps), and cheap to clone: a tensor
//! is a reference-counted handle onto its node. When gradient recording is
//! enabled and an input of an operation requires gradients, the output node
//! keeps its parent handles together with a backward closure; [`Tensor::backward`]
//! replays those closures in reverse topological order, visiting each node
//! exactly once.
//!
//! All kernels are plain single-threaded loops with a fixed evaluation order,
//! so identical inputs produce bitwise-identical outputs.

mod ops;
mod optim;
mod spatial;

pub use ops::{concat, one_hot};
pub use optim::Adam;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

// ── Scalar element types ───────────────────────────────────────────────────

/// Floating-point dtype of a tensor buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Element type a [`Tensor`] can hold: 32-bit for training and inference,
/// 64-bit for gradient verification.
pub trait Scalar: Copy + PartialOrd + fmt::Debug + fmt::Display + Default + 'static {
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn add(self, rhs: Self) -> Self;
    fn sub(self, rhs: Self) -> Self;
    fn mul(self, rhs: Self) -> Self;
    fn div(self, rhs: Self) -> Self;
    fn neg(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, rhs: Self) -> Self;
    fn minv(self, rhs: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $dt:expr) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dt;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn add(self, rhs: Self) -> Self {
                self + rhs
            }
            fn sub(self, rhs: Self) -> Self {
                self - rhs
            }
            fn mul(self, rhs: Self) -> Self {
                self * rhs
            }
            fn div(self, rhs: Self) -> Self {
                self / rhs
            }
            fn neg(self) -> Self {
                -self
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maxv(self, rhs: Self) -> Self {
                if self > rhs {
                    self
                } else {
                    rhs
                }
            }
            fn minv(self, rhs: Self) -> Self {
                if self < rhs {
                    self
                } else {
                    rhs
                }
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32);
impl_scalar!(f64, Dtype::F64);

// ── Errors ─────────────────────────────────────────────────────────────────

/// Errors raised by tensor construction and kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Incompatible operand shapes, e.g. non-conformable matmul.
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A parameter (stride, k, factor, groups, ...) is out of its valid range.
    InvalidParam { op: &'static str, msg: String },
    /// A gather/scatter index addressed past the extent of its axis.
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    /// Buffer length does not match the product of the extents.
    LengthMismatch { expected: usize, got: usize },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { numel: usize },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DimMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Self::InvalidParam { op, msg } => write!(f, "{op}: {msg}"),
            Self::IndexOutOfRange { op, index, extent } => {
                write!(f, "{op}: index {index} out of range for extent {extent}")
            }
            Self::LengthMismatch { expected, got } => {
                write!(f, "buffer length {got} does not match shape product {expected}")
            }
            Self::NonScalarLoss { numel } => {
                write!(f, "backward requires a scalar loss, got {numel} elements")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub(crate) type Result<T> = std::result::Result<T, TensorError>;

// ── Gradient recording mode ────────────────────────────────────────────────

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with gradient recording disabled; inference paths use this so
/// intermediate tensors are freed as they go out of scope.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

// ── Tensor ─────────────────────────────────────────────────────────────────

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Backward closure: receives the output gradient and the parent handles,
/// returns one gradient contribution per parent (`None` = no contribution).
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>]) -> Vec<Option<Vec<T>>>>;

pub(crate) struct Node<T: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

/// Dense n-d value container with optional gradient tracking.
pub struct Tensor<T: Scalar = f32> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, dtype={:?}, requires_grad={})",
            self.node.id,
            self.node.shape,
            T::DTYPE,
            self.node.requires_grad
        )
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward,
            }),
        }
    }

    /// Leaf tensor from a buffer; fails when the buffer length does not match
    /// the shape product.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, false, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![T::zero(); n], false, vec![], None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self::new_node(shape.to_vec(), vec![v; n], false, vec![], None)
    }

    /// Rank-0 scalar.
    pub fn scalar(v: T) -> Self {
        Self::new_node(vec![], vec![v], false, vec![], None)
    }

    /// Zero-mean Gaussian samples with the given standard deviation,
    /// drawn via Box-Muller so only a uniform source is needed.
    pub fn randn<R: rand::Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(T::from_f64(r * theta.cos() * std));
            if data.len() < n {
                data.push(T::from_f64(r * theta.sin() * std));
            }
        }
        Self::new_node(shape.to_vec(), data, false, vec![], None)
    }

    /// Mark this leaf as a trainable parameter. Must be called before the
    /// tensor participates in any operation.
    pub fn with_grad(self) -> Self {
        assert!(
            self.node.parents.is_empty(),
            "with_grad is only valid on leaf tensors"
        );
        let data = self.node.data.borrow().clone();
        Self::new_node(self.node.shape.clone(), data, true, vec![], None)
    }

    /// Wrap an op result; parents and backward are dropped when no input
    /// requires gradients or recording is disabled.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        if track {
            Self::new_node(shape, data, true, parents, Some(backward))
        } else {
            Self::new_node(shape, data, false, vec![], None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn dtype(&self) -> Dtype {
        T::DTYPE
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable access to the buffer, for optimizer updates. Do not mutate
    /// tensors that are part of a live graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a single-element tensor");
        self.node.data.borrow()[0]
    }

    /// Accumulated gradient, if `backward` has populated one.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Copy with the graph detached; shares nothing with the source.
    pub fn detached(&self) -> Self {
        Self::new_node(
            self.node.shape.clone(),
            self.node.data.borrow().clone(),
            false,
            vec![],
            None,
        )
    }

    fn accumulate_grad(&self, contrib: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = gi.add(*ci);
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Populates `grad` on every
    /// reachable tensor that requires gradients, visiting each provenance
    /// node exactly once.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                numel: self.numel(),
            });
        }
        // Iterative post-order DFS: parents precede consumers in `order`.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited: HashSet<usize> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.node.id) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in &t.node.parents {
                if p.node.requires_grad && !visited.contains(&p.node.id) {
                    stack.push((p.clone(), false));
                }
            }
        }
        self.accumulate_grad(&[T::one()]);
        for t in order.iter().rev() {
            let Some(back) = &t.node.backward else { continue };
            let g = match t.node.grad.borrow().as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let contribs = back(&g, &t.node.parents);
            debug_assert_eq!(contribs.len(), t.node.parents.len());
            for (p, c) in t.node.parents.iter().zip(contribs) {
                if let Some(c) = c {
                    if p.node.requires_grad {
                        debug_assert_eq!(c.len(), p.numel());
                        p.accumulate_grad(&c);
                    }
                }
            }
        }
        Ok(())
    }
}

// ── IndexTensor ────────────────────────────────────────────────────────────

/// Dense non-negative integer index container (top-k indices, gather maps).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexTensor {
    shape: Vec<usize>,
    data: Vec<usize>,
}

impl IndexTensor {
    pub fn from_vec(data: Vec<usize>, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        Ok(IndexTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn values(&self) -> &[usize] {
        &self.data
    }

    /// Check every index against the extent of the axis it addresses.
    pub fn validate(&self, extent: usize, op: &'static str) -> Result<()> {
        for &i in &self.data {
            if i >= extent {
                return Err(TensorError::IndexOutOfRange {
                    op,
                    index: i,
                    extent,
                });
            }
        }
        Ok(())
    }
}

// ── Shape helpers shared by the kernels ────────────────────────────────────

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
