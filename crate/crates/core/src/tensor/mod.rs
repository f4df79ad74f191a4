//! Minimal 4-D tensor engine with reverse-mode automatic differentiation.
//!
//! Every tensor is `N×C×H×W`, stored row-major within each channel plane.
//! Ops applied to tensors that require gradients record a [`TapeNode`] that
//! references the op inputs, so the tape is the DAG reachable from a loss.
//! [`Tensor::backward`] walks it in reverse topological order and
//! accumulates gradients into the leaves.
//!
//! ```
//! use ids_core::tensor::{Shape, Tensor};
//!
//! let w = Tensor::<f32>::param(Shape::scalar(), vec![2.0]);
//! let x = Tensor::scalar(1.0);
//! let loss = w.mul(&x).unwrap().add_scalar(-1.0).square().mean().unwrap();
//! loss.backward().unwrap();
//! assert_eq!(w.grad().unwrap(), vec![2.0]);
//! ```

mod conv;
mod gradcheck;
mod ops;
mod real;

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

pub use conv::{conv2d_backward_raw, conv2d_forward_raw, ConvGeometry, ConvGrads};
pub use gradcheck::{finite_diff_check, GradCheckOptions};
pub use real::Real;

pub(crate) use real::{gemm, Layout};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: mismatch in {dim}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("data length {got} does not match shape {shape}")]
    DataLength { shape: Shape, got: usize },
    #[error("backward needs a scalar loss, got shape {0}")]
    NotScalar(Shape),
    #[error("{0}: empty tensor")]
    Empty(&'static str),
    #[error("loss does not depend on any tensor that requires a gradient")]
    NotOnTape,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

pub(crate) fn check_dim(op: &'static str, dim: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            dim,
            expected,
            got,
        })
    }
}

/// `(batch, channels, height, width)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// What a backward closure sees when the tape is replayed.
pub struct BackwardCtx<'a, T: Real> {
    pub grad_out: &'a [T],
    pub inputs: &'a [Tensor<T>],
    pub output: &'a [T],
}

/// Per-input gradients; `None` for inputs that do not need one.
pub type InputGrads<T> = Vec<Option<Vec<T>>>;

type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> InputGrads<T>>;

/// One recorded op: identifier, inputs, and the vector-Jacobian product.
/// Saved activations live in the inputs or are captured by the closure.
pub struct TapeNode<T: Real> {
    op: &'static str,
    inputs: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Real> {
    shape: Shape,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    node: Option<TapeNode<T>>,
}

/// Reference-counted handle; clones share storage and tape position.
#[derive(Clone)]
pub struct Tensor<T: Real = f32>(Rc<Inner<T>>);

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("op", &self.op())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    /// Leaf tensor. With `requires_grad` the gradient buffer starts at zero.
    pub fn leaf(shape: Shape, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength { shape, got: data.len() });
        }
        let grad = requires_grad.then(|| vec![T::zero(); data.len()]);
        Ok(Self(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(grad),
            requires_grad,
            node: None,
        })))
    }

    /// Constant (no gradient) tensor.
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        Self::leaf(shape, data, false)
    }

    /// Trainable leaf. Panics if `data` does not fit `shape`.
    pub fn param(shape: Shape, data: Vec<T>) -> Self {
        Self::leaf(shape, data, true).expect("parameter data matches shape")
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self::leaf(shape, vec![value; shape.numel()], false).expect("length matches")
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Result of an op. Records a tape node only if some input needs a
    /// gradient; otherwise the result is a constant.
    ///
    /// This is also the extension point for custom differentiable ops.
    pub fn from_op<F>(op: &'static str, shape: Shape, data: Vec<T>, inputs: Vec<Tensor<T>>, backward: F) -> Self
    where
        F: Fn(&BackwardCtx<'_, T>) -> InputGrads<T> + 'static,
    {
        debug_assert_eq!(data.len(), shape.numel(), "{op}: output length");
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let node = requires_grad.then(|| TapeNode {
            op,
            inputs,
            backward: Box::new(backward),
        });
        Self(Rc::new(Inner {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            node,
        }))
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Op identifier of the node that produced this tensor (`"leaf"` otherwise).
    pub fn op(&self) -> &'static str {
        self.0.node.as_ref().map_or("leaf", |n| n.op)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    /// In-place update of a leaf's values (used by optimizers and loaders).
    pub fn update_data<F: FnOnce(&mut [T])>(&self, f: F) -> Result<()> {
        if !self.is_leaf() {
            return Err(invalid("update_data", "only leaf tensors can be modified in place"));
        }
        f(&mut self.0.data.borrow_mut());
        Ok(())
    }

    /// Accumulated gradient of a leaf that requires one.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[T]>) -> R) -> R {
        f(self.0.grad.borrow().as_deref())
    }

    pub fn zero_grad(&self) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Copy of the values, cut from the tape.
    pub fn detach(&self) -> Self {
        Self::leaf(self.shape(), self.to_vec(), false).expect("same length")
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.borrow().iter().all(|v| v.is_finite())
    }

    fn key(&self) -> *const Inner<T> {
        Rc::as_ptr(&self.0)
    }

    /// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate
    /// additively across calls until [`Tensor::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar(self.shape()));
        }
        if !self.requires_grad() {
            return Err(TensorError::NotOnTape);
        }
        let order = self.topo_order();
        let mut pending: HashMap<*const Inner<T>, Vec<T>> = HashMap::new();
        pending.insert(self.key(), vec![T::one()]);

        for t in order.iter().rev() {
            let Some(grad_out) = pending.remove(&t.key()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                if let Some(g) = t.0.grad.borrow_mut().as_mut() {
                    g.iter_mut().zip(&grad_out).for_each(|(a, b)| *a = *a + *b);
                }
                continue;
            };
            let output = t.0.data.borrow();
            let ctx = BackwardCtx {
                grad_out: &grad_out,
                inputs: &node.inputs,
                output: &output,
            };
            let input_grads = (node.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}: backward arity", node.op);
            for (input, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), input.numel(), "{}: gradient length", node.op);
                match pending.get_mut(&input.key()) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    None => {
                        pending.insert(input.key(), g);
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the grad-requiring subgraph (inputs before users).
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Inner<T>> = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.key());
        while let Some((t, next)) = stack.pop() {
            let inputs = t.0.node.as_ref().map_or(&[][..], |n| &n.inputs[..]);
            if let Some(child) = inputs.get(next) {
                let child = child.clone();
                stack.push((t, next + 1));
                if child.requires_grad() && visited.insert(child.key()) {
                    stack.push((child, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_rule_square_loss() {
        // loss = mean((w·x − 1)²), w = 2, x = 1 → dloss/dw = 2
        let w = Tensor::<f64>::param(Shape::scalar(), vec![2.0]);
        let x = Tensor::scalar(1.0);
        let loss = w.mul(&x).unwrap().add_scalar(-1.0).square().mean().unwrap();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn independent_leaf_gets_zero_gradient() {
        let a = Tensor::<f32>::param(Shape::new(1, 1, 1, 3), vec![1.0, 2.0, 3.0]);
        let b = Tensor::<f32>::param(Shape::new(1, 1, 1, 3), vec![1.0, 1.0, 1.0]);
        a.square().mean().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let a = Tensor::<f32>::param(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]);
        let loss = a.square().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![4.0, -8.0]);
        a.zero_grad();
        assert_eq!(a.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let a = Tensor::<f32>::param(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        assert!(matches!(a.square().backward(), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn detached_loss_rejected() {
        let a = Tensor::<f32>::scalar(1.0);
        assert_eq!(a.square().backward(), Err(TensorError::NotOnTape));
    }

    #[test]
    fn diamond_graph_sums_both_paths() {
        // y = a·a + a → dy/da = 2a + 1
        let a = Tensor::<f64>::param(Shape::scalar(), vec![3.0]);
        let y = a.mul(&a).unwrap().add(&a).unwrap().sum();
        y.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn data_length_checked() {
        assert!(Tensor::<f32>::new(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn intermediate_shares_no_grad_buffer() {
        let a = Tensor::<f32>::param(Shape::scalar(), vec![1.0]);
        let b = a.scale(2.0);
        assert!(b.requires_grad());
        assert!(b.grad().is_none());
        assert_eq!(b.op(), "scale");
    }
}
