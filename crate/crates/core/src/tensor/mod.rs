//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A `Tensor` is an immutable node in a computation DAG. Forward ops build
//! new nodes; `backward` on a scalar loss accumulates gradients into every
//! reachable `param` leaf. Nodes whose inputs carry no gradient are pruned
//! to constants at construction, so purely numeric subgraphs (e.g. routing
//! coefficient iterations) cost no graph memory.

mod batchnorm;
mod conv;
mod elementwise;
mod matmul;
mod reduce;
mod resize;
pub(crate) mod shape;
mod shape_ops;

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::scalar::Scalar;

pub type TensorResult<F> = Result<Tensor<F>, TensorError>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: String },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Backward rule attached to a non-leaf node. Returns one gradient buffer
/// per parent (None for parents that do not require gradients).
pub(crate) trait GradFn<F: Scalar> {
    fn name(&self) -> &'static str;
    fn backward(
        &self,
        grad: &[F],
        out_shape: &[usize],
        out_data: &[F],
        parents: &[Tensor<F>],
    ) -> Vec<Option<Vec<F>>>;
}

pub(crate) struct Inner<F: Scalar> {
    id: usize,
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<F>>>,
    parents: Vec<Tensor<F>>,
    grad_fn: Option<Box<dyn GradFn<F>>>,
}

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense n-dimensional float array participating in a reverse-mode
/// differentiation graph. Cloning is cheap (shared node).
pub struct Tensor<F: Scalar> {
    inner: Rc<Inner<F>>,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn axpy<F: Scalar>(dst: &mut [F], src: &[F]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<F: Scalar> Tensor<F> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<F>,
        requires_grad: bool,
        parents: Vec<Tensor<F>>,
        grad_fn: Option<Box<dyn GradFn<F>>>,
    ) -> Self {
        debug_assert_eq!(shape::numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                grad_fn,
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: impl Into<Vec<usize>>, data: Vec<F>) -> TensorResult<F> {
        let shape = shape.into();
        if shape::numel(&shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!(
                    "shape {:?} holds {} values, got {}",
                    shape,
                    shape::numel(&shape),
                    data.len()
                ),
            });
        }
        Ok(Self::new_inner(shape, data, false, Vec::new(), None))
    }

    /// Gradient-carrying leaf (a trainable parameter).
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<F>) -> TensorResult<F> {
        let t = Self::from_vec(shape, data)?;
        Ok(Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: t.inner.shape.clone(),
                data: t.inner.data.clone(),
                requires_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                grad_fn: None,
            }),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape::numel(&shape);
        Self::new_inner(shape, vec![F::zero(); n], false, Vec::new(), None)
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: F) -> Self {
        let shape = shape.into();
        let n = shape::numel(&shape);
        Self::new_inner(shape, vec![v; n], false, Vec::new(), None)
    }

    pub fn scalar(v: F) -> Self {
        Self::new_inner(Vec::new(), vec![v], false, Vec::new(), None)
    }

    /// Internal node constructor. Prunes to a constant leaf when no parent
    /// requires gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<F>,
        parents: Vec<Tensor<F>>,
        grad_fn: Box<dyn GradFn<F>>,
    ) -> Self {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{}: non-finite forward output",
            grad_fn.name()
        );
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if requires_grad {
            Self::new_inner(shape, data, true, parents, Some(grad_fn))
        } else {
            Self::new_inner(shape, data, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.inner.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> usize {
        self.inner.id
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.grad_fn.is_none()
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<F>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient of a leaf, zeros if no backward pass reached it.
    pub fn grad_or_zeros(&self) -> Vec<F> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![F::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Constant copy severed from the graph.
    pub fn detach(&self) -> Tensor<F> {
        Self::new_inner(
            self.inner.shape.clone(),
            self.inner.data.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    pub fn check_finite(&self, what: &str) -> Result<(), TensorError> {
        if self.inner.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite {
                op: what.to_string(),
            })
        }
    }

    fn accumulate_leaf_grad(&self, g: &[F]) {
        let mut slot = self.inner.grad.borrow_mut();
        match &mut *slot {
            Some(buf) => axpy(buf, g),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate
    /// additively into every reachable gradient-carrying leaf; repeated
    /// calls without `zero_grad` keep accumulating.
    pub fn backward(&self) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.inner.shape.clone(),
            });
        }

        // Collect reachable gradient-relevant nodes.
        let mut visited: HashSet<usize> = HashSet::new();
        let mut nodes: Vec<Tensor<F>> = Vec::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !visited.insert(t.id()) {
                continue;
            }
            for p in &t.inner.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        // Parents always have smaller ids than children, so descending id
        // order is a valid reverse topological order.
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut grads: HashMap<usize, Vec<F>> = HashMap::new();
        grads.insert(self.id(), vec![F::one()]);

        for node in &nodes {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if let Some(gf) = &node.inner.grad_fn {
                let parts = gf.backward(&g, &node.inner.shape, &node.inner.data, &node.inner.parents);
                debug_assert_eq!(parts.len(), node.inner.parents.len());
                for (parent, part) in node.inner.parents.iter().zip(parts) {
                    let Some(part) = part else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(part.len(), parent.numel());
                    match grads.entry(parent.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            axpy(e.get_mut(), &part)
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(part);
                        }
                    }
                }
            } else if node.requires_grad() {
                node.accumulate_leaf_grad(&g);
            }
        }
        Ok(())
    }
}
