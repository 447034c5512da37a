//! Minimal reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Var::backward`] on a scalar walks the tape in reverse and accumulates
//! gradients for every node that (transitively) depends on a trainable leaf.
//! Nodes whose inputs are all constants never store a backward closure, so a
//! frozen sub-network costs nothing at gradient time.
//!
//! All values are dense row-major (`standard layout`) arrays.

mod conv;
mod ops;

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use conv::Conv2dSpec;

/// Floating point element type usable on the tape (`f32` and `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// Lossy conversion from `f64` (used for constants).
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<Option<ArrayD<F>>>>;

struct Node<F: Real> {
    value: Arc<ArrayD<F>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<F>>,
}

/// Operation recorder. One tape per forward pass.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    record: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: true,
        }
    }

    /// A tape that never records backward closures (inference mode).
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf.
    pub fn leaf(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push_leaf(Arc::new(value), self.record)
    }

    /// Leaf that shares storage with an existing array (parameters).
    pub fn leaf_shared(&self, value: Arc<ArrayD<F>>, trainable: bool) -> Var<'_, F> {
        self.push_leaf(value, trainable && self.record)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push_leaf(Arc::new(value), false)
    }

    pub fn scalar(&self, v: F) -> Var<'_, F> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    fn push_leaf(&self, value: Arc<ArrayD<F>>, requires_grad: bool) -> Var<'_, F> {
        let value = if value.is_standard_layout() {
            value
        } else {
            Arc::new(standard(value.as_ref().clone()))
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push_op<B>(&self, value: ArrayD<F>, parents: &[Var<'_, F>], backward: B) -> Var<'_, F>
    where
        B: Fn(&ArrayD<F>) -> Vec<Option<ArrayD<F>>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.record && parents.iter().any(|p| nodes[p.id].requires_grad);
        let (parents, backward): (Vec<usize>, Option<BackwardFn<F>>) = if requires_grad {
            (parents.iter().map(|p| p.id).collect(), Some(Box::new(backward)))
        } else {
            (Vec::new(), None)
        };
        nodes.push(Node {
            value: Arc::new(standard(value)),
            parents,
            requires_grad,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<ArrayD<F>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn backward_from(&self, root: usize, seed: ArrayD<F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<F>>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(standard(seed));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg.map(standard) else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "gradient shape for node {pid}");
                match &mut grads[pid] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // intermediate gradients were consumed above; only leaves remain
        Gradients { grads }
    }
}

/// Row-major copy unless already row-major; kernels slice raw buffers.
fn standard<F: Real>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// Gradients of a scalar with respect to the leaves of a tape.
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf, or zeros of the leaf's shape if it did not
    /// influence the output.
    pub fn get_or_zeros(&self, v: Var<'_, F>) -> ArrayD<F> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.shape()),
        }
    }

    pub fn take(&mut self, v: Var<'_, F>) -> Option<ArrayD<F>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Arc<ArrayD<F>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Scalar value of a zero-dimensional (or single element) node.
    pub fn item(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self) -> Gradients<F> {
        let v = self.value();
        assert_eq!(v.len(), 1, "backward() requires a scalar, got {:?}", v.shape());
        self.tape.backward_from(self.id, ArrayD::from_elem(v.raw_dim(), F::one()))
    }

    /// Reverse pass seeded with an explicit output cotangent.
    pub fn backward_with(&self, seed: ArrayD<F>) -> Gradients<F> {
        assert_eq!(seed.shape(), self.value().shape());
        self.tape.backward_from(self.id, seed)
    }
}
