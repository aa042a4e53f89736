//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus, when it was produced by a
//! differentiable operation, a link to its parents and a gradient closure.
//! Calling [`Tensor::backward`] on a scalar walks the graph in reverse
//! topological order and accumulates gradients into every node that
//! requires them. Graphs are reference counted with `Rc` and therefore
//! confined to the thread that built them; independent graphs may live on
//! separate threads.
//!
//! The scalar type is a type parameter (`f32` or `f64`), see [`Real`].

mod checkpoint;
mod conv;
pub mod gradcheck;
mod linalg;
mod nn;
mod ops;
mod params;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::rc::Rc;

use num_traits::Float;

use crate::error::{Error, Result};

pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use conv::conv_output_size;
pub use params::{Bindings, ParamEntry, ParamId, ParamStore};

/// Floating point scalar usable as tensor element.
pub trait Real:
    Float
    + Default
    + std::ops::AddAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// `c = op(a) * op(b) (+ c)` for row-major operands, where `op(a)` is
    /// `m x k` and `op(b)` is `k x n`. A transposed operand is stored with its
    /// dimensions swapped.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;
}

fn gemm_strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Logical (rows x cols) view of a buffer stored as (rows x cols), or as
    // (cols x rows) when transposed.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = gemm_strides(m, k, a_trans);
                let (rsb, csb) = gemm_strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe the
                // row-major (or swapped) layout of each buffer.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn lit(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// What a gradient closure receives during the backward pass.
pub struct GradContext<'a, T: Real> {
    /// Value of the node being differentiated.
    pub output: &'a [T],
    /// Gradient of the objective with respect to `output`.
    pub grad: &'a [T],
    pub parents: &'a [Tensor<T>],
}

impl<T: Real> GradContext<'_, T> {
    /// Whether parent `i` needs a gradient at all.
    pub fn needs(&self, i: usize) -> bool {
        self.parents[i].requires_grad()
    }
}

type GradFn<T> = Box<dyn Fn(&GradContext<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T: Real> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    parents: Vec<Tensor<T>>,
    grad_fn: Option<GradFn<T>>,
}

pub struct Tensor<T: Real = f64> {
    node: Rc<Node<T>>,
}

impl<T: Real> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish_non_exhaustive()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("dimensions must be positive, got {shape:?}"),
        ));
    }
    if numel(shape) != len {
        return Err(Error::shape(
            "tensor",
            format!(
                "shape {shape:?} holds {} elements but data has {len}",
                numel(shape)
            ),
        ));
    }
    Ok(())
}

impl<T: Real> Tensor<T> {
    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Tensor {
            node: Rc::new(Node {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                grad_fn: None,
            }),
        })
    }

    /// A constant that never receives a gradient.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Self::leaf(shape.into(), data, false)
    }

    /// A leaf whose gradient is populated by [`Tensor::backward`].
    pub fn param(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        Self::leaf(shape.into(), data, true)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n = numel(&shape);
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn scalar(v: T) -> Self {
        Self::leaf(vec![1], vec![v], false).expect("scalar shape is valid")
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    /// Builds the result of a differentiable operation.
    ///
    /// `grad_fn` maps the output gradient to one optional gradient per parent,
    /// each with that parent's element count. It is only stored when some
    /// parent requires a gradient.
    pub fn from_op<F>(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        grad_fn: F,
    ) -> Result<Self>
    where
        F: Fn(&GradContext<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        check_shape(&shape, data.len())?;
        let requires_grad = parents.iter().any(Tensor::requires_grad);
        let (parents, grad_fn): (_, Option<GradFn<T>>) = if requires_grad {
            (parents, Some(Box::new(grad_fn)))
        } else {
            (Vec::new(), None)
        };
        Ok(Tensor {
            node: Rc::new(Node {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                grad_fn,
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn data(&self) -> &[T] {
        &self.node.data
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.node.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Accumulated gradient, present after a backward pass for leaves that
    /// require one.
    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        let g = self.node.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().expect("checked")))
        } else {
            None
        }
    }

    pub fn take_grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// A copy of this value detached from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.node.shape.clone(), self.node.data.clone(), false)
            .expect("shape already validated")
    }

    /// Back-propagates from a single-element tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "expected a single-element tensor, got shape {:?}",
                    self.shape()
                ),
            ));
        }
        self.backward_with(vec![T::one()])
    }

    /// Back-propagates an explicit output gradient.
    pub fn backward_with(&self, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed has {} elements, tensor has {}",
                    seed.len(),
                    self.numel()
                ),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        accumulate(&self.node, seed);
        for node in order.iter().rev() {
            let Some(grad_fn) = node.grad_fn.as_ref() else {
                continue;
            };
            // Intermediate gradients are released once propagated.
            let Some(grad) = node.grad.borrow_mut().take() else {
                continue;
            };
            let ctx = GradContext {
                output: &node.data,
                grad: &grad,
                parents: &node.parents,
            };
            let parent_grads = grad_fn(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if parent.requires_grad() {
                        debug_assert_eq!(g.len(), parent.numel());
                        accumulate(&parent.node, g);
                    }
                }
            }
        }
        Ok(())
    }

    fn topological_order(&self) -> Vec<Rc<Node<T>>> {
        let mut order = Vec::new();
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        // Iterative post-order DFS; deep networks overflow a recursive one.
        let mut stack: Vec<(Rc<Node<T>>, bool)> = vec![(Rc::clone(&self.node), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(Rc::as_ptr(&node)) {
                continue;
            }
            stack.push((Rc::clone(&node), true));
            for p in &node.parents {
                if p.requires_grad() && !visited.contains(&Rc::as_ptr(&p.node)) {
                    stack.push((Rc::clone(&p.node), false));
                }
            }
        }
        order
    }
}

fn accumulate<T: Real>(node: &Node<T>, g: Vec<T>) {
    let mut slot = node.grad.borrow_mut();
    match slot.as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        None => *slot = Some(g),
    }
}
