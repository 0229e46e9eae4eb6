//! A small tape-based reverse-mode autodiff engine over `ndarray`.
//!
//! Every operation records its output value and a closure mapping the output
//! gradient to the gradients of its parents. Nodes are appended in evaluation
//! order, so the node index is already a topological order and the backward
//! pass is a single reverse sweep.
//!
//! Tensors are dense, row-major `ArrayD`s. Image batches use the NCHW layout.

mod conv;
mod norm;
mod ops;
mod resample;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use conv::{conv_output_size, conv_transpose_output_size};

/// Dense n-dimensional tensor.
pub type Tensor<T> = ArrayD<T>;

/// Floating point element type the engine runs on (`f32` for training,
/// `f64` for gradient verification).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + ndarray_npy::WritableElement
    + ndarray_npy::ReadableElement
    + 'static
{
    /// Converts an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    /// Widens to `f64`.
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// Name of the type, used in checkpoint manifests.
    const DTYPE: &'static str;

    /// `C = alpha * A * B + beta * C` with explicit row/column strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping
    /// `m x k`, `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `c (+)= a * b` on slices with explicit
/// `(row, column)` strides for `a` and `b` and a row stride for `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    c: &mut [T],
    rsc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |r: usize, rs: usize, cc: usize, cs: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(last(m, rsa, k, csa) < a.len() && last(k, rsb, n, csb) < b.len());
    }
    assert!(last(m, rsc, n, 1) < c.len());
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: every addressed element is in bounds (asserted above) and `c`
    // is a unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        )
    }
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Recording tape for one forward/backward evaluation.
pub struct Graph<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Arc<Tensor<T>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var { graph: self, id }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Arc::new(value.into_dyn()), Vec::new(), None, false)
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Arc::new(value.into_dyn()), Vec::new(), None, true)
    }

    /// Registers a shared tensor (typically a parameter) without copying it.
    pub fn shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Vec::new(), None, requires_grad)
    }

    /// Scalar constant (0-d tensor).
    pub fn scalar(&self, v: T) -> Var<'_, T> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Records the result of an operation. The backward closure receives the
    /// output gradient and a flag per parent telling whether that parent
    /// needs a gradient.
    pub(crate) fn op(
        &self,
        value: Tensor<T>,
        parents: &[Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        if requires_grad {
            self.push(Arc::new(value), ids, Some(Box::new(backward)), true)
        } else {
            self.push(Arc::new(value), Vec::new(), None, false)
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires_grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a scalar root, seeded with one.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let value = root.value();
        assert_eq!(value.len(), 1, "backward() needs a scalar root; use backward_seeded");
        let seed = ArrayD::from_elem(value.raw_dim(), T::one());
        self.backward_seeded(root, seed)
    }

    /// Reverse sweep with an explicit output gradient (vector-Jacobian product).
    pub fn backward_seeded(&self, root: Var<'_, T>, seed: Tensor<T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(seed.shape(), nodes[root.id].value.shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(root.id + 1);
        grads.resize_with(root.id + 1, || None);
        grads[root.id] = Some(seed);
        let mut leaves = HashMap::new();
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                Some(bw) => {
                    let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                    let pgs = bw(&g, &needs);
                    debug_assert_eq!(pgs.len(), node.parents.len());
                    for ((&p, pg), need) in node.parents.iter().zip(pgs).zip(needs) {
                        let Some(pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape of node {p}");
                        match &mut grads[p] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None => {
                    leaves.insert(id, g);
                }
            }
        }
        Gradients { grads: leaves }
    }
}

/// Gradients of the differentiable leaves reached by a backward sweep.
pub struct Gradients<T: Real> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(&v.id)
    }

    /// Gradient of `v`, or zeros of its shape when unreached.
    pub fn wrt_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(&v.id) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(v.value().raw_dim()),
        }
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.remove(&v.id)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Real> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<'g, T: Real> Debug for Var<'g, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'g, T: Real> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires_grad_of(self.id)
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on tensor of shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.shared(self.value(), false)
    }
}
