//! Dynamic reverse-mode tape.
//!
//! Every tracked operation appends a node holding its forward value and the
//! ids of its inputs. [`Tape::backward`] walks the nodes in reverse creation
//! order, which is a valid topological order because inputs always precede
//! the nodes built from them.
//!
//! Broadcasting rule for elementwise binary ops: the right operand may have
//! the same shape as the left one, or a shape equal to a *suffix* of it (it
//! is then repeated along the leading dimensions). Nothing else broadcasts.
//!
//! Matmul rule: `[m,k] x [k,n]`, `[B,m,k] x [k,n]` (rhs shared across the
//! batch) and `[B,m,k] x [B,k,n]`.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, gelu, gelu_grad, sigmoid};
use crate::tensor::{Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Tanh,
    Sigmoid,
    Gelu,
    Exp,
    Square,
    Sqrt,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, b_batched: bool },
    Transpose { x: usize, batch: usize, rows: usize, cols: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: T },
    Shift { x: usize },
    Unary { x: usize, kind: Unary },
    LnFloor { x: usize, eps: T },
    Sum { x: usize },
    SumAxis { x: usize, outer: usize, len: usize, inner: usize },
    Softmax { x: usize, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, cols: usize },
    Concat { xs: Vec<usize>, outer: usize, sizes: Vec<usize>, inner: usize },
    Narrow { x: usize, outer: usize, len_in: usize, start: usize, len: usize, inner: usize },
    GatherRows { x: usize, idx: Vec<usize>, cols: usize },
    Pick { x: usize, idx: Vec<usize>, cols: usize },
    L2Normalize { x: usize, cols: usize },
    Reshape { x: usize },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
    /// Per-op saved values (row inverse std for layer norm, row norms for
    /// l2 normalization).
    aux: Vec<T>,
}

/// Recording context for one forward/backward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, usize>>,
    track_frozen: bool,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradients for every parameter bound to the tape that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params.iter().filter_map(|&(pid, node)| self.grads[node].as_deref().map(|g| (pid, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, node)| self.grads[node].as_deref())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Sum a gradient shaped like the broadcast result back onto the suffix shape.
fn reduce_to<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), params: RefCell::new(HashMap::new()), track_frozen: false }
    }

    /// A tape on which frozen parameters still receive gradients. Used by
    /// probes that inspect gradient flow independently of the optimizer.
    pub fn tracking_frozen() -> Self {
        Self { track_frozen: true, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool, aux: Vec<T>) -> Var<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, requires_grad, param: None, aux });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Untracked input.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false, Vec::new())
    }

    /// Input whose gradient is wanted.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true, Vec::new())
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<T>) -> Result<Var<'_, T>, TensorError> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.constant(&t))
    }

    /// Binds a parameter. Values are snapshotted; binding the same id twice
    /// returns the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<'_, T> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let rg = !p.frozen || self.track_frozen;
        let v = self.push(p.tensor.shape().to_vec(), p.tensor.data().to_vec(), Op::Leaf, rg, Vec::new());
        self.nodes.borrow_mut()[v.id].param = Some(id);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            // Interior grads are kept only where the caller may ask for them.
            grads[id] = Some(g);
        }
        let params = self.params.borrow().iter().map(|(&p, &n)| (p, n)).collect::<Vec<_>>();
        let mut params = params;
        params.sort_by_key(|(p, _)| p.0);
        Ok(Gradients { grads, params })
    }
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[id];
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, batch, m, k, n, b_batched } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if rg(a) {
                let mut ga = vec![T::zero(); batch * m * k];
                for bi in 0..batch {
                    let boff = if b_batched { bi * k * n } else { 0 };
                    kernels::matmul_nt(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bv[boff..boff + k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                add_into(&mut grads[a], ga);
            }
            if rg(b) {
                let nb = if b_batched { batch } else { 1 };
                let mut gb = vec![T::zero(); nb * k * n];
                for bi in 0..batch {
                    let boff = if b_batched { bi * k * n } else { 0 };
                    kernels::matmul_tn(
                        &av[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[boff..boff + k * n],
                        m,
                        k,
                        n,
                    );
                }
                add_into(&mut grads[b], gb);
            }
        }
        &Op::Transpose { x, batch, rows, cols } => {
            if rg(x) {
                // forward: out[b][j][i] = in[b][i][j]
                let mut gx = vec![T::zero(); g.len()];
                for bi in 0..batch {
                    let off = bi * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[off + i * cols + j] = g[off + j * rows + i];
                        }
                    }
                }
                add_into(&mut grads[x], gx);
            }
        }
        &Op::Add { a, b } => {
            if rg(a) {
                add_into(&mut grads[a], g.to_vec());
            }
            if rg(b) {
                add_into(&mut grads[b], reduce_to(g, nodes[b].value.len()));
            }
        }
        &Op::Sub { a, b } => {
            if rg(a) {
                add_into(&mut grads[a], g.to_vec());
            }
            if rg(b) {
                let r = reduce_to(g, nodes[b].value.len());
                add_into(&mut grads[b], r.into_iter().map(|v| -v).collect());
            }
        }
        &Op::Mul { a, b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let nb = bv.len();
            if rg(a) {
                let ga = g.iter().enumerate().map(|(i, &gi)| gi * bv[i % nb]).collect();
                add_into(&mut grads[a], ga);
            }
            if rg(b) {
                let full: Vec<T> = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                add_into(&mut grads[b], reduce_to(&full, nb));
            }
        }
        &Op::Scale { x, c } => {
            if rg(x) {
                add_into(&mut grads[x], g.iter().map(|&v| v * c).collect());
            }
        }
        &Op::Shift { x } | &Op::Reshape { x } => {
            if rg(x) {
                add_into(&mut grads[x], g.to_vec());
            }
        }
        &Op::Unary { x, kind } => {
            if rg(x) {
                let xv = &nodes[x].value;
                let y = &node.value;
                let gx = (0..g.len())
                    .map(|i| {
                        let d = match kind {
                            Unary::Tanh => T::one() - y[i] * y[i],
                            Unary::Sigmoid => y[i] * (T::one() - y[i]),
                            Unary::Gelu => gelu_grad(xv[i]),
                            Unary::Exp => y[i],
                            Unary::Square => T::of(2.0) * xv[i],
                            Unary::Sqrt => {
                                if y[i] > T::zero() {
                                    T::of(0.5) / y[i]
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        g[i] * d
                    })
                    .collect();
                add_into(&mut grads[x], gx);
            }
        }
        &Op::LnFloor { x, eps } => {
            if rg(x) {
                let xv = &nodes[x].value;
                let gx = g.iter().zip(xv).map(|(&gi, &xi)| if xi > eps { gi / xi } else { T::zero() }).collect();
                add_into(&mut grads[x], gx);
            }
        }
        &Op::Sum { x } => {
            if rg(x) {
                add_into(&mut grads[x], vec![g[0]; nodes[x].value.len()]);
            }
        }
        &Op::SumAxis { x, outer, len, inner } => {
            if rg(x) {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                add_into(&mut grads[x], gx);
            }
        }
        &Op::Softmax { x, outer, len, inner } => {
            if rg(x) {
                let y = &node.value;
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                add_into(&mut grads[x], gx);
            }
        }
        &Op::LogSoftmax { x, outer, len, inner } => {
            if rg(x) {
                let y = &node.value;
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let gsum: T = (0..len).map(|l| g[at(l)]).sum();
                        for l in 0..len {
                            gx[at(l)] = g[at(l)] - y[at(l)].exp() * gsum;
                        }
                    }
                }
                add_into(&mut grads[x], gx);
            }
        }
        &Op::LayerNorm { x, gamma, beta, cols } => {
            let xv = &nodes[x].value;
            let gam = &nodes[gamma].value;
            let rstd = &node.aux;
            let rows = xv.len() / cols;
            let nf = T::from_usize(cols).unwrap();
            let mut gx = vec![T::zero(); xv.len()];
            let mut ggam = vec![T::zero(); cols];
            let mut gbeta = vec![T::zero(); cols];
            for r in 0..rows {
                let xr = &xv[r * cols..(r + 1) * cols];
                let gr = &g[r * cols..(r + 1) * cols];
                let mean = xr.iter().copied().sum::<T>() / nf;
                let s = rstd[r];
                let xhat: Vec<T> = xr.iter().map(|&v| (v - mean) * s).collect();
                let dxhat: Vec<T> = gr.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                for c in 0..cols {
                    ggam[c] += gr[c] * xhat[c];
                    gbeta[c] += gr[c];
                }
                let sum_d = dxhat.iter().copied().sum::<T>();
                let sum_dx = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>();
                for c in 0..cols {
                    gx[r * cols + c] = s / nf * (nf * dxhat[c] - sum_d - xhat[c] * sum_dx);
                }
            }
            if rg(x) {
                add_into(&mut grads[x], gx);
            }
            if rg(gamma) {
                add_into(&mut grads[gamma], ggam);
            }
            if rg(beta) {
                add_into(&mut grads[beta], gbeta);
            }
        }
        Op::Concat { xs, outer, sizes, inner } => {
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&x, &sz) in xs.iter().zip(sizes) {
                if rg(x) {
                    let mut gx = Vec::with_capacity(outer * sz * inner);
                    for o in 0..*outer {
                        let start = (o * total + offset) * inner;
                        gx.extend_from_slice(&g[start..start + sz * inner]);
                    }
                    add_into(&mut grads[x], gx);
                }
                offset += sz;
            }
        }
        &Op::Narrow { x, outer, len_in, start, len, inner } => {
            if rg(x) {
                let mut gx = vec![T::zero(); outer * len_in * inner];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = (o * len_in + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                add_into(&mut grads[x], gx);
            }
        }
        Op::GatherRows { x, idx, cols } => {
            if rg(*x) {
                let mut gx = vec![T::zero(); nodes[*x].value.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..*cols {
                        gx[src * cols + c] += g[r * cols + c];
                    }
                }
                add_into(&mut grads[*x], gx);
            }
        }
        Op::Pick { x, idx, cols } => {
            if rg(*x) {
                let mut gx = vec![T::zero(); nodes[*x].value.len()];
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] += g[r];
                }
                add_into(&mut grads[*x], gx);
            }
        }
        &Op::L2Normalize { x, cols } => {
            if rg(x) {
                let y = &node.value;
                let norms = &node.aux;
                let mut gx = vec![T::zero(); y.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - yr[c] * dot) / nrm;
                    }
                }
                add_into(&mut grads[x], gx);
            }
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    fn node(&self) -> Ref<'t, Node<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id])
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.node().value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.node().requires_grad
    }

    pub fn values(&self) -> Vec<T> {
        self.node().value.clone()
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let n = self.node();
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node is well formed")
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.node().value[0]
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars belong to different tapes");
    }

    fn binary(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(&other);
        let (shape, value) = {
            let a = self.node();
            let b = other.node();
            let ok = b.shape.len() <= a.shape.len() && a.shape[a.shape.len() - b.shape.len()..] == b.shape[..];
            if !ok {
                return Err(TensorError::Shape { op: name, lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            let nb = b.value.len();
            let v = a.value.iter().enumerate().map(|(i, &x)| f(x, b.value[i % nb])).collect();
            (a.shape.clone(), v)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(shape, value, op, rg, Vec::new()))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "add", |a, b| a + b, Op::Add { a: self.id, b: other.id })
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub { a: self.id, b: other.id })
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul { a: self.id, b: other.id })
    }

    pub fn scale(&self, c: T) -> Var<'t, T> {
        let (shape, value) = {
            let n = self.node();
            (n.shape.clone(), n.value.iter().map(|&v| v * c).collect())
        };
        let rg = self.requires_grad();
        self.tape.push(shape, value, Op::Scale { x: self.id, c }, rg, Vec::new())
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// Adds a constant to every element.
    pub fn shift(&self, c: T) -> Var<'t, T> {
        let (shape, value) = {
            let n = self.node();
            (n.shape.clone(), n.value.iter().map(|&v| v + c).collect())
        };
        let rg = self.requires_grad();
        self.tape.push(shape, value, Op::Shift { x: self.id }, rg, Vec::new())
    }

    fn unary(&self, kind: Unary) -> Var<'t, T> {
        let (shape, value) = {
            let n = self.node();
            let f = |x: T| match kind {
                Unary::Tanh => x.tanh(),
                Unary::Sigmoid => sigmoid(x),
                Unary::Gelu => gelu(x),
                Unary::Exp => x.exp(),
                Unary::Square => x * x,
                Unary::Sqrt => x.sqrt(),
            };
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        let rg = self.requires_grad();
        self.tape.push(shape, value, Op::Unary { x: self.id, kind }, rg, Vec::new())
    }

    pub fn tanh(&self) -> Var<'t, T> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t, T> {
        self.unary(Unary::Gelu)
    }

    pub fn exp(&self) -> Var<'t, T> {
        self.unary(Unary::Exp)
    }

    pub fn square(&self) -> Var<'t, T> {
        self.unary(Unary::Square)
    }

    /// Square root; the derivative at 0 is taken as 0.
    pub fn sqrt(&self) -> Var<'t, T> {
        self.unary(Unary::Sqrt)
    }

    /// `ln(max(x, eps))`.
    pub fn ln_floor(&self, eps: T) -> Var<'t, T> {
        let (shape, value) = {
            let n = self.node();
            (n.shape.clone(), n.value.iter().map(|&x| x.max(eps).ln()).collect())
        };
        let rg = self.requires_grad();
        self.tape.push(shape, value, Op::LnFloor { x: self.id, eps }, rg, Vec::new())
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'t, T> {
        let s = self.node().value.iter().copied().sum::<T>();
        let rg = self.requires_grad();
        self.tape.push(vec![1], vec![s], Op::Sum { x: self.id }, rg, Vec::new())
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_usize(self.numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>, TensorError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::Axis { op, axis, shape });
        }
        Ok(shape)
    }

    /// Sums out `axis`, removing it from the shape (rank-1 inputs give `[1]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let shape = self.check_axis(axis, "sum_axis")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let value = {
            let n = self.node();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += n.value[(o * len + l) * inner + i];
                    }
                }
            }
            out
        };
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(out_shape, value, Op::SumAxis { x: self.id, outer, len, inner }, rg, Vec::new()))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let len = self.check_axis(axis, "mean_axis")?[axis];
        Ok(self.sum_axis(axis)?.scale(T::one() / T::from_usize(len).unwrap()))
    }

    /// Softmax along `axis`; the axis maximum is subtracted first.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let shape = self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let value = {
            let n = self.node();
            let mut out = vec![T::zero(); n.value.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mx = (0..len).map(|l| n.value[at(l)]).fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for l in 0..len {
                        let e = (n.value[at(l)] - mx).exp();
                        out[at(l)] = e;
                        s += e;
                    }
                    for l in 0..len {
                        out[at(l)] /= s;
                    }
                }
            }
            out
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, value, Op::Softmax { x: self.id, outer, len, inner }, rg, Vec::new()))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t, T>, TensorError> {
        let shape = self.check_axis(axis, "log_softmax")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let value = {
            let n = self.node();
            let mut out = vec![T::zero(); n.value.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mx = (0..len).map(|l| n.value[at(l)]).fold(T::neg_infinity(), T::max);
                    let lse = (0..len).map(|l| (n.value[at(l)] - mx).exp()).sum::<T>().ln() + mx;
                    for l in 0..len {
                        out[at(l)] = n.value[at(l)] - lse;
                    }
                }
            }
            out
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, value, Op::LogSoftmax { x: self.id, outer, len, inner }, rg, Vec::new()))
    }

    /// Matrix product, see the module docs for the accepted shapes.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.same_tape(&other);
        let a_shape = self.shape();
        let b_shape = other.shape();
        let err = || TensorError::Shape { op: "matmul", lhs: a_shape.clone(), rhs: b_shape.clone() };
        let (batch, m, k) = match a_shape[..] {
            [m, k] => (1, m, k),
            [b, m, k] => (b, m, k),
            _ => return Err(err()),
        };
        let (b_batched, kb, n) = match b_shape[..] {
            [k, n] => (false, k, n),
            [bb, k, n] if bb == batch && a_shape.len() == 3 => (true, k, n),
            _ => return Err(err()),
        };
        if kb != k {
            return Err(err());
        }
        let value = {
            let a = self.node();
            let b = other.node();
            let mut c = vec![T::zero(); batch * m * n];
            for bi in 0..batch {
                let boff = if b_batched { bi * k * n } else { 0 };
                kernels::matmul_nn(
                    &a.value[bi * m * k..(bi + 1) * m * k],
                    &b.value[boff..boff + k * n],
                    &mut c[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            c
        };
        let shape = if a_shape.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let rg = self.tape.rg(&[self.id, other.id]);
        Ok(self.tape.push(
            shape,
            value,
            Op::MatMul { a: self.id, b: other.id, batch, m, k, n, b_batched },
            rg,
            Vec::new(),
        ))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&self) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let (batch, rows, cols) = match shape[..] {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => return Err(TensorError::Axis { op: "transpose", axis: 1, shape }),
        };
        let value = {
            let n = self.node();
            let mut out = vec![T::zero(); n.value.len()];
            for bi in 0..batch {
                let off = bi * rows * cols;
                for i in 0..rows {
                    for j in 0..cols {
                        out[off + j * rows + i] = n.value[off + i * cols + j];
                    }
                }
            }
            out
        };
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape.swap(r - 1, r - 2);
        let rg = self.requires_grad();
        Ok(self.tape.push(out_shape, value, Op::Transpose { x: self.id, batch, rows, cols }, rg, Vec::new()))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(TensorError::Shape { op: "layer_norm", lhs: shape, rhs: gamma.shape() });
        }
        let (value, rstd) = {
            let x = self.node();
            let gm = gamma.node();
            let bt = beta.node();
            let nf = T::from_usize(cols).unwrap();
            let rows = x.value.len() / cols;
            let mut out = Vec::with_capacity(x.value.len());
            let mut rstd = Vec::with_capacity(rows);
            for r in 0..rows {
                let xr = &x.value[r * cols..(r + 1) * cols];
                let mean = xr.iter().copied().sum::<T>() / nf;
                let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let s = T::one() / (var + eps).sqrt();
                rstd.push(s);
                for ((&v, &g), &b) in xr.iter().zip(&gm.value[..cols]).zip(&bt.value[..cols]) {
                    out.push((v - mean) * s * g + b);
                }
            }
            (out, rstd)
        };
        let rg = self.tape.rg(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(shape, value, Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, cols }, rg, rstd))
    }

    /// Rescales every row (last axis) to unit Euclidean norm.
    pub fn l2_normalize(&self) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let cols = *shape.last().unwrap();
        let (value, norms) = {
            let x = self.node();
            let mut out = Vec::with_capacity(x.value.len());
            let mut norms = Vec::new();
            for (r, row) in x.value.chunks(cols).enumerate() {
                let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if nrm.is_nan() || nrm <= T::zero() || !nrm.is_finite() {
                    return Err(TensorError::Degenerate(format!("l2_normalize: row {r} has norm {nrm}")));
                }
                norms.push(nrm);
                out.extend(row.iter().map(|&v| v / nrm));
            }
            (out, norms)
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(shape, value, Op::L2Normalize { x: self.id, cols }, rg, norms))
    }

    /// Rows `idx` of a rank-2 tensor (embedding lookup, row selection).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let [rows, cols] = shape[..] else {
            return Err(TensorError::Contract(format!("gather_rows needs a rank-2 tensor, got {shape:?}")));
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Contract(format!("gather_rows: index {bad} out of range for {rows} rows")));
        }
        if idx.is_empty() {
            return Err(TensorError::Contract("gather_rows: empty index list".into()));
        }
        let value = {
            let x = self.node();
            let mut out = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                out.extend_from_slice(&x.value[i * cols..(i + 1) * cols]);
            }
            out
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            vec![idx.len(), cols],
            value,
            Op::GatherRows { x: self.id, idx: idx.to_vec(), cols },
            rg,
            Vec::new(),
        ))
    }

    /// `out[r] = x[r, idx[r]]` for a rank-2 `x`.
    pub fn pick(&self, idx: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let [rows, cols] = shape[..] else {
            return Err(TensorError::Contract(format!("pick needs a rank-2 tensor, got {shape:?}")));
        };
        if idx.len() != rows || idx.iter().any(|&c| c >= cols) {
            return Err(TensorError::Contract(format!("pick: indices {idx:?} invalid for shape {shape:?}")));
        }
        let value = {
            let x = self.node();
            idx.iter().enumerate().map(|(r, &c)| x.value[r * cols + c]).collect()
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(vec![rows], value, Op::Pick { x: self.id, idx: idx.to_vec(), cols }, rg, Vec::new()))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let shape = self.check_axis(axis, "narrow")?;
        let (outer, len_in, inner) = split_axis(&shape, axis);
        if len == 0 || start + len > len_in {
            return Err(TensorError::Contract(format!(
                "narrow: range {start}..{} outside axis {axis} of {shape:?}",
                start + len
            )));
        }
        let value = {
            let x = self.node();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * len_in + start) * inner;
                out.extend_from_slice(&x.value[s..s + len * inner]);
            }
            out
        };
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out_shape,
            value,
            Op::Narrow { x: self.id, outer, len_in, start, len, inner },
            rg,
            Vec::new(),
        ))
    }

    /// Splits `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t, T>>, TensorError> {
        let shape = self.check_axis(axis, "split")?;
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(TensorError::Contract(format!("split: sizes {sizes:?} do not cover axis {axis} of {shape:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let (old, value) = {
            let n = self.node();
            (n.shape.clone(), n.value.clone())
        };
        if shape.iter().product::<usize>() != value.len() {
            return Err(TensorError::Shape { op: "reshape", lhs: old, rhs: shape.to_vec() });
        }
        let rg = self.requires_grad();
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape { x: self.id }, rg, Vec::new()))
    }

    /// Untracked copy of this value.
    pub fn detach(&self) -> Var<'t, T> {
        let (shape, value) = {
            let n = self.node();
            (n.shape.clone(), n.value.clone())
        };
        self.tape.push(shape, value, Op::Leaf, false, Vec::new())
    }
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<'t, T: Scalar>(xs: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>, TensorError> {
    let first = xs.first().ok_or_else(|| TensorError::Contract("concat of nothing".into()))?;
    let tape = first.tape;
    let base = first.check_axis(axis, "concat")?;
    let mut sizes = Vec::with_capacity(xs.len());
    for x in xs {
        first.same_tape(x);
        let s = x.shape();
        let compatible =
            s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(TensorError::Shape { op: "concat", lhs: base.clone(), rhs: s });
        }
        sizes.push(s[axis]);
    }
    let (outer, _, inner) = split_axis(&base, axis);
    let total: usize = sizes.iter().sum();
    let value = {
        let nodes = tape.nodes.borrow();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (x, &sz) in xs.iter().zip(&sizes) {
                let v = &nodes[x.id].value;
                out.extend_from_slice(&v[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        out
    };
    let mut shape = base;
    shape[axis] = total;
    let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
    let rg = tape.rg(&ids);
    Ok(tape.push(shape, value, Op::Concat { xs: ids, outer, sizes, inner }, rg, Vec::new()))
}
