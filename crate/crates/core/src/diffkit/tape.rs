//! Define-by-run tape. Every differentiable op appends one node; `backward`
//! walks the nodes in exact reverse recording order, so inputs always precede
//! the ops that consume them.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::tensor::{order_free_sum, permute_data, split_axis, Tensor};
use super::DiffError;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand repeats over the leading axes of the left one.
    Rhs,
    /// Left operand repeats over the leading axes of the right one.
    Lhs,
}

#[derive(Debug, Clone, Copy)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Sqrt(usize),
    Recip(usize),
    MatMul(usize, usize, MatMulDims),
    Permute(usize, Vec<usize>),
    Reshape(usize),
    Sum(usize, usize),
    Mean(usize, usize),
    SumAll(usize),
    Concat(Vec<usize>, usize),
    Gather(usize, usize, Rc<Vec<usize>>),
    L2Norm(usize, usize),
    Normalize(usize, usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaves_bound: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` as a tensor; zeros when nothing flowed into it.
    pub fn tensor(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => Tensor::from_parts(self.shapes[v.id].clone(), g.to_vec()),
            None => Tensor::zeros(&self.shapes[v.id]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of gradient-tracked leaves registered so far.
    pub fn tracked_leaves(&self) -> usize {
        self.leaves_bound.get()
    }

    /// Registers a trainable input.
    pub fn leaf(&self, t: Tensor) -> Var<'_> {
        self.leaves_bound.set(self.leaves_bound.get() + 1);
        self.push(t, Op::Leaf, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&self, t: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(t),
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, DiffError> {
        let first = parts.first().ok_or(DiffError::Shape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = first.value();
        let rank = base.rank();
        if axis >= rank {
            return Err(DiffError::Axis { op: "concat", axis, rank });
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != rank || (0..rank).any(|d| d != axis && s[d] != base.shape()[d]) {
                return Err(DiffError::Shape {
                    op: "concat",
                    detail: format!("{:?} vs {:?} along axis {axis}", base.shape(), s),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(base.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let run = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * run..(o + 1) * run]);
            }
        }
        let mut shape = base.shape().to_vec();
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.needs(&ids);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(ids, axis), rg))
    }

    /// Reverse pass from `root`, seeding its gradient with ones.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = root.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root.id] = Some(vec![1.0; nodes[root.id].value.numel()]);
        for id in (0..n).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads);
        }
        Gradients {
            grads,
            shapes: nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect(),
        }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
        slot => *slot = Some(contrib),
    }
}

/// Sums `g` (laid out like the larger operand) down to the repeating suffix of
/// length `small`.
fn reduce_to(g: &[f64], small: usize) -> Vec<f64> {
    let mut out = vec![0.0; small];
    for chunk in g.chunks_exact(small) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

fn backward_node(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    let req = |i: usize| nodes[i].requires_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (na, nb) = (val(*a).numel(), val(*b).numel());
            if req(*a) {
                let ga = if *bc == Bcast::Lhs { reduce_to(g, na) } else { g.to_vec() };
                accumulate(nodes, grads, *a, ga);
            }
            if req(*b) {
                let mut gb = if *bc == Bcast::Rhs { reduce_to(g, nb) } else { g.to_vec() };
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Mul(a, b, bc) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let (na, nb) = (av.len(), bv.len());
            if req(*a) {
                let ga = match bc {
                    Bcast::Same => g.iter().zip(bv).map(|(g, b)| g * b).collect(),
                    Bcast::Rhs => g.iter().enumerate().map(|(i, g)| g * bv[i % nb]).collect(),
                    Bcast::Lhs => {
                        let full: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                        reduce_to(&full, na)
                    }
                };
                accumulate(nodes, grads, *a, ga);
            }
            if req(*b) {
                let gb = match bc {
                    Bcast::Same => g.iter().zip(av).map(|(g, a)| g * a).collect(),
                    Bcast::Lhs => g.iter().enumerate().map(|(i, g)| g * av[i % na]).collect(),
                    Bcast::Rhs => {
                        let full: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                        reduce_to(&full, nb)
                    }
                };
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Scale(a, c) => {
            let ga = g.iter().map(|v| v * c).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Exp(a) => {
            let ga = g.iter().zip(out.data()).map(|(g, y)| g * y).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Log(a) => {
            let ga = g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Relu(a) => {
            let ga = g.iter().zip(val(*a).data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Gelu(a) => {
            let ga = g.iter().zip(val(*a).data()).map(|(g, x)| g * gelu_grad(*x)).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Sqrt(a) => {
            let ga = g.iter().zip(out.data()).map(|(g, y)| if *y > 0.0 { g * 0.5 / y } else { 0.0 }).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Recip(a) => {
            let ga = g.iter().zip(out.data()).map(|(g, y)| -g * y * y).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::MatMul(a, b, d) => matmul_backward(nodes, grads, *a, *b, *d, g),
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (ga, _) = permute_data(g, out.shape(), &inv);
            accumulate(nodes, grads, *a, ga);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
            let s = if matches!(nodes[id].op, Op::Mean(..)) { 1.0 / len as f64 } else { 1.0 };
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                    let src = &g[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s_)| *d = s_ * s);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumAll(a) => {
            let ga = vec![g[0]; val(*a).numel()];
            accumulate(nodes, grads, *a, ga);
        }
        Op::Concat(ids, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &i in ids {
                let len = val(i).shape()[*axis];
                if req(i) {
                    let mut gi = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(nodes, grads, i, gi);
                }
                offset += len;
            }
        }
        Op::Gather(a, axis, idx) => {
            let (outer, len, inner) = split_axis(val(*a).shape(), *axis);
            let k = idx.len();
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for (j, &src) in idx.iter().enumerate() {
                    let dst = &mut ga[(o * len + src) * inner..(o * len + src + 1) * inner];
                    let gs = &g[(o * k + j) * inner..(o * k + j + 1) * inner];
                    dst.iter_mut().zip(gs).for_each(|(d, s)| *d += s);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::L2Norm(a, axis) => {
            let x = val(*a);
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let mut ga = vec![0.0; x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let y = out.data()[o * inner + i];
                    if y == 0.0 {
                        continue;
                    }
                    let gy = g[o * inner + i] / y;
                    for l in 0..len {
                        let p = (o * len + l) * inner + i;
                        ga[p] = gy * x.data()[p];
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Normalize(a, axis) => {
            let x = val(*a);
            let (outer, len, inner) = split_axis(x.shape(), *axis);
            let (xd, yd) = (x.data(), out.data());
            let mut ga = vec![0.0; x.numel()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let norm = (0..len).map(|l| xd[at(l)] * xd[at(l)]).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = (0..len).map(|l| yd[at(l)] * g[at(l)]).sum();
                    for l in 0..len {
                        ga[at(l)] = (g[at(l)] - yd[at(l)] * dot) / norm;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        ga[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LogSoftmax(a, axis) => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let gsum: f64 = (0..len).map(|l| g[at(l)]).sum();
                    for l in 0..len {
                        ga[at(l)] = g[at(l)] - y[at(l)].exp() * gsum;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let d = val(*gamma).numel();
            let gam = val(*gamma).data();
            if req(*gamma) || req(*beta) {
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                        gb[j] += gr[j];
                    }
                }
                accumulate(nodes, grads, *gamma, gg);
                accumulate(nodes, grads, *beta, gb);
            }
            if req(*x) {
                let mut gx = vec![0.0; g.len()];
                let inv_d = 1.0 / d as f64;
                for (r, ((gr, xr), gxr)) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(gx.chunks_exact_mut(d)).enumerate() {
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        m1 += dxh;
                        m2 += dxh * xr[j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        gxr[j] = rstd[r] * (gr[j] * gam[j] - m1 - xr[j] * m2);
                    }
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
    }
}

/// `c (+)= op(a) @ op(b)` for row-major operands; `trans` flags read the
/// stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], accumulate: bool) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: extents and strides describe regions inside the provided slices.
    unsafe {
        matrixmultiply::dgemm(
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

fn matmul_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], a: usize, b: usize, d: MatMulDims, g: &[f64]) {
    let (av, bv) = (nodes[a].value.data(), nodes[b].value.data());
    let (m, k, n) = (d.m, d.k, d.n);
    if nodes[a].requires_grad {
        let mut ga = vec![0.0; av.len()];
        if d.a_batched && !d.b_batched {
            gemm(d.batch * m, n, k, g, false, bv, true, &mut ga, false);
        } else {
            for i in 0..d.batch {
                let gs = &g[i * m * n..(i + 1) * m * n];
                let bs = if d.b_batched { &bv[i * k * n..(i + 1) * k * n] } else { bv };
                let off = if d.a_batched { i * m * k } else { 0 };
                gemm(m, n, k, gs, false, bs, true, &mut ga[off..off + m * k], true);
            }
        }
        accumulate(nodes, grads, a, ga);
    }
    if nodes[b].requires_grad {
        let mut gb = vec![0.0; bv.len()];
        if d.a_batched && !d.b_batched {
            gemm(k, d.batch * m, n, av, true, g, false, &mut gb, false);
        } else {
            for i in 0..d.batch {
                let gs = &g[i * m * n..(i + 1) * m * n];
                let as_ = if d.a_batched { &av[i * m * k..(i + 1) * m * k] } else { av };
                let off = if d.b_batched { i * k * n } else { 0 };
                gemm(k, m, n, as_, true, gs, false, &mut gb[off..off + k * n], true);
            }
        }
        accumulate(nodes, grads, b, gb);
    }
}

fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(Bcast, Vec<usize>), DiffError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok((Bcast::Same, sa.to_vec()));
    }
    let suffix = |small: &[usize], big: &[usize]| small.len() <= big.len() && big.ends_with(small);
    if b.numel() == 1 || suffix(sb, sa) {
        return Ok((Bcast::Rhs, sa.to_vec()));
    }
    if a.numel() == 1 || suffix(sa, sb) {
        return Ok((Bcast::Lhs, sb.to_vec()));
    }
    Err(DiffError::Shape {
        op,
        detail: format!("cannot broadcast {sa:?} with {sb:?}"),
    })
}

fn zip_bcast(a: &[f64], b: &[f64], bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match bc {
        Bcast::Same => a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect(),
        Bcast::Rhs => {
            let nb = b.len();
            a.iter().enumerate().map(|(i, x)| f(*x, b[i % nb])).collect()
        }
        Bcast::Lhs => {
            let na = a.len();
            b.iter().enumerate().map(|(i, y)| f(a[i % na], *y)).collect()
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, t: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(t, op, rg)
    }

    fn map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value();
        let t = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|x| f(*x)).collect());
        self.unary(t, op)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize, Bcast) -> Op,
    ) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.value(), other.value());
        let (bc, shape) = broadcast_kind(name, &a, &b)?;
        let data = zip_bcast(a.data(), b.data(), bc, f);
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(Tensor::from_parts(shape, data), op(self.id, other.id, bc), rg))
    }

    /// Elementwise sum. `other` may be a trailing-suffix (or single-element)
    /// broadcast of `self`, or vice versa.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(|x| x * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map(|x| x + c, Op::AddScalar(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|x| **x <= 0.0) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.map(f64::ln, Op::Log(self.id)))
    }

    pub fn relu(self) -> Var<'t> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'t> {
        self.map(gelu, Op::Gelu(self.id))
    }

    pub fn sqrt(self) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        if let Some(bad) = v.data().iter().find(|x| **x < 0.0) {
            return Err(DiffError::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.map(f64::sqrt, Op::Sqrt(self.id)))
    }

    pub fn recip(self) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        if v.data().contains(&0.0) {
            return Err(DiffError::Domain {
                op: "recip",
                detail: "zero input".into(),
            });
        }
        Ok(self.map(|x| 1.0 / x, Op::Recip(self.id)))
    }

    /// Batched matrix product `[.., m, k] @ [.., k, n]`. Leading batch axes
    /// must match exactly, or one side must be a plain matrix.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.matmul_impl(other, false)
    }

    /// [`matmul`](Self::matmul) whose forward pass rounds every dot product
    /// correctly, so permuting the contracted axis of both operands leaves
    /// the result bit-identical. Slower; the backward pass is the same.
    pub fn matmul_exact(self, other: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, exact: bool) -> Result<Var<'t>, DiffError> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        let err = || DiffError::Shape {
            op: "matmul",
            detail: format!("{sa:?} @ {sb:?}"),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let (batch_shape, a_batched, b_batched) = if ba == bb {
            (ba.to_vec(), !ba.is_empty(), !bb.is_empty())
        } else if bb.is_empty() {
            (ba.to_vec(), true, false)
        } else if ba.is_empty() {
            (bb.to_vec(), false, true)
        } else {
            return Err(err());
        };
        let batch: usize = batch_shape.iter().product();
        let mut out = vec![0.0; batch * m * n];
        if exact {
            let mut terms = vec![0.0; k];
            for i in 0..batch {
                let ao = if a_batched { i * m * k } else { 0 };
                let bo = if b_batched { i * k * n } else { 0 };
                for r in 0..m {
                    for c in 0..n {
                        for (j, t) in terms.iter_mut().enumerate() {
                            *t = a.data()[ao + r * k + j] * b.data()[bo + j * n + c];
                        }
                        out[(i * m + r) * n + c] = order_free_sum(&terms);
                    }
                }
            }
        } else if a_batched && !b_batched {
            gemm(batch * m, k, n, a.data(), false, b.data(), false, &mut out, false);
        } else {
            for i in 0..batch {
                let asl = if a_batched { &a.data()[i * m * k..(i + 1) * m * k] } else { a.data() };
                let bsl = if b_batched { &b.data()[i * k * n..(i + 1) * k * n] } else { b.data() };
                gemm(m, k, n, asl, false, bsl, false, &mut out[i * m * n..(i + 1) * m * n], false);
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let dims = MatMulDims {
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
        };
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(Tensor::from_parts(shape, out), Op::MatMul(self.id, other.id, dims), rg))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank() || perm.iter().any(|&p| p >= v.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(DiffError::Shape {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of axes of {:?}", v.shape()),
            });
        }
        let (data, shape) = permute_data(v.data(), v.shape(), perm);
        Ok(self.unary(Tensor::from_parts(shape, data), Op::Permute(self.id, perm.to_vec())))
    }

    pub fn transpose_last2(self) -> Result<Var<'t>, DiffError> {
        let r = self.value().rank();
        if r < 2 {
            return Err(DiffError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        let t = Tensor::new(shape.to_vec(), v.data().to_vec()).map_err(|_| DiffError::Shape {
            op: "reshape",
            detail: format!("{:?} -> {shape:?}", v.shape()),
        })?;
        Ok(self.unary(t, Op::Reshape(self.id)))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Rc<Tensor>, DiffError> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(DiffError::Axis { op, axis, rank: v.rank() });
        }
        Ok(v)
    }

    fn reduce_axis(self, axis: usize, mean: bool) -> Result<Var<'t>, DiffError> {
        let v = self.check_axis(if mean { "mean" } else { "sum" }, axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x /= len as f64);
        }
        let shape = reduced_shape(v.shape(), axis);
        let op = if mean { Op::Mean(self.id, axis) } else { Op::Sum(self.id, axis) };
        Ok(self.unary(Tensor::from_parts(shape, out), op))
    }

    /// Sum over `axis`, removing it (a rank-1 input reduces to shape `[1]`).
    pub fn sum(self, axis: usize) -> Result<Var<'t>, DiffError> {
        self.reduce_axis(axis, false)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>, DiffError> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_all(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(self, axis: usize, indices: &[usize]) -> Result<Var<'t>, DiffError> {
        let v = self.check_axis("gather", axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        if indices.is_empty() {
            return Err(DiffError::Shape {
                op: "gather",
                detail: "empty index list".into(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(DiffError::Index {
                op: "gather",
                index: bad,
                extent: len,
            });
        }
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&v.data()[(o * len + i) * inner..(o * len + i + 1) * inner]);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = indices.len();
        Ok(self.unary(Tensor::from_parts(shape, out), Op::Gather(self.id, axis, Rc::new(indices.to_vec()))))
    }

    /// Euclidean norm over `axis`, removing it.
    pub fn l2_norm(self, axis: usize) -> Result<Var<'t>, DiffError> {
        let v = self.check_axis("l2_norm", axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                out[o * inner + i] = (0..len).map(|l| v.data()[(o * len + l) * inner + i].powi(2)).sum::<f64>().sqrt();
            }
        }
        Ok(self.unary(Tensor::from_parts(reduced_shape(v.shape(), axis), out), Op::L2Norm(self.id, axis)))
    }

    /// Scales slices along `axis` to unit norm; all-zero slices stay zero.
    pub fn normalize(self, axis: usize) -> Result<Var<'t>, DiffError> {
        let v = self.check_axis("normalize", axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let norm = (0..len).map(|l| out[at(l)].powi(2)).sum::<f64>().sqrt();
                if norm > 0.0 {
                    (0..len).for_each(|l| out[at(l)] /= norm);
                }
            }
        }
        Ok(self.unary(Tensor::from_parts(v.shape().to_vec(), out), Op::Normalize(self.id, axis)))
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>, DiffError> {
        self.masked_softmax(axis, None)
    }

    /// Softmax along `axis` with entries where `keep` is false excluded.
    /// `keep` has one flag per element of `self`. A slice with no kept entry
    /// yields all zeros.
    pub fn masked_softmax(self, axis: usize, keep: Option<&[bool]>) -> Result<Var<'t>, DiffError> {
        let v = self.check_axis("softmax", axis)?;
        if let Some(k) = keep {
            if k.len() != v.numel() {
                return Err(DiffError::Shape {
                    op: "softmax",
                    detail: format!("mask of {} for shape {:?}", k.len(), v.shape()),
                });
            }
        }
        let kept = |p: usize| keep.is_none_or(|k| k[p]);
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        let mut terms = Vec::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).filter(|&l| kept(at(l))).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                for l in 0..len {
                    if kept(at(l)) {
                        out[at(l)] = (x[at(l)] - mx).exp();
                    }
                }
                // order-free normalizer keeps permuted inputs bit-identical
                terms.clear();
                terms.extend((0..len).map(|l| out[at(l)]));
                let z = order_free_sum(&terms);
                for l in 0..len {
                    out[at(l)] /= z;
                }
            }
        }
        Ok(self.unary(Tensor::from_parts(v.shape().to_vec(), out), Op::Softmax(self.id, axis)))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>, DiffError> {
        let v = self.check_axis("log_softmax", axis)?;
        let (outer, len, inner) = split_axis(v.shape(), axis);
        let x = v.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| x[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let log_z = (0..len).map(|l| (x[at(l)] - mx).exp()).sum::<f64>().ln();
                for l in 0..len {
                    out[at(l)] = (x[at(l)] - mx) - log_z;
                }
            }
        }
        Ok(self.unary(Tensor::from_parts(v.shape().to_vec(), out), Op::LogSoftmax(self.id, axis)))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>, DiffError> {
        let v = self.value();
        let d = *v.shape().last().ok_or(DiffError::Axis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        let (g, b) = (gamma.value(), beta.value());
        if g.shape() != [d] || b.shape() != [d] {
            return Err(DiffError::Shape {
                op: "layer_norm",
                detail: format!("gamma {:?} / beta {:?} for rows of {d}", g.shape(), b.shape()),
            });
        }
        let rows = v.numel() / d;
        let mut xhat = vec![0.0; v.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; v.numel()];
        for r in 0..rows {
            let row = &v.data()[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / d as f64;
            // Zero-variance rows with eps = 0 normalize to zeros.
            let rs = if var + eps > 0.0 { 1.0 / (var + eps).sqrt() } else { 0.0 };
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mu) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            Tensor::from_parts(v.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, e)| *e).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}
