//! Recording tape and differentiable variables.
//!
//! Every primitive evaluates eagerly and appends one node to the tape. A
//! backward pass walks the nodes in reverse and accumulates gradients for
//! every node that (transitively) depends on a `requires_grad` leaf.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, AttnGeom, AttnGrads, ConvGeom, GroupStats};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRow(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Upsample2x(usize),
    AvgPool(usize, usize),
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        stats: GroupStats<T>,
    },
    Relu(usize),
    LeakyRelu(usize, T),
    Silu(usize),
    Tanh(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Film {
        x: usize,
        scale: usize,
        shift: usize,
    },
    Mhsa {
        x: usize,
        w_qkv: usize,
        b_qkv: usize,
        w_out: usize,
        b_out: usize,
        geom: AttnGeom,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Sum(usize),
    Mean(usize),
    MeanAbs(usize),
    MeanSquare(usize),
    L2Normalize(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRow(..) => "add_row",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::AvgPool(..) => "avg_pool",
            Op::GroupNorm { .. } => "group_norm",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Silu(..) => "silu",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Film { .. } => "film",
            Op::Mhsa { .. } => "mhsa",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Concat(..) => "concat",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAbs(..) => "mean_abs",
            Op::MeanSquare(..) => "mean_square",
            Op::L2Normalize(..) => "l2_normalize",
        }
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of evaluated primitives.
///
/// A tape is single-threaded; values stored in it are `Arc`-shared and can be
/// read from other threads once extracted.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Primitive names in execution order.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    /// Record an input tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Constant input that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    fn value(&self, id: usize) -> Arc<Tensor<T>> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push(&self, op: Op<T>, value: Tensor<T>) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op_inputs(&op).iter().any(|&i| nodes[i].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Reverse pass from a scalar output. A tape can be differentiated once.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(output.tape, self) {
            return Err(Error::ForeignVar);
        }
        if self.consumed.get() {
            return Err(Error::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.numel() != 1 {
            return Err(Error::NonScalarOutput(out.value.shape().to_vec()));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        if !out.requires_grad {
            return Ok(Gradients {
                grads: vec![None; nodes.len()],
            });
        }
        grads[output.id] = Some(vec![T::one()]);
        let mut result: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                result[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads: result })
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Transpose(a)
        | Op::Upsample2x(a)
        | Op::AvgPool(a, _)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Silu(a)
        | Op::Tanh(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Reshape(a)
        | Op::Permute(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::MeanAbs(a)
        | Op::MeanSquare(a)
        | Op::L2Normalize(a) => vec![*a],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Film { x, scale, shift } => vec![*x, *scale, *shift],
        Op::Mhsa {
            x,
            w_qkv,
            b_qkv,
            w_out,
            b_out,
            ..
        } => vec![*x, *w_qkv, *b_qkv, *w_out, *b_out],
        Op::Concat(parts, _) => parts.clone(),
    }
}

/// Accumulation target for one input of a node, or `None` when the input
/// does not need a gradient.
fn slot<'a, T: Element>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], id: usize) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn accumulate<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, f: impl Fn(usize) -> T) {
    if let Some(g) = slot(nodes, grads, id) {
        for (i, v) in g.iter_mut().enumerate() {
            *v = *v + f(i);
        }
    }
}

fn backward_node<T: Element>(nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |i| g[i]);
            accumulate(nodes, grads, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |i| g[i]);
            accumulate(nodes, grads, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            accumulate(nodes, grads, *a, |i| g[i] * bv[i]);
            accumulate(nodes, grads, *b, |i| g[i] * av[i]);
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, |i| g[i] * *c),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, |i| g[i]),
        Op::MatMul(a, b) => {
            let (at, bt) = (val(*a), val(*b));
            let (m, k) = (at.shape()[0], at.shape()[1]);
            let n = bt.shape()[1];
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = G B^T
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g,
                    n as isize,
                    1,
                    bt.data(),
                    1,
                    n as isize,
                    T::one(),
                    ga,
                    k as isize,
                    1,
                );
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB = A^T G
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    at.data(),
                    1,
                    k as isize,
                    g,
                    n as isize,
                    1,
                    T::one(),
                    gb,
                    n as isize,
                    1,
                );
            }
        }
        Op::Transpose(a) => {
            let s = val(*a).shape();
            let (r, c) = (s[0], s[1]);
            accumulate(nodes, grads, *a, |i| g[(i % c) * r + i / c]);
        }
        Op::AddRow(a, b) => {
            accumulate(nodes, grads, *a, |i| g[i]);
            if let Some(gb) = slot(nodes, grads, *b) {
                let n = gb.len();
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % n] = gb[i % n] + gi;
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (xv, wv) = (val(*x).data(), val(*w).data());
            let mut dx = slot(nodes, grads, *x).map(std::mem::take);
            let mut dw = slot(nodes, grads, *w).map(std::mem::take);
            let mut db = b.and_then(|b| slot(nodes, grads, b).map(std::mem::take));
            kernels::conv2d_backward(geom, xv, wv, g, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
            if let Some(v) = dx {
                grads[*x] = Some(v);
            }
            if let Some(v) = dw {
                grads[*w] = Some(v);
            }
            if let (Some(v), Some(b)) = (db, b) {
                grads[*b] = Some(v);
            }
        }
        Op::Upsample2x(a) => {
            let s = val(*a).shape();
            let (h, w) = (s[2], s[3]);
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, o) in ga.iter_mut().enumerate() {
                    let plane = i / (h * w);
                    let (yy, xx) = ((i % (h * w)) / w, i % w);
                    let base = plane * 4 * h * w;
                    let mut acc = T::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc = acc + g[base + (2 * yy + dy) * 2 * w + 2 * xx + dx];
                        }
                    }
                    *o = *o + acc;
                }
            }
        }
        Op::AvgPool(a, k) => {
            let s = val(*a).shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (h / k, w / k);
            let inv = T::one() / T::from_usize(k * k).unwrap();
            accumulate(nodes, grads, *a, |i| {
                let plane = i / (h * w);
                let (yy, xx) = ((i % (h * w)) / w, i % w);
                g[plane * oh * ow + (yy / k) * ow + xx / k] * inv
            });
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            stats,
        } => {
            let xt = val(*x);
            let mut dx = slot(nodes, grads, *x).map(std::mem::take);
            let mut dg = slot(nodes, grads, *gamma).map(std::mem::take);
            let mut dbt = slot(nodes, grads, *beta).map(std::mem::take);
            kernels::group_norm_backward(
                xt.data(),
                xt.shape(),
                *groups,
                val(*gamma).data(),
                stats,
                g,
                dx.as_deref_mut(),
                dg.as_deref_mut(),
                dbt.as_deref_mut(),
            );
            for (id, v) in [(*x, dx), (*gamma, dg), (*beta, dbt)] {
                if let Some(v) = v {
                    grads[id] = Some(v);
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a).data();
            accumulate(nodes, grads, *a, |i| if av[i] > T::zero() { g[i] } else { T::zero() });
        }
        Op::LeakyRelu(a, slope) => {
            let av = val(*a).data();
            accumulate(
                nodes,
                grads,
                *a,
                |i| {
                    if av[i] > T::zero() {
                        g[i]
                    } else {
                        g[i] * *slope
                    }
                },
            );
        }
        Op::Silu(a) => {
            let av = val(*a).data();
            accumulate(nodes, grads, *a, |i| {
                let s = T::one() / (T::one() + (-av[i]).exp());
                g[i] * s * (T::one() + av[i] * (T::one() - s))
            });
        }
        Op::Tanh(a) => accumulate(nodes, grads, *a, |i| g[i] * (T::one() - y[i] * y[i])),
        Op::Softmax(a) => {
            let row = *node.value.shape().last().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((gr, yr), out) in g.chunks(row).zip(y.chunks(row)).zip(ga.chunks_mut(row)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = *o + yi * (gi - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let row = *node.value.shape().last().unwrap();
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((gr, yr), out) in g.chunks(row).zip(y.chunks(row)).zip(ga.chunks_mut(row)) {
                    let total: T = gr.iter().copied().sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = *o + gi - yi.exp() * total;
                    }
                }
            }
        }
        Op::Film { x, scale, shift } => {
            let xt = val(*x);
            let s = xt.shape();
            let hw: usize = s[2..].iter().product();
            let (xv, sv) = (xt.data(), val(*scale).data());
            accumulate(nodes, grads, *x, |i| g[i] * (T::one() + sv[i / hw]));
            if let Some(gs) = slot(nodes, grads, *scale) {
                for (bc, o) in gs.iter_mut().enumerate() {
                    let r = bc * hw..(bc + 1) * hw;
                    *o = *o + g[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum();
                }
            }
            if let Some(gh) = slot(nodes, grads, *shift) {
                for (bc, o) in gh.iter_mut().enumerate() {
                    *o = *o + g[bc * hw..(bc + 1) * hw].iter().copied().sum();
                }
            }
        }
        Op::Mhsa {
            x,
            w_qkv,
            b_qkv,
            w_out,
            b_out,
            geom,
        } => {
            let mut dx = slot(nodes, grads, *x).map(std::mem::take);
            let mut dwq = slot(nodes, grads, *w_qkv).map(std::mem::take);
            let mut dbq = slot(nodes, grads, *b_qkv).map(std::mem::take);
            let mut dwo = slot(nodes, grads, *w_out).map(std::mem::take);
            let mut dbo = slot(nodes, grads, *b_out).map(std::mem::take);
            kernels::mhsa_backward(
                geom,
                val(*x).data(),
                val(*w_qkv).data(),
                val(*b_qkv).data(),
                val(*w_out).data(),
                g,
                AttnGrads {
                    dx: dx.as_deref_mut(),
                    dw_qkv: dwq.as_deref_mut(),
                    db_qkv: dbq.as_deref_mut(),
                    dw_out: dwo.as_deref_mut(),
                    db_out: dbo.as_deref_mut(),
                },
            );
            for (id, v) in [(*x, dx), (*w_qkv, dwq), (*b_qkv, dbq), (*w_out, dwo), (*b_out, dbo)] {
                if let Some(v) = v {
                    grads[id] = Some(v);
                }
            }
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, |i| g[i]),
        Op::Permute(a, axes) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let map = kernels::permute_index(val(*a).shape(), axes);
                for (o, &src) in map.iter().enumerate() {
                    ga[src] = ga[src] + g[o];
                }
            }
        }
        Op::Concat(parts, axis) => {
            let out_shape = node.value.shape();
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let total = out_shape[*axis] * inner;
            let mut offset = 0;
            for &p in parts {
                let width = val(p).shape()[*axis] * inner;
                if let Some(gp) = slot(nodes, grads, p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + width];
                        for (d, &s) in gp[o * width..(o + 1) * width].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
                offset += width;
            }
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, |_| g[0]),
        Op::Mean(a) => {
            let n = T::from_usize(val(*a).numel()).unwrap();
            accumulate(nodes, grads, *a, |_| g[0] / n);
        }
        Op::MeanAbs(a) => {
            let av = val(*a).data();
            let n = T::from_usize(av.len()).unwrap();
            accumulate(nodes, grads, *a, |i| {
                let s = if av[i] > T::zero() {
                    T::one()
                } else if av[i] < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                g[0] * s / n
            });
        }
        Op::MeanSquare(a) => {
            let av = val(*a).data();
            let two_over_n = T::from_f64_lossy(2.0) / T::from_usize(av.len()).unwrap();
            accumulate(nodes, grads, *a, |i| g[0] * av[i] * two_over_n);
        }
        Op::L2Normalize(a) => {
            let at = val(*a);
            let row = *at.shape().last().unwrap();
            let eps = T::from_f64_lossy(L2_EPS);
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((xr, (yr, gr)), out) in at
                    .data()
                    .chunks(row)
                    .zip(y.chunks(row).zip(g.chunks(row)))
                    .zip(ga.chunks_mut(row))
                {
                    let norm = (xr.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = *o + (gi - yi * dot) / norm;
                    }
                }
            }
        }
    }
}

const L2_EPS: f64 = 1e-12;

fn same_shape(op: &'static str, a: &Tensor<impl Element>, b: &Tensor<impl Element>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn bad_shape(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Error {
    Error::BadShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Value as a fresh tensor, detached from the tape.
    pub fn to_tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    /// Scalar value of a single-element variable.
    pub fn item(&self) -> T {
        self.value().item()
    }

    /// Same value recorded as a new constant leaf (stops gradient flow).
    pub fn detach(&self) -> Var<'t, T> {
        self.tape.leaf_shared(self.value(), false)
    }

    fn check(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn unary(&self, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var<'t, T>> {
        let v = self.value().map(f);
        self.tape.push(op, v)
    }

    fn binary(&self, other: Var<'t, T>, name: &'static str, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var<'t, T>> {
        self.check(&other)?;
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let v = a.zip_map(&b, f)?;
        self.tape.push(op, v)
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64_lossy(c);
        self.unary(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t, T>> {
        let c = T::from_f64_lossy(c);
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn neg(&self) -> Result<Var<'t, T>> {
        self.scale(-1.0)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data(),
            k as isize,
            1,
            b.data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.tape.push(Op::MatMul(self.id, other.id), Tensor::new([m, n], out)?)
    }

    pub fn transpose(&self) -> Result<Var<'t, T>> {
        let a = self.value();
        if a.shape().len() != 2 {
            return Err(bad_shape("transpose", a.shape(), "expected a matrix"));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let d = a.data();
        let out: Vec<T> = (0..r * c).map(|i| d[(i % r) * c + i / r]).collect();
        self.tape.push(Op::Transpose(self.id), Tensor::new([c, r], out)?)
    }

    /// Broadcast-add a `[n]` vector over the trailing axis.
    pub fn add_row(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check(&bias)?;
        let (a, b) = (self.value(), bias.value());
        let n = *a.shape().last().unwrap();
        if b.shape() != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let bd = b.data();
        let out: Vec<T> = a.data().iter().enumerate().map(|(i, &v)| v + bd[i % n]).collect();
        self.tape
            .push(Op::AddRow(self.id, bias.id), Tensor::new(a.shape().to_vec(), out)?)
    }

    /// `x W + b` for `x: [m, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul(w)?.add_row(b)
    }

    /// 2-D convolution over `[B, C, H, W]` with zero padding.
    pub fn conv2d(
        &self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t, T>> {
        self.check(&weight)?;
        let (x, w) = (self.value(), weight.value());
        if x.shape().len() != 4 || w.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, pad).ok_or_else(|| Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        })?;
        let bias_val = match bias {
            Some(b) => {
                self.check(&b)?;
                let bv = b.value();
                if bv.shape() != [geom.out_ch] {
                    return Err(Error::ShapeMismatch {
                        op: "conv2d",
                        lhs: w.shape().to_vec(),
                        rhs: bv.shape().to_vec(),
                    });
                }
                Some(bv)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), bias_val.as_ref().map(|b| b.data()));
        let shape = [geom.batch, geom.out_ch, geom.out_h, geom.out_w];
        self.tape.push(
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            Tensor::new(shape, out)?,
        )
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 {
            return Err(bad_shape("upsample2x", s, "expected [B, C, H, W]"));
        }
        let (h, w) = (s[2], s[3]);
        let planes = s[0] * s[1];
        let d = x.data();
        let mut out = Vec::with_capacity(d.len() * 4);
        for p in 0..planes {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(d[p * h * w + (yy / 2) * w + xx / 2]);
                }
            }
        }
        self.tape
            .push(Op::Upsample2x(self.id), Tensor::new([s[0], s[1], 2 * h, 2 * w], out)?)
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&self, k: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(bad_shape("avg_pool", s, format!("spatial size not divisible by {k}")));
        }
        let (h, w) = (s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let planes = s[0] * s[1];
        let inv = T::one() / T::from_usize(k * k).unwrap();
        let d = x.data();
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for yy in 0..h {
                for xx in 0..w {
                    let o = p * oh * ow + (yy / k) * ow + xx / k;
                    out[o] = out[o] + d[p * h * w + yy * w + xx] * inv;
                }
            }
        }
        self.tape
            .push(Op::AvgPool(self.id, k), Tensor::new([s[0], s[1], oh, ow], out)?)
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&self, groups: usize, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.check(&gamma)?;
        self.check(&beta)?;
        let x = self.value();
        let s = x.shape();
        if s.len() < 3 || groups == 0 || !s[1].is_multiple_of(groups) {
            return Err(bad_shape(
                "group_norm",
                s,
                format!("channels not divisible into {groups} groups"),
            ));
        }
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [s[1]] || bv.shape() != [s[1]] {
            return Err(Error::ShapeMismatch {
                op: "group_norm",
                lhs: s.to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (out, stats) = kernels::group_norm_forward(x.data(), s, groups, gv.data(), bv.data(), eps);
        self.tape.push(
            Op::GroupNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                groups,
                stats,
            },
            Tensor::new(s.to_vec(), out)?,
        )
    }

    pub fn relu(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Relu(self.id), |v| v.max(T::zero()))
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Var<'t, T>> {
        let s = T::from_f64_lossy(slope);
        self.unary(Op::LeakyRelu(self.id, s), |v| if v > T::zero() { v } else { v * s })
    }

    pub fn silu(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Silu(self.id), |v| v / (T::one() + (-v).exp()))
    }

    pub fn tanh(&self) -> Result<Var<'t, T>> {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let row = *x.shape().last().unwrap();
        let out = kernels::softmax_rows(x.data(), row);
        self.tape
            .push(Op::Softmax(self.id), Tensor::new(x.shape().to_vec(), out)?)
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let row = *x.shape().last().unwrap();
        let out = kernels::log_softmax_rows(x.data(), row);
        self.tape
            .push(Op::LogSoftmax(self.id), Tensor::new(x.shape().to_vec(), out)?)
    }

    /// Feature-wise affine modulation `x * (1 + scale) + shift`, with
    /// `scale`/`shift` of shape `[B, C]` broadcast over the spatial axes.
    pub fn film(&self, scale: Var<'t, T>, shift: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check(&scale)?;
        self.check(&shift)?;
        let x = self.value();
        let s = x.shape();
        let (sc, sh) = (scale.value(), shift.value());
        if s.len() < 2 || sc.shape() != [s[0], s[1]] || sh.shape() != [s[0], s[1]] {
            return Err(Error::ShapeMismatch {
                op: "film",
                lhs: s.to_vec(),
                rhs: sc.shape().to_vec(),
            });
        }
        let hw: usize = s[2..].iter().product();
        let (scd, shd) = (sc.data(), sh.data());
        let out: Vec<T> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * (T::one() + scd[i / hw]) + shd[i / hw])
            .collect();
        self.tape.push(
            Op::Film {
                x: self.id,
                scale: scale.id,
                shift: shift.id,
            },
            Tensor::new(s.to_vec(), out)?,
        )
    }

    /// Multi-head self-attention over the flattened spatial positions of a
    /// `[B, C, H, W]` map (or `[B, C, L]` sequence). Returns the projected
    /// attention output without a residual connection.
    pub fn mhsa(
        &self,
        w_qkv: Var<'t, T>,
        b_qkv: Var<'t, T>,
        w_out: Var<'t, T>,
        b_out: Var<'t, T>,
        heads: usize,
    ) -> Result<Var<'t, T>> {
        for v in [&w_qkv, &b_qkv, &w_out, &b_out] {
            self.check(v)?;
        }
        let x = self.value();
        let s = x.shape();
        if s.len() < 3 || heads == 0 || !s[1].is_multiple_of(heads) {
            return Err(bad_shape("mhsa", s, format!("channels not divisible by {heads} heads")));
        }
        let c = s[1];
        let geom = AttnGeom {
            batch: s[0],
            channels: c,
            tokens: s[2..].iter().product(),
            heads,
        };
        let (wq, bq, wo, bo) = (w_qkv.value(), b_qkv.value(), w_out.value(), b_out.value());
        if wq.shape() != [3 * c, c] || bq.shape() != [3 * c] || wo.shape() != [c, c] || bo.shape() != [c] {
            return Err(bad_shape("mhsa", wq.shape(), "projection shapes do not match channels"));
        }
        let out = kernels::mhsa_forward(&geom, x.data(), wq.data(), bq.data(), wo.data(), bo.data());
        self.tape.push(
            Op::Mhsa {
                x: self.id,
                w_qkv: w_qkv.id,
                b_qkv: b_qkv.id,
                w_out: w_out.id,
                b_out: b_out.id,
                geom,
            },
            Tensor::new(s.to_vec(), out)?,
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = shape.into();
        crate::tensor::validate_shape(&shape)?;
        if shape.iter().product::<usize>() != x.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape,
            });
        }
        self.tape
            .push(Op::Reshape(self.id), Tensor::new(shape, x.data().to_vec())?)
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let s = x.shape();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len()
            || axes
                .iter()
                .any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(bad_shape("permute", s, format!("invalid axes {axes:?}")));
        }
        let map = kernels::permute_index(s, axes);
        let d = x.data();
        let out: Vec<T> = map.iter().map(|&i| d[i]).collect();
        let shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        self.tape
            .push(Op::Permute(self.id, axes.to_vec()), Tensor::new(shape, out)?)
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero inputs".into()))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape().to_vec();
        if axis >= s0.len() {
            return Err(bad_shape("concat", &s0, format!("axis {axis} out of range")));
        }
        let mut axis_len = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.check(p)?;
            let s = v.shape();
            if s.len() != s0.len() || s.iter().zip(&s0).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: s.to_vec(),
                });
            }
            axis_len += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for v in &values {
                let width = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * width..(o + 1) * width]);
            }
        }
        let mut shape = s0;
        shape[axis] = axis_len;
        first.tape.push(
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            Tensor::new(shape, out)?,
        )
    }

    pub fn sum(&self) -> Result<Var<'t, T>> {
        let s: T = self.value().data().iter().copied().sum();
        self.tape.push(Op::Sum(self.id), Tensor::scalar(s))
    }

    pub fn mean(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s: T = x.data().iter().copied().sum::<T>() / T::from_usize(x.numel()).unwrap();
        self.tape.push(Op::Mean(self.id), Tensor::scalar(s))
    }

    /// Per-element mean of `|x|` (L1 norm divided by the element count).
    pub fn mean_abs(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s: T = x.data().iter().map(|v| v.abs()).sum::<T>() / T::from_usize(x.numel()).unwrap();
        self.tape.push(Op::MeanAbs(self.id), Tensor::scalar(s))
    }

    /// Per-element mean of `x^2` (squared L2 norm divided by the element count).
    pub fn mean_square(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let s: T = x.data().iter().map(|&v| v * v).sum::<T>() / T::from_usize(x.numel()).unwrap();
        self.tape.push(Op::MeanSquare(self.id), Tensor::scalar(s))
    }

    /// Scale every trailing-axis row to unit L2 norm.
    pub fn l2_normalize(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let row = *x.shape().last().unwrap();
        let eps = T::from_f64_lossy(L2_EPS);
        let mut out = x.data().to_vec();
        for r in out.chunks_mut(row) {
            let norm = (r.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            for v in r.iter_mut() {
                *v = *v / norm;
            }
        }
        self.tape
            .push(Op::L2Normalize(self.id), Tensor::new(x.shape().to_vec(), out)?)
    }
}
