//! Reverse-mode tape.
//!
//! Nodes are appended in execution order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep. Only
//! leaves keep their gradients after a sweep; repeated sweeps add into them
//! until [`Tape::zero_grad`] is called.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom};
use super::{
    broadcast_offsets, broadcast_shape, check_axis, numel, permute_data, reduce_broadcast,
    split_axis, Tensor,
};
use crate::error::{domain_err, shape_err, Result};
use crate::math;

/// Backward rule for an operation defined outside this module.
pub trait CustomBackward {
    /// Returns one gradient buffer per input, each matching that input's length.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Unary {
    Exp,
    Ln,
    Relu,
    Gelu,
}

/// Per-output-index interpolation entry: two source indices and weights.
type AxisTable = Vec<(usize, usize, f64, f64)>;

enum Op {
    Leaf,
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Scale(usize, f64),
    Shift(usize),
    Matmul { a: usize, b: usize, trans_b: bool },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    MaskedSoftmax { x: usize, mask: usize },
    Sum { x: usize, axis: Option<usize> },
    Mean { x: usize, axis: Option<usize> },
    Max { x: usize, arg: Vec<usize> },
    Reshape(usize),
    Permute { x: usize, perm: Vec<usize> },
    Broadcast(usize),
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    LayerNorm { x: usize, gain: usize, shift: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, transposed: bool },
    Resize { x: usize, rows: AxisTable, cols: AxisTable },
    Custom { xs: Vec<usize>, rule: Box<dyn CustomBackward> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-threaded record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
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

    /// Records an input value; gradients are kept for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Accumulated gradient of a leaf, if any sweep reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(var.id)?.as_ref()?;
        let shape = self.nodes.borrow()[var.id].value.shape().to_vec();
        Some(Tensor::new(&shape, g.clone()).expect("gradient length matches value"))
    }

    pub fn zero_grad(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Records a value produced outside the tape with a caller-supplied backward rule.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        rule: Box<dyn CustomBackward>,
    ) -> Var<'t> {
        let rg = inputs.iter().any(|v| v.requires_grad());
        let xs = inputs.iter().map(|v| v.id).collect();
        self.push(value, Op::Custom { xs, rule }, rg)
    }

    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let nodes = self.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        check_axis(&base, axis)?;
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for v in xs {
            let s = nodes[v.id].value.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err!("concat along {axis}: {base:?} vs {s:?}"));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in xs {
                let t = &nodes[v.id].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = xs.iter().any(|v| nodes[v.id].requires_grad);
        drop(nodes);
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(value, Op::Concat { xs: xs.iter().map(|v| v.id).collect(), axis }, rg))
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        self.grads.borrow_mut().push(None);
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Propagates d(root)/d(leaf) into every reachable leaf that requires grad.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        assert!(core::ptr::eq(root.tape, self), "root belongs to another tape");
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.id];
        if root_node.value.len() != 1 {
            return Err(shape_err!("backward from non-scalar {:?}", root_node.value.shape()));
        }
        if !root_node.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.id + 1];
        adj[root.id] = Some(vec![1.0]);
        let mut grads = self.grads.borrow_mut();

        let rg = |id: usize| nodes[id].requires_grad;
        let shape = |id: usize| nodes[id].value.shape();
        let val = |id: usize| nodes[id].value.data();

        for id in (0..=root.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            let out_shape = node.value.shape();
            match &node.op {
                Op::Leaf => accumulate(&mut grads[id], g),
                Op::Binary(kind, a, b) => {
                    let (a, b) = (*a, *b);
                    let same = shape(a) == out_shape && shape(b) == out_shape;
                    let ea = expand(val(a), shape(a), out_shape, same);
                    let eb = expand(val(b), shape(b), out_shape, same);
                    if rg(a) {
                        let local: Vec<f64> = match kind {
                            Binary::Add | Binary::Sub => g.clone(),
                            Binary::Mul => g.iter().zip(eb.iter()).map(|(g, b)| g * b).collect(),
                            Binary::Div => g.iter().zip(eb.iter()).map(|(g, b)| g / b).collect(),
                        };
                        add_into(&mut adj, a, reduce_broadcast(&local, out_shape, shape(a)));
                    }
                    if rg(b) {
                        let local: Vec<f64> = match kind {
                            Binary::Add => g.clone(),
                            Binary::Sub => g.iter().map(|g| -g).collect(),
                            Binary::Mul => g.iter().zip(ea.iter()).map(|(g, a)| g * a).collect(),
                            Binary::Div => g
                                .iter()
                                .zip(ea.iter().zip(eb.iter()))
                                .map(|(g, (a, b))| -g * a / (b * b))
                                .collect(),
                        };
                        add_into(&mut adj, b, reduce_broadcast(&local, out_shape, shape(b)));
                    }
                }
                Op::Unary(kind, x) => {
                    let x = *x;
                    let xs = val(x);
                    let ys = node.value.data();
                    let local: Vec<f64> = match kind {
                        Unary::Exp => g.iter().zip(ys).map(|(g, y)| g * y).collect(),
                        Unary::Ln => g.iter().zip(xs).map(|(g, x)| g / x).collect(),
                        Unary::Relu => g
                            .iter()
                            .zip(xs)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                        Unary::Gelu => g.iter().zip(xs).map(|(g, &x)| g * gelu_grad(x)).collect(),
                    };
                    add_into(&mut adj, x, local);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    add_into(&mut adj, *x, g.iter().map(|g| g * s).collect());
                }
                Op::Shift(x) => add_into(&mut adj, *x, g),
                Op::Matmul { a, b, trans_b } => {
                    let (a, b) = (*a, *b);
                    let sa = shape(a);
                    let sb = shape(b);
                    let r = sa.len();
                    let (m, k) = (sa[r - 2], sa[r - 1]);
                    let n = out_shape[r - 1];
                    let batch = numel(&sa[..r - 2]);
                    let (av, bv) = (val(a), val(b));
                    if rg(a) {
                        let da = slot(&mut adj, a, av.len());
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let bs = &bv[bi * k * n..(bi + 1) * k * n];
                            let out = &mut da[bi * m * k..(bi + 1) * m * k];
                            if *trans_b {
                                kernels::gemm_nn(m, n, k, gs, bs, out);
                            } else {
                                kernels::gemm_nt(m, n, k, gs, bs, out);
                            }
                        }
                    }
                    if rg(b) {
                        let db = slot(&mut adj, b, bv.len());
                        debug_assert_eq!(numel(sb), bv.len());
                        for bi in 0..batch {
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let as_ = &av[bi * m * k..(bi + 1) * m * k];
                            let out = &mut db[bi * k * n..(bi + 1) * k * n];
                            if *trans_b {
                                kernels::gemm_tn(m, n, k, gs, as_, out);
                            } else {
                                kernels::gemm_tn(m, k, n, as_, gs, out);
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    let (outer, len, inner) = split_axis(out_shape, *axis);
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 =
                                (0..len).map(|j| y[base + j * inner] * g[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] = y[p] * (g[p] - dot);
                            }
                        }
                    }
                    add_into(&mut adj, *x, dx);
                }
                Op::LogSoftmax { x, axis } => {
                    let (outer, len, inner) = split_axis(out_shape, *axis);
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let total: f64 = (0..len).map(|j| g[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                dx[p] = g[p] - math::exp(y[p]) * total;
                            }
                        }
                    }
                    add_into(&mut adj, *x, dx);
                }
                Op::MaskedSoftmax { x, mask } => {
                    let len = *out_shape.last().unwrap();
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for (r, (yr, gr)) in y.chunks(len).zip(g.chunks(len)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..len {
                            dx[r * len + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    if rg(*x) {
                        add_into(&mut adj, *x, dx);
                    }
                    // The binarised mask is piecewise constant: its derivative is zero.
                    if rg(*mask) {
                        let n = val(*mask).len();
                        add_into(&mut adj, *mask, vec![0.0; n]);
                    }
                }
                Op::Sum { x, axis } | Op::Mean { x, axis } => {
                    let x = *x;
                    let in_shape = shape(x);
                    let total = numel(in_shape);
                    let mean = matches!(node.op, Op::Mean { .. });
                    let dx = match axis {
                        None => {
                            let s = if mean { g[0] / total as f64 } else { g[0] };
                            vec![s; total]
                        }
                        Some(ax) => {
                            let (outer, len, inner) = split_axis(in_shape, *ax);
                            let s = if mean { 1.0 / len as f64 } else { 1.0 };
                            let mut dx = vec![0.0; total];
                            for o in 0..outer {
                                for j in 0..len {
                                    for i in 0..inner {
                                        dx[(o * len + j) * inner + i] = g[o * inner + i] * s;
                                    }
                                }
                            }
                            dx
                        }
                    };
                    add_into(&mut adj, x, dx);
                }
                Op::Max { x, arg } => {
                    let dx = slot(&mut adj, *x, val(*x).len());
                    for (gv, &a) in g.iter().zip(arg) {
                        dx[a] += gv;
                    }
                }
                Op::Reshape(x) | Op::Broadcast(x) => {
                    let x = *x;
                    add_into(&mut adj, x, reduce_broadcast_or_copy(&g, out_shape, shape(x)));
                }
                Op::Permute { x, perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    add_into(&mut adj, *x, permute_data(&g, out_shape, &inv));
                }
                Op::Concat { xs, axis } => {
                    let (outer, _, inner) = split_axis(out_shape, *axis);
                    let mut offset = 0;
                    let row = out_shape[*axis] * inner;
                    for &xi in xs {
                        let chunk = shape(xi)[*axis] * inner;
                        if rg(xi) {
                            let mut dx = Vec::with_capacity(outer * chunk);
                            for o in 0..outer {
                                let s = o * row + offset;
                                dx.extend_from_slice(&g[s..s + chunk]);
                            }
                            add_into(&mut adj, xi, dx);
                        }
                        offset += chunk;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let in_shape = shape(*x);
                    let (outer, len, inner) = split_axis(in_shape, *axis);
                    let width = out_shape[*axis];
                    let dx = slot(&mut adj, *x, numel(in_shape));
                    for o in 0..outer {
                        let src = &g[o * width * inner..(o + 1) * width * inner];
                        let d = (o * len + start) * inner;
                        for (dv, sv) in dx[d..d + width * inner].iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
                Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                    let d = *out_shape.last().unwrap();
                    let gv = val(*gain);
                    if rg(*x) {
                        let mut dx = vec![0.0; g.len()];
                        let mut dxhat = vec![0.0; d];
                        for (r, &rs) in rstd.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let xr = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxhat[j] = gr[j] * gv[j];
                            }
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>()
                                / d as f64;
                            for j in 0..d {
                                dx[r * d + j] = rs * (dxhat[j] - m1 - xr[j] * m2);
                            }
                        }
                        add_into(&mut adj, *x, dx);
                    }
                    if rg(*gain) {
                        let dg = slot(&mut adj, *gain, d);
                        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += gr[j] * xr[j];
                            }
                        }
                    }
                    if rg(*shift) {
                        let ds = slot(&mut adj, *shift, d);
                        for gr in g.chunks(d) {
                            for j in 0..d {
                                ds[j] += gr[j];
                            }
                        }
                    }
                }
                Op::Conv { x, w, b, geom, transposed } => {
                    conv_backward(&nodes, &mut adj, &g, out_shape, *x, *w, *b, geom, *transposed);
                }
                Op::Resize { x, rows, cols } => {
                    let in_shape = shape(*x);
                    let (h, w) = (in_shape[2], in_shape[3]);
                    let planes = in_shape[0] * in_shape[1];
                    let (oh, ow) = (rows.len(), cols.len());
                    let dx = slot(&mut adj, *x, planes * h * w);
                    for p in 0..planes {
                        let gp = &g[p * oh * ow..(p + 1) * oh * ow];
                        let dp = &mut dx[p * h * w..(p + 1) * h * w];
                        for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                                let gv = gp[oy * ow + ox];
                                dp[y0 * w + x0] += gv * wy0 * wx0;
                                dp[y0 * w + x1] += gv * wy0 * wx1;
                                dp[y1 * w + x0] += gv * wy1 * wx0;
                                dp[y1 * w + x1] += gv * wy1 * wx1;
                            }
                        }
                    }
                }
                Op::Custom { xs, rule } => {
                    let inputs: Vec<&Tensor> = xs.iter().map(|&i| &nodes[i].value).collect();
                    let local = rule.backward(&inputs, &node.value, &g);
                    for (&xi, d) in xs.iter().zip(local) {
                        if rg(xi) {
                            assert_eq!(d.len(), val(xi).len(), "custom backward length");
                            add_into(&mut adj, xi, d);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    nodes: &[Node],
    adj: &mut [Option<Vec<f64>>],
    g: &[f64],
    out_shape: &[usize],
    x: usize,
    w: usize,
    b: Option<usize>,
    geom: &ConvGeom,
    transposed: bool,
) {
    let xv = nodes[x].value.data();
    let wv = nodes[w].value.data();
    let xs = nodes[x].value.shape();
    let n = xs[0];
    let x_per = numel(&xs[1..]);
    let g_per = numel(&out_shape[1..]);
    let cout = out_shape[1];
    let mut col = vec![0.0; geom.col_rows() * geom.col_cols()];
    if let Some(b) = b.filter(|&b| nodes[b].requires_grad) {
        let db = slot(adj, b, cout);
        let plane = numel(&out_shape[2..]);
        for s in 0..n {
            for c in 0..cout {
                let off = s * g_per + c * plane;
                db[c] += g[off..off + plane].iter().sum::<f64>();
            }
        }
    }
    if !transposed {
        // x: [N, C, H, W], w: [O, C·kh·kw], out: [N, O, oh·ow]
        let ckk = geom.col_rows();
        let p = geom.col_cols();
        if nodes[w].requires_grad {
            let dw = slot(adj, w, wv.len());
            for s in 0..n {
                kernels::im2col(geom, &xv[s * x_per..(s + 1) * x_per], &mut col);
                kernels::gemm_nt(cout, p, ckk, &g[s * g_per..(s + 1) * g_per], &col, dw);
            }
        }
        if nodes[x].requires_grad {
            let dx = slot(adj, x, xv.len());
            for s in 0..n {
                col.fill(0.0);
                kernels::gemm_tn(cout, ckk, p, wv, &g[s * g_per..(s + 1) * g_per], &mut col);
                kernels::col2im(geom, &col, &mut dx[s * x_per..(s + 1) * x_per]);
            }
        }
    } else {
        // x: [N, Cin, H·W], w: [Cin, Cout·kh·kw], out: [N, Cout, OH, OW]
        let cin = xs[1];
        let hw = geom.col_cols();
        let ckk = geom.col_rows();
        let need_w = nodes[w].requires_grad;
        let need_x = nodes[x].requires_grad;
        for s in 0..n {
            kernels::im2col(geom, &g[s * g_per..(s + 1) * g_per], &mut col);
            if need_w {
                let dw = slot(adj, w, wv.len());
                kernels::gemm_nt(cin, hw, ckk, &xv[s * x_per..(s + 1) * x_per], &col, dw);
            }
            if need_x {
                let dx = slot(adj, x, xv.len());
                kernels::gemm_nn(cin, ckk, hw, wv, &col, &mut dx[s * x_per..(s + 1) * x_per]);
            }
        }
    }
}

fn accumulate(dst: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *dst = Some(g),
    }
}

fn add_into(adj: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    accumulate(&mut adj[id], g);
}

fn slot(adj: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    adj[id].get_or_insert_with(|| vec![0.0; len])
}

fn expand<'a>(
    data: &'a [f64],
    shape: &[usize],
    out: &[usize],
    same: bool,
) -> alloc::borrow::Cow<'a, [f64]> {
    use alloc::borrow::Cow;
    if same || shape == out {
        Cow::Borrowed(data)
    } else if data.len() == 1 {
        Cow::Owned(vec![data[0]; numel(out)])
    } else {
        Cow::Owned(broadcast_offsets(out, shape).into_iter().map(|o| data[o]).collect())
    }
}

fn reduce_broadcast_or_copy(g: &[f64], out: &[usize], src: &[usize]) -> Vec<f64> {
    if numel(out) == numel(src) {
        g.to_vec()
    } else {
        reduce_broadcast(g, out, src)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// tanh-approximated GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = math::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn resize_table(input: usize, output: usize) -> AxisTable {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (math::floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            let l1 = if i0 == input - 1 { 0.0 } else { l1 };
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    /// A copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.value(self.id).clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.value(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    /// Same value as a new constant leaf, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(core::ptr::eq(self.tape, other.tape), "operands on different tapes");
    }

    fn unary_map(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let value = self.tape.value(self.id).map(f);
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'t>, kind: Binary) -> Result<Var<'t>> {
        self.same_tape(other);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if kind == Binary::Div && b.data().contains(&0.0) {
                return Err(domain_err!("division by exact zero"));
            }
            let out_shape = broadcast_shape(a.shape(), b.shape())?;
            let f = |x: f64, y: f64| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
            };
            let data: Vec<f64> = if a.shape() == b.shape() {
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
            } else if b.len() == 1 && a.shape() == out_shape.as_slice() {
                let y = b.data()[0];
                a.data().iter().map(|&x| f(x, y)).collect()
            } else {
                let ea = expand(a.data(), a.shape(), &out_shape, false);
                let eb = expand(b.data(), b.shape(), &out_shape, false);
                ea.iter().zip(eb.iter()).map(|(&x, &y)| f(x, y)).collect()
            };
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            (Tensor::new(&out_shape, data)?, rg)
        };
        Ok(self.tape.push(value, Op::Binary(kind, self.id, other.id), rg))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary_map(Op::Scale(self.id, s), |x| x * s)
    }

    /// Adds a constant to every entry.
    pub fn shift(&self, c: f64) -> Var<'t> {
        self.unary_map(Op::Shift(self.id), |x| x + c)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary_map(Op::Unary(Unary::Exp, self.id), math::exp)
    }

    pub fn ln(&self) -> Result<Var<'t>> {
        if self.tape.value(self.id).data().iter().any(|&v| v <= 0.0) {
            return Err(domain_err!("logarithm of non-positive value"));
        }
        Ok(self.unary_map(Op::Unary(Unary::Ln, self.id), math::ln))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary_map(Op::Unary(Unary::Relu, self.id), |x| x.max(0.0))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary_map(Op::Unary(Unary::Gelu, self.id), gelu)
    }

    fn matmul_impl(&self, other: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        self.same_tape(other);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(shape_err!("matmul batch axes: {sa:?} vs {sb:?}"));
            }
            let r = sa.len();
            let (m, k) = (sa[r - 2], sa[r - 1]);
            let (kb, n) = if trans_b { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
            if k != kb {
                return Err(shape_err!("matmul inner extents: {sa:?} vs {sb:?}"));
            }
            let batch = numel(&sa[..r - 2]);
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let av = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bv = &b.data()[bi * k * n..(bi + 1) * k * n];
                let ov = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    kernels::gemm_nt(m, k, n, av, bv, ov);
                } else {
                    kernels::gemm_nn(m, k, n, av, bv, ov);
                }
            }
            let mut shape = sa[..r - 2].to_vec();
            shape.extend([m, n]);
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            (Tensor::new(&shape, out)?, rg)
        };
        Ok(self.tape.push(value, Op::Matmul { a: self.id, b: other.id, trans_b }, rg))
    }

    /// `[..., m, k] · [..., k, n]`; leading batch axes must match exactly.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `[..., m, k] · [..., n, k]ᵀ`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            check_axis(x.shape(), axis)?;
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let xd = x.data();
            let mut y = vec![0.0; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mx = (0..len).map(|j| xd[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = math::exp(xd[base + j * inner] - mx);
                        y[base + j * inner] = e;
                        total += e;
                    }
                    for j in 0..len {
                        y[base + j * inner] /= total;
                    }
                }
            }
            Tensor::new(x.shape(), y)?
        };
        Ok(self.tape.push(value, Op::Softmax { x: self.id, axis }, self.requires_grad()))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            check_axis(x.shape(), axis)?;
            let (outer, len, inner) = split_axis(x.shape(), axis);
            let xd = x.data();
            let mut y = vec![0.0; xd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mx = (0..len).map(|j| xd[base + j * inner]).fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = (0..len).map(|j| math::exp(xd[base + j * inner] - mx)).sum();
                    let lse = mx + math::ln(total);
                    for j in 0..len {
                        y[base + j * inner] = xd[base + j * inner] - lse;
                    }
                }
            }
            Tensor::new(x.shape(), y)?
        };
        Ok(self.tape.push(value, Op::LogSoftmax { x: self.id, axis }, self.requires_grad()))
    }

    /// Softmax along the last axis restricted to entries where the binary
    /// `mask` (broadcastable to `self`) is 1. A row with no kept entry yields
    /// all zeros. The mask receives an identically zero gradient.
    pub fn masked_softmax(&self, mask: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(mask);
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let m = &nodes[mask.id].value;
            if broadcast_shape(x.shape(), m.shape())? != x.shape() {
                return Err(shape_err!("mask {:?} does not broadcast to {:?}", m.shape(), x.shape()));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(domain_err!("binary mask entries must be 0 or 1"));
            }
            let keep = expand(m.data(), m.shape(), x.shape(), false);
            let len = *x.shape().last().unwrap();
            let mut y = vec![0.0; x.len()];
            for ((xr, kr), yr) in x.data().chunks(len).zip(keep.chunks(len)).zip(y.chunks_mut(len)) {
                let mx = xr
                    .iter()
                    .zip(kr)
                    .filter(|(_, &k)| k != 0.0)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if mx == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..len {
                    if kr[j] != 0.0 {
                        yr[j] = math::exp(xr[j] - mx);
                        total += yr[j];
                    }
                }
                yr.iter_mut().for_each(|v| *v /= total);
            }
            let rg = nodes[self.id].requires_grad || nodes[mask.id].requires_grad;
            (Tensor::new(x.shape(), y)?, rg)
        };
        Ok(self.tape.push(value, Op::MaskedSoftmax { x: self.id, mask: mask.id }, rg))
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            match axis {
                None => {
                    let s: f64 = x.data().iter().sum();
                    Tensor::scalar(if mean { s / x.len() as f64 } else { s })
                }
                Some(ax) => {
                    check_axis(x.shape(), ax)?;
                    let (outer, len, inner) = split_axis(x.shape(), ax);
                    let mut out = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for j in 0..len {
                            let row = &x.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                            for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                    }
                    if mean {
                        out.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(ax);
                    Tensor::new(&shape, out)?
                }
            }
        };
        let op = if mean { Op::Mean { x: self.id, axis } } else { Op::Sum { x: self.id, axis } };
        Ok(self.tape.push(value, op, self.requires_grad()))
    }

    /// Sum over `axis`, or over everything when `None`.
    pub fn sum(&self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, false)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Var<'t>> {
        self.reduce(axis, true)
    }

    /// Max over `axis` (or everything). Backward routes the whole gradient to
    /// the lowest index among tied maxima.
    pub fn max(&self, axis: Option<usize>) -> Result<Var<'t>> {
        let (value, arg) = {
            let x = self.tape.value(self.id);
            let xd = x.data();
            match axis {
                None => {
                    let mut best = 0;
                    for (i, &v) in xd.iter().enumerate() {
                        if v > xd[best] {
                            best = i;
                        }
                    }
                    (Tensor::scalar(xd[best]), vec![best])
                }
                Some(ax) => {
                    check_axis(x.shape(), ax)?;
                    let (outer, len, inner) = split_axis(x.shape(), ax);
                    let mut vals = Vec::with_capacity(outer * inner);
                    let mut arg = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut best = o * len * inner + i;
                            for j in 1..len {
                                let p = (o * len + j) * inner + i;
                                if xd[p] > xd[best] {
                                    best = p;
                                }
                            }
                            vals.push(xd[best]);
                            arg.push(best);
                        }
                    }
                    let mut shape = x.shape().to_vec();
                    shape.remove(ax);
                    (Tensor::new(&shape, vals)?, arg)
                }
            }
        };
        Ok(self.tape.push(value, Op::Max { x: self.id, arg }, self.requires_grad()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.tape.value(self.id).clone().reshape(shape)?;
        Ok(self.tape.push(value, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            let rank = x.shape().len();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
                return Err(shape_err!("invalid permutation {perm:?} for rank {rank}"));
            }
            let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
            Tensor::new(&shape, permute_data(x.data(), x.shape(), perm))?
        };
        Ok(self.tape.push(value, Op::Permute { x: self.id, perm: perm.to_vec() }, self.requires_grad()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(shape_err!("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }

    /// Materialises singleton-axis stretching up to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            if broadcast_shape(x.shape(), shape)? != shape {
                return Err(shape_err!("cannot broadcast {:?} to {shape:?}", x.shape()));
            }
            let data = expand(x.data(), x.shape(), shape, false).into_owned();
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(value, Op::Broadcast(self.id), self.requires_grad()))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.tape.value(self.id);
            check_axis(x.shape(), axis)?;
            if len == 0 || start + len > x.shape()[axis] {
                return Err(shape_err!("narrow {start}+{len} beyond extent {}", x.shape()[axis]));
            }
            let (outer, ext, inner) = split_axis(x.shape(), axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let s = (o * ext + start) * inner;
                data.extend_from_slice(&x.data()[s..s + len * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        Ok(self.tape.push(value, Op::Narrow { x: self.id, axis, start }, self.requires_grad()))
    }

    /// Normalises over the last axis, then applies `gain` and `shift`.
    pub fn layer_norm(&self, gain: &Var<'t>, shift: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        self.same_tape(gain);
        self.same_tape(shift);
        let (value, xhat, rstd, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let d = *x.shape().last().ok_or_else(|| shape_err!("layer_norm on a scalar"))?;
            let gv = &nodes[gain.id].value;
            let sv = &nodes[shift.id].value;
            if d < 2 || gv.shape() != [d] || sv.shape() != [d] {
                return Err(shape_err!(
                    "layer_norm over {d} with gain {:?} shift {:?}",
                    gv.shape(),
                    sv.shape()
                ));
            }
            if eps <= 0.0 {
                return Err(domain_err!("layer_norm eps must be positive"));
            }
            let rows = x.len() / d;
            let mut xhat = vec![0.0; x.len()];
            let mut rstd = vec![0.0; rows];
            let mut y = vec![0.0; x.len()];
            for r in 0..rows {
                let xr = &x.data()[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let rs = 1.0 / math::sqrt(var + eps);
                rstd[r] = rs;
                for j in 0..d {
                    let h = (xr[j] - mean) * rs;
                    xhat[r * d + j] = h;
                    y[r * d + j] = h * gv.data()[j] + sv.data()[j];
                }
            }
            let rg = [self.id, gain.id, shift.id].iter().any(|&i| nodes[i].requires_grad);
            (Tensor::new(x.shape(), y)?, xhat, rstd, rg)
        };
        let op = Op::LayerNorm { x: self.id, gain: gain.id, shift: shift.id, xhat, rstd };
        Ok(self.tape.push(value, op, rg))
    }

    /// Cross-correlation of `[N, C, H, W]` with weights `[O, C, kh, kw]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.conv_impl(weight, bias, stride, pad, false)
    }

    /// Transposed convolution of `[N, Cin, H, W]` with weights
    /// `[Cin, Cout, kh, kw]`; output extent `(H−1)·stride − 2·pad + kh`.
    pub fn conv_transpose2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.conv_impl(weight, bias, stride, pad, true)
    }

    fn conv_impl(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<Var<'t>> {
        self.same_tape(weight);
        if stride == 0 {
            return Err(shape_err!("stride must be >= 1"));
        }
        let (value, geom, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let w = &nodes[weight.id].value;
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 4 || ws.len() != 4 {
                return Err(shape_err!("conv expects rank-4 input and weight, got {xs:?} {ws:?}"));
            }
            let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
            let (kh, kw) = (ws[2], ws[3]);
            let (cin_w, cout) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
            if cin_w != c {
                return Err(shape_err!("conv channel mismatch: input {c}, weight expects {cin_w}"));
            }
            if let Some(b) = bias {
                if nodes[b.id].value.shape() != [cout] {
                    return Err(shape_err!("conv bias must be [{cout}]"));
                }
            }
            let wv = w.data();
            let (geom, out_shape, data) = if !transposed {
                if h + 2 * pad < kh || wd + 2 * pad < kw {
                    return Err(shape_err!("kernel {kh}x{kw} larger than padded input {h}x{wd}"));
                }
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                let geom = ConvGeom { channels: c, h, w: wd, kh, kw, stride, pad, oh, ow };
                let ckk = geom.col_rows();
                let p = geom.col_cols();
                let mut col = vec![0.0; ckk * p];
                let mut out = vec![0.0; n * cout * p];
                for s in 0..n {
                    kernels::im2col(&geom, &x.data()[s * c * h * wd..(s + 1) * c * h * wd], &mut col);
                    kernels::gemm_nn(cout, ckk, p, wv, &col, &mut out[s * cout * p..(s + 1) * cout * p]);
                }
                (geom, [n, cout, oh, ow], out)
            } else {
                let oh = ((h - 1) * stride + kh).checked_sub(2 * pad).filter(|&v| v > 0);
                let ow = ((wd - 1) * stride + kw).checked_sub(2 * pad).filter(|&v| v > 0);
                let (Some(oh), Some(ow)) = (oh, ow) else {
                    return Err(shape_err!("transposed conv output would be empty"));
                };
                let geom = ConvGeom { channels: cout, h: oh, w: ow, kh, kw, stride, pad, oh: h, ow: wd };
                let ckk = geom.col_rows();
                let hw = h * wd;
                let mut col = vec![0.0; ckk * hw];
                let mut out = vec![0.0; n * cout * oh * ow];
                for s in 0..n {
                    col.fill(0.0);
                    kernels::gemm_tn(c, ckk, hw, wv, &x.data()[s * c * hw..(s + 1) * c * hw], &mut col);
                    kernels::col2im(&geom, &col, &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow]);
                }
                (geom, [n, cout, oh, ow], out)
            };
            let mut data = data;
            if let Some(b) = bias {
                let bv = nodes[b.id].value.data();
                let plane = out_shape[2] * out_shape[3];
                for (i, chunk) in data.chunks_mut(plane).enumerate() {
                    let bc = bv[i % cout];
                    chunk.iter_mut().for_each(|v| *v += bc);
                }
            }
            let rg = nodes[self.id].requires_grad
                || nodes[weight.id].requires_grad
                || bias.is_some_and(|b| nodes[b.id].requires_grad);
            (Tensor::new(&out_shape, data)?, geom, rg)
        };
        let op = Op::Conv { x: self.id, w: weight.id, b: bias.map(|b| b.id), geom, transposed };
        Ok(self.tape.push(value, op, rg))
    }

    /// Bilinear resize of `[N, C, H, W]` with half-pixel sample centres
    /// (`src = (i + 0.5)·in/out − 0.5`, clamped to the grid).
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Var<'t>> {
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize target must be at least 1x1"));
        }
        let (value, rows, cols) = {
            let x = self.tape.value(self.id);
            let s = x.shape();
            if s.len() != 4 {
                return Err(shape_err!("resize expects [N, C, H, W], got {s:?}"));
            }
            let (h, w) = (s[2], s[3]);
            let rows = resize_table(h, out_h);
            let cols = resize_table(w, out_w);
            let planes = s[0] * s[1];
            let mut out = vec![0.0; planes * out_h * out_w];
            for p in 0..planes {
                let src = &x.data()[p * h * w..(p + 1) * h * w];
                let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
                for (oy, &(y0, y1, wy0, wy1)) in rows.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in cols.iter().enumerate() {
                        dst[oy * out_w + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                            + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                    }
                }
            }
            (Tensor::new(&[s[0], s[1], out_h, out_w], out)?, rows, cols)
        };
        Ok(self.tape.push(value, Op::Resize { x: self.id, rows, cols }, self.requires_grad()))
    }
}
