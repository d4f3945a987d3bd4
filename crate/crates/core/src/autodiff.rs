//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! returns gradients for every leaf that requires them. The tape is rebuilt
//! for each forward pass, so data-dependent shapes (such as the number of
//! aggregated segments) need no special handling.
//!
//! ```
//! use umasplit::autodiff::Tape;
//! use umasplit::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::scalar(0.0));
//! let y = x.sigmoid().unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert!((grads.get(x).item() - 0.25).abs() < 1e-15);
//! ```

use std::cell::{Ref, RefCell};
use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Every primitive the tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    MatMul,
    Add,
    ElementwiseMul,
    ScalarScale,
    Sigmoid,
    Swish,
    Tanh,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Concat,
    Slice,
    Transpose,
    EmbeddingGather,
    SegmentWeightedMean,
    MaskedFill,
    Sum,
    Mean,
    Reshape,
    CtcLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::ElementwiseMul,
        OpKind::ScalarScale,
        OpKind::Sigmoid,
        OpKind::Swish,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::EmbeddingGather,
        OpKind::SegmentWeightedMean,
        OpKind::MaskedFill,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Reshape,
        OpKind::CtcLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::ElementwiseMul => "elementwise-mul",
            OpKind::ScalarScale => "scalar-scale",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Swish => "swish",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log-softmax",
            OpKind::LayerNorm => "layer-norm",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::EmbeddingGather => "embedding-gather",
            OpKind::SegmentWeightedMean => "segment-weighted-mean",
            OpKind::MaskedFill => "masked-fill",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Reshape => "reshape",
            OpKind::CtcLoss => "ctc-loss",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        name: Option<String>,
    },
    MatMul(usize, usize),
    Add(usize, usize),
    /// `x + b` with `b` broadcast over the rows of `x`.
    AddRow(usize, usize),
    /// `x + c` with a one-element `c` broadcast everywhere.
    AddScalar(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Swish(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    Transpose(usize),
    Gather {
        x: usize,
        rows: Vec<usize>,
    },
    SegmentMean {
        x: usize,
        w: usize,
        segments: Vec<(usize, usize)>,
        sums: Vec<f64>,
    },
    MaskedFill {
        x: usize,
        mask: Vec<bool>,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Ctc {
        lp: usize,
        labels: Vec<usize>,
        log_alpha: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf { .. } => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) | Op::AddRow(..) | Op::AddScalar(..) => OpKind::Add,
            Op::Mul(..) => OpKind::ElementwiseMul,
            Op::Scale(..) => OpKind::ScalarScale,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Swish(_) => OpKind::Swish,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Gather { .. } => OpKind::EmbeddingGather,
            Op::SegmentMean { .. } => OpKind::SegmentWeightedMean,
            Op::MaskedFill { .. } => OpKind::MaskedFill,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Ctc { .. } => OpKind::CtcLoss,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward pass. Owned exclusively by that pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// A handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// `(rows, cols)` treating vectors as a single row.
fn row_view(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [] => (1, 1),
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => (s[..s.len() - 1].iter().product(), s[s.len() - 1]),
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = row_view(x);
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..r {
        let row = &mut d[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = row_view(x);
    let mut out = x.clone();
    let d = out.data_mut();
    for i in 0..r {
        let row = &mut d[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        if cfg!(debug_assertions) && !value.is_finite() {
            // log has a restricted domain; masked fill may write infinities on purpose
            let exempt = matches!(&op, Op::MaskedFill { .. } | Op::Log(_));
            let inputs_finite = op_inputs(&op).iter().all(|&i| nodes[i].value.is_finite());
            assert!(
                exempt || !inputs_finite,
                "{:?} produced non-finite values from finite inputs",
                op.kind()
            );
        }
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// A constant leaf: no gradient is tracked for it.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { name: None }, false)
    }

    /// An anonymous leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf { name: None }, true)
    }

    /// A named trainable leaf. Gradients of leaves sharing a name are summed.
    pub fn param(&self, name: &str, value: &Tensor) -> Var<'_> {
        self.push(
            value.clone(),
            Op::Leaf {
                name: Some(name.to_owned()),
            },
            true,
        )
    }

    fn grad_flag(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, output.tape), "output belongs to another tape");
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.id];
        if !out_node.value.is_scalar() {
            return Err(Error::BackwardNonScalar(out_node.value.shape().to_vec()));
        }
        let n = output.id + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[output.id] = Some(vec![1.0]);
        let mut leaf_grads: BTreeMap<usize, Tensor> = BTreeMap::new();

        for id in (0..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backprop_node(&nodes, id, g, &mut grads, &mut leaf_grads)?;
        }

        let mut by_id = BTreeMap::new();
        let mut named: BTreeMap<String, Tensor> = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            let Op::Leaf { name } = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let g = leaf_grads
                .remove(&id)
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            if let Some(name) = name {
                match named.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        named.insert(name.clone(), g.clone());
                    }
                }
            }
            by_id.insert(id, g);
        }
        Ok(Gradients { by_id, named })
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::AddScalar(a, b)
        | Op::Mul(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Sigmoid(a)
        | Op::Swish(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Softmax(a)
        | Op::LogSoftmax(a)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Slice { x, .. } | Op::Gather { x, .. } | Op::MaskedFill { x, .. } => vec![*x],
        Op::SegmentMean { x, w, .. } => vec![*x, *w],
        Op::Ctc { lp, .. } => vec![*lp],
    }
}

/// Zero-initialized accumulator for node `id`, or `None` if it needs no gradient.
fn slot<'g>(
    nodes: &[Node],
    grads: &'g mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(
    nodes: &[Node],
    id: usize,
    g: Vec<f64>,
    grads: &mut [Option<Vec<f64>>],
    leaf_grads: &mut BTreeMap<usize, Tensor>,
) -> Result<()> {
    let node = &nodes[id];
    let y = node.value.data();
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf { .. } => {
            leaf_grads.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
        }
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let (_, n) = val(*b).dims2()?;
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm_nt(&g, val(*b).data(), m, k, n, ga);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                gemm_tn(val(*a).data(), &g, m, k, n, gb);
            }
        }
        Op::Add(a, b) => {
            for i in [*a, *b] {
                if let Some(s) = slot(nodes, grads, i) {
                    s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::AddRow(a, b) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *b) {
                let c = s.len();
                for (j, gv) in g.iter().enumerate() {
                    s[j % c] += gv;
                }
            }
        }
        Op::AddScalar(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
            }
            if let Some(s) = slot(nodes, grads, *c) {
                s[0] += g.iter().sum::<f64>();
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), b) in s.iter_mut().zip(&g).zip(bv) {
                    *s += g * b;
                }
            }
            if let Some(s) = slot(nodes, grads, *b) {
                for ((s, g), a) in s.iter_mut().zip(&g).zip(av) {
                    *s += g * a;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(&g).for_each(|(s, g)| *s += c * g);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), y) in s.iter_mut().zip(&g).zip(y) {
                    *s += g * y * (1.0 - y);
                }
            }
        }
        Op::Swish(a) => {
            let xv = val(*a).data();
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), x) in s.iter_mut().zip(&g).zip(xv) {
                    let sg = sigmoid(*x);
                    *s += g * (sg + x * sg * (1.0 - sg));
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), y) in s.iter_mut().zip(&g).zip(y) {
                    *s += g * (1.0 - y * y);
                }
            }
        }
        Op::Exp(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), y) in s.iter_mut().zip(&g).zip(y) {
                    *s += g * y;
                }
            }
        }
        Op::Log(a) => {
            let xv = val(*a).data();
            if let Some(s) = slot(nodes, grads, *a) {
                for ((s, g), x) in s.iter_mut().zip(&g).zip(xv) {
                    *s += g / x;
                }
            }
        }
        Op::Softmax(a) => {
            let (r, c) = row_view(&node.value);
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        s[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            let (r, c) = row_view(&node.value);
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        s[i * c + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let (r, c) = row_view(&node.value);
            let gv = val(*gain).data();
            if let Some(s) = slot(nodes, grads, *gain) {
                for i in 0..r {
                    for j in 0..c {
                        s[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *bias) {
                for i in 0..r {
                    for j in 0..c {
                        s[j] += g[i * c + j];
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; c];
                for i in 0..r {
                    let xr = &xhat[i * c..(i + 1) * c];
                    for j in 0..c {
                        dxhat[j] = g[i * c + j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dx =
                        dxhat.iter().zip(xr).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                    for j in 0..c {
                        s[i * c + j] += inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (rows, cols) = node.value.dims2()?;
            let mut offset = 0;
            for &p in parts {
                let (pr, pc) = val(p).dims2()?;
                if let Some(s) = slot(nodes, grads, p) {
                    if *axis == 0 {
                        s.iter_mut()
                            .zip(&g[offset * cols..(offset + pr) * cols])
                            .for_each(|(s, g)| *s += g);
                    } else {
                        for i in 0..rows {
                            for j in 0..pc {
                                s[i * pc + j] += g[i * cols + offset + j];
                            }
                        }
                    }
                }
                offset += if *axis == 0 { pr } else { pc };
            }
        }
        Op::Slice { x, axis, start } => {
            let (_, cols) = val(*x).dims2()?;
            let (or, oc) = node.value.dims2()?;
            if let Some(s) = slot(nodes, grads, *x) {
                if *axis == 0 {
                    s[start * cols..(start + or) * cols]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(s, g)| *s += g);
                } else {
                    for i in 0..or {
                        for j in 0..oc {
                            s[i * cols + start + j] += g[i * oc + j];
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (r, c) = val(*a).dims2()?;
            if let Some(s) = slot(nodes, grads, *a) {
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::Gather { x, rows } => {
            let (_, c) = val(*x).dims2()?;
            if let Some(s) = slot(nodes, grads, *x) {
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        s[r * c + j] += g[k * c + j];
                    }
                }
            }
        }
        Op::SegmentMean {
            x,
            w,
            segments,
            sums,
        } => {
            let xt = val(*x);
            let (_, d) = xt.dims2()?;
            let wv = val(*w).data();
            if let Some(s) = slot(nodes, grads, *x) {
                for (i, &(a, b)) in segments.iter().enumerate() {
                    let gi = &g[i * d..(i + 1) * d];
                    for t in a..=b {
                        let f = wv[t] / sums[i];
                        for j in 0..d {
                            s[t * d + j] += f * gi[j];
                        }
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, *w) {
                for (i, &(a, b)) in segments.iter().enumerate() {
                    let gi = &g[i * d..(i + 1) * d];
                    let ci = &y[i * d..(i + 1) * d];
                    for t in a..=b {
                        let xr = xt.row(t);
                        let dot: f64 = (0..d).map(|j| (xr[j] - ci[j]) * gi[j]).sum();
                        s[t] += dot / sums[i];
                    }
                }
            }
        }
        Op::MaskedFill { x, mask } => {
            if let Some(s) = slot(nodes, grads, *x) {
                for ((s, g), m) in s.iter_mut().zip(&g).zip(mask) {
                    if !m {
                        *s += g;
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                let f = g[0] / s.len() as f64;
                s.iter_mut().for_each(|s| *s += f);
            }
        }
        Op::Reshape(a) => {
            if let Some(s) = slot(nodes, grads, *a) {
                s.iter_mut().zip(&g).for_each(|(s, g)| *s += g);
            }
        }
        Op::Ctc {
            lp,
            labels,
            log_alpha,
        } => {
            let lpt = val(*lp);
            if let Some(s) = slot(nodes, grads, *lp) {
                crate::ctc::accumulate_alpha_adjoint(lpt, labels, log_alpha, g[0], s);
            }
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn check_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = {
            let v = self.value();
            let data = v.data().iter().map(|&x| f(x)).collect();
            Tensor::new(v.shape().to_vec(), data).expect("same shape")
        };
        let rg = self.requires_grad();
        self.tape.push(out, op, rg)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let out = {
            let (a, b) = (self.value(), rhs.value());
            let (m, k) = a.dims2()?;
            let (k2, n) = b.dims2()?;
            if k != k2 {
                return Err(Error::shape(format!(
                    "matmul: {m}×{k} · {k2}×{n}"
                )));
            }
            let mut out = vec![0.0; m * n];
            gemm_nn(a.data(), b.data(), m, k, n, &mut out);
            Tensor::matrix(m, n, out)?
        };
        let rg = self.tape.grad_flag(&[self.id, rhs.id]);
        Ok(self.tape.push(out, Op::MatMul(self.id, rhs.id), rg))
    }

    /// Elementwise sum. Accepts identical shapes, a bias broadcast over rows
    /// (`rhs` holding one row's worth of values), or a one-element `rhs`.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let (out, op) = {
            let (a, b) = (self.value(), rhs.value());
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                (
                    Tensor::new(a.shape().to_vec(), data)?,
                    Op::Add(self.id, rhs.id),
                )
            } else if b.is_scalar() {
                let c = b.item();
                let data = a.data().iter().map(|x| x + c).collect();
                (
                    Tensor::new(a.shape().to_vec(), data)?,
                    Op::AddScalar(self.id, rhs.id),
                )
            } else {
                let (_, c) = row_view(&a);
                if b.rank() > 2 || b.len() != c || (b.rank() == 2 && b.rows() != 1) {
                    return Err(Error::shape(format!(
                        "add: {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                let bd = b.data();
                let data = a
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| x + bd[i % c])
                    .collect();
                (
                    Tensor::new(a.shape().to_vec(), data)?,
                    Op::AddRow(self.id, rhs.id),
                )
            }
        };
        let rg = self.tape.grad_flag(&[self.id, rhs.id]);
        Ok(self.tape.push(out, op, rg))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.add(rhs.scale(-1.0))
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&rhs);
        let out = {
            let (a, b) = (self.value(), rhs.value());
            same_shape("mul", &a, &b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.tape.grad_flag(&[self.id, rhs.id]);
        Ok(self.tape.push(out, Op::Mul(self.id, rhs.id), rg))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| c * x)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        Ok(self.unary(Op::Sigmoid(self.id), sigmoid))
    }

    /// `x · sigmoid(x)`
    pub fn swish(self) -> Result<Var<'t>> {
        Ok(self.unary(Op::Swish(self.id), |x| x * sigmoid(x)))
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        Ok(self.unary(Op::Tanh(self.id), f64::tanh))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        Ok(self.unary(Op::Exp(self.id), f64::exp))
    }

    pub fn log(self) -> Result<Var<'t>> {
        Ok(self.unary(Op::Log(self.id), f64::ln))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let out = softmax_rows(&self.value());
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Softmax(self.id), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let out = log_softmax_rows(&self.value());
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::LogSoftmax(self.id), rg))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-feature `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.check_tape(&gain);
        self.check_tape(&bias);
        let (out, xhat, inv_std) = {
            let x = self.value();
            let (r, c) = row_view(&x);
            let (gv, bv) = (gain.value(), bias.value());
            if gv.len() != c || bv.len() != c {
                return Err(Error::shape(format!(
                    "layer_norm: {c} features, gain {:?}, bias {:?}",
                    gv.shape(),
                    bv.shape()
                )));
            }
            let mut xhat = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &x.data()[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[i] = inv;
                for j in 0..c {
                    let h = (row[j] - mean) * inv;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        let rg = self.tape.grad_flag(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns).
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let tape = first.tape;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let dims = vals
                .iter()
                .map(|v| v.dims2())
                .collect::<Result<Vec<_>>>()?;
            match axis {
                0 => {
                    let c = dims[0].1;
                    if dims.iter().any(|d| d.1 != c) {
                        return Err(Error::shape(format!("concat rows: {dims:?}")));
                    }
                    let data: Vec<f64> = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                    let r = dims.iter().map(|d| d.0).sum();
                    Tensor::matrix(r, c, data)?
                }
                1 => {
                    let r = dims[0].0;
                    if dims.iter().any(|d| d.0 != r) {
                        return Err(Error::shape(format!("concat cols: {dims:?}")));
                    }
                    let c: usize = dims.iter().map(|d| d.1).sum();
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for v in &vals {
                            data.extend_from_slice(v.row(i));
                        }
                    }
                    Tensor::matrix(r, c, data)?
                }
                _ => return Err(Error::shape(format!("concat axis {axis}"))),
            }
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.grad_flag(&ids);
        Ok(tape.push(out, Op::Concat { parts: ids, axis }, rg))
    }

    /// Takes `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            let extent = if axis == 0 { r } else { c };
            if axis > 1 || start + len > extent {
                return Err(Error::shape(format!(
                    "slice axis {axis} [{start}, {}) of {r}×{c}",
                    start + len
                )));
            }
            if axis == 0 {
                Tensor::matrix(len, c, x.data()[start * c..(start + len) * c].to_vec())?
            } else {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&x.row(i)[start..start + len]);
                }
                Tensor::matrix(r, len, data)?
            }
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::matrix(c, r, data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Transpose(self.id), rg))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            let (r, c) = x.dims2()?;
            let mut data = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                if i >= r {
                    return Err(Error::shape(format!("gather row {i} of {r}")));
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::matrix(rows.len(), c, data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out,
            Op::Gather {
                x: self.id,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Weighted mean of row ranges: row `i` of the output is
    /// `Σ_{t∈seg_i} w_t x_t / Σ_{t∈seg_i} w_t`. Segments are 0-based and
    /// inclusive and may overlap.
    pub fn segment_weighted_mean(
        self,
        weights: Var<'t>,
        segments: &[(usize, usize)],
    ) -> Result<Var<'t>> {
        self.check_tape(&weights);
        let (out, sums) = {
            let x = self.value();
            let w = weights.value();
            let (t, d) = x.dims2()?;
            if w.len() != t {
                return Err(Error::shape(format!(
                    "segment mean: {t} frames, {} weights",
                    w.len()
                )));
            }
            let mut out = vec![0.0; segments.len() * d];
            let mut sums = Vec::with_capacity(segments.len());
            for (i, &(a, b)) in segments.iter().enumerate() {
                if a > b || b >= t {
                    return Err(Error::shape(format!("segment {a}..={b} of {t} frames")));
                }
                let sum: f64 = w.data()[a..=b].iter().sum();
                if sum.abs() < 1e-12 {
                    return Err(Error::DegenerateSegment { segment: i, sum });
                }
                let o = &mut out[i * d..(i + 1) * d];
                for tt in a..=b {
                    let f = w.data()[tt] / sum;
                    for (o, xv) in o.iter_mut().zip(x.row(tt)) {
                        *o += f * xv;
                    }
                }
                sums.push(sum);
            }
            (Tensor::matrix(segments.len(), d, out)?, sums)
        };
        let rg = self.tape.grad_flag(&[self.id, weights.id]);
        Ok(self.tape.push(
            out,
            Op::SegmentMean {
                x: self.id,
                w: weights.id,
                segments: segments.to_vec(),
                sums,
            },
            rg,
        ))
    }

    /// Replaces masked positions with `value`; they receive no gradient.
    pub fn masked_fill(self, mask: &[bool], value: f64) -> Result<Var<'t>> {
        let out = {
            let x = self.value();
            if mask.len() != x.len() {
                return Err(Error::shape(format!(
                    "masked_fill: {} mask entries for {} values",
                    mask.len(),
                    x.len()
                )));
            }
            let data = x
                .data()
                .iter()
                .zip(mask)
                .map(|(&v, &m)| if m { value } else { v })
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let rg = self.requires_grad();
        Ok(self.tape.push(
            out,
            Op::MaskedFill {
                x: self.id,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let s = {
            let v = self.value();
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        let rg = self.requires_grad();
        self.tape.push(Tensor::scalar(s), Op::Mean(self.id), rg)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.to_tensor().reshape(shape.to_vec())?;
        let rg = self.requires_grad();
        Ok(self.tape.push(out, Op::Reshape(self.id), rg))
    }

    /// Records a CTC loss node. `labels` is the blank-interleaved target and
    /// `log_alpha` the forward table; `loss` is `−log p`.
    pub(crate) fn record_ctc(self, loss: f64, labels: Vec<usize>, log_alpha: Vec<f64>) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(
            Tensor::scalar(loss),
            Op::Ctc {
                lp: self.id,
                labels,
                log_alpha,
            },
            rg,
        )
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_id: BTreeMap<usize, Tensor>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Tape::var`] or [`Tape::param`].
    pub fn get(&self, v: Var<'_>) -> &Tensor {
        self.by_id
            .get(&v.id)
            .expect("gradient requested for a node that is not a trainable leaf")
    }

    pub fn named(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
    }

    pub fn iter_named(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.named.iter()
    }
}
