//! Define-by-run reverse-mode autodiff.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! valid topological order; [`Graph::backward`] walks it once in reverse.
//! Graphs are cheap to build and meant to be thrown away after each step.

use std::sync::Arc;

use super::kernels::{self, Segment};
use super::rng::SeededRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Classification target for [`Graph::cross_entropy`].
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Full target distribution over classes (must sum to one).
    Soft(Vec<f32>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, rstd: Vec<f32> },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, probs: Vec<f32>, targets: Vec<Target>, weights: Vec<f32> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention(Box<AttentionSaved>),
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Dropout { x: Var, mask: Vec<f32> },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    causal: bool,
    segments: Vec<Segment>,
    probs: Vec<Vec<f32>>,
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that only evaluates values and never records backward state.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), no_grad: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.shared(Arc::new(value), requires_grad)
    }

    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let needs_grad = requires_grad && !self.no_grad;
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// `a · b`, or `a · bᵀ` when `b_t`. `a` may have leading batch axes.
    pub fn matmul_general(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() == 0 {
            return Err(Error::shape("matmul", format!("{:?} · {:?}", av.shape(), bv.shape())));
        }
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if b_t { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if k != bk {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions {k} and {bk} ({:?} · {:?})", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), b_t, 0.0, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, b_t }, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * s).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Scale(x, s), &[x])
    }

    fn row_check(&self, op: &'static str, x: Var, row: Var) -> Result<()> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() || rv.rank() != 1 {
            return Err(Error::shape(op, format!("row {:?} against {:?}", rv.shape(), xv.shape())));
        }
        Ok(())
    }

    /// Adds a vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_check("add_row", x, row)?;
        let mut t = self.value(x).clone();
        kernels::add_row_inplace(t.data_mut(), self.value(row).data());
        Ok(self.push(t, Op::AddRow { x, row }, &[x, row]))
    }

    /// Multiplies every row of `x` elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_check("mul_row", x, row)?;
        let mut t = self.value(x).clone();
        let r = self.value(row).data();
        for chunk in t.data_mut().chunks_exact_mut(r.len()) {
            chunk.iter_mut().zip(r).for_each(|(v, g)| *v *= g);
        }
        Ok(self.push(t, Op::MulRow { x, row }, &[x, row]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.push(t, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, kernels::gelu, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f32::tanh, Op::Tanh(x))
    }

    /// Per-row standardization without the affine part.
    pub fn layernorm(&mut self, x: Var, eps: f32) -> Var {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        kernels::layernorm_rows(xv.data(), cols, eps, &mut out, &mut rstd);
        let t = Tensor::new(xv.shape().to_vec(), out).expect("shape preserved");
        self.push(t, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols();
        t.data_mut().chunks_exact_mut(c).for_each(kernels::softmax_inplace);
        self.push(t, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols();
        for row in t.data_mut().chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v = (*v as f64 - lse) as f32);
        }
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// Weighted mean cross-entropy over the rows of `logits`. With `weights`
    /// absent every row counts equally.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Target], weights: Option<&[f32]>) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        let mut w: Vec<f32> = match weights {
            Some(w) if w.len() != rows => {
                return Err(Error::shape("cross_entropy", format!("{} weights for {rows} rows", w.len())))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let total: f32 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Contract("cross_entropy weights must have a positive sum".into()));
        }
        w.iter_mut().for_each(|x| *x /= total);
        let mut probs = lv.data().to_vec();
        // accumulate in f64: the loss is often a small difference of large terms
        let mut loss = 0.0f64;
        for (i, target) in targets.iter().enumerate() {
            let row = &lv.data()[i * classes..(i + 1) * classes];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
            let ce = match target {
                Target::Class(c) if *c >= classes => {
                    return Err(Error::Contract(format!("target class {c} out of range for {classes} classes")))
                }
                Target::Class(c) => lse - row[*c] as f64,
                Target::Soft(q) if q.len() != classes => {
                    return Err(Error::shape("cross_entropy", format!("soft target of {} classes", q.len())))
                }
                Target::Soft(q) => q.iter().zip(row).map(|(&qc, &r)| qc as f64 * (lse - r as f64)).sum(),
            };
            loss += w[i] as f64 * ce;
            let p = &mut probs[i * classes..(i + 1) * classes];
            p.iter_mut().for_each(|v| *v = (*v as f64 - lse).exp() as f32);
        }
        let t = Tensor::scalar(loss.max(0.0) as f32);
        let op = Op::CrossEntropy { logits, probs, targets: targets.to_vec(), weights: w };
        Ok(self.push(t, op, &[logits]))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("embedding", format!("table shape {:?}", tv.shape())));
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Contract(format!("embedding id {id} out of range {n}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Multi-head scaled dot-product attention over independent row segments.
    /// `q` rows are grouped into query segments and `k`/`v` rows into key
    /// segments; each segment attends only within itself.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q {:?} k {:?} v {:?} heads {heads}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        for s in segments {
            if s.q_start + s.q_len > qv.rows() || s.k_start + s.k_len > kv.rows() || s.k_len == 0 {
                return Err(Error::shape("attention", format!("segment {s:?} out of range")));
            }
            if causal && s.k_len < s.q_len {
                return Err(Error::shape("attention", "causal segment with fewer keys than queries"));
            }
        }
        let mut out = vec![0.0; qv.len()];
        let mut probs = Vec::with_capacity(segments.len());
        for s in segments {
            let mut p = vec![0.0; heads * s.q_len * s.k_len];
            kernels::attention_forward(qv.data(), kv.data(), vv.data(), d, heads, s, causal, &mut out, &mut p);
            probs.push(p);
        }
        let t = Tensor::new(qv.shape().to_vec(), out)?;
        let saved = AttentionSaved { q, k, v, heads, causal, segments: segments.to_vec(), probs };
        Ok(self.push(t, Op::Attention(Box::new(saved)), &[q, k, v]))
    }

    /// Mean of each `(start, len)` row range; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; segments.len() * c];
        for (s, &(start, len)) in segments.iter().enumerate() {
            if len == 0 || start + len > xv.rows() {
                return Err(Error::shape("segment_mean", format!("segment ({start}, {len}) of {} rows", xv.rows())));
            }
            let o = &mut out[s * c..(s + 1) * c];
            for r in start..start + len {
                kernels::axpy(1.0 / len as f32, xv.row(r), o);
            }
        }
        let t = Tensor::matrix(segments.len(), c, out)?;
        Ok(self.push(t, Op::SegmentMean { x, segments: segments.to_vec() }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_rows(&values)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_rows(start, len)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = (xv.data().iter().map(|&v| v as f64).sum::<f64>() / xv.len() as f64) as f32;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32, rng: &mut SeededRng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let xv = self.value(x);
        let mask: Vec<f32> = (0..xv.len()).map(|_| if rng.uniform() < p { 0.0 } else { keep }).collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse-mode sweep from a scalar `loss`. Every leaf that requires a
    /// gradient and participates in `loss` gets one; others get `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads: (0..self.nodes.len()).map(|_| None).collect() });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].needs_grad)
                    .map(|g| Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
            })
            .chain((loss.0 + 1..self.nodes.len()).map(|_| None))
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = out.cols();
                if let Some(ga) = slot(nodes, grads, *a) {
                    // dA = G · op(B)ᵀ
                    kernels::gemm(m, n, k, g, false, bv.data(), !*b_t, 1.0, ga);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    if *b_t {
                        // B is n×k: dB = Gᵀ · A
                        kernels::gemm(n, m, k, g, true, av.data(), false, 1.0, gb);
                    } else {
                        kernels::gemm(k, m, n, av.data(), true, g, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(nodes, grads, v) {
                        kernels::axpy(1.0, g, gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    kernels::axpy(*s, g, gx);
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    kernels::axpy(1.0, g, gx);
                }
                if let Some(gr) = slot(nodes, grads, *row) {
                    let c = gr.len();
                    for chunk in g.chunks_exact(c) {
                        kernels::axpy(1.0, chunk, gr);
                    }
                }
            }
            Op::MulRow { x, row } => {
                let r = self.value(*row).data();
                let c = r.len();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (gxc, gc) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                        for ((o, gi), ri) in gxc.iter_mut().zip(gc).zip(r) {
                            *o += gi * ri;
                        }
                    }
                }
                let xv = self.value(*x).data();
                if let Some(gr) = slot(nodes, grads, *row) {
                    for (gc, xc) in g.chunks_exact(c).zip(xv.chunks_exact(c)) {
                        for ((o, gi), xi) in gr.iter_mut().zip(gc).zip(xc) {
                            *o += gi * xi;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        if *y > 0.0 {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += gi * kernels::gelu_grad(*xi);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, gi), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *o += gi * (1.0 - y * y);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let c = out.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (((gxc, gc), yc), rs) in
                        gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.data().chunks_exact(c)).zip(rstd)
                    {
                        let mean_g = gc.iter().sum::<f32>() / c as f32;
                        let mean_gy = kernels::dot(gc, yc) / c as f32;
                        for ((o, gi), yi) in gxc.iter_mut().zip(gc).zip(yc) {
                            *o += rs * (gi - mean_g - yi * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((gxc, gc), yc) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.data().chunks_exact(c))
                    {
                        let s = kernels::dot(gc, yc);
                        for ((o, gi), yi) in gxc.iter_mut().zip(gc).zip(yc) {
                            *o += yi * (gi - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = out.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((gxc, gc), yc) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.data().chunks_exact(c))
                    {
                        let s: f32 = gc.iter().sum();
                        for ((o, gi), yi) in gxc.iter_mut().zip(gc).zip(yc) {
                            *o += gi - yi.exp() * s;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, probs, targets, weights } => {
                let classes = self.value(*logits).cols();
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for (i, t) in targets.iter().enumerate() {
                        let scale = g[0] * weights[i];
                        let row = &mut gl[i * classes..(i + 1) * classes];
                        let p = &probs[i * classes..(i + 1) * classes];
                        match t {
                            Target::Class(c) => {
                                for (j, (o, pj)) in row.iter_mut().zip(p).enumerate() {
                                    let y = if j == *c { 1.0 } else { 0.0 };
                                    *o += scale * (pj - y);
                                }
                            }
                            Target::Soft(q) => {
                                let mass: f32 = q.iter().sum();
                                for ((o, pj), qj) in row.iter_mut().zip(p).zip(q) {
                                    *o += scale * (mass * pj - qj);
                                }
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        kernels::axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::SegmentMean { x, segments } => {
                let c = out.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (s, &(start, len)) in segments.iter().enumerate() {
                        let gs = &g[s * c..(s + 1) * c];
                        for r in start..start + len {
                            kernels::axpy(1.0 / len as f32, gs, &mut gx[r * c..(r + 1) * c]);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = slot(nodes, grads, p) {
                        kernels::axpy(1.0, &g[offset..offset + n], gp);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                if let Some(gx) = slot(nodes, grads, *x) {
                    kernels::axpy(1.0, g, &mut gx[start * c..start * c + g.len()]);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    let s = g[0] / gx.len() as f32;
                    gx.iter_mut().for_each(|o| *o += s);
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((o, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let (qv, kv, vv) = (self.value(s.q), self.value(s.k), self.value(s.v));
        let d = qv.cols();
        // q, k and v can be the same node; work on private buffers then merge.
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        for (seg, p) in s.segments.iter().zip(&s.probs) {
            kernels::attention_backward(
                qv.data(),
                kv.data(),
                vv.data(),
                d,
                s.heads,
                seg,
                s.causal,
                p,
                g,
                &mut dq,
                &mut dk,
                &mut dv,
            );
        }
        for (var, buf) in [(s.q, dq), (s.k, dk), (s.v, dv)] {
            if !self.nodes[var.0].needs_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(existing) => kernels::axpy(1.0, &buf, existing),
                slot @ None => *slot = Some(buf),
            }
        }
    }
}
