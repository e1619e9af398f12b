//! Transformer building blocks shared by the Repeat model, the fluency LM and
//! the stage classifiers. Everything is pre-norm.

use crate::error::Result;
use crate::numerics::params::{init_glorot, init_normal};
use crate::numerics::{kernels, Bound, Graph, ParamId, ParamStore, SeededRng, Segment, Tensor, Var};

pub const LN_EPS: f32 = 1e-5;

/// Lengths of the sequences packed row-wise into one block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packing {
    lens: Vec<usize>,
    starts: Vec<usize>,
}

impl Packing {
    pub fn new(lens: Vec<usize>) -> Self {
        let mut starts = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            starts.push(acc);
            acc += l;
        }
        Self { lens, starts }
    }

    pub fn single(len: usize) -> Self {
        Self::new(vec![len])
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn start(&self, i: usize) -> usize {
        self.starts[i]
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    pub fn self_segments(&self) -> Vec<Segment> {
        self.starts.iter().zip(&self.lens).map(|(&s, &l)| Segment::square(s, l)).collect()
    }

    /// Queries of `self` attending keys of `memory`, sequence by sequence.
    pub fn cross_segments(&self, memory: &Packing) -> Vec<Segment> {
        (0..self.lens.len())
            .map(|i| Segment {
                q_start: self.starts[i],
                q_len: self.lens[i],
                k_start: memory.starts[i],
                k_len: memory.lens[i],
            })
            .collect()
    }

    pub fn pool_ranges(&self) -> Vec<(usize, usize)> {
        self.starts.iter().copied().zip(self.lens.iter().copied()).collect()
    }

    /// Position of every packed row within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.lens.iter().flat_map(|&l| 0..l).collect()
    }
}

/// Sinusoidal position encodings for the given positions.
pub fn positional_block(positions: &[usize], d: usize) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        data.extend(positional_row(p, d));
    }
    Tensor::matrix(positions.len(), d, data).expect("positional block shape")
}

pub fn positional_row(pos: usize, d: usize) -> impl Iterator<Item = f32> {
    (0..d).map(move |i| {
        let freq = 1.0 / 10000f32.powf((2 * (i / 2)) as f32 / d as f32);
        let angle = pos as f32 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let w = store.add(format!("{name}.w"), init_glorot(in_dim, out_dim, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }

    /// Tape-free application to `rows` packed input rows.
    pub fn apply(&self, store: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let mut out = vec![0.0; rows * self.out_dim];
        kernels::gemm(rows, self.in_dim, self.out_dim, x, false, store.get(self.w).data(), false, 0.0, &mut out);
        kernels::add_row_inplace(&mut out, store.get(self.b).data());
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let n = g.layernorm(x, LN_EPS);
        let s = g.mul_row(n, p[self.gamma])?;
        g.add_row(s, p[self.beta])
    }

    pub fn apply(&self, store: &ParamStore, x: &[f32]) -> Vec<f32> {
        let d = store.get(self.gamma).len();
        let mut out = vec![0.0; x.len()];
        let mut rstd = vec![0.0; x.len() / d];
        kernels::layernorm_rows(x, d, LN_EPS, &mut out, &mut rstd);
        kernels::affine_rows_inplace(&mut out, store.get(self.gamma).data(), store.get(self.beta).data());
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut SeededRng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        memory: Var,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, memory)?;
        let v = self.v.forward(g, p, memory)?;
        let a = g.attention(q, k, v, self.heads, segments, causal)?;
        self.o.forward(g, p, a)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, dropout: Option<(f32, &mut SeededRng)>) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let mut h = g.gelu(h);
        if let Some((rate, rng)) = dropout {
            h = g.dropout(h, rate, rng);
        }
        self.down.forward(g, p, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &[f32], rows: usize) -> Vec<f32> {
        let mut h = self.up.apply(store, x, rows);
        h.iter_mut().for_each(|v| *v = kernels::gelu(*v));
        self.down.apply(store, &h, rows)
    }
}

/// Self-attention + feed-forward block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, rng: &mut SeededRng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ff, rng),
        }
    }

    /// `dropout` is `(rate, rng)` in training mode.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        segments: &[Segment],
        causal: bool,
        mut dropout: Option<(f32, &mut SeededRng)>,
    ) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let mut a = self.attn.forward(g, p, h, h, segments, causal)?;
        if let Some((rate, rng)) = dropout.as_mut() {
            a = g.dropout(a, *rate, rng);
        }
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let mut f = self.ff.forward(g, p, h, dropout.as_mut().map(|(r, rng)| (*r, &mut **rng)))?;
        if let Some((rate, rng)) = dropout.as_mut() {
            f = g.dropout(f, *rate, rng);
        }
        g.add(x, f)
    }
}

/// Causal self-attention, cross-attention over encoder memory, feed-forward.
#[derive(Clone, Copy, Debug)]
pub struct DecoderBlock {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ff: usize, rng: &mut SeededRng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, ff, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        memory: Var,
        self_segments: &[Segment],
        cross_segments: &[Segment],
    ) -> Result<Var> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.self_attn.forward(g, p, h, h, self_segments, true)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, p, x)?;
        let c = self.cross_attn.forward(g, p, h, memory, cross_segments, false)?;
        let x = g.add(x, c)?;
        let h = self.ln3.forward(g, p, x)?;
        let f = self.ff.forward(g, p, h, None)?;
        g.add(x, f)
    }
}

/// Token embedding table scaled so looked-up rows have unit-scale entries.
pub fn embedding_table(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut SeededRng) -> ParamId {
    store.add(name, init_normal(&[vocab, d], 1.0 / (d as f32).sqrt(), rng))
}

/// Embeds ids, scales by `sqrt(d)` and adds position encodings.
pub fn embed_tokens(g: &mut Graph, table: Var, ids: &[usize], packing: &Packing, d: usize) -> Result<Var> {
    let e = g.embedding(table, ids)?;
    let e = g.scale(e, (d as f32).sqrt());
    let pos = g.leaf(positional_block(&packing.positions(), d), false);
    g.add(e, pos)
}
