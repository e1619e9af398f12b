//! Raw slice kernels shared by the tape and the cache-based decoding path.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// A transposed operand is stored in its untransposed layout (`k×m`, `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the debug assertions above pin every buffer to the extents the
    // strides address; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
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

pub fn add_row_inplace(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Normalizes each row to zero mean and unit variance. Writes the normalized
/// rows to `out` and the per-row reciprocal standard deviation to `rstd`.
pub fn layernorm_rows(x: &[f32], cols: usize, eps: f32, out: &mut [f32], rstd: &mut [f32]) {
    for ((row, o), r) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).zip(rstd.iter_mut()) {
        let n = cols as f32;
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let rs = 1.0 / (var + eps).sqrt();
        for (o, v) in o.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        *r = rs;
    }
}

pub fn affine_rows_inplace(x: &mut [f32], gamma: &[f32], beta: &[f32]) {
    for row in x.chunks_exact_mut(gamma.len()) {
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln()
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight accumulators let the compiler vectorize without reassociation.
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row geometry of one attention block: `q_len` query rows starting at
/// `q_start` attend over `k_len` key/value rows starting at `k_start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    pub fn square(start: usize, len: usize) -> Self {
        Self { q_start: start, q_len: len, k_start: start, k_len: len }
    }
}

/// Number of visible keys for query `i`. Causal queries are aligned to the
/// end of the key range, so a single trailing query sees every key.
#[inline]
pub fn visible_keys(seg: &Segment, i: usize, causal: bool) -> usize {
    if causal {
        seg.k_len - seg.q_len + i + 1
    } else {
        seg.k_len
    }
}

/// Scaled dot-product attention over one segment for all heads. Writes the
/// attention output rows into `out` (same row indexing as `q`) and the
/// probabilities into `probs` laid out `[head][q_len][k_len]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d: usize,
    heads: usize,
    seg: &Segment,
    causal: bool,
    out: &mut [f32],
    probs: &mut [f32],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let (nq, nk) = (seg.q_len, seg.k_len);
    for h in 0..heads {
        let hs = h * dh;
        for i in 0..nq {
            let qi = &q[(seg.q_start + i) * d + hs..(seg.q_start + i) * d + hs + dh];
            let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let visible = visible_keys(seg, i, causal);
            for (j, pj) in p.iter_mut().enumerate().take(visible) {
                let kj = &k[(seg.k_start + j) * d + hs..(seg.k_start + j) * d + hs + dh];
                *pj = dot(qi, kj) * scale;
            }
            softmax_inplace(&mut p[..visible]);
            p[visible..].iter_mut().for_each(|x| *x = 0.0);
            let o = &mut out[(seg.q_start + i) * d + hs..(seg.q_start + i) * d + hs + dh];
            o.iter_mut().for_each(|x| *x = 0.0);
            for (j, &pj) in p.iter().enumerate().take(visible) {
                let vj = &v[(seg.k_start + j) * d + hs..(seg.k_start + j) * d + hs + dh];
                axpy(pj, vj, o);
            }
        }
    }
}

/// Backward pass of [`attention_forward`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    d: usize,
    heads: usize,
    seg: &Segment,
    causal: bool,
    probs: &[f32],
    dout: &[f32],
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let (nq, nk) = (seg.q_len, seg.k_len);
    let mut ds = vec![0.0f32; nk];
    for h in 0..heads {
        let hs = h * dh;
        for i in 0..nq {
            let qrow = (seg.q_start + i) * d + hs;
            let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let visible = visible_keys(seg, i, causal);
            let doi = &dout[qrow..qrow + dh];
            let mut weighted = 0.0;
            for j in 0..visible {
                let krow = (seg.k_start + j) * d + hs;
                let dp = dot(doi, &v[krow..krow + dh]);
                axpy(p[j], doi, &mut dv[krow..krow + dh]);
                ds[j] = dp;
                weighted += p[j] * dp;
            }
            for j in 0..visible {
                ds[j] = p[j] * (ds[j] - weighted) * scale;
            }
            let qi = &q[qrow..qrow + dh];
            for j in 0..visible {
                let krow = (seg.k_start + j) * d + hs;
                axpy(ds[j], &k[krow..krow + dh], &mut dq[qrow..qrow + dh]);
                axpy(ds[j], qi, &mut dk[krow..krow + dh]);
            }
        }
    }
}
