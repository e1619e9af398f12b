//! Beam search over the Repeat decoder with cached keys and values.

use serde::{Deserialize, Serialize};

use super::model::{EncoderDecoderModel, RepeatArch};
use crate::error::{Error, Result};
use crate::nn::positional_row;
use crate::numerics::{kernels, ParamStore, Segment, Tensor};
use crate::text::vocab::{BOS, EOS, PAD, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub max_len: usize,
    /// Hypotheses are ranked by `log_prob / len^length_penalty`.
    pub length_penalty: f32,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 3, max_len: 256, length_penalty: 1.0 }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self { beam: 1, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Generated ids, ending in EOS when `finished`.
    pub ids: Vec<usize>,
    pub text: String,
    pub log_prob: f32,
    pub score: f32,
    /// False when no hypothesis emitted EOS within `max_len`.
    pub finished: bool,
}

/// Cross-attention keys and values of one memory block, per decoder layer.
struct CrossCache {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    len: usize,
}

/// Self-attention keys and values of one hypothesis, per decoder layer.
#[derive(Clone, Default)]
struct SelfCache {
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

fn attend(q: &[f32], k: &[f32], v: &[f32], d: usize, heads: usize, keys: usize) -> Vec<f32> {
    let seg = Segment { q_start: 0, q_len: 1, k_start: 0, k_len: keys };
    let mut out = vec![0.0; d];
    let mut probs = vec![0.0; heads * keys];
    kernels::attention_forward(q, k, v, d, heads, &seg, false, &mut out, &mut probs);
    out
}

impl RepeatArch {
    fn cross_cache(&self, store: &ParamStore, memory: &Tensor) -> CrossCache {
        let rows = memory.rows();
        let (k, v) = self
            .decoder
            .iter()
            .map(|b| {
                (b.cross_attn.k.apply(store, memory.data(), rows), b.cross_attn.v.apply(store, memory.data(), rows))
            })
            .unzip();
        CrossCache { k, v, len: rows }
    }

    /// Advances every hypothesis by one token at position `pos`; returns
    /// log-probabilities, one vocabulary-sized row per hypothesis.
    fn step(
        &self,
        store: &ParamStore,
        cross: &CrossCache,
        caches: &mut [SelfCache],
        tokens: &[usize],
        pos: usize,
    ) -> Vec<f32> {
        let (d, rows) = (self.d, tokens.len());
        let table = store.get(self.embed);
        let scale = (d as f32).sqrt();
        let mut x = Vec::with_capacity(rows * d);
        for &t in tokens {
            x.extend(table.row(t).iter().zip(positional_row(pos, d)).map(|(e, p)| e * scale + p));
        }
        for (l, b) in self.decoder.iter().enumerate() {
            let h = b.ln1.apply(store, &x);
            let q = b.self_attn.q.apply(store, &h, rows);
            let k = b.self_attn.k.apply(store, &h, rows);
            let v = b.self_attn.v.apply(store, &h, rows);
            let mut a = Vec::with_capacity(rows * d);
            for (r, c) in caches.iter_mut().enumerate() {
                c.k[l].extend_from_slice(&k[r * d..(r + 1) * d]);
                c.v[l].extend_from_slice(&v[r * d..(r + 1) * d]);
                a.extend(attend(&q[r * d..(r + 1) * d], &c.k[l], &c.v[l], d, self.heads, pos + 1));
            }
            let o = b.self_attn.o.apply(store, &a, rows);
            kernels::axpy(1.0, &o, &mut x);

            let h = b.ln2.apply(store, &x);
            let q = b.cross_attn.q.apply(store, &h, rows);
            let mut a = Vec::with_capacity(rows * d);
            for r in 0..rows {
                a.extend(attend(&q[r * d..(r + 1) * d], &cross.k[l], &cross.v[l], d, self.heads, cross.len));
            }
            let o = b.cross_attn.o.apply(store, &a, rows);
            kernels::axpy(1.0, &o, &mut x);

            let h = b.ln3.apply(store, &x);
            let f = b.ff.apply(store, &h, rows);
            kernels::axpy(1.0, &f, &mut x);
        }
        let h = self.dec_norm.apply(store, &x);
        let vocab = table.rows();
        let mut logits = vec![0.0; rows * vocab];
        kernels::gemm(rows, d, vocab, &h, false, table.data(), true, 0.0, &mut logits);
        for row in logits.chunks_mut(vocab) {
            let lse = kernels::log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        logits
    }
}

struct Hyp {
    ids: Vec<usize>,
    log_prob: f32,
    cache: SelfCache,
}

fn normalized(log_prob: f32, len: usize, alpha: f32) -> f32 {
    log_prob / (len.max(1) as f32).powf(alpha)
}

/// True once `beam` hypotheses have finished and no live one currently
/// scores above the worst of them.
fn done(finished: &mut [(Vec<usize>, f32)], alive: &[Hyp], cfg: &DecodeConfig) -> bool {
    if finished.len() < cfg.beam {
        return false;
    }
    let score = |ids: &Vec<usize>, lp: f32| normalized(lp, ids.len(), cfg.length_penalty);
    finished.sort_by(|a, b| score(&b.0, b.1).total_cmp(&score(&a.0, a.1)));
    let worst_kept = score(&finished[cfg.beam - 1].0, finished[cfg.beam - 1].1);
    alive.iter().all(|h| normalized(h.log_prob, h.ids.len(), cfg.length_penalty) <= worst_kept)
}

impl EncoderDecoderModel {
    /// Beam search from an arbitrary `(rows × d)` memory block.
    pub fn decode(&self, memory: &Tensor, cfg: &DecodeConfig) -> Result<Decoded> {
        let arch = self.arch();
        if memory.rank() != 2 || memory.cols() != arch.d {
            return Err(Error::shape("decode", format!("memory {:?}, model width {}", memory.shape(), arch.d)));
        }
        if cfg.beam == 0 || cfg.max_len == 0 {
            return Err(Error::Config("beam width and max_len must be positive".into()));
        }
        let store = self.store();
        let cross = arch.cross_cache(store, memory);
        let layers = arch.decoder.len();
        let empty = SelfCache { k: vec![Vec::new(); layers], v: vec![Vec::new(); layers] };
        let mut alive = vec![Hyp { ids: Vec::new(), log_prob: 0.0, cache: empty }];
        let mut finished: Vec<(Vec<usize>, f32)> = Vec::new();
        let vocab = self.vocab().len();
        for pos in 0..cfg.max_len {
            let tokens: Vec<usize> = alive.iter().map(|h| h.ids.last().copied().unwrap_or(BOS)).collect();
            let mut caches: Vec<SelfCache> = alive.iter_mut().map(|h| std::mem::take(&mut h.cache)).collect();
            let logp = arch.step(store, &cross, &mut caches, &tokens, pos);

            // (score, beam, token, log_prob); ties resolve to lower beam, then lower id
            let mut cands: Vec<(f32, usize, usize, f32)> = Vec::new();
            for (b, h) in alive.iter().enumerate() {
                let row = &logp[b * vocab..(b + 1) * vocab];
                let mut ids: Vec<usize> = (0..vocab).filter(|&t| t != PAD && t != BOS).collect();
                ids.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
                for &t in ids.iter().take(2 * cfg.beam) {
                    let lp = h.log_prob + row[t];
                    cands.push((normalized(lp, h.ids.len() + 1, cfg.length_penalty), b, t, lp));
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            // an EOS candidate only finishes a hypothesis if it ranks within
            // the beam; lower-ranked ones would crowd out better continuations
            let mut next = Vec::with_capacity(cfg.beam);
            for (rank, &(_, b, t, lp)) in cands.iter().enumerate() {
                if next.len() == cfg.beam {
                    break;
                }
                let mut ids = alive[b].ids.clone();
                ids.push(t);
                if t == EOS {
                    if rank < cfg.beam {
                        finished.push((ids, lp));
                    }
                } else {
                    next.push(Hyp { ids, log_prob: lp, cache: caches[b].clone() });
                }
            }
            alive = next;
            if alive.is_empty() || done(&mut finished, &alive, cfg) {
                break;
            }
        }
        let score = |ids: &Vec<usize>, lp: f32| normalized(lp, ids.len(), cfg.length_penalty);
        let best = |pool: Vec<(Vec<usize>, f32)>| {
            pool.into_iter().fold(None::<(Vec<usize>, f32)>, |acc, (ids, lp)| match acc {
                Some((bi, bl)) if score(&bi, bl) >= score(&ids, lp) => Some((bi, bl)),
                _ => Some((ids, lp)),
            })
        };
        let (ids, log_prob, done) = match best(finished) {
            Some((ids, lp)) => (ids, lp, true),
            None => {
                let (ids, lp) =
                    best(alive.into_iter().map(|h| (h.ids, h.log_prob)).collect()).expect("beam is never empty");
                (ids, lp, false)
            }
        };
        Ok(Decoded { text: self.vocab().detokenize(&ids), score: score(&ids, log_prob), ids, log_prob, finished: done })
    }

    /// Step-by-step log-probabilities of `ids` (without BOS) given `memory`,
    /// computed through the cached decoder. Row `i` predicts `ids[i]`.
    pub fn cached_log_probs(&self, memory: &Tensor, ids: &[usize]) -> Result<Vec<Vec<f32>>> {
        let arch = self.arch();
        let cross = arch.cross_cache(self.store(), memory);
        let layers = arch.decoder.len();
        let mut cache = [SelfCache { k: vec![Vec::new(); layers], v: vec![Vec::new(); layers] }];
        let mut prev = BOS;
        let mut out = Vec::with_capacity(ids.len());
        for (pos, &t) in ids.iter().enumerate() {
            out.push(arch.step(self.store(), &cross, &mut cache, &[prev], pos));
            prev = t;
        }
        Ok(out)
    }

    /// Decodes `Repeat : text` and reports exact reproduction.
    pub fn reconstructs(&self, text: &str, cfg: &DecodeConfig) -> Result<bool> {
        let mem = self.encode_prompted(text)?;
        Ok(self.decode(&mem, cfg)?.text == text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDecoded {
    pub history: String,
    pub action: String,
    /// No SEP was decoded, so the action block was decoded on its own.
    pub fallback: bool,
    pub finished: bool,
}

impl EncoderDecoderModel {
    /// Decodes `[history ; sep ; action]` and returns the text on either side
    /// of the first decoded SEP. `sep` is a single memory row, normally the
    /// in-context encoding of the separator.
    pub fn decode_split(
        &self,
        history: Option<&Tensor>,
        sep: &Tensor,
        action: &Tensor,
        cfg: &DecodeConfig,
    ) -> Result<SplitDecoded> {
        let mut parts = Vec::with_capacity(3);
        parts.extend(history);
        parts.push(sep);
        parts.push(action);
        let memory = Tensor::concat_rows(&parts)?;
        let out = self.decode(&memory, cfg)?;
        if let Some(i) = out.ids.iter().position(|&t| t == SEP) {
            let v = self.vocab();
            return Ok(SplitDecoded {
                history: v.detokenize(&out.ids[..i]),
                action: v.detokenize(&out.ids[i + 1..]),
                fallback: false,
                finished: out.finished,
            });
        }
        let alone = self.decode(action, cfg)?;
        Ok(SplitDecoded { history: String::new(), action: alone.text, fallback: true, finished: alone.finished })
    }
}
