use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{embed_tokens, embedding_table, DecoderBlock, EncoderBlock, LayerNorm, Packing};
use crate::numerics::{checkpoint, Bound, Graph, ParamId, ParamStore, SeededRng, Target, Tensor, Var};
use crate::text::vocab::{BOS, COLON, EOS, REPEAT};
use crate::text::Vocabulary;
use crate::train::{fit, Schedule};

use super::manifest::ModelManifest;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepeatConfig {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
}

impl Default for RepeatConfig {
    fn default() -> Self {
        Self { d_model: 128, heads: 4, encoder_layers: 2, decoder_layers: 2, ff_dim: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepeatTrainConfig {
    pub schedule: Schedule,
    /// Std of Gaussian noise added to encoder memory during training, so the
    /// decoder tolerates memory blocks that were moved by gradient ascent.
    pub memory_noise: f32,
    pub seed: u64,
}

impl Default for RepeatTrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule { epochs: 20, batch_size: 32, lr: 1e-3, final_lr_frac: 0.1 },
            memory_noise: 0.1,
            seed: 0,
        }
    }
}

/// Parameter handles of the encoder–decoder; values live in a `ParamStore`.
#[derive(Clone, Debug)]
pub struct RepeatArch {
    pub d: usize,
    pub heads: usize,
    pub embed: ParamId,
    pub encoder: Vec<EncoderBlock>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub dec_norm: LayerNorm,
}

impl RepeatArch {
    fn new(store: &mut ParamStore, vocab: usize, cfg: &RepeatConfig, rng: &mut SeededRng) -> Self {
        let (d, h, ff) = (cfg.d_model, cfg.heads, cfg.ff_dim);
        let embed = embedding_table(store, "embed", vocab, d, rng);
        let encoder =
            (0..cfg.encoder_layers).map(|i| EncoderBlock::new(store, &format!("enc{i}"), d, h, ff, rng)).collect();
        let enc_norm = LayerNorm::new(store, "enc_norm", d);
        let decoder =
            (0..cfg.decoder_layers).map(|i| DecoderBlock::new(store, &format!("dec{i}"), d, h, ff, rng)).collect();
        let dec_norm = LayerNorm::new(store, "dec_norm", d);
        Self { d, heads: h, embed, encoder, enc_norm, decoder, dec_norm }
    }

    /// Encoder memory for packed token ids.
    pub fn encode(&self, g: &mut Graph, p: &Bound, ids: &[usize], packing: &Packing) -> Result<Var> {
        let mut x = embed_tokens(g, p[self.embed], ids, packing, self.d)?;
        let segs = packing.self_segments();
        for b in &self.encoder {
            x = b.forward(g, p, x, &segs, false, None)?;
        }
        self.enc_norm.forward(g, p, x)
    }

    /// Next-token logits for packed decoder inputs attending packed memory.
    pub fn decode_logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        memory: Var,
        mem: &Packing,
        ids: &[usize],
        packing: &Packing,
    ) -> Result<Var> {
        let mut x = embed_tokens(g, p[self.embed], ids, packing, self.d)?;
        let self_segs = packing.self_segments();
        let cross = packing.cross_segments(mem);
        for b in &self.decoder {
            x = b.forward(g, p, x, memory, &self_segs, &cross)?;
        }
        let h = self.dec_norm.forward(g, p, x)?;
        g.matmul_t(h, p[self.embed])
    }
}

/// Token sequences of one teacher-forced batch.
struct Batch {
    src: Vec<usize>,
    src_pack: Packing,
    tgt_in: Vec<usize>,
    tgt_out: Vec<Target>,
    tgt_pack: Packing,
}

fn batch(items: &[&[usize]]) -> Batch {
    let mut b = Batch {
        src: Vec::new(),
        src_pack: Packing::new(vec![]),
        tgt_in: Vec::new(),
        tgt_out: Vec::new(),
        tgt_pack: Packing::new(vec![]),
    };
    let (mut sl, mut tl) = (Vec::new(), Vec::new());
    for ids in items {
        b.src.extend([REPEAT, COLON]);
        b.src.extend_from_slice(ids);
        sl.push(ids.len() + 2);
        b.tgt_in.push(BOS);
        b.tgt_in.extend_from_slice(ids);
        b.tgt_out.extend(ids.iter().map(|&t| Target::Class(t)));
        b.tgt_out.push(Target::Class(EOS));
        tl.push(ids.len() + 1);
    }
    b.src_pack = Packing::new(sl);
    b.tgt_pack = Packing::new(tl);
    b
}

/// The Repeat encoder–decoder: reads `Repeat : x` and writes `x`.
#[derive(Clone, Debug)]
pub struct EncoderDecoderModel {
    config: RepeatConfig,
    vocab: Vocabulary,
    arch: RepeatArch,
    store: ParamStore,
    seed: u64,
}

impl EncoderDecoderModel {
    pub fn new(vocab: Vocabulary, config: RepeatConfig, seed: u64) -> Result<Self> {
        if config.d_model == 0 || config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", config.d_model, config.heads)));
        }
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let arch = RepeatArch::new(&mut store, vocab.len(), &config, &mut rng);
        Ok(Self { config, vocab, arch, store, seed })
    }

    pub fn config(&self) -> &RepeatConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn arch(&self) -> &RepeatArch {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// Encoder memory for an already-tokenized sequence.
    pub fn encode_ids(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g, false);
        let m = self.arch.encode(&mut g, &p, ids, &Packing::single(ids.len()))?;
        Ok(g.value(m).clone())
    }

    /// Encodes `text` verbatim; include the `Repeat :` prompt in `text` when
    /// the prompted representation is wanted.
    pub fn encode(&self, text: &str) -> Result<Tensor> {
        self.encode_ids(&self.vocab.tokenize(text)?)
    }

    /// Memory of `Repeat : text`.
    pub fn encode_prompted(&self, text: &str) -> Result<Tensor> {
        let mut ids = vec![REPEAT, COLON];
        ids.extend(self.vocab.tokenize(text)?);
        self.encode_ids(&ids)
    }

    /// Mean teacher-forced cross-entropy of reproducing each text, without
    /// memory noise.
    pub fn repeat_loss(&self, texts: &[String]) -> Result<f32> {
        let ids = texts.iter().map(|t| self.vocab.tokenize(t)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[usize]> = ids.iter().map(|v| v.as_slice()).collect();
        let b = batch(&refs);
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g, false);
        let mem = self.arch.encode(&mut g, &p, &b.src, &b.src_pack)?;
        let logits = self.arch.decode_logits(&mut g, &p, mem, &b.src_pack, &b.tgt_in, &b.tgt_pack)?;
        let l = g.cross_entropy(logits, &b.tgt_out, None)?;
        Ok(g.value(l).item())
    }

    /// Teacher-forced training on the Repeat task. Returns the mean loss of
    /// every epoch.
    pub fn train(&mut self, corpus: &[String], cfg: &RepeatTrainConfig) -> Result<Vec<f32>> {
        let ids = corpus.iter().map(|t| self.vocab.tokenize(t)).collect::<Result<Vec<_>>>()?;
        if let Some(i) = ids.iter().position(|v| v.is_empty()) {
            return Err(Error::Contract(format!("corpus entry {i} is empty")));
        }
        let mut rng = SeededRng::with_stream(cfg.seed, 1);
        let arch = &self.arch;
        let d = self.config.d_model;
        fit(&mut self.store, ids.len(), &cfg.schedule, &mut rng, |g, p, idx, rng| {
            let items: Vec<&[usize]> = idx.iter().map(|&i| ids[i].as_slice()).collect();
            let b = batch(&items);
            let mut mem = arch.encode(g, p, &b.src, &b.src_pack)?;
            if cfg.memory_noise > 0.0 {
                let n = b.src_pack.total();
                let noise: Vec<f32> = (0..n * d).map(|_| rng.normal() * cfg.memory_noise).collect();
                let noise = g.leaf(Tensor::matrix(n, d, noise)?, false);
                mem = g.add(mem, noise)?;
            }
            let logits = arch.decode_logits(g, p, mem, &b.src_pack, &b.tgt_in, &b.tgt_pack)?;
            g.cross_entropy(logits, &b.tgt_out, None)
        })
    }

    pub fn manifest(&self) -> ModelManifest {
        ModelManifest::new(
            "repeat",
            &self.vocab,
            serde_json::to_value(&self.config).expect("config serializes"),
            self.seed,
        )
    }

    /// Writes `repeat.ntck` and `repeat.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join("repeat.ntck"), &self.store.entries("repeat"))?;
        self.manifest().write(&dir.join("repeat.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = ModelManifest::read(&dir.join("repeat.json"), "repeat")?;
        let config: RepeatConfig =
            serde_json::from_value(m.config.clone()).map_err(|e| Error::Checkpoint(format!("repeat config: {e}")))?;
        let mut model = Self::new(m.vocabulary()?, config, m.seed)?;
        model.store.load_entries("repeat", &checkpoint::load(&dir.join("repeat.ntck"))?)?;
        Ok(model)
    }
}
