use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::ModelManifest;
use crate::error::{Error, Result};
use crate::nn::{embed_tokens, embedding_table, EncoderBlock, LayerNorm, Packing};
use crate::numerics::{checkpoint, Bound, Graph, ParamId, ParamStore, SeededRng, Target, Var};
use crate::text::vocab::{BOS, EOS};
use crate::text::Vocabulary;
use crate::train::{fit, Schedule};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FluencyConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
}

impl Default for FluencyConfig {
    fn default() -> Self {
        Self { d_model: 128, heads: 4, layers: 2, ff_dim: 512 }
    }
}

pub fn default_fluency_schedule() -> Schedule {
    Schedule { epochs: 6, batch_size: 32, lr: 1e-3, final_lr_frac: 0.1 }
}

#[derive(Clone, Debug)]
struct LmArch {
    d: usize,
    embed: ParamId,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
}

impl LmArch {
    fn logits(&self, g: &mut Graph, p: &Bound, ids: &[usize], packing: &Packing) -> Result<Var> {
        let mut x = embed_tokens(g, p[self.embed], ids, packing, self.d)?;
        let segs = packing.self_segments();
        for b in &self.blocks {
            x = b.forward(g, p, x, &segs, true, None)?;
        }
        let h = self.norm.forward(g, p, x)?;
        g.matmul_t(h, p[self.embed])
    }
}

/// Small causal language model used to score fluency.
#[derive(Clone, Debug)]
pub struct FluencyModel {
    config: FluencyConfig,
    vocab: Vocabulary,
    arch: LmArch,
    store: ParamStore,
    seed: u64,
}

impl FluencyModel {
    pub fn new(vocab: Vocabulary, config: FluencyConfig, seed: u64) -> Result<Self> {
        if config.d_model == 0 || config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", config.d_model, config.heads)));
        }
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let (d, h, ff) = (config.d_model, config.heads, config.ff_dim);
        let embed = embedding_table(&mut store, "embed", vocab.len(), d, &mut rng);
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(&mut store, &format!("block{i}"), d, h, ff, &mut rng))
            .collect();
        let norm = LayerNorm::new(&mut store, "norm", d);
        Ok(Self { arch: LmArch { d, embed, blocks, norm }, config, vocab, store, seed })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Trains on `BOS x -> x EOS`. Returns per-epoch mean loss.
    pub fn train(&mut self, sentences: &[String], schedule: &Schedule, seed: u64) -> Result<Vec<f32>> {
        let ids = sentences.iter().map(|t| self.vocab.tokenize(t)).collect::<Result<Vec<_>>>()?;
        let arch = &self.arch;
        let mut rng = SeededRng::with_stream(seed, 2);
        fit(&mut self.store, ids.len(), schedule, &mut rng, |g, p, idx, _| {
            let (mut input, mut targets, mut lens) = (Vec::new(), Vec::new(), Vec::new());
            for &i in idx {
                input.push(BOS);
                input.extend_from_slice(&ids[i]);
                targets.extend(ids[i].iter().map(|&t| Target::Class(t)));
                targets.push(Target::Class(EOS));
                lens.push(ids[i].len() + 1);
            }
            let logits = arch.logits(g, p, &input, &Packing::new(lens))?;
            g.cross_entropy(logits, &targets, None)
        })
    }

    /// Mean negative log-likelihood of the text tokens given BOS and their
    /// prefix. End-of-sequence is not scored.
    pub fn nll(&self, text: &str) -> Result<f32> {
        let ids = self.vocab.tokenize(text)?;
        if ids.is_empty() {
            return Err(Error::Contract("nll of empty text".into()));
        }
        let mut input = vec![BOS];
        input.extend_from_slice(&ids[..ids.len() - 1]);
        let targets: Vec<Target> = ids.iter().map(|&t| Target::Class(t)).collect();
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g, false);
        let logits = self.arch.logits(&mut g, &p, &input, &Packing::single(input.len()))?;
        let l = g.cross_entropy(logits, &targets, None)?;
        Ok(g.value(l).item())
    }

    pub fn perplexity(&self, text: &str) -> Result<f32> {
        Ok(self.nll(text)?.exp())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(&dir.join("fluency.ntck"), &self.store.entries("fluency"))?;
        let cfg = serde_json::to_value(&self.config).expect("config serializes");
        ModelManifest::new("fluency", &self.vocab, cfg, self.seed).write(&dir.join("fluency.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = ModelManifest::read(&dir.join("fluency.json"), "fluency")?;
        let config: FluencyConfig =
            serde_json::from_value(m.config.clone()).map_err(|e| Error::Checkpoint(format!("fluency config: {e}")))?;
        let mut model = Self::new(m.vocabulary()?, config, m.seed)?;
        model.store.load_entries("fluency", &checkpoint::load(&dir.join("fluency.ntck"))?)?;
        Ok(model)
    }
}
