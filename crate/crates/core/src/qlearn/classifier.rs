use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, LayerNorm, Linear, Packing};
use crate::numerics::{checkpoint, Bound, Graph, ParamStore, SeededRng, Target, Tensor, Var};
use crate::train::{fit, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Must equal the width of the encoder representations fed in.
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub dropout: f32,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { hidden: 128, heads: 8, layers: 3, ff_dim: 256, dropout: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Train against the pseudo value as a probability instead of its
    /// thresholded label.
    pub soft_targets: bool,
    /// Majority share above which inverse-frequency class weights kick in.
    pub balance_above: f32,
    /// Standard deviation of Gaussian noise added to every input element
    /// during training. Smooths the decision function so its input
    /// gradient follows directions the decoder can read.
    pub input_noise: f32,
    /// Targets are squeezed into [ε, 1 − ε] so the fitted classifier stays
    /// unsaturated between the two classes.
    pub label_smoothing: f32,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            epochs: 15,
            seed: 0,
            soft_targets: true,
            balance_above: 0.9,
            input_noise: 1.5,
            label_smoothing: 0.1,
        }
    }
}

/// One labelled input: an encoder representation and its target P(y+).
#[derive(Clone, Debug)]
pub struct Example {
    pub input: Tensor,
    pub value: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub losses: Vec<f32>,
    pub train_accuracy: f32,
    pub positives: usize,
    pub negatives: usize,
    pub class_weights: Option<[f32; 2]>,
}

#[derive(Clone, Debug)]
struct ClassifierArch {
    config: ClassifierConfig,
    blocks: Vec<EncoderBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl ClassifierArch {
    /// Logits, one row per packed sequence.
    fn logits(
        &self,
        g: &mut Graph,
        p: &Bound,
        x: Var,
        packing: &Packing,
        mut dropout: Option<&mut SeededRng>,
    ) -> Result<Var> {
        let segs = packing.self_segments();
        let mut x = x;
        for b in &self.blocks {
            let d = dropout.as_deref_mut().map(|r| (self.config.dropout, r));
            x = b.forward(g, p, x, &segs, false, d)?;
        }
        let h = self.norm.forward(g, p, x)?;
        let pooled = g.segment_mean(h, &packing.pool_ranges())?;
        self.head.forward(g, p, pooled)
    }
}

/// Transformer classifier over encoder representations with a mean-pooled
/// two-class head. Class 1 is the positive outcome.
#[derive(Clone, Debug)]
pub struct StageClassifier {
    arch: ClassifierArch,
    store: ParamStore,
}

impl StageClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        let (d, h) = (config.hidden, config.heads);
        if d == 0 || h == 0 || d % h != 0 {
            return Err(Error::Config(format!("classifier hidden {d} not divisible by {h} heads")));
        }
        let mut store = ParamStore::new();
        let mut rng = SeededRng::new(seed);
        let blocks = (0..config.layers)
            .map(|i| EncoderBlock::new(&mut store, &format!("block{i}"), d, h, config.ff_dim, &mut rng))
            .collect();
        let norm = LayerNorm::new(&mut store, "norm", d);
        let head = Linear::new(&mut store, "head", d, 2, &mut rng);
        Ok(Self { arch: ClassifierArch { config, blocks, norm, head }, store })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.arch.config
    }

    fn check_width(&self, t: &Tensor) -> Result<()> {
        let hidden = self.arch.config.hidden;
        if t.rank() != 2 || t.cols() != hidden {
            return Err(Error::shape("predict_q", format!("input {:?}, classifier width {hidden}", t.shape())));
        }
        Ok(())
    }

    /// P(y+) for one input sequence, dropout off.
    pub fn predict_q(&self, input: &Tensor) -> Result<f32> {
        Ok(self.predict_pair(input)?[1])
    }

    /// `[P(y-), P(y+)]`.
    pub fn predict_pair(&self, input: &Tensor) -> Result<[f32; 2]> {
        self.check_width(input)?;
        let mut g = Graph::inference();
        let p = self.store.bind(&mut g, false);
        let x = g.leaf(input.clone(), false);
        let l = self.arch.logits(&mut g, &p, x, &Packing::single(input.rows()), None)?;
        let s = g.softmax(l);
        let v = g.value(s).data();
        Ok([v[0], v[1]])
    }

    /// `log P(y+)` of `[prefix ; action]` and its gradient with respect to the
    /// action rows only. `dropout` enables training-mode dropout.
    pub fn action_gradient(
        &self,
        prefix: Option<&Tensor>,
        action: &Tensor,
        dropout: Option<&mut SeededRng>,
    ) -> Result<(f32, Tensor)> {
        self.check_width(action)?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let a = g.leaf(action.clone(), true);
        let (x, rows) = match prefix {
            Some(h) => {
                self.check_width(h)?;
                let rows = h.rows() + action.rows();
                let h = g.leaf(h.clone(), false);
                (g.concat_rows(&[h, a])?, rows)
            }
            None => (a, action.rows()),
        };
        let l = self.arch.logits(&mut g, &p, x, &Packing::single(rows), dropout)?;
        let ls = g.log_softmax(l);
        let pick = g.leaf(Tensor::matrix(1, 2, vec![0.0, 1.0])?, false);
        let m = g.mul(ls, pick)?;
        let obj = g.sum(m);
        let value = g.value(obj).item();
        let mut grads = g.backward(obj)?;
        let grad = grads.take(a).ok_or_else(|| Error::Contract("action rows received no gradient".into()))?;
        Ok((value, grad))
    }

    /// Fits the classifier to pseudo values. Fails if only one class is present.
    pub fn fit(&mut self, examples: &[Example], cfg: &ClassifierTrainConfig) -> Result<FitReport> {
        if examples.is_empty() {
            return Err(Error::Contract("no training rows".into()));
        }
        for e in examples {
            self.check_width(&e.input)?;
            if !(0.0..=1.0).contains(&e.value) {
                return Err(Error::Contract(format!("pseudo value {} outside [0, 1]", e.value)));
            }
        }
        if !(0.0..0.5).contains(&cfg.label_smoothing) || !(cfg.input_noise >= 0.0) {
            return Err(Error::Config(format!(
                "label smoothing {} must lie in [0, 0.5) and input noise {} must be non-negative",
                cfg.label_smoothing, cfg.input_noise
            )));
        }
        let positives = examples.iter().filter(|e| e.value >= 0.5).count();
        let negatives = examples.len() - positives;
        if positives == 0 || negatives == 0 {
            return Err(Error::Validation(format!(
                "single-class stage dataset ({positives} positive, {negatives} negative); classifier undefined"
            )));
        }
        let n = examples.len() as f32;
        let class_weights = (positives.max(negatives) as f32 / n > cfg.balance_above)
            .then(|| [n / (2.0 * negatives as f32), n / (2.0 * positives as f32)]);
        let schedule = Schedule { epochs: cfg.epochs, batch_size: cfg.batch_size, lr: cfg.lr, final_lr_frac: 1.0 };
        let mut rng = SeededRng::with_stream(cfg.seed, 3);
        let arch = &self.arch;
        let losses = fit(&mut self.store, examples.len(), &schedule, &mut rng, |g, p, idx, rng| {
            let parts: Vec<&Tensor> = idx.iter().map(|&i| &examples[i].input).collect();
            let packing = Packing::new(parts.iter().map(|t| t.rows()).collect());
            let mut x = Tensor::concat_rows(&parts)?;
            if cfg.input_noise > 0.0 {
                x.data_mut().iter_mut().for_each(|v| *v += rng.normal() * cfg.input_noise);
            }
            let x = g.leaf(x, false);
            let logits = arch.logits(g, p, x, &packing, Some(rng))?;
            let targets: Vec<Target> = idx
                .iter()
                .map(|&i| {
                    let v = examples[i].value;
                    if cfg.soft_targets {
                        let v = cfg.label_smoothing + (1.0 - 2.0 * cfg.label_smoothing) * v;
                        Target::Soft(vec![1.0 - v, v])
                    } else {
                        Target::Class(usize::from(v >= 0.5))
                    }
                })
                .collect();
            let weights: Option<Vec<f32>> =
                class_weights.map(|w| idx.iter().map(|&i| w[usize::from(examples[i].value >= 0.5)]).collect());
            g.cross_entropy(logits, &targets, weights.as_deref())
        })?;
        let correct = examples
            .iter()
            .map(|e| self.predict_q(&e.input).map(|q| (q >= 0.5) == (e.value >= 0.5)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|&c| c)
            .count();
        Ok(FitReport { losses, train_accuracy: correct as f32 / n, positives, negatives, class_weights })
    }

    pub fn save(&self, path: &Path, namespace: &str) -> Result<()> {
        checkpoint::save(path, &self.store.entries(namespace))
    }

    pub fn load(path: &Path, namespace: &str, config: ClassifierConfig) -> Result<Self> {
        let mut c = Self::new(config, 0)?;
        c.store.load_entries(namespace, &checkpoint::load(path)?)?;
        Ok(c)
    }
}
