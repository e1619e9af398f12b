use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optimize::SelectionMode;
use crate::qlearn::{ClassifierTrainConfig, InductionConfig};
use crate::repeat::{default_fluency_schedule, FluencyConfig, RepeatConfig, RepeatTrainConfig};
use crate::text::PairMode;
use crate::train::Schedule;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Base,
    Tts,
    OneStage,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Tts => "tts",
            Variant::OneStage => "one-stage",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "tts" => Ok(Variant::Tts),
            "one-stage" => Ok(Variant::OneStage),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected base, tts or one-stage)"))),
        }
    }
}

/// Directories relative to the run root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), report_dir: "reports".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub pair_mode: PairMode,
    pub horizon: usize,
    /// Training trajectories per stage-label pattern.
    pub x_per_combo: usize,
    /// Test trajectories, each carrying one negative stage.
    pub test_negatives: usize,
    /// Strings in the Repeat training corpus.
    pub repeat_corpus: usize,
    /// Held-out sentences for the reconstruction and perplexity checks.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pair_mode: PairMode::OnePair,
            horizon: 2,
            x_per_combo: 250,
            test_negatives: 200,
            repeat_corpus: 8000,
            holdout: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FluencySection {
    pub model: FluencyConfig,
    pub schedule: Schedule,
}

impl Default for FluencySection {
    fn default() -> Self {
        Self { model: FluencyConfig::default(), schedule: default_fluency_schedule() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepeatSection {
    pub model: RepeatConfig,
    pub train: RepeatTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub classifier: ClassifierTrainConfig,
    /// Refine every test stage instead of only those the judge calls negative.
    pub refine_all_stages: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            classifier: ClassifierTrainConfig {
                epochs: 5,
                input_noise: 0.0,
                label_smoothing: 0.0,
                ..Default::default()
            },
            refine_all_stages: false,
        }
    }
}

/// Everything a run depends on. Module seeds are overwritten from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub variant: Variant,
    pub paths: Paths,
    pub data: DataConfig,
    pub repeat: RepeatSection,
    pub fluency: FluencySection,
    pub induction: InductionConfig,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut induction = InductionConfig::default();
        // Synthetic signal data: decode the final iterate, no fluency ranking.
        induction.ascent.selection = SelectionMode::LastIterate;
        Self {
            seed: 0,
            variant: Variant::Base,
            paths: Paths::default(),
            data: DataConfig::default(),
            repeat: RepeatSection::default(),
            fluency: FluencySection::default(),
            induction,
            eval: EvalSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if d.x_per_combo == 0 || d.test_negatives == 0 || d.repeat_corpus == 0 {
            return Err(Error::Config("x_per_combo, test_negatives and repeat_corpus must be positive".into()));
        }
        if self.induction.ascent.iterations.is_empty() {
            return Err(Error::Config("ascent needs at least one iteration count".into()));
        }
        if let Some(th) = self.induction.outcome_threshold {
            if th as usize > d.horizon {
                return Err(Error::Config(format!("outcome threshold {th} exceeds horizon {}", d.horizon)));
            }
        }
        self.induction.ascent.validate()
    }

    /// Identity of everything except the variant, which only selects among
    /// per-variant artifacts.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.variant = Variant::Base;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(&bytes))
    }
}
