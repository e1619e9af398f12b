//! Small models shared by the qlearn and optimize tests. Everything here is
//! narrow (width 32) so a test binary builds its fixtures in a few seconds.

use std::sync::OnceLock;

use nlpolicy::numerics::SeededRng;
use nlpolicy::qlearn::{build_stage_input, ClassifierConfig, ClassifierTrainConfig, Example, StageClassifier};
use nlpolicy::repeat::{
    DecodeConfig, EncoderDecoderModel, FluencyConfig, FluencyModel, RepeatConfig, RepeatTrainConfig,
};
use nlpolicy::text::{repeat_corpus, PairMode, Polarity, SignalGrammar, Vocabulary};
use nlpolicy::train::Schedule;

pub const WIDTH: usize = 32;

pub fn grammar() -> SignalGrammar {
    SignalGrammar::new(PairMode::OnePair)
}

pub fn vocab() -> Vocabulary {
    Vocabulary::build(&grammar().words())
}

pub fn classifier_config() -> ClassifierConfig {
    ClassifierConfig { hidden: WIDTH, heads: 4, layers: 1, ff_dim: 64, dropout: 0.1 }
}

pub fn decode() -> DecodeConfig {
    DecodeConfig { beam: 2, max_len: 12, length_penalty: 1.0 }
}

/// Narrow Repeat model, lightly trained so decoded iterates look like text.
pub fn repeat() -> &'static EncoderDecoderModel {
    static MODEL: OnceLock<EncoderDecoderModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = RepeatConfig { d_model: WIDTH, heads: 4, encoder_layers: 1, decoder_layers: 1, ff_dim: 64 };
        let mut m = EncoderDecoderModel::new(vocab(), cfg, 5).unwrap();
        let corpus = repeat_corpus(&grammar(), 600, 2, false, &mut SeededRng::new(2));
        let train = RepeatTrainConfig {
            schedule: Schedule { epochs: 2, batch_size: 32, lr: 2e-3, final_lr_frac: 0.5 },
            ..RepeatTrainConfig::default()
        };
        m.train(&corpus, &train).unwrap();
        m
    })
}

pub fn fluency() -> &'static FluencyModel {
    static MODEL: OnceLock<FluencyModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let cfg = FluencyConfig { d_model: WIDTH, heads: 4, layers: 1, ff_dim: 64 };
        let mut m = FluencyModel::new(vocab(), cfg, 9).unwrap();
        let sentences = sentences(300, 4).into_iter().map(|(s, _)| s).collect::<Vec<_>>();
        m.train(&sentences, &Schedule { epochs: 1, batch_size: 32, lr: 2e-3, final_lr_frac: 0.5 }, 9).unwrap();
        m
    })
}

/// Alternating positive and negative grammar sentences with their labels.
pub fn sentences(n: usize, seed: u64) -> Vec<(String, u8)> {
    let g = grammar();
    let mut rng = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let p = Polarity::from_label((i % 2) as u8);
            (g.generate(p, &mut rng).text, p.label())
        })
        .collect()
}

/// Stage inputs with an empty history, labelled by the sentence's signal.
pub fn signal_examples(n: usize, seed: u64) -> Vec<Example> {
    sentences(n, seed)
        .into_iter()
        .map(|(s, l)| Example { input: build_stage_input(repeat(), "", &s).unwrap().memory, value: f32::from(l) })
        .collect()
}

pub fn signal_train_config() -> ClassifierTrainConfig {
    ClassifierTrainConfig { epochs: 6, lr: 1e-3, seed: 1, ..ClassifierTrainConfig::default() }
}

/// Classifier that reads the signal word, trained on `signal_examples`.
pub fn signal_classifier() -> &'static StageClassifier {
    static MODEL: OnceLock<StageClassifier> = OnceLock::new();
    MODEL.get_or_init(|| {
        let mut f = StageClassifier::new(classifier_config(), 1).unwrap();
        f.fit(&signal_examples(240, 3), &signal_train_config()).unwrap();
        f
    })
}
