use std::sync::OnceLock;

use nlpolicy::nn::Packing;
use nlpolicy::numerics::{Graph, SeededRng, Tensor};
use nlpolicy::repeat::*;
use nlpolicy::text::vocab::{BOS, COLON, EOS, REPEAT};
use nlpolicy::text::*;
use nlpolicy::train::Schedule;
use nlpolicy::Error;

fn grammar() -> SignalGrammar {
    SignalGrammar::new(PairMode::OnePair)
}

fn vocab() -> Vocabulary {
    Vocabulary::build(&grammar().words())
}

fn small() -> RepeatConfig {
    RepeatConfig { d_model: 32, heads: 4, encoder_layers: 1, decoder_layers: 2, ff_dim: 64 }
}

/// One Repeat model trained for a few epochs, shared by the tests that need
/// a working round trip.
fn trained() -> &'static EncoderDecoderModel {
    static MODEL: OnceLock<EncoderDecoderModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = repeat_corpus(&grammar(), 4000, 2, false, &mut SeededRng::new(1));
        let mut m = EncoderDecoderModel::new(vocab(), RepeatConfig::default(), 7).unwrap();
        let cfg = RepeatTrainConfig {
            schedule: Schedule { epochs: 4, batch_size: 32, lr: 1e-3, final_lr_frac: 0.1 },
            ..RepeatTrainConfig::default()
        };
        m.train(&corpus, &cfg).unwrap();
        m
    })
}

fn held_out(n: usize, seed: u64) -> Vec<String> {
    let g = grammar();
    let mut rng = SeededRng::new(seed);
    (0..n).map(|i| g.generate(Polarity::from_label((i % 2) as u8), &mut rng).text).collect()
}

#[test]
fn cached_decoder_matches_graph_forward() {
    let m = EncoderDecoderModel::new(vocab(), small(), 3).unwrap();
    let text = "the food at the cafe was good";
    let mem = m.encode_prompted(text).unwrap();
    let mut ids = m.vocab().tokenize(text).unwrap();
    ids.push(EOS);

    let mut g = Graph::inference();
    let p = m.store().bind(&mut g, false);
    let src: Vec<usize> = [REPEAT, COLON].into_iter().chain(ids[..ids.len() - 1].iter().copied()).collect();
    let src_pack = Packing::single(src.len());
    let memory = m.arch().encode(&mut g, &p, &src, &src_pack).unwrap();
    assert!(g.value(memory).max_abs_diff(&mem) < 1e-6);
    let tgt_in: Vec<usize> = std::iter::once(BOS).chain(ids[..ids.len() - 1].iter().copied()).collect();
    let logits =
        m.arch().decode_logits(&mut g, &p, memory, &src_pack, &tgt_in, &Packing::single(tgt_in.len())).unwrap();
    let logp = g.log_softmax(logits);
    let graph_rows = g.value(logp);

    let cached = m.cached_log_probs(&mem, &ids).unwrap();
    for (i, row) in cached.iter().enumerate() {
        let diff = row.iter().zip(graph_rows.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(diff < 1e-4, "row {i} differs by {diff}");
    }
}

#[test]
fn encode_contract() {
    let m = EncoderDecoderModel::new(vocab(), RepeatConfig::default(), 1).unwrap();
    let a = m.encode("Repeat : the food was good").unwrap();
    assert_eq!(a.shape(), &[6, 128]);
    assert_eq!(a, m.encode("Repeat : the food was good").unwrap());
    let b = m.encode("Repeat : the food was bad").unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
    assert!(matches!(m.encode("Repeat : the food was tasty"), Err(Error::Oov(_))));
}

#[test]
fn decode_rejects_wrong_width() {
    let m = EncoderDecoderModel::new(vocab(), small(), 1).unwrap();
    assert!(m.decode(&Tensor::zeros(&[3, 8]), &DecodeConfig::default()).is_err());
}

#[test]
fn untrained_decode_flags_missing_eos() {
    let m = EncoderDecoderModel::new(vocab(), small(), 1).unwrap();
    let mem = m.encode_prompted("the food was bad").unwrap();
    let cfg = DecodeConfig { max_len: 3, ..DecodeConfig::default() };
    let d = m.decode(&mem, &cfg).unwrap();
    if !d.finished {
        assert_eq!(d.ids.len(), 3);
    }
    assert!(d.ids.len() <= 3);
}

#[test]
fn training_is_deterministic_and_learns() {
    let corpus = repeat_corpus(&grammar(), 200, 2, false, &mut SeededRng::new(4));
    let cfg = RepeatTrainConfig {
        schedule: Schedule { epochs: 2, batch_size: 16, lr: 1e-3, final_lr_frac: 1.0 },
        ..RepeatTrainConfig::default()
    };
    let run = || {
        let mut m = EncoderDecoderModel::new(vocab(), small(), 5).unwrap();
        let before = m.repeat_loss(&corpus).unwrap();
        let curve = m.train(&corpus, &cfg).unwrap();
        (before, curve, m.repeat_loss(&corpus).unwrap())
    };
    let (before, curve, after) = run();
    assert!(after < before, "{after} !< {before}");
    assert_eq!(run().1, curve);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = EncoderDecoderModel::new(vocab(), small(), 9).unwrap();
    m.save(dir.path()).unwrap();
    let back = EncoderDecoderModel::load(dir.path()).unwrap();
    let x = "the soup was bad";
    assert_eq!(m.encode_prompted(x).unwrap(), back.encode_prompted(x).unwrap());
    assert!(matches!(FluencyModel::load(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn trained_model_round_trips_held_out_sentences() {
    let m = trained();
    let texts = held_out(100, 77);
    let ok = texts.iter().filter(|t| m.reconstructs(t, &DecodeConfig::default()).unwrap()).count();
    assert!(ok >= 95, "{ok}/100");
    assert!(m.reconstructs("the food was good", &DecodeConfig::default()).unwrap());
}

#[test]
fn beam_of_one_is_greedy_argmax() {
    let m = trained();
    for text in held_out(10, 5) {
        let mem = m.encode_prompted(&text).unwrap();
        let beam = m.decode(&mem, &DecodeConfig::greedy()).unwrap();
        let rows = m.cached_log_probs(&mem, &beam.ids).unwrap();
        for (row, &t) in rows.iter().zip(&beam.ids) {
            let arg = (2..row.len()).fold(2, |b, i| if row[i] > row[b] { i } else { b });
            assert_eq!(t, arg);
        }
    }
}

#[test]
fn beam_search_scores_at_least_greedy() {
    let m = trained();
    let texts = held_out(200, 31);
    let (mut beam, mut greedy) = (0.0f64, 0.0f64);
    for t in &texts {
        let mem = m.encode_prompted(t).unwrap();
        beam += m.decode(&mem, &DecodeConfig::default()).unwrap().score as f64;
        greedy += m.decode(&mem, &DecodeConfig::greedy()).unwrap().score as f64;
    }
    assert!(beam >= greedy - 1e-6, "{beam} < {greedy}");
}

#[test]
fn tiny_memory_perturbation_keeps_greedy_decode() {
    let m = trained();
    let mut rng = SeededRng::new(8);
    let texts = held_out(100, 12);
    let mut same = 0;
    for t in &texts {
        let mem = m.encode_prompted(t).unwrap();
        let mut noisy = mem.clone();
        noisy.data_mut().iter_mut().for_each(|v| *v += 1e-6 * if rng.coin() { 1.0 } else { -1.0 });
        let a = m.decode(&mem, &DecodeConfig::greedy()).unwrap();
        let b = m.decode(&noisy, &DecodeConfig::greedy()).unwrap();
        same += usize::from(a.ids == b.ids);
    }
    assert!(same >= 99, "{same}/100");
}

#[test]
fn decode_split_recovers_history_and_action() {
    let m = trained();
    let cfg = DecodeConfig::default();
    let action = "the pizza was bad";
    let full = m.encode_prompted(&format!("SEP {action}")).unwrap();
    let (sep, act) = (full.slice_rows(2, 1).unwrap(), full.slice_rows(3, 4).unwrap());
    let split = m.decode_split(Some(&full.slice_rows(0, 2).unwrap()), &sep, &act, &cfg).unwrap();
    assert_eq!((split.history.as_str(), split.action.as_str()), ("", action));
    assert!(!split.fallback);

    let history = "the soup was good the soup was good";
    let full = m.encode_prompted(&format!("{history} SEP {action}")).unwrap();
    let split = m
        .decode_split(
            Some(&full.slice_rows(0, 10).unwrap()),
            &full.slice_rows(10, 1).unwrap(),
            &full.slice_rows(11, 4).unwrap(),
            &cfg,
        )
        .unwrap();
    assert_eq!((split.history.as_str(), split.action.as_str()), (history, action));
}

fn fluency() -> &'static (FluencyModel, Vec<String>) {
    static MODEL: OnceLock<(FluencyModel, Vec<String>)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let train = held_out(3000, 41);
        let mut m = FluencyModel::new(vocab(), FluencyConfig::default(), 2).unwrap();
        let schedule = Schedule { epochs: 4, ..default_fluency_schedule() };
        m.train(&train, &schedule, 2).unwrap();
        (m, train)
    })
}

#[test]
fn nll_follows_the_chain_rule() {
    let (m, _) = fluency();
    let words = ["the", "food", "was", "good"];
    let mut prev = 0.0f32;
    for n in 1..=words.len() {
        let total = m.nll(&words[..n].join(" ")).unwrap() * n as f32;
        // the increment is -log P(word_n | BOS, words before it)
        assert!(total - prev >= -1e-4, "negative conditional NLL at {n}");
        prev = total;
    }
    let x = "the food was good";
    assert_eq!(m.perplexity(x).unwrap(), m.nll(x).unwrap().exp());
    assert!(matches!(m.nll(""), Err(Error::Contract(_))));
}

#[test]
fn grammar_sentences_beat_word_salad() {
    let (m, _) = fluency();
    let mut rng = SeededRng::new(13);
    let texts = held_out(100, 51);
    let words: Vec<&str> = grammar().words();
    let mut wins = 0;
    for t in &texts {
        let n = t.split(' ').count();
        let salad: Vec<&str> = (0..n).map(|_| *rng.pick(&words)).collect();
        wins += usize::from(m.nll(t).unwrap() < m.nll(&salad.join(" ")).unwrap());
    }
    assert!(wins >= 95, "{wins}/100");
}

#[test]
fn fluency_does_not_overfit() {
    let (m, train) = fluency();
    let ppl = |xs: &[String]| xs.iter().map(|x| m.perplexity(x).unwrap() as f64).sum::<f64>() / xs.len() as f64;
    let (tr, ho) = (ppl(&train[..300]), ppl(&held_out(300, 61)));
    assert!(ho <= 1.5 * tr, "held-out {ho} vs train {tr}");
}
