//! Deterministic template grammar for the synthetic signal-pair corpus.
//!
//! Each template has exactly one `{s}` slot for a signal adjective, plus filler
//! slots drawn from small closed word lists. Fillers never contain a signal
//! word, so a sentence's label is decided by the one adjective alone.

use serde::{Deserialize, Serialize};

use crate::numerics::SeededRng;

const TEMPLATES: [&str; 40] = [
    "the {n} was {s}",
    "the {n} was really {s} {t}",
    "honestly the {n} was {s}",
    "our {p} was {s} {t}",
    "the {p} seemed {s} {t}",
    "i felt {s} about the {n}",
    "we felt {s} after our visit {t}",
    "the {n} at the {v} was {s}",
    "this {v} made me feel {s}",
    "my {n} tasted {s} {t}",
    "everyone said the {n} was {s}",
    "the {p} looked {s} when we arrived",
    "i left the {v} feeling {s}",
    "the whole meal was {s}",
    "the {n} here is always {s}",
    "my friend thought the {n} was {s}",
    "it was a {s} night at the {v}",
    "we had a {s} time {t}",
    "the {p} gave us a {s} {n}",
    "what a {s} {n}",
    "the service felt {s} {t}",
    "the {v} was {s} as usual",
    "i think the {n} is {s}",
    "the {n} and the {n} were {s}",
    "our {p} made the evening {s}",
    "my {n} came out {s} {t}",
    "the mood in the {v} was {s}",
    "overall the experience was {s}",
    "the {p} told us the {n} was {s}",
    "we thought the {n} was {s} {t}",
    "i was {s} with my {n}",
    "the {n} smelled {s}",
    "the {v} felt {s} {t}",
    "the price of the {n} was {s}",
    "this {n} is {s}",
    "my {p} seemed {s} to me",
    "the {n} at this {v} is {s}",
    "our table felt {s} {t}",
    "the {n} looked {s} on the plate",
    "i would call the {n} {s}",
];

const NOUNS: [&str; 20] = [
    "food", "pasta", "soup", "pizza", "coffee", "salad", "steak", "bread", "dessert", "burger", "curry", "sandwich",
    "tea", "cake", "rice", "fish", "chicken", "wine", "pie", "omelette",
];
const PEOPLE: [&str; 8] = ["waiter", "waitress", "chef", "host", "manager", "server", "bartender", "cashier"];
const TIMES: [&str; 8] =
    ["today", "tonight", "yesterday", "this morning", "last night", "on sunday", "again", "this week"];
const VENUES: [&str; 8] = ["restaurant", "cafe", "bistro", "diner", "bakery", "bar", "place", "kitchen"];

/// An antonym pair; `negative` labels a sentence 0 and `positive` labels it 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignalPair {
    pub negative: &'static str,
    pub positive: &'static str,
}

const PAIRS: [SignalPair; 2] =
    [SignalPair { negative: "bad", positive: "good" }, SignalPair { negative: "sad", positive: "happy" }];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    #[default]
    OnePair,
    TwoPairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn label(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    pub fn from_label(label: u8) -> Self {
        if label == 0 {
            Polarity::Negative
        } else {
            Polarity::Positive
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub text: String,
    pub label: u8,
    pub template: usize,
    pub pair: usize,
}

/// Counts of positive and negative signal words found in a text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SignalCounts {
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignalGrammar {
    mode: PairMode,
}

impl SignalGrammar {
    pub fn new(mode: PairMode) -> Self {
        Self { mode }
    }

    pub fn mode(&self) -> PairMode {
        self.mode
    }

    pub fn pairs(&self) -> &'static [SignalPair] {
        match self.mode {
            PairMode::OnePair => &PAIRS[..1],
            PairMode::TwoPairs => &PAIRS,
        }
    }

    pub fn templates(&self) -> &'static [&'static str] {
        &TEMPLATES
    }

    pub fn generate(&self, polarity: Polarity, rng: &mut SeededRng) -> Sentence {
        let template = rng.below(TEMPLATES.len());
        let pair = rng.below(self.pairs().len());
        let p = self.pairs()[pair];
        let signal = match polarity {
            Polarity::Negative => p.negative,
            Polarity::Positive => p.positive,
        };
        let words: Vec<&str> = TEMPLATES[template]
            .split(' ')
            .map(|slot| match slot {
                "{s}" => signal,
                "{n}" => *rng.pick(&NOUNS),
                "{p}" => *rng.pick(&PEOPLE),
                "{t}" => *rng.pick(&TIMES),
                "{v}" => *rng.pick(&VENUES),
                w => w,
            })
            .collect();
        Sentence { text: words.join(" "), label: polarity.label(), template, pair }
    }

    /// Swaps every signal word for its antonym. `None` if the text has none.
    pub fn flip(&self, text: &str) -> Option<String> {
        let mut changed = false;
        let words: Vec<&str> = text
            .split_whitespace()
            .map(|w| {
                for p in self.pairs() {
                    if w == p.negative {
                        changed = true;
                        return p.positive;
                    }
                    if w == p.positive {
                        changed = true;
                        return p.negative;
                    }
                }
                w
            })
            .collect();
        changed.then(|| words.join(" "))
    }

    pub fn scan(&self, text: &str) -> SignalCounts {
        let mut c = SignalCounts::default();
        for w in text.split_whitespace() {
            for p in self.pairs() {
                if w == p.positive {
                    c.positive += 1;
                } else if w == p.negative {
                    c.negative += 1;
                }
            }
        }
        c
    }

    /// Every word the grammar can emit in this mode, each once, in a fixed order.
    pub fn words(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = Vec::new();
        let fillers = NOUNS.iter().chain(&PEOPLE).chain(&TIMES).chain(&VENUES);
        let signals = self.pairs().iter().flat_map(|p| [p.negative, p.positive]);
        let all = TEMPLATES.iter().chain(fillers).flat_map(|s| s.split(' ')).chain(signals);
        for w in all {
            if !w.starts_with('{') && !out.contains(&w) {
                out.push(w);
            }
        }
        out
    }
}
