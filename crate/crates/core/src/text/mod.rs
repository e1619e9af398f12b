//! Vocabulary, synthetic corpus, trajectories and their file format.

pub mod edit;
pub mod grammar;
pub mod trajectory;
pub mod vocab;

pub use edit::edit_distance;
pub use grammar::{PairMode, Polarity, Sentence, SignalCounts, SignalGrammar, SignalPair};
pub use trajectory::{
    assemble_trajectories, label_patterns, read_trajectories, repeat_corpus, test_trajectories, write_trajectories,
    History, Stage, StageDataset, StageRow, Trajectory,
};
pub use vocab::Vocabulary;
