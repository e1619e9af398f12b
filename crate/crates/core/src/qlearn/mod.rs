//! Per-stage Q-functions and backward induction.

pub mod classifier;
pub mod induction;
pub mod input;
pub mod text;

pub use classifier::{ClassifierConfig, ClassifierTrainConfig, Example, FitReport, StageClassifier};
pub use induction::{backward_induction, binarize_outcome, Induction, StageProblem, StageSummary};
pub use input::{build_stage_input, StageInput};
pub use text::{row_seed, run_backward_induction, InductionConfig, TextInduction};
