//! The Repeat encoder–decoder, its beam-search decoder, and the fluency LM.

pub mod decode;
pub mod fluency;
pub mod manifest;
pub mod model;

pub use decode::{DecodeConfig, Decoded, SplitDecoded};
pub use fluency::{default_fluency_schedule, FluencyConfig, FluencyModel};
pub use manifest::ModelManifest;
pub use model::{EncoderDecoderModel, RepeatArch, RepeatConfig, RepeatTrainConfig};
