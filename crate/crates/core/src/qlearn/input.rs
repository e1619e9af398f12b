use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::repeat::EncoderDecoderModel;
use crate::text::vocab::{COLON, REPEAT, SEP};

/// Encoder representation of `Repeat : history SEP action` with the rows of
/// the action tokens located.
#[derive(Clone, Debug, PartialEq)]
pub struct StageInput {
    pub memory: Tensor,
    pub action_start: usize,
    pub action_len: usize,
}

impl StageInput {
    /// Rows before the action: prompt, history and separator.
    pub fn prefix(&self) -> Tensor {
        self.memory.slice_rows(0, self.action_start).expect("prefix inside memory")
    }

    /// Rows before the separator.
    pub fn history_rows(&self) -> Tensor {
        self.memory.slice_rows(0, self.action_start - 1).expect("history inside memory")
    }

    pub fn sep_row(&self) -> Tensor {
        self.memory.slice_rows(self.action_start - 1, 1).expect("separator inside memory")
    }

    pub fn action(&self) -> Tensor {
        self.memory.slice_rows(self.action_start, self.action_len).expect("action inside memory")
    }

    /// The full block with the action rows replaced.
    pub fn with_action(&self, action: &Tensor) -> Result<Tensor> {
        if action.rows() != self.action_len {
            return Err(Error::shape(
                "with_action",
                format!("{} rows for a {}-row span", action.rows(), self.action_len),
            ));
        }
        Tensor::concat_rows(&[&self.prefix(), action])
    }
}

/// Encodes `Repeat : history SEP action` in one pass. The action span is the
/// trailing `len(tokens(action))` rows.
pub fn build_stage_input(model: &EncoderDecoderModel, history: &str, action: &str) -> Result<StageInput> {
    let v = model.vocab();
    let h = v.tokenize(history)?;
    let a = v.tokenize(action)?;
    if a.is_empty() {
        return Err(Error::Contract("empty action text".into()));
    }
    let mut ids = Vec::with_capacity(h.len() + a.len() + 3);
    ids.extend([REPEAT, COLON]);
    ids.extend(h);
    ids.push(SEP);
    let action_start = ids.len();
    ids.extend_from_slice(&a);
    Ok(StageInput { memory: model.encode_ids(&ids)?, action_start, action_len: a.len() })
}
