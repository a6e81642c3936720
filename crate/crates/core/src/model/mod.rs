//! Toy multimodal transformer: cell encoder, projection, causal backbone,
//! decoder head, LVIP head and flow head.

mod decode;
mod forward;
mod state;

pub use decode::{argmax, sample_index, Rationale};
pub use forward::{answer_scores, pool_option_hidden, prompt_for, Bound, ForwardOutput, ModelInput, TokenSpanMap, Trace};
pub use state::{ModelConfig, ModelState};
