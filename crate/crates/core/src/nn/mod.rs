//! The recognizer and the flat parameter space merging operates in.
//!
//! A [`ModelSpec`] describes a stack of 3×3 conv → ReLU → 2×2 max-pool
//! layers followed by a per-column hidden layer and a linear classifier over
//! `num_classes` CTC classes (class 0 is blank, class `g + 1` is glyph `g`).
//! Its [`Layout`] assigns every weight a fixed offset in one flat vector.

mod ctc;
mod decode;
mod model;
pub(crate) mod params;

pub use ctc::{ctc_loss, required_frames};
pub use decode::greedy_decode;
pub use model::{backward, backward_refs, forward, init_model, sample_loss_grad, Logits};
pub use params::{Block, Layout, ModelSpec, ParamVector};

/// Index of the CTC blank class.
pub const BLANK: usize = 0;
