//! Desk-scale toolkit for merging sequence recognizers.
//!
//! The crate covers the whole pipeline: procedural glyph alphabets and
//! styled text-strip datasets ([`glyphgen`]), a small convolutional CTC
//! recognizer with hand-derived gradients ([`nn`]), Adam ([`optim`]), the
//! epoch-based update function ([`trainer`]), task-vector arithmetic and
//! federated rounds ([`merge`]) and recognition metrics ([`eval`]).
//!
//! The numeric modules are generic over [`Real`]; the harness and all file
//! formats use `f64`, for which the `*64` aliases below exist.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod glyphgen;
pub mod merge;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub use glyphgen::{Alphabet, Dataset, DomainStyle, GrayImage, Sample, Split};
pub use merge::{MergePlan, TaskVector};
pub use nn::{Layout, Logits, ModelSpec, ParamVector};
pub use optim::{AdamHyper, AdamState};
pub use trainer::TrainConfig;

pub type ParamVector64 = ParamVector<f64>;
pub type ParamVector32 = ParamVector<f32>;
pub type TaskVector64 = TaskVector<f64>;
pub type TaskVector32 = TaskVector<f32>;
pub type AdamState64 = AdamState<f64>;
pub type AdamState32 = AdamState<f32>;
pub type Logits64 = Logits<f64>;
pub type Logits32 = Logits<f32>;
