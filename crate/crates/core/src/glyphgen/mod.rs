//! Procedural alphabets, rendering styles and labeled text-strip datasets.
//!
//! An [`Alphabet`] is a list of glyph seeds; each seed deterministically
//! expands into a handful of polyline strokes on a 12×12 grid centred in a
//! 16×16 cell. A [`DomainStyle`] perturbs how those strokes are drawn. The
//! pair (alphabet, style) defines a data domain, and [`build_domain`] draws
//! train/test splits from it.

mod alphabet;
mod dataset;
mod export;
mod render;
mod style;

pub use alphabet::{glyph_cell, hamming, make_alphabet, Alphabet, AlphabetRecipe};
pub use dataset::{build_domain, subsample, Dataset, DomainRecipe, Split};
pub use export::{dataset_digest, read_glyf, write_glyf, DatasetManifest, GLYF_MAGIC, GLYF_VERSION};
pub use render::{render_sample, GrayImage, Sample};
pub use style::DomainStyle;

/// Image height in pixels.
pub const HEIGHT: usize = 16;
/// Width of one glyph cell in pixels.
pub const CELL: usize = 16;
/// Default upper bound on label length.
pub const DEFAULT_MAX_LABEL_LEN: usize = 8;
/// Hard cap imposed by the raw export format (label length is a `u8`).
pub const MAX_LABEL_LEN: usize = u8::MAX as usize;
