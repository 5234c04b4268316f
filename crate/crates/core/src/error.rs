use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("glyph seeds for alphabet {alphabet} failed distinguishability after {retries} retries")]
    Indistinguishable { alphabet: String, retries: usize },

    #[error("label index {index} out of range for {glyph_count} glyphs")]
    LabelOutOfRange { index: usize, glyph_count: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter layout mismatch: expected {expected}, found {found}")]
    LayoutMismatch { expected: String, found: String },

    #[error("CTC label needs {required} frames but only {frames} are available")]
    InfeasibleLabel { frames: usize, required: usize },

    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("node {node}: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value at index {index} in {context}")]
    NonFinite { context: String, index: usize },

    #[error("task vector {tag} has zero norm")]
    ZeroNorm { tag: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_sample(self, index: usize) -> Self {
        Error::Sample {
            index,
            source: Box::new(self),
        }
    }

    pub fn at_node(self, node: impl Into<String>) -> Self {
        Error::Node {
            node: node.into(),
            source: Box::new(self),
        }
    }

    /// True when the root cause is a NaN/Inf abort.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } => true,
            Error::Sample { source, .. } | Error::Node { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
