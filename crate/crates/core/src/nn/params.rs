use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::glyphgen::HEIGHT;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default = "default_channels")]
    pub conv_channels: Vec<usize>,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    pub num_classes: usize,
}

fn default_channels() -> Vec<usize> {
    vec![8, 16]
}

fn default_hidden() -> usize {
    32
}

impl ModelSpec {
    /// Default architecture for an alphabet of `glyph_count` glyphs.
    pub fn for_glyphs(glyph_count: usize) -> Self {
        ModelSpec {
            conv_channels: default_channels(),
            hidden_dim: default_hidden(),
            num_classes: glyph_count + 1,
        }
    }

    pub fn with_num_classes(&self, num_classes: usize) -> Self {
        ModelSpec {
            num_classes,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 3 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 3 (two glyphs plus blank), got {}",
                self.num_classes
            )));
        }
        if self.conv_channels.is_empty() || HEIGHT >> self.conv_channels.len() == 0 {
            return Err(Error::InvalidArgument(format!(
                "need between 1 and 4 conv layers, got {}",
                self.conv_channels.len()
            )));
        }
        if self.conv_channels.contains(&0) || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Horizontal downsampling factor of the conv stack.
    pub fn downsampling(&self) -> usize {
        1 << self.conv_channels.len()
    }

    /// Height of the feature map fed to the per-frame layers.
    pub fn feature_height(&self) -> usize {
        HEIGHT >> self.conv_channels.len()
    }

    /// Width of one frame's feature vector.
    pub fn frame_features(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0) * self.feature_height()
    }

    /// Number of frames produced for an image `width` pixels wide.
    pub fn frames_for_width(&self, width: usize) -> usize {
        width / self.downsampling()
    }

    pub fn layout(&self) -> Result<Arc<Layout>> {
        Layout::new(self.clone()).map(Arc::new)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }
}

/// Offsets of every parameter block, plus a digest identifying the layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    spec: ModelSpec,
    blocks: Vec<Block>,
    len: usize,
    hash: [u8; 32],
}

impl Layout {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut cin = 1;
        for (i, &cout) in spec.conv_channels.iter().enumerate() {
            shapes.push((format!("conv{i}.weight"), vec![cout, cin, 3, 3]));
            shapes.push((format!("conv{i}.bias"), vec![cout]));
            cin = cout;
        }
        shapes.push(("hidden.weight".into(), vec![spec.hidden_dim, spec.frame_features()]));
        shapes.push(("hidden.bias".into(), vec![spec.hidden_dim]));
        shapes.push(("output.weight".into(), vec![spec.num_classes, spec.hidden_dim]));
        shapes.push(("output.bias".into(), vec![spec.num_classes]));

        let mut offset = 0;
        let mut blocks = Vec::with_capacity(shapes.len());
        let mut hasher = Sha256::new();
        hasher.update(b"mergelab-layout/1\n");
        for (name, shape) in shapes {
            let b = Block { name, offset, shape };
            hasher.update(format!("{}:{}:{:?}\n", b.name, b.offset, b.shape).as_bytes());
            offset += b.len();
            blocks.push(b);
        }
        Ok(Layout {
            spec,
            blocks,
            len: offset,
            hash: hasher.finalize().into(),
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// Total parameter count.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn hash(&self) -> &[u8; 32] {
        &self.hash
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash)
    }

    /// Length of the prefix holding everything but the output classifier.
    pub fn encoder_len(&self) -> usize {
        self.block("output.weight").map(|b| b.offset).unwrap_or(self.len)
    }
}

/// A model θ as one flat vector tied to its layout.
#[derive(Clone, PartialEq)]
pub struct ParamVector<S> {
    layout: Arc<Layout>,
    values: Vec<S>,
}

impl<S> fmt::Debug for ParamVector<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParamVector")
            .field("layout", &self.layout.hash_hex())
            .field("len", &self.values.len())
            .finish()
    }
}

impl<S: Real> ParamVector<S> {
    pub fn new(layout: Arc<Layout>, values: Vec<S>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Shape(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.len()
            )));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![S::zero(); layout.len()];
        ParamVector { layout, values }
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn spec(&self) -> &ModelSpec {
        self.layout.spec()
    }

    pub fn spec_hash(&self) -> &[u8; 32] {
        self.layout.hash()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    /// Same layout, different values.
    pub fn with_values(&self, values: Vec<S>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    pub fn block(&self, name: &str) -> Option<&[S]> {
        self.layout.block(name).map(|b| &self.values[b.range()])
    }

    pub fn ensure_same_layout(&self, other: &ParamVector<S>) -> Result<()> {
        ensure_hash(self.spec_hash(), other.spec_hash())
    }

    /// Index of the first NaN/Inf entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        match self.first_non_finite() {
            Some(index) => Err(Error::NonFinite {
                context: context.into(),
                index,
            }),
            None => Ok(()),
        }
    }

    /// Convert to another scalar type.
    pub fn cast<T: Real>(&self) -> ParamVector<T> {
        ParamVector {
            layout: self.layout.clone(),
            values: self.values.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub fn l2_norm(&self) -> S {
        self.values.iter().map(|v| *v * *v).sum::<S>().sqrt()
    }
}

pub(crate) fn ensure_hash(expected: &[u8; 32], found: &[u8; 32]) -> Result<()> {
    if expected != found {
        return Err(Error::LayoutMismatch {
            expected: hex::encode(expected),
            found: hex::encode(found),
        });
    }
    Ok(())
}
