//! Dataset manifests and the raw `GLYF` binary export.
//!
//! Layout (little-endian): magic `GLYF`, version `u16`, height `u16`,
//! count `u32`, then per sample: width `u16`, label length `u8`, one `u8`
//! per label entry, and `height * width` row-major 8-bit pixels.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DomainRecipe, GrayImage, Sample, Split, HEIGHT};
use crate::error::{Error, Result};

pub const GLYF_MAGIC: &[u8; 4] = b"GLYF";
pub const GLYF_VERSION: u16 = 1;

/// Regeneration record for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub alphabet_id: String,
    pub recipe: DomainRecipe,
    pub split: Split,
    pub count: usize,
    /// SHA-256 of the dataset's `GLYF` encoding.
    pub digest: String,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, recipe: &DomainRecipe, dataset: &Dataset) -> Result<Self> {
        Ok(DatasetManifest {
            name: name.into(),
            alphabet_id: dataset.alphabet_id.clone(),
            recipe: recipe.clone(),
            split: dataset.split,
            count: dataset.len(),
            digest: dataset_digest(dataset)?,
        })
    }

    /// Rebuild the dataset from its recipe and compare digests.
    pub fn verify(&self) -> Result<bool> {
        let (train, test) = self.recipe.build()?;
        let d = match self.split {
            Split::Train => train,
            Split::Test => test,
        };
        Ok(dataset_digest(&d)? == self.digest)
    }
}

/// Hex SHA-256 of the `GLYF` encoding.
pub fn dataset_digest(dataset: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    write_glyf(&mut buf, dataset)?;
    Ok(hex::encode(Sha256::digest(&buf)))
}

pub fn write_glyf<W: Write>(mut w: W, dataset: &Dataset) -> Result<()> {
    let count = u32::try_from(dataset.len()).map_err(|_| Error::InvalidArgument("too many samples".into()))?;
    w.write_all(GLYF_MAGIC)?;
    w.write_all(&GLYF_VERSION.to_le_bytes())?;
    w.write_all(&(HEIGHT as u16).to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for s in &dataset.samples {
        if s.image.height != HEIGHT {
            return Err(Error::Shape(format!("image height {} != {HEIGHT}", s.image.height)));
        }
        let width = u16::try_from(s.image.width).map_err(|_| Error::Shape("image too wide".into()))?;
        w.write_all(&width.to_le_bytes())?;
        w.write_all(&[s.label.len() as u8])?;
        let labels: Vec<u8> = s
            .label
            .iter()
            .map(|&c| u8::try_from(c).map_err(|_| Error::InvalidArgument(format!("label {c} does not fit in u8"))))
            .collect::<Result<_>>()?;
        w.write_all(&labels)?;
        let pixels: Vec<u8> = s.image.pixels.iter().map(|&p| (p * 255.0).round() as u8).collect();
        w.write_all(&pixels)?;
    }
    Ok(())
}

/// Decode a `GLYF` stream. Pixels come back quantized to multiples of 1/255.
pub fn read_glyf<R: Read>(mut r: R) -> Result<Vec<Sample>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GLYF_MAGIC {
        return Err(Error::InvalidArgument("not a GLYF stream".into()));
    }
    let version = read_u16(&mut r)?;
    if version != GLYF_VERSION {
        return Err(Error::InvalidArgument(format!("unsupported GLYF version {version}")));
    }
    let height = read_u16(&mut r)? as usize;
    let mut count = [0u8; 4];
    r.read_exact(&mut count)?;
    let count = u32::from_le_bytes(count) as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let width = read_u16(&mut r)? as usize;
        let mut len = [0u8; 1];
        r.read_exact(&mut len)?;
        let mut labels = vec![0u8; len[0] as usize];
        r.read_exact(&mut labels)?;
        let mut pixels = vec![0u8; height * width];
        r.read_exact(&mut pixels)?;
        samples.push(Sample {
            image: GrayImage {
                height,
                width,
                pixels: pixels.iter().map(|&p| p as f32 / 255.0).collect(),
            },
            label: labels.iter().map(|&c| c as usize).collect(),
        });
    }
    Ok(samples)
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}
