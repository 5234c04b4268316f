use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{glyph_cell, Alphabet, DomainStyle, CELL, HEIGHT, MAX_LABEL_LEN};
use crate::error::{Error, Result};
use crate::rng;

/// Row-major grayscale image with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl GrayImage {
    pub fn zeros(height: usize, width: usize) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

/// A rendered text strip and its glyph-index label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image: GrayImage,
    pub label: Vec<usize>,
}

/// Render `label` with `alphabet` under `style`. All randomness (spacing and
/// pixel noise) comes from `sample_seed`.
pub fn render_sample(alphabet: &Alphabet, label: &[usize], style: &DomainStyle, sample_seed: u64) -> Result<Sample> {
    if label.is_empty() {
        return Err(Error::InvalidArgument("empty label".into()));
    }
    if label.len() > MAX_LABEL_LEN {
        return Err(Error::InvalidArgument(format!(
            "label length {} exceeds {MAX_LABEL_LEN}",
            label.len()
        )));
    }
    if let Some(&index) = label.iter().find(|&&c| c >= alphabet.glyph_count) {
        return Err(Error::LabelOutOfRange {
            index,
            glyph_count: alphabet.glyph_count,
        });
    }

    let mut spacing = rng::stream(sample_seed, &[rng::tag("spacing")]);
    let gaps: Vec<usize> = label
        .iter()
        .map(|_| spacing.random_range(0..=style.spacing_jitter() as usize))
        .collect();
    let width = CELL * label.len() + gaps.iter().sum::<usize>();

    let mut image = GrayImage::zeros(HEIGHT, width);
    let mut x0 = 0;
    for (&c, &gap) in label.iter().zip(&gaps) {
        x0 += gap;
        let cell = glyph_cell(alphabet.glyph_seeds[c], alphabet.stroke_budget, style.slant(), style.stroke_width());
        for y in 0..CELL {
            for x in 0..CELL {
                if cell[y * CELL + x] == 1 {
                    image.pixels[y * width + x0 + x] = 1.0;
                }
            }
        }
        x0 += CELL;
    }

    if style.noise_sigma() > 0.0 {
        let mut noise = rng::stream(sample_seed, &[rng::tag("noise")]);
        let normal = Normal::new(0.0, style.noise_sigma()).expect("sigma validated by DomainStyle");
        for p in image.pixels.iter_mut() {
            let v = *p as f64 + normal.sample(&mut noise);
            *p = v.clamp(0.0, 1.0) as f32;
        }
    }
    if style.invert() {
        for p in image.pixels.iter_mut() {
            *p = 1.0 - *p;
        }
    }

    Ok(Sample {
        image,
        label: label.to_vec(),
    })
}
