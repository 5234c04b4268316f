use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rendering style of a domain. Fields are range-checked on construction and
/// on deserialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawStyle", deny_unknown_fields)]
pub struct DomainStyle {
    slant: f64,
    stroke_width: u8,
    noise_sigma: f64,
    invert: bool,
    spacing_jitter: u8,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStyle {
    slant: f64,
    stroke_width: u8,
    noise_sigma: f64,
    invert: bool,
    spacing_jitter: u8,
}

impl TryFrom<RawStyle> for DomainStyle {
    type Error = Error;

    fn try_from(r: RawStyle) -> Result<Self> {
        DomainStyle::new(r.slant, r.stroke_width, r.noise_sigma, r.invert, r.spacing_jitter)
    }
}

impl DomainStyle {
    pub fn new(
        slant: f64,
        stroke_width: u8,
        noise_sigma: f64,
        invert: bool,
        spacing_jitter: u8,
    ) -> Result<Self> {
        if !(-0.5..=0.5).contains(&slant) {
            return Err(Error::InvalidArgument(format!("slant {slant} outside [-0.5, 0.5]")));
        }
        if !(1..=3).contains(&stroke_width) {
            return Err(Error::InvalidArgument(format!("stroke_width {stroke_width} not in {{1,2,3}}")));
        }
        if !(0.0..=0.3).contains(&noise_sigma) {
            return Err(Error::InvalidArgument(format!("noise_sigma {noise_sigma} outside [0, 0.3]")));
        }
        if spacing_jitter > 3 {
            return Err(Error::InvalidArgument(format!("spacing_jitter {spacing_jitter} outside [0, 3]")));
        }
        Ok(DomainStyle {
            slant,
            stroke_width,
            noise_sigma,
            invert,
            spacing_jitter,
        })
    }

    /// Upright one-pixel strokes, no noise, no inversion, no spacing jitter.
    pub fn canonical() -> Self {
        DomainStyle {
            slant: 0.0,
            stroke_width: 1,
            noise_sigma: 0.0,
            invert: false,
            spacing_jitter: 0,
        }
    }

    pub fn slant(&self) -> f64 {
        self.slant
    }

    pub fn stroke_width(&self) -> u8 {
        self.stroke_width
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }

    pub fn invert(&self) -> bool {
        self.invert
    }

    pub fn spacing_jitter(&self) -> u8 {
        self.spacing_jitter
    }

    pub fn with_noise(self, noise_sigma: f64) -> Result<Self> {
        Self::new(self.slant, self.stroke_width, noise_sigma, self.invert, self.spacing_jitter)
    }

    pub fn with_invert(self, invert: bool) -> Self {
        DomainStyle { invert, ..self }
    }
}

impl Default for DomainStyle {
    fn default() -> Self {
        Self::canonical()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_fields() {
        assert!(DomainStyle::new(0.6, 1, 0.0, false, 0).is_err());
        assert!(DomainStyle::new(0.0, 0, 0.0, false, 0).is_err());
        assert!(DomainStyle::new(0.0, 4, 0.0, false, 0).is_err());
        assert!(DomainStyle::new(0.0, 1, 0.31, false, 0).is_err());
        assert!(DomainStyle::new(0.0, 1, -0.01, false, 0).is_err());
        assert!(DomainStyle::new(0.0, 1, 0.0, false, 4).is_err());
        assert!(DomainStyle::new(-0.5, 3, 0.3, true, 3).is_ok());
    }

    #[test]
    fn deserialization_validates() {
        let ok = r#"{"slant":0.2,"stroke_width":2,"noise_sigma":0.1,"invert":true,"spacing_jitter":1}"#;
        let s: DomainStyle = serde_json::from_str(ok).unwrap();
        assert_eq!(s.stroke_width(), 2);
        let bad = r#"{"slant":0.9,"stroke_width":2,"noise_sigma":0.1,"invert":true,"spacing_jitter":1}"#;
        assert!(serde_json::from_str::<DomainStyle>(bad).is_err());
        let unknown = r#"{"slant":0.0,"stroke_width":1,"noise_sigma":0.0,"invert":false,"spacing_jitter":0,"blur":1}"#;
        assert!(serde_json::from_str::<DomainStyle>(unknown).is_err());
    }
}
