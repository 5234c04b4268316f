use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render_sample, Alphabet, AlphabetRecipe, DomainStyle, Sample, DEFAULT_MAX_LABEL_LEN, MAX_LABEL_LEN};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => rng::tag("train"),
            Split::Test => rng::tag("test"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// A seeded collection of samples over one alphabet.
///
/// Domains built by [`build_domain`] carry a single style; pooled datasets
/// list every style they were assembled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub alphabet_id: String,
    pub glyph_count: usize,
    pub styles: Vec<DomainStyle>,
    pub seed: u64,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Concatenate datasets over the same alphabet, in the given order.
    pub fn pooled(name: impl Into<String>, parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot pool zero datasets".into()))?;
        if let Some(p) = parts.iter().find(|p| p.alphabet_id != first.alphabet_id || p.split != first.split) {
            return Err(Error::InvalidArgument(format!(
                "cannot pool {} ({}, {}) with {} ({}, {})",
                p.name,
                p.alphabet_id,
                p.split.as_str(),
                first.name,
                first.alphabet_id,
                first.split.as_str()
            )));
        }
        let mut styles = Vec::new();
        for s in parts.iter().flat_map(|p| &p.styles) {
            if !styles.contains(s) {
                styles.push(*s);
            }
        }
        let seeds: Vec<u64> = parts.iter().map(|p| p.seed).collect();
        Ok(Dataset {
            name: name.into(),
            alphabet_id: first.alphabet_id.clone(),
            glyph_count: first.glyph_count,
            styles,
            seed: rng::derive(rng::tag("pool"), &seeds),
            split: first.split,
            samples: parts.iter().flat_map(|p| p.samples.iter().cloned()).collect(),
        })
    }
}

/// Everything needed to regenerate a train/test pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainRecipe {
    pub alphabet: AlphabetRecipe,
    pub style: DomainStyle,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_LABEL_LEN
}

impl DomainRecipe {
    pub fn build(&self) -> Result<(Dataset, Dataset)> {
        let alphabet = self.alphabet.build()?;
        build_domain(&alphabet, &self.style, self.n_train, self.n_test, self.seed, self.max_len)
    }
}

/// Draw a train and a test split from the domain (alphabet, style).
///
/// Label lengths are uniform in `[1, max_len]` and classes uniform over the
/// alphabet. Sample `i` of a split owns the stream `(seed, split, i)`, so
/// generation order does not affect the result.
pub fn build_domain(
    alphabet: &Alphabet,
    style: &DomainStyle,
    n_train: usize,
    n_test: usize,
    seed: u64,
    max_len: usize,
) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidArgument(format!(
            "split sizes must be >= 1 (n_train={n_train}, n_test={n_test})"
        )));
    }
    if !(1..=MAX_LABEL_LEN).contains(&max_len) {
        return Err(Error::InvalidArgument(format!("max_len must be in [1, {MAX_LABEL_LEN}], got {max_len}")));
    }
    let train = build_split(alphabet, style, n_train, seed, max_len, Split::Train)?;
    let test = build_split(alphabet, style, n_test, seed, max_len, Split::Test)?;
    Ok((train, test))
}

fn build_split(
    alphabet: &Alphabet,
    style: &DomainStyle,
    count: usize,
    seed: u64,
    max_len: usize,
    split: Split,
) -> Result<Dataset> {
    let samples = (0..count)
        .into_par_iter()
        .map(|i| {
            let sample_seed = rng::derive(seed, &[split.stream(), i as u64]);
            let mut r = rng::stream(sample_seed, &[rng::tag("label")]);
            let len = r.random_range(1..=max_len);
            let label: Vec<usize> = (0..len).map(|_| r.random_range(0..alphabet.glyph_count)).collect();
            render_sample(alphabet, &label, style, rng::derive(sample_seed, &[rng::tag("render")]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: format!("{}:{}", alphabet.id, split.as_str()),
        alphabet_id: alphabet.id.clone(),
        glyph_count: alphabet.glyph_count,
        styles: vec![*style],
        seed,
        split,
        samples,
    })
}

/// Keep the samples selected by the first `ceil(fraction * n)` entries of a
/// seeded permutation, in their original order.
///
/// All fractions share one permutation per seed, so smaller subsamples are
/// subsets of larger ones and `fraction = 1` returns the dataset unchanged.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.len();
    // the epsilon absorbs representation error such as 0.6 * 100 = 60.000000000000007
    let keep = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.min(n);
    if keep == 0 {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} of {n} samples leaves an empty dataset"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::tag("subsample")]));
    let mut picked = order[..keep].to_vec();
    picked.sort_unstable();
    Ok(Dataset {
        name: dataset.name.clone(),
        alphabet_id: dataset.alphabet_id.clone(),
        glyph_count: dataset.glyph_count,
        styles: dataset.styles.clone(),
        seed: dataset.seed,
        split: dataset.split,
        samples: picked.iter().map(|&i| dataset.samples[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphgen::make_alphabet;

    fn domain(n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let a = make_alphabet(7, 10, (2, 4)).unwrap();
        let s = DomainStyle::new(0.1, 2, 0.05, false, 2).unwrap();
        build_domain(&a, &s, n_train, n_test, seed, 4)
    }

    #[test]
    fn reproducible_pair() {
        assert_eq!(domain(100, 20, 3).unwrap(), domain(100, 20, 3).unwrap());
    }

    #[test]
    fn single_sample_splits_differ() {
        let (train, test) = domain(1, 1, 3).unwrap();
        assert_eq!(train.len(), 1);
        assert_eq!(test.len(), 1);
        assert_ne!(train.samples[0], test.samples[0]);
    }

    #[test]
    fn empty_split_rejected() {
        assert!(domain(0, 20, 3).is_err());
        assert!(domain(20, 0, 3).is_err());
    }

    #[test]
    fn labels_respect_length_bounds() {
        let (train, _) = domain(200, 1, 5).unwrap();
        assert!(train.samples.iter().all(|s| (1..=4).contains(&s.label.len())));
        assert!(train.samples.iter().any(|s| s.label.len() == 4));
        assert!(train.samples.iter().any(|s| s.label.len() == 1));
        assert!(train.samples.iter().all(|s| s.image.width >= 16 * s.label.len()));
    }

    #[test]
    fn subsample_counts() {
        let (d, _) = domain(10, 1, 1).unwrap();
        assert_eq!(subsample(&d, 0.25, 4).unwrap().len(), 3);
        assert_eq!(subsample(&d, 1.0, 4).unwrap(), d);
        assert!(subsample(&d, 0.0, 4).is_err());
        assert!(subsample(&d, 1.5, 4).is_err());
        let (big, _) = domain(100, 1, 1).unwrap();
        assert_eq!(subsample(&big, 0.6, 4).unwrap().len(), 60);
        assert_eq!(subsample(&big, 0.2, 4).unwrap().len(), 20);
    }

    #[test]
    fn subsample_nesting() {
        let (d, _) = domain(100, 1, 2).unwrap();
        let small = subsample(&d, 0.2, 9).unwrap();
        let large = subsample(&d, 0.6, 9).unwrap();
        assert!(small.samples.iter().all(|s| large.samples.contains(s)));
    }

    #[test]
    fn pooling_checks_alphabet() {
        let (a, _) = domain(5, 1, 1).unwrap();
        let (b, _) = domain(7, 1, 2).unwrap();
        let p = Dataset::pooled("p", &[&a, &b]).unwrap();
        assert_eq!(p.len(), 12);
        let other = make_alphabet(99, 10, (2, 4)).unwrap();
        let (c, _) = build_domain(&other, &DomainStyle::canonical(), 3, 1, 1, 3).unwrap();
        assert!(Dataset::pooled("q", &[&a, &c]).is_err());
    }
}
