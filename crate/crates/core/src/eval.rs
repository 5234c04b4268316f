//! Exact-match sequence accuracy and character error rate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphgen::Dataset;
use crate::nn::{forward, greedy_decode, ParamVector};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub n: usize,
    pub seq_accuracy: f64,
    pub cer: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<(Vec<usize>, Vec<usize>)>>,
}

/// Unit-cost edit distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

/// Greedy predictions for every sample, in dataset order.
pub fn predict<S: Real>(params: &ParamVector<S>, dataset: &Dataset) -> Result<Vec<Vec<usize>>> {
    if dataset.glyph_count + 1 != params.spec().num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset {} has {} glyphs but the model scores {} classes",
            dataset.name,
            dataset.glyph_count,
            params.spec().num_classes
        )));
    }
    dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            forward(params, &s.image)
                .map(|l| greedy_decode(&l))
                .map_err(|e| e.at_sample(i))
        })
        .collect()
}

pub fn evaluate<S: Real>(params: &ParamVector<S>, dataset: &Dataset, keep_samples: bool) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {} is empty", dataset.name)));
    }
    let preds = predict(params, dataset)?;
    let mut exact = 0usize;
    let mut edits = 0usize;
    let mut chars = 0usize;
    for (p, s) in preds.iter().zip(&dataset.samples) {
        exact += usize::from(*p == s.label);
        edits += levenshtein(p, &s.label);
        chars += s.label.len();
    }
    let per_sample = keep_samples.then(|| {
        preds
            .into_iter()
            .zip(&dataset.samples)
            .map(|(p, s)| (p, s.label.clone()))
            .collect()
    });
    Ok(MetricsReport {
        dataset_id: dataset.name.clone(),
        n: dataset.len(),
        seq_accuracy: exact as f64 / dataset.len() as f64,
        cer: if chars == 0 { 0.0 } else { edits as f64 / chars as f64 },
        per_sample,
    })
}

/// Fraction of samples decoded exactly.
pub fn sequence_accuracy<S: Real>(params: &ParamVector<S>, dataset: &Dataset) -> Result<f64> {
    evaluate(params, dataset, false).map(|r| r.seq_accuracy)
}

/// Σ edit distance / Σ reference length.
pub fn cer<S: Real>(params: &ParamVector<S>, dataset: &Dataset) -> Result<f64> {
    evaluate(params, dataset, false).map(|r| r.cer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levenshtein_basics() {
        assert_eq!(levenshtein(b"ab", b"b"), 1);
        assert_eq!(levenshtein(b"", b"abc"), 3);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
        assert_eq!(levenshtein(b"same", b"same"), 0);
        assert_eq!(levenshtein::<u8>(&[], &[]), 0);
    }
}
