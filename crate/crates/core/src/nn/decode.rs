use super::model::Logits;
use super::BLANK;
use crate::scalar::Real;

/// Best-path decoding: per-frame argmax (ties go to the lowest class),
/// collapse repeats, drop blanks. Returns glyph indices.
pub fn greedy_decode<S: Real>(logits: &Logits<S>) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..logits.frames {
        let row = logits.frame(t);
        let best = (1..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        if prev != Some(best) && best != BLANK {
            out.push(best - 1);
        }
        prev = Some(best);
    }
    out
}
