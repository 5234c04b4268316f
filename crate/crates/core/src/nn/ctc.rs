//! CTC loss by the log-space forward–backward recursion.

use super::model::Logits;
use super::BLANK;
use crate::error::{Error, Result};
use crate::scalar::{log_add_exp, Real};

/// Minimum number of frames that can emit `label`: one per symbol plus one
/// separating blank per adjacent repeat.
pub fn required_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_softmax<S: Real>(row: &[S]) -> Vec<S> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Negative log-likelihood of `label` (glyph indices) under `logits`, and its
/// gradient with respect to the logits.
///
/// Glyph `g` is scored by class `g + 1`; class 0 is the blank.
pub fn ctc_loss<S: Real>(logits: &Logits<S>, label: &[usize]) -> Result<(S, Vec<S>)> {
    let (frames, classes) = (logits.frames, logits.classes);
    if let Some(&g) = label.iter().find(|&&g| g + 1 >= classes) {
        return Err(Error::LabelOutOfRange {
            index: g,
            glyph_count: classes - 1,
        });
    }
    let required = required_frames(label);
    if frames < required {
        return Err(Error::InfeasibleLabel { frames, required });
    }

    // blank-interleaved label: b l1 b l2 ... lL b
    let ext: Vec<usize> = (0..2 * label.len() + 1)
        .map(|s| if s % 2 == 0 { BLANK } else { label[s / 2] + 1 })
        .collect();
    let n = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let lp: Vec<Vec<S>> = (0..frames).map(|t| log_softmax(logits.frame(t))).collect();
    let ninf = S::neg_infinity();

    let mut alpha = vec![ninf; frames * n];
    alpha[0] = lp[0][ext[0]];
    if n > 1 {
        alpha[1] = lp[0][ext[1]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * n);
        let prev = &prev[(t - 1) * n..];
        for s in 0..n {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add_exp(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_add_exp(a, prev[s - 2]);
            }
            cur[s] = if a == ninf { ninf } else { a + lp[t][ext[s]] };
        }
    }
    let last = (frames - 1) * n;
    let log_p = if n > 1 {
        log_add_exp(alpha[last + n - 1], alpha[last + n - 2])
    } else {
        alpha[last]
    };

    // beta[t][s]: log-probability of the suffix after frame t given state s at t
    let mut beta = vec![ninf; frames * n];
    beta[last + n - 1] = S::zero();
    if n > 1 {
        beta[last + n - 2] = S::zero();
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * n);
        let cur = &mut cur[t * n..];
        let emit = |s: usize| next[s] + lp[t + 1][ext[s]];
        for s in 0..n {
            let mut b = emit(s);
            if s + 1 < n {
                b = log_add_exp(b, emit(s + 1));
            }
            if s + 2 < n && skip(s + 2) {
                b = log_add_exp(b, emit(s + 2));
            }
            cur[s] = b;
        }
    }

    let mut grad = vec![S::zero(); frames * classes];
    for t in 0..frames {
        let g = &mut grad[t * classes..(t + 1) * classes];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = lp[t][k].exp();
        }
        for s in 0..n {
            let a = alpha[t * n + s];
            let b = beta[t * n + s];
            if a == ninf || b == ninf {
                continue;
            }
            g[ext[s]] -= (a + b - log_p).exp();
        }
    }
    let loss = -log_p;
    Ok((if loss < S::zero() { S::zero() } else { loss }, grad))
}
