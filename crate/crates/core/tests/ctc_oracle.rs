//! CTC loss against exhaustive alignment enumeration.

use mergelab_core::nn::{ctc_loss, required_frames};
use mergelab_core::Logits;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Collapse a class path: merge repeats, then drop blanks (class 0).
fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c - 1);
        }
        prev = Some(c);
    }
    out
}

/// −log Σ over all class paths that collapse to `label` of Π softmax probabilities.
fn brute_force(logits: &[Vec<f64>], label: &[usize]) -> f64 {
    let frames = logits.len();
    let classes = logits[0].len();
    let probs: Vec<Vec<f64>> = logits
        .iter()
        .map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(|v| v.exp() / z).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    for code in 0..classes.pow(frames as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % classes;
            c /= classes;
        }
        if collapse(&path) == label {
            total += path.iter().enumerate().map(|(t, &k)| probs[t][k]).product::<f64>();
        }
    }
    -total.ln()
}

fn labels(glyphs: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for len in 1..=max_len {
        let mut cur = vec![vec![]];
        for _ in 0..len {
            cur = cur
                .into_iter()
                .flat_map(|l: Vec<usize>| {
                    (0..glyphs).map(move |g| {
                        let mut n = l.clone();
                        n.push(g);
                        n
                    })
                })
                .collect();
        }
        out.extend(cur);
    }
    out
}

#[test]
fn matches_enumeration_on_small_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    for classes in 2..=3 {
        for frames in 1..=4 {
            for label in labels(classes - 1, 2) {
                if required_frames(&label) > frames {
                    continue;
                }
                for _ in 0..20 {
                    let rows: Vec<Vec<f64>> = (0..frames)
                        .map(|_| (0..classes).map(|_| rng.random_range(-4.0..4.0)).collect())
                        .collect();
                    let logits = Logits::new(frames, classes, rows.concat()).unwrap();
                    let (loss, _) = ctc_loss(&logits, &label).unwrap();
                    let oracle = brute_force(&rows, &label);
                    assert!(
                        (loss - oracle).abs() < 1e-8,
                        "F={frames} C={classes} label={label:?}: {loss} vs {oracle}"
                    );
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 500);
}

#[test]
fn uniform_logits_hand_enumeration() {
    let rows = vec![vec![0.0; 3]; 2];
    let oracle = brute_force(&rows, &[0]);
    assert!((oracle - 3f64.ln()).abs() < 1e-12);
    let (loss, _) = ctc_loss(&Logits::new(2, 3, rows.concat()).unwrap(), &[0]).unwrap();
    assert!((loss - oracle).abs() < 1e-12);
}

#[test]
fn gradient_matches_finite_differences_of_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (frames, classes) = (4, 3);
    let label = [1, 0];
    let rows: Vec<Vec<f64>> = (0..frames)
        .map(|_| (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let (_, grad) = ctc_loss(&Logits::new(frames, classes, rows.concat()).unwrap(), &label).unwrap();
    let h = 1e-6;
    for t in 0..frames {
        for k in 0..classes {
            let mut up = rows.clone();
            up[t][k] += h;
            let mut down = rows.clone();
            down[t][k] -= h;
            let fd = (brute_force(&up, &label) - brute_force(&down, &label)) / (2.0 * h);
            assert!((fd - grad[t * classes + k]).abs() < 1e-7, "({t},{k}): {fd} vs {}", grad[t * classes + k]);
        }
    }
}

#[test]
fn f32_agrees_with_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
    let l64 = Logits::new(10, 3, data.clone()).unwrap();
    let l32 = Logits::new(10, 3, data.iter().map(|&v| v as f32).collect()).unwrap();
    let (a, _) = ctc_loss(&l64, &[0, 1, 1]).unwrap();
    let (b, _) = ctc_loss(&l32, &[0, 1, 1]).unwrap();
    assert!((a - b as f64).abs() < 1e-4);
}
