use mergelab_core::eval::{cer, evaluate, levenshtein, sequence_accuracy};
use mergelab_core::glyphgen::{build_domain, make_alphabet, DomainStyle};
use mergelab_core::nn::{init_model, ModelSpec};
use mergelab_core::trainer::update;
use mergelab_core::{ParamVector, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Exponential recursion straight from the definition.
fn naive(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive(ra, rb) + usize::from(x != y);
            sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
        }
    }
}

#[test]
fn levenshtein_matches_recursive_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let a: Vec<u8> = (0..r.random_range(0..=6)).map(|_| r.random_range(0..3)).collect();
        let b: Vec<u8> = (0..r.random_range(0..=6)).map(|_| r.random_range(0..3)).collect();
        assert_eq!(levenshtein(&a, &b), naive(&a, &b), "{a:?} {b:?}");
    }
}

proptest! {
    #[test]
    fn levenshtein_is_a_metric(
        a in prop::collection::vec(0u8..4, 0..8),
        b in prop::collection::vec(0u8..4, 0..8),
        c in prop::collection::vec(0u8..4, 0..8),
    ) {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        prop_assert_eq!(levenshtein(&a, &a), 0);
    }
}

#[test]
fn untrained_model_is_near_zero_accuracy() {
    let a = make_alphabet(4, 6, (2, 4)).unwrap();
    let (_, test) = build_domain(&a, &DomainStyle::canonical(), 1, 200, 2, 4).unwrap();
    let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(6), 3).unwrap();
    let acc = sequence_accuracy(&theta, &test).unwrap();
    assert!(acc < 0.05, "{acc}");
    assert!(cer(&theta, &test).unwrap() > 0.5);
}

#[test]
fn overfit_model_scores_perfectly_and_metrics_agree() {
    let a = make_alphabet(4, 3, (2, 4)).unwrap();
    let (train, _) = build_domain(&a, &DomainStyle::canonical(), 16, 1, 2, 2).unwrap();
    let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(3), 3).unwrap();
    let mut cfg = TrainConfig::new(60, 0);
    cfg.batch_size = 8;
    let fit = update(&train, &theta, &cfg).unwrap().params;
    let report = evaluate(&fit, &train, true).unwrap();
    assert_eq!(report.seq_accuracy, 1.0);
    assert_eq!(report.cer, 0.0);
    assert_eq!(report.per_sample.unwrap().len(), 16);

    // accuracy = 1 iff cer = 0, and metrics ignore sample order
    let untrained = evaluate(&theta, &train, false).unwrap();
    assert!(untrained.seq_accuracy < 1.0 && untrained.cer > 0.0);
    let mut reversed = train.clone();
    reversed.samples.reverse();
    assert_eq!(evaluate(&theta, &reversed, false).unwrap().cer, untrained.cer);
}

#[test]
fn single_wrong_sample_scores_zero_and_empty_is_rejected() {
    let a = make_alphabet(4, 6, (2, 4)).unwrap();
    let (_, mut test) = build_domain(&a, &DomainStyle::canonical(), 1, 1, 2, 4).unwrap();
    let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(6), 3).unwrap();
    let pred = evaluate(&theta, &test, true).unwrap().per_sample.unwrap()[0].0.clone();
    // force a reference that cannot equal the prediction
    test.samples[0].label = if pred == vec![0] { vec![1] } else { vec![0] };
    assert_eq!(sequence_accuracy(&theta, &test).unwrap(), 0.0);
    test.samples.clear();
    assert!(sequence_accuracy(&theta, &test).is_err());
    assert!(cer(&theta, &test).is_err());
}
