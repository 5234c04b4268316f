//! Analytic gradients against central finite differences.

use mergelab_core::glyphgen::{build_domain, make_alphabet, DomainStyle};
use mergelab_core::nn::{backward, forward, init_model, sample_loss_grad, ModelSpec};
use mergelab_core::{ParamVector, Sample};
use rand::seq::index::sample as pick;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const COORDS_PER_BLOCK: usize = 50;

fn loss_at(p: &ParamVector<f64>, s: &Sample) -> f64 {
    sample_loss_grad(p, s).unwrap().0
}

/// Random θ: weights from `init_model`, then every entry (biases included)
/// jittered so no ReLU sits exactly at its kink.
fn random_theta(spec: &ModelSpec, seed: u64) -> ParamVector<f64> {
    let base: ParamVector<f64> = init_model(spec, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    let values = base.values().iter().map(|&v| v + r.random_range(-0.05..0.05)).collect();
    base.with_values(values).unwrap()
}

fn samples(seed: u64) -> Vec<Sample> {
    let a = make_alphabet(seed, 5, (2, 4)).unwrap();
    let style = DomainStyle::new(0.2, 2, 0.1, seed % 2 == 0, 2).unwrap();
    build_domain(&a, &style, 5, 1, seed, 3).unwrap().0.samples
}

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn analytic_matches_finite_differences() {
    let spec = ModelSpec::for_glyphs(5);
    let mut worst = 0.0f64;
    for pair in 0..5u64 {
        let theta = random_theta(&spec, 100 + pair);
        let sample = &samples(10 + pair)[pair as usize];
        let (_, grad) = sample_loss_grad(&theta, sample).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(pair);
        for block in theta.layout().blocks() {
            let n = COORDS_PER_BLOCK.min(block.len());
            for k in pick(&mut r, block.len(), n) {
                let i = block.offset + k;
                let mut up = theta.values().to_vec();
                up[i] += H;
                let mut down = theta.values().to_vec();
                down[i] -= H;
                let fd = (loss_at(&theta.with_values(up).unwrap(), sample)
                    - loss_at(&theta.with_values(down).unwrap(), sample))
                    / (2.0 * H);
                let err = relative_error(grad[i], fd);
                worst = worst.max(err);
                assert!(err < 1e-5, "pair {pair} {}[{k}]: analytic {} fd {fd}", block.name, grad[i]);
            }
        }
    }
    eprintln!("worst relative error {worst:.3e}");
}

#[test]
fn batch_gradient_is_mean_of_sample_gradients() {
    let spec = ModelSpec::for_glyphs(5);
    let theta = random_theta(&spec, 1);
    let batch = samples(3);
    let (loss, grad) = backward(&theta, &batch).unwrap();
    let parts: Vec<_> = batch.iter().map(|s| sample_loss_grad(&theta, s).unwrap()).collect();
    let mean_loss = parts.iter().map(|p| p.0).sum::<f64>() / batch.len() as f64;
    assert!((loss - mean_loss).abs() < 1e-12);
    for i in (0..grad.len()).step_by(37) {
        let m = parts.iter().map(|p| p.1[i]).sum::<f64>() / batch.len() as f64;
        assert!((grad[i] - m).abs() < 1e-12);
    }
}

#[test]
fn fuzzed_inputs_stay_finite() {
    let spec = ModelSpec::for_glyphs(5);
    let mut r = ChaCha8Rng::seed_from_u64(99);
    for i in 0..100u64 {
        let theta = random_theta(&spec, i);
        let width = r.random_range(16..80);
        let pixels = (0..16 * width).map(|_| r.random::<f32>()).collect();
        let image = mergelab_core::GrayImage {
            height: 16,
            width,
            pixels,
        };
        let logits = forward(&theta, &image).unwrap();
        assert!(logits.data.iter().all(|v| v.is_finite()));
        let len = r.random_range(1..=(width / 16).min(3));
        let label: Vec<usize> = (0..len).map(|_| r.random_range(0..5)).collect();
        let sample = Sample { image, label };
        if let Ok((loss, grad)) = backward(&theta, std::slice::from_ref(&sample)) {
            assert!(loss.is_finite());
            assert!(grad.iter().all(|g| g.is_finite()));
        }
    }
}

#[test]
fn forward_and_backward_are_pure() {
    let spec = ModelSpec::for_glyphs(5);
    let theta = random_theta(&spec, 4);
    let batch = samples(6);
    let a = backward(&theta, &batch).unwrap();
    let _ = backward(&theta, &batch[1..]).unwrap();
    let b = backward(&theta, &batch).unwrap();
    assert_eq!(a, b);
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = single.install(|| backward(&theta, &batch).unwrap());
    assert_eq!(a, c);
}
