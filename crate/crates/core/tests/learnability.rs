use mergelab_core::eval::sequence_accuracy;
use mergelab_core::glyphgen::{build_domain, make_alphabet, DomainStyle};
use mergelab_core::nn::{backward, init_model, ModelSpec};
use mergelab_core::trainer::update;
use mergelab_core::{ParamVector, TrainConfig};

#[test]
fn two_hundred_adam_steps_halve_the_loss() {
    let a = make_alphabet(1, 2, (2, 4)).unwrap();
    let (train, _) = build_domain(&a, &DomainStyle::canonical(), 64, 1, 3, 3).unwrap();
    let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(2), 0).unwrap();
    let (before, _) = backward(&theta, &train.samples).unwrap();
    let mut cfg = TrainConfig::new(50, 1);
    cfg.batch_size = 16;
    let out = update(&train, &theta, &cfg).unwrap();
    assert_eq!(out.steps, 200);
    let (after, _) = backward(&out.params, &train.samples).unwrap();
    eprintln!("loss {before:.4} -> {after:.4}");
    assert!(after <= 0.5 * before, "loss {before} -> {after}");
    assert!(out.loss_trace.iter().all(|l| l.is_finite()));
    assert!(sequence_accuracy(&out.params, &train).unwrap() > 0.5);
}

#[test]
fn f32_model_trains_too() {
    let a = make_alphabet(1, 2, (2, 4)).unwrap();
    let (train, _) = build_domain(&a, &DomainStyle::canonical(), 32, 1, 3, 2).unwrap();
    let theta: ParamVector<f32> = init_model(&ModelSpec::for_glyphs(2), 0).unwrap();
    let mut cfg = TrainConfig::new(10, 1);
    cfg.batch_size = 8;
    let out = update(&train, &theta, &cfg).unwrap();
    assert!(out.loss_trace.last().unwrap() < &out.loss_trace[0]);
}
