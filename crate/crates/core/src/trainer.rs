//! The update function: `k` epochs of Adam on CTC loss over one dataset.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glyphgen::{Dataset, Sample};
use crate::nn::{backward_refs, init_model, ModelSpec, ParamVector};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::rng;
use crate::scalar::Real;

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_LR: f64 = 1e-3;
pub const DEFAULT_TRANSFER_EPOCHS: usize = 10;
pub const DEFAULT_PRETRAIN_EPOCHS: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

impl TrainConfig {
    pub fn new(epochs: usize, shuffle_seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: DEFAULT_BATCH_SIZE,
            lr: DEFAULT_LR,
            shuffle_seed,
            max_steps: None,
        }
    }

    pub fn with_epochs(&self, epochs: usize) -> Self {
        TrainConfig { epochs, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// Result of running the update function.
#[derive(Clone, Debug)]
pub struct Update<S> {
    pub params: ParamVector<S>,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
    /// Optimizer steps taken.
    pub steps: usize,
}

/// Run `cfg.epochs` epochs of Adam from `theta` with a fresh optimizer.
///
/// Epoch `e` visits the samples in the order of the permutation drawn from
/// stream `(shuffle_seed, e)`.
pub fn update<S: Real>(dataset: &Dataset, theta: &ParamVector<S>, cfg: &TrainConfig) -> Result<Update<S>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(format!("dataset {} is empty", dataset.name)));
    }
    if dataset.glyph_count + 1 != theta.spec().num_classes {
        return Err(Error::InvalidArgument(format!(
            "dataset {} has {} glyphs but the model scores {} classes",
            dataset.name,
            dataset.glyph_count,
            theta.spec().num_classes
        )));
    }
    let mut params = theta.clone();
    let mut state = AdamState::new(params.len(), AdamHyper::<S>::with_lr(cfg.lr));
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(cfg.shuffle_seed, &[rng::tag("epoch"), epoch as u64]));
        let mut total = 0.0;
        let mut seen = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|cap| steps >= cap) {
                if seen > 0 {
                    trace.push(total / seen as f64);
                }
                break 'epochs;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let (loss, grad) = backward_refs(&params, &batch).map_err(|e| match e {
                Error::Sample { index, source } => Error::Sample {
                    index: chunk[index],
                    source,
                },
                other => other,
            })?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("loss at epoch {epoch}, step {steps}"),
                    index: steps,
                });
            }
            (state, params) = adam_step(&state, &params, &grad)?;
            total += loss * chunk.len() as f64;
            seen += chunk.len();
            steps += 1;
        }
        trace.push(total / seen as f64);
    }
    Ok(Update {
        params,
        loss_trace: trace,
        steps,
    })
}

/// Train the seed model θ₀ from a fresh initialization.
pub fn pretrain_seed<S: Real>(z: &Dataset, spec: &ModelSpec, cfg: &TrainConfig, seed: u64) -> Result<Update<S>> {
    let init = init_model(spec, seed)?;
    update(z, &init, cfg)
}

/// Resize the classifier to `num_classes`, keeping every encoder weight.
/// The new head is initialized exactly as `init_model` would with `seed`.
pub fn adapt_head<S: Real>(theta: &ParamVector<S>, num_classes: usize, seed: u64) -> Result<ParamVector<S>> {
    if theta.spec().num_classes == num_classes {
        return Ok(theta.clone());
    }
    let fresh: ParamVector<S> = init_model(&theta.spec().with_num_classes(num_classes), seed)?;
    let carry = theta.layout().encoder_len();
    debug_assert_eq!(carry, fresh.layout().encoder_len());
    let mut values = fresh.into_values();
    values[..carry].copy_from_slice(&theta.values()[..carry]);
    ParamVector::new(theta.spec().with_num_classes(num_classes).layout()?, values)
}

/// Fine-tune a seed model on a (possibly new-alphabet) target dataset.
pub fn transfer_finetune<S: Real>(
    g: &Dataset,
    theta_seed: &ParamVector<S>,
    cfg: &TrainConfig,
    head_seed: u64,
) -> Result<Update<S>> {
    let start = adapt_head(theta_seed, g.glyph_count + 1, head_seed)?;
    update(g, &start, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glyphgen::{build_domain, make_alphabet, DomainStyle};
    use crate::nn::backward;

    fn tiny(glyphs: usize, n: usize) -> Dataset {
        let a = make_alphabet(5, glyphs, (2, 3)).unwrap();
        build_domain(&a, &DomainStyle::canonical(), n, 1, 1, 2).unwrap().0
    }

    #[test]
    fn one_epoch_one_sample_is_one_adam_step() {
        let d = tiny(3, 1);
        let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(3), 2).unwrap();
        let out = update(&d, &theta, &TrainConfig::new(1, 0)).unwrap();
        let (_, g) = backward(&theta, &d.samples).unwrap();
        let st = AdamState::new(theta.len(), AdamHyper::with_lr(DEFAULT_LR));
        let (_, manual) = adam_step(&st, &theta, &g).unwrap();
        assert_eq!(out.params, manual);
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn deterministic() {
        let d = tiny(3, 10);
        let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(3), 2).unwrap();
        let mut cfg = TrainConfig::new(2, 4);
        cfg.batch_size = 4;
        let a = update(&d, &theta, &cfg).unwrap();
        let b = update(&d, &theta, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.steps, 6);
    }

    #[test]
    fn optimizer_state_persists_within_a_call() {
        let d = tiny(3, 10);
        let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(3), 2).unwrap();
        let mut cfg = TrainConfig::new(2, 4);
        cfg.batch_size = 4;
        let two = update(&d, &theta, &cfg).unwrap();
        let one = update(&d, &theta, &cfg.with_epochs(1)).unwrap();
        // a second call restarts Adam and replays epoch 0's shuffle
        let chained = update(&d, &one.params, &cfg.with_epochs(1)).unwrap();
        assert_eq!(two.loss_trace[0], one.loss_trace[0]);
        assert_ne!(two.loss_trace[1], chained.loss_trace[0]);
        assert_ne!(two.params, chained.params);
    }

    #[test]
    fn max_steps_caps_training() {
        let d = tiny(3, 10);
        let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(3), 2).unwrap();
        let mut cfg = TrainConfig::new(5, 4);
        cfg.batch_size = 4;
        cfg.max_steps = Some(4);
        let out = update(&d, &theta, &cfg).unwrap();
        assert_eq!(out.steps, 4);
        assert_eq!(out.loss_trace.len(), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let d = tiny(3, 2);
        let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(4), 2).unwrap();
        assert!(update(&d, &theta, &TrainConfig::new(1, 0)).is_err());
        let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(3), 2).unwrap();
        assert!(update(&d, &theta, &TrainConfig::new(0, 0)).is_err());
        let mut empty = d.clone();
        empty.samples.clear();
        assert!(update(&empty, &theta, &TrainConfig::new(1, 0)).is_err());
    }

    #[test]
    fn head_adaptation_carries_encoder() {
        let theta: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(12), 2).unwrap();
        let same = adapt_head(&theta, 13, 9).unwrap();
        assert_eq!(same, theta);
        let wider = adapt_head(&theta, 17, 9).unwrap();
        let carry = theta.layout().encoder_len();
        assert_eq!(wider.spec().num_classes, 17);
        assert_eq!(&wider.values()[..carry], &theta.values()[..carry]);
        assert_eq!(wider.len(), carry + 17 * 32 + 17);
        let fresh: ParamVector<f64> = init_model(&ModelSpec::for_glyphs(16), 9).unwrap();
        assert_eq!(&wider.values()[carry..], &fresh.values()[carry..]);
    }
}
