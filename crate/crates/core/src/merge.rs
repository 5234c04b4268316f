//! Task vectors, averaging merges and iterated federated rounds.
//!
//! A round starts every node from the same θ_t, runs the update function on
//! the node's dataset and moves θ_t by the mean of the resulting deltas:
//!
//! ```text
//! θ_{t+1} = θ_t + (1/N) Σ_n (U^k(d_n; θ_t) − θ_t)
//! ```
//!
//! With `T = 1` this is plain task arithmetic; `T > 1` rounds are Reptile /
//! FedAvg. Task vectors keep the rounding error of the subtraction next to
//! the delta, so adding a single task vector back onto its base reproduces
//! the fine-tuned model bit for bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::params_digest;
use crate::error::{Error, Result};
use crate::glyphgen::Dataset;
use crate::nn::params::ensure_hash;
use crate::nn::ParamVector;
use crate::scalar::{two_sum, Real};
use crate::trainer::{update, TrainConfig};

/// Default |cos| above which two task vectors count as entangled.
pub const DEFAULT_FILTER_THRESHOLD: f64 = 0.10;

/// θ_ft − θ₀ for one node.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector<S> {
    /// Rounded difference.
    pub delta: Vec<S>,
    /// `delta + residual` equals the exact difference.
    pub residual: Vec<S>,
    pub spec_hash: [u8; 32],
    pub source_tag: String,
    pub round: usize,
}

impl<S: Real> TaskVector<S> {
    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn l2_norm(&self) -> S {
        self.delta.iter().map(|&d| d * d).sum::<S>().sqrt()
    }

    pub fn dot(&self, other: &TaskVector<S>) -> S {
        self.delta.iter().zip(&other.delta).map(|(&a, &b)| a * b).sum()
    }

    /// Multiply by a scalar (both parts).
    pub fn scaled(&self, c: S) -> Self {
        TaskVector {
            delta: self.delta.iter().map(|&d| d * c).collect(),
            residual: self.residual.iter().map(|&r| r * c).collect(),
            ..self.clone()
        }
    }

    /// Build from a plain delta with no residual.
    pub fn from_delta(delta: Vec<S>, spec_hash: [u8; 32], source_tag: impl Into<String>) -> Self {
        TaskVector {
            residual: vec![S::zero(); delta.len()],
            delta,
            spec_hash,
            source_tag: source_tag.into(),
            round: 0,
        }
    }

    /// Apply a fixed permutation of coordinates: `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        TaskVector {
            delta: perm.iter().map(|&i| self.delta[i]).collect(),
            residual: perm.iter().map(|&i| self.residual[i]).collect(),
            ..self.clone()
        }
    }
}

pub fn task_vector<S: Real>(
    theta_ft: &ParamVector<S>,
    theta_0: &ParamVector<S>,
    tag: impl Into<String>,
) -> Result<TaskVector<S>> {
    theta_0.ensure_same_layout(theta_ft)?;
    let (delta, residual) = theta_ft
        .values()
        .iter()
        .zip(theta_0.values())
        .map(|(&a, &b)| two_sum(a, -b))
        .unzip();
    Ok(TaskVector {
        delta,
        residual,
        spec_hash: *theta_0.spec_hash(),
        source_tag: tag.into(),
        round: 0,
    })
}

/// θ₀ + (1/N) Σ τ_n, reduced in list order.
///
/// The mean is carried in double-length arithmetic and rounded once when it
/// is added to θ₀; identical task vectors therefore average to themselves
/// and a single task vector reproduces the model it came from.
pub fn average_merge<S: Real>(theta_0: &ParamVector<S>, taus: &[TaskVector<S>]) -> Result<ParamVector<S>> {
    if taus.is_empty() {
        return Err(Error::InvalidArgument("average_merge needs at least one task vector".into()));
    }
    for tau in taus {
        ensure_hash(theta_0.spec_hash(), &tau.spec_hash)?;
        if tau.len() != theta_0.len() {
            return Err(Error::Shape(format!("task vector {} has {} entries", tau.source_tag, tau.len())));
        }
    }
    let n = S::of(taus.len() as f64);
    let values = (0..theta_0.len())
        .map(|j| {
            let (mut hi, mut lo) = (S::zero(), S::zero());
            for tau in taus {
                let (s, e) = two_sum(hi, tau.delta[j]);
                hi = s;
                lo += e + tau.residual[j];
            }
            let (hi, lo) = two_sum(hi, lo);
            let q_hi = hi / n;
            let rem = (-q_hi).mul_add(n, hi);
            let q_lo = (rem + lo) / n;
            let (s, e) = two_sum(theta_0.values()[j], q_hi);
            s + (e + q_lo)
        })
        .collect();
    let merged = theta_0.with_values(values)?;
    merged.ensure_finite("merged parameters")?;
    Ok(merged)
}

/// Federated plan: which nodes take part, how many rounds, how many epochs
/// per round, and whether entangled task vectors are filtered out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergePlan {
    pub node_ids: Vec<String>,
    pub rounds: usize,
    pub epochs: usize,
    #[serde(default)]
    pub filter: Option<FilterSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub threshold: f64,
}

impl MergePlan {
    pub fn validate(&self, budget: Option<usize>) -> Result<()> {
        if self.node_ids.is_empty() {
            return Err(Error::InvalidArgument("merge plan has no nodes".into()));
        }
        if self.rounds == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("rounds and epochs must be >= 1".into()));
        }
        if let Some(b) = budget {
            if self.rounds * self.epochs > b {
                return Err(Error::InvalidArgument(format!(
                    "T·k = {} exceeds the budget of {b}",
                    self.rounds * self.epochs
                )));
            }
        }
        if let Some(f) = self.filter {
            if !(f.threshold > 0.0 && f.threshold <= 1.0) {
                return Err(Error::InvalidArgument(format!("filter threshold {} outside (0, 1]", f.threshold)));
            }
        }
        Ok(())
    }
}

/// One round of Eq.-(1) style averaging. Returns the merged model and the
/// per-node task vectors, in `domains` order.
pub fn meta_round<S: Real>(
    theta_t: &ParamVector<S>,
    domains: &[&Dataset],
    epochs: usize,
    cfg: &TrainConfig,
) -> Result<(ParamVector<S>, Vec<TaskVector<S>>)> {
    let (taus, _) = node_updates(theta_t, domains, epochs, cfg, 0)?;
    Ok((average_merge(theta_t, &taus)?, taus))
}

fn node_updates<S: Real>(
    theta_t: &ParamVector<S>,
    domains: &[&Dataset],
    epochs: usize,
    cfg: &TrainConfig,
    round: usize,
) -> Result<(Vec<TaskVector<S>>, usize)> {
    if domains.is_empty() {
        return Err(Error::InvalidArgument("a round needs at least one domain".into()));
    }
    let node_cfg = cfg.with_epochs(epochs);
    let results: Vec<(TaskVector<S>, usize)> = domains
        .par_iter()
        .map(|d| {
            let out = update(d, theta_t, &node_cfg).map_err(|e| e.at_node(&d.name))?;
            let mut tau = task_vector(&out.params, theta_t, &d.name)?;
            tau.round = round;
            Ok((tau, out.steps))
        })
        .collect::<Result<_>>()?;
    let steps = results.iter().map(|(_, s)| s).sum();
    Ok((results.into_iter().map(|(t, _)| t).collect(), steps))
}

/// What happened in one round of [`meta_train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub node_ids: Vec<String>,
    pub tau_norms: Vec<f64>,
    /// Pairwise cosines; absent with fewer than two non-zero task vectors.
    pub cosine: Option<Vec<Vec<f64>>>,
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
    /// Gradient steps taken across all nodes this round.
    pub steps: usize,
    pub merged_digest: String,
}

/// Run `plan.rounds` rounds from `theta_0`, threading θ between rounds.
/// Each node restarts Adam every round.
pub fn meta_train<S: Real>(
    theta_0: &ParamVector<S>,
    domains: &[&Dataset],
    plan: &MergePlan,
    cfg: &TrainConfig,
) -> Result<(ParamVector<S>, Vec<RoundRecord>)> {
    plan.validate(None)?;
    if domains.len() != plan.node_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{} node ids for {} domains",
            plan.node_ids.len(),
            domains.len()
        )));
    }
    let mut theta = theta_0.clone();
    let mut log = Vec::with_capacity(plan.rounds);
    for round in 0..plan.rounds {
        let (mut taus, steps) = node_updates(&theta, domains, plan.epochs, cfg, round)?;
        for (tau, id) in taus.iter_mut().zip(&plan.node_ids) {
            tau.source_tag = id.clone();
        }
        let tau_norms: Vec<f64> = taus.iter().map(|t| t.l2_norm().as_f64()).collect();
        let cosine = if taus.len() >= 2 && tau_norms.iter().all(|&n| n > 0.0) {
            Some(to_f64(&cosine_matrix(&taus)?))
        } else {
            None
        };
        let (kept, dropped) = match (plan.filter, taus.len() >= 2 && cosine.is_some()) {
            (Some(f), true) => {
                let out = orthogonality_filter(&taus, f.threshold)?;
                (out.kept, out.dropped)
            }
            _ => ((0..taus.len()).collect(), Vec::new()),
        };
        let selected: Vec<TaskVector<S>> = kept.iter().map(|&i| taus[i].clone()).collect();
        theta = average_merge(&theta, &selected)?;
        log.push(RoundRecord {
            round,
            node_ids: plan.node_ids.clone(),
            tau_norms,
            cosine,
            kept: kept.iter().map(|&i| plan.node_ids[i].clone()).collect(),
            dropped: dropped.iter().map(|&i| plan.node_ids[i].clone()).collect(),
            steps,
            merged_digest: params_digest(&theta),
        });
    }
    Ok((theta, log))
}

fn to_f64<S: Real>(m: &[Vec<S>]) -> Vec<Vec<f64>> {
    m.iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

/// Pairwise cosine similarities, clamped to [−1, 1] with an exact unit diagonal.
pub fn cosine_matrix<S: Real>(taus: &[TaskVector<S>]) -> Result<Vec<Vec<S>>> {
    if taus.len() < 2 {
        return Err(Error::InvalidArgument("cosine matrix needs at least two task vectors".into()));
    }
    for t in &taus[1..] {
        ensure_hash(&taus[0].spec_hash, &t.spec_hash)?;
    }
    let norms: Vec<S> = taus.iter().map(|t| t.l2_norm()).collect();
    if let Some(i) = norms.iter().position(|&n| n == S::zero() || !n.is_finite()) {
        return Err(Error::ZeroNorm {
            tag: taus[i].source_tag.clone(),
        });
    }
    let n = taus.len();
    let mut c = vec![vec![S::one(); n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = (taus[i].dot(&taus[j]) / (norms[i] * norms[j])).max(-S::one()).min(S::one());
            c[i][j] = v;
            c[j][i] = v;
        }
    }
    Ok(c)
}

/// One greedy elimination.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterStep {
    pub dropped: usize,
    pub tag: String,
    pub mean_abs_cos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
    pub trail: Vec<FilterStep>,
}

/// Greedily drop task vectors until no kept pair has |cos| > `threshold`.
///
/// Each step drops the vector with the largest mean |cos| to the other kept
/// vectors; ties go to the lexicographically smallest tag (then the lowest
/// index).
pub fn orthogonality_filter<S: Real>(taus: &[TaskVector<S>], threshold: f64) -> Result<FilterOutcome> {
    let matrix = to_f64(&cosine_matrix(taus)?);
    let (kept, trail) = greedy_filter(&matrix, &tags(taus), threshold);
    let dropped = trail.iter().map(|s| s.dropped).collect();
    Ok(FilterOutcome {
        kept,
        dropped,
        matrix,
        trail,
    })
}

fn tags<S>(taus: &[TaskVector<S>]) -> Vec<String> {
    taus.iter().map(|t| t.source_tag.clone()).collect()
}

/// Greedy elimination on a precomputed matrix; `replay_filter` uses this to
/// audit a recorded outcome.
pub fn greedy_filter(matrix: &[Vec<f64>], tags: &[String], threshold: f64) -> (Vec<usize>, Vec<FilterStep>) {
    let mut kept: Vec<usize> = (0..matrix.len()).collect();
    let mut trail = Vec::new();
    loop {
        let entangled = kept
            .iter()
            .any(|&i| kept.iter().any(|&j| i != j && matrix[i][j].abs() > threshold));
        if !entangled || kept.len() < 2 {
            break;
        }
        let denom = (kept.len() - 1) as f64;
        let scores: Vec<(usize, f64)> = kept
            .iter()
            .map(|&i| {
                let s: f64 = kept.iter().filter(|&&j| j != i).map(|&j| matrix[i][j].abs()).sum();
                (i, s / denom)
            })
            .collect();
        let &(victim, score) = scores
            .iter()
            .reduce(|best, cand| {
                let better = cand.1 > best.1
                    || (cand.1 == best.1 && (tags[cand.0].as_str(), cand.0) < (tags[best.0].as_str(), best.0));
                if better {
                    cand
                } else {
                    best
                }
            })
            .expect("at least two kept vectors");
        kept.retain(|&i| i != victim);
        trail.push(FilterStep {
            dropped: victim,
            tag: tags[victim].clone(),
            mean_abs_cos: score,
        });
    }
    (kept, trail)
}

/// Re-run the greedy filter on a recorded matrix and compare.
pub fn replay_filter(outcome: &FilterOutcome, tags: &[String], threshold: f64) -> bool {
    let (kept, trail) = greedy_filter(&outcome.matrix, tags, threshold);
    kept == outcome.kept && trail == outcome.trail
}
