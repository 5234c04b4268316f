//! Declarative experiment plans.
//!
//! A plan names every alphabet, dataset and regime of an experiment. All
//! seeds below the `world_seed` are derived from names, so renaming a
//! dataset regenerates it while reordering lists does not.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mergelab_core::glyphgen::MAX_LABEL_LEN;
use mergelab_core::{DomainStyle, ModelSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub world_seed: u64,
    pub spec: ModelSpec,
    pub max_label_len: usize,
    pub alphabets: Vec<AlphabetSpec>,
    pub pretrain: PretrainSpec,
    pub source_domains: Vec<DomainSpec>,
    #[serde(default)]
    pub ood_sets: Vec<DomainSpec>,
    pub transfer_targets: Vec<DomainSpec>,
    pub regimes: Vec<Regime>,
    pub budgets: Budgets,
    pub training: Training,
    #[serde(default)]
    pub sweep: Sweep,
    pub filter_threshold: f64,
    /// Groups of source domains pooled into one node for the group-level merge.
    #[serde(default)]
    pub merge_groups: Vec<DomainGroup>,
    /// Named sets of source domains left out together in the ablation.
    #[serde(default)]
    pub group_masks: Vec<DomainGroup>,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphabetSpec {
    pub name: String,
    pub glyph_count: usize,
    pub stroke_budget: (u32, u32),
}

/// The pretraining set Z: one alphabet rendered in a mixture of styles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub alphabet: String,
    pub styles: Vec<DomainStyle>,
    pub n_train_per_style: usize,
    pub n_test_per_style: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub alphabet: String,
    pub style: DomainStyle,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regime {
    Centralized,
    Distributed {
        rounds: usize,
        epochs: usize,
        #[serde(default)]
        filter: bool,
    },
    RandomSeedDistributed {
        rounds: usize,
        epochs: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub pretrain_epochs: usize,
    pub tk_product: usize,
    pub transfer_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Training {
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub t_values: Vec<usize>,
    pub fractions: Vec<f64>,
}

impl Default for Sweep {
    fn default() -> Self {
        Sweep {
            t_values: vec![1],
            fractions: vec![1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainGroup {
    pub name: String,
    pub domains: Vec<String>,
}

/// A deviation from the reference setting, echoed in every report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub setting: String,
    pub reference: String,
    pub used: String,
}

fn plan_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Plan(msg.into())
}

fn style(slant: f64, width: u8, noise: f64, invert: bool, jitter: u8) -> DomainStyle {
    DomainStyle::new(slant, width, noise, invert, jitter).expect("built-in style is valid")
}

impl ExperimentPlan {
    /// The default toy world: a 12-glyph base alphabet in four source
    /// styles, two held-out styles, and two fresh alphabets as targets.
    pub fn toy() -> Self {
        let domain = |name: &str, alphabet: &str, style: DomainStyle, n_train, n_test| DomainSpec {
            name: name.into(),
            alphabet: alphabet.into(),
            style,
            n_train,
            n_test,
        };
        let upright = style(0.0, 1, 0.0, false, 0);
        let slanted = style(0.3, 2, 0.0, false, 1);
        let bold = style(0.0, 3, 0.05, false, 2);
        let noisy = style(-0.1, 1, 0.1, false, 1);
        ExperimentPlan {
            world_seed: 23,
            spec: ModelSpec::for_glyphs(12),
            max_label_len: 4,
            alphabets: vec![
                AlphabetSpec { name: "base".into(), glyph_count: 12, stroke_budget: (2, 4) },
                AlphabetSpec { name: "fresh-10".into(), glyph_count: 10, stroke_budget: (2, 4) },
                AlphabetSpec { name: "fresh-16".into(), glyph_count: 16, stroke_budget: (2, 4) },
            ],
            pretrain: PretrainSpec {
                alphabet: "base".into(),
                styles: vec![
                    style(0.0, 1, 0.02, false, 0),
                    style(0.15, 2, 0.05, false, 1),
                    style(-0.15, 2, 0.05, false, 0),
                    style(0.05, 1, 0.1, false, 2),
                ],
                n_train_per_style: 300,
                n_test_per_style: 50,
            },
            source_domains: vec![
                domain("upright", "base", upright, 200, 50),
                domain("slanted", "base", slanted, 200, 50),
                domain("bold", "base", bold, 200, 50),
                domain("noisy", "base", noisy, 200, 50),
            ],
            ood_sets: vec![
                domain("inverted", "base", style(0.0, 2, 0.05, true, 1), 0, 50),
                domain("backslant", "base", style(-0.4, 2, 0.0, false, 0), 0, 50),
            ],
            transfer_targets: vec![
                domain("fresh-10", "fresh-10", slanted, 60, 400),
                domain("fresh-16", "fresh-16", noisy, 150, 400),
            ],
            regimes: vec![
                Regime::Centralized,
                Regime::Distributed { rounds: 1, epochs: 12, filter: false },
                Regime::RandomSeedDistributed { rounds: 1, epochs: 12 },
            ],
            budgets: Budgets {
                pretrain_epochs: 8,
                tk_product: 12,
                transfer_epochs: 50,
            },
            training: Training { batch_size: 32, lr: 2e-3 },
            sweep: Sweep {
                t_values: vec![1, 2, 3, 4, 6, 12],
                fractions: vec![0.2, 0.6, 1.0],
            },
            filter_threshold: 0.10,
            merge_groups: vec![
                DomainGroup { name: "thin".into(), domains: vec!["upright".into(), "noisy".into()] },
                DomainGroup { name: "thick".into(), domains: vec!["slanted".into(), "bold".into()] },
            ],
            group_masks: vec![DomainGroup {
                name: "thick".into(),
                domains: vec!["slanted".into(), "bold".into()],
            }],
            output_dir: PathBuf::from("runs/toy"),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = serde_json::from_str(text).map_err(|e| plan_err(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Plan(m) => plan_err(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// SHA-256 of the canonical JSON encoding with `output_dir` cleared, so
    /// the same experiment written to two places has one digest.
    pub fn digest(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&canon).expect("plan serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn alphabet(&self, name: &str) -> Option<&AlphabetSpec> {
        self.alphabets.iter().find(|a| a.name == name)
    }

    pub fn source_names(&self) -> Vec<String> {
        self.source_domains.iter().map(|d| d.name.clone()).collect()
    }

    /// The (rounds, epochs, filter) schedule used as "the" distributed regime.
    pub fn distributed_schedule(&self) -> (usize, usize, bool) {
        self.regimes
            .iter()
            .find_map(|r| match *r {
                Regime::Distributed { rounds, epochs, filter } => Some((rounds, epochs, filter)),
                _ => None,
            })
            .unwrap_or((1, self.budgets.tk_product, false))
    }

    /// Schedule of the random-seed control; defaults to the distributed one.
    pub fn random_schedule(&self) -> (usize, usize) {
        self.regimes
            .iter()
            .find_map(|r| match *r {
                Regime::RandomSeedDistributed { rounds, epochs } => Some((rounds, epochs)),
                _ => None,
            })
            .unwrap_or_else(|| {
                let (t, k, _) = self.distributed_schedule();
                (t, k)
            })
    }

    pub fn deviations(&self) -> Vec<Deviation> {
        let dev = |setting: &str, reference: &str, used: String| Deviation {
            setting: setting.into(),
            reference: reference.into(),
            used,
        };
        vec![
            dev(
                "architecture",
                "ViT encoder with CTC head",
                format!(
                    "conv{:?} + hidden {} + linear CTC head",
                    self.spec.conv_channels, self.spec.hidden_dim
                ),
            ),
            dev("learning_rate", "1e-5", self.training.lr.to_string()),
            dev("batch_size", "128", self.training.batch_size.to_string()),
            dev("pretrain_epochs", "75", self.budgets.pretrain_epochs.to_string()),
            dev("tk_product", "75", self.budgets.tk_product.to_string()),
            dev("transfer_epochs", "30", self.budgets.transfer_epochs.to_string()),
            dev("data", "real handwritten and scene text", "synthetic glyph strings".into()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate().map_err(|e| plan_err(format!("spec: {e}")))?;
        if !(1..=MAX_LABEL_LEN).contains(&self.max_label_len) {
            return Err(plan_err(format!("max_label_len {} outside 1..={MAX_LABEL_LEN}", self.max_label_len)));
        }

        let mut alphabet_names = BTreeSet::new();
        for a in &self.alphabets {
            if !alphabet_names.insert(a.name.as_str()) {
                return Err(plan_err(format!("duplicate alphabet {:?}", a.name)));
            }
            if !(2..=256).contains(&a.glyph_count) {
                return Err(plan_err(format!("alphabet {:?}: glyph_count {} outside 2..=256", a.name, a.glyph_count)));
            }
            let (lo, hi) = a.stroke_budget;
            if lo == 0 || lo > hi || hi > 8 {
                return Err(plan_err(format!("alphabet {:?}: stroke budget ({lo}, {hi}) invalid", a.name)));
            }
        }

        let base = self
            .alphabet(&self.pretrain.alphabet)
            .ok_or_else(|| plan_err(format!("pretrain alphabet {:?} undefined", self.pretrain.alphabet)))?;
        if base.glyph_count + 1 != self.spec.num_classes {
            return Err(plan_err(format!(
                "spec.num_classes = {} but the pretrain alphabet has {} glyphs (+1 blank expected)",
                self.spec.num_classes, base.glyph_count
            )));
        }
        if self.pretrain.styles.is_empty() || self.pretrain.n_train_per_style == 0 {
            return Err(plan_err("pretrain needs at least one style and one training sample"));
        }

        let mut names = BTreeSet::new();
        names.insert("Z");
        let groups = [
            ("source_domains", &self.source_domains),
            ("ood_sets", &self.ood_sets),
            ("transfer_targets", &self.transfer_targets),
        ];
        for (field, list) in groups {
            for d in list.iter() {
                if d.name.is_empty() || d.name.contains('/') || d.name.contains(',') {
                    return Err(plan_err(format!("{field}: dataset name {:?} must be non-empty without '/' or ','", d.name)));
                }
                if !names.insert(d.name.as_str()) {
                    return Err(plan_err(format!("duplicate dataset name {:?}", d.name)));
                }
                if self.alphabet(&d.alphabet).is_none() {
                    return Err(plan_err(format!("{field}/{}: alphabet {:?} undefined", d.name, d.alphabet)));
                }
                if d.n_test == 0 {
                    return Err(plan_err(format!("{field}/{}: n_test must be >= 1", d.name)));
                }
                // held-out sets are only ever evaluated, so their train split may be empty
                if field != "ood_sets" && d.n_train == 0 {
                    return Err(plan_err(format!("{field}/{}: n_train must be >= 1", d.name)));
                }
            }
        }
        if self.source_domains.is_empty() {
            return Err(plan_err("at least one source domain is required"));
        }
        for d in &self.source_domains {
            if d.alphabet != self.pretrain.alphabet {
                return Err(plan_err(format!(
                    "source domain {} must use the pretrain alphabet {:?}",
                    d.name, self.pretrain.alphabet
                )));
            }
        }
        for d in &self.ood_sets {
            if self.alphabet(&d.alphabet).map(|a| a.glyph_count) != Some(base.glyph_count) {
                return Err(plan_err(format!("ood set {} must share the source glyph count", d.name)));
            }
        }

        let b = self.budgets;
        if b.pretrain_epochs == 0 || b.tk_product == 0 || b.transfer_epochs == 0 {
            return Err(plan_err("budgets must be >= 1"));
        }
        if self.training.batch_size == 0 || !(self.training.lr > 0.0 && self.training.lr.is_finite()) {
            return Err(plan_err("training needs batch_size >= 1 and a positive finite lr"));
        }
        for r in &self.regimes {
            let (t, k) = match *r {
                Regime::Centralized => continue,
                Regime::Distributed { rounds, epochs, .. } => (rounds, epochs),
                Regime::RandomSeedDistributed { rounds, epochs } => (rounds, epochs),
            };
            if t == 0 || k == 0 || t * k != b.tk_product {
                return Err(plan_err(format!(
                    "regime {r:?}: T·k = {} must equal budgets.tk_product = {}",
                    t * k,
                    b.tk_product
                )));
            }
        }
        for &t in &self.sweep.t_values {
            if t == 0 || b.tk_product % t != 0 {
                return Err(plan_err(format!("sweep T = {t} does not divide tk_product = {}", b.tk_product)));
            }
        }
        for &f in &self.sweep.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(plan_err(format!("sweep fraction {f} outside (0, 1]")));
            }
        }
        if !(self.filter_threshold > 0.0 && self.filter_threshold <= 1.0) {
            return Err(plan_err(format!("filter_threshold {} outside (0, 1]", self.filter_threshold)));
        }

        let sources: BTreeSet<&str> = self.source_domains.iter().map(|d| d.name.as_str()).collect();
        for (field, list) in [("merge_groups", &self.merge_groups), ("group_masks", &self.group_masks)] {
            let mut seen = BTreeSet::new();
            for g in list.iter() {
                if !seen.insert(g.name.as_str()) {
                    return Err(plan_err(format!("{field}: duplicate name {:?}", g.name)));
                }
                if g.domains.is_empty() {
                    return Err(plan_err(format!("{field}/{}: empty domain list", g.name)));
                }
                for d in &g.domains {
                    if !sources.contains(d.as_str()) {
                        return Err(plan_err(format!("{field}/{}: unknown source domain {d:?}", g.name)));
                    }
                }
            }
        }
        for m in &self.group_masks {
            if sources.iter().all(|s| m.domains.iter().any(|d| d == s)) {
                return Err(plan_err(format!("group mask {} excludes every source domain", m.name)));
            }
        }
        Ok(())
    }
}
