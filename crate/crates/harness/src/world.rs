//! Resolve a plan's recipes into concrete datasets, each with a record of
//! how to rebuild it.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use mergelab_core::glyphgen::{dataset_digest, subsample, AlphabetRecipe, DatasetManifest, DomainRecipe};
use mergelab_core::rng::{derive, tag};
use mergelab_core::{Dataset, Split};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::plan::{DomainSpec, ExperimentPlan};

/// How a dataset was produced. Pooled and subsampled sets refer to their
/// inputs by key, so every entry can be rebuilt from recipes alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Recipe { manifest: DatasetManifest },
    Pooled { name: String, parts: Vec<String> },
    Subsample { parent: String, fraction: f64, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub digest: String,
    pub count: usize,
    pub source: DatasetSource,
}

/// A dataset together with its provenance key and content digest.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub key: String,
    pub data: Arc<Dataset>,
    pub digest: String,
}

impl Resolved {
    fn new(key: String, data: Dataset) -> Result<Self> {
        let digest = dataset_digest(&data)?;
        Ok(Resolved {
            key,
            data: Arc::new(data),
            digest,
        })
    }

    pub fn name(&self) -> &str {
        &self.data.name
    }
}

#[derive(Clone, Debug)]
pub struct DomainSplits {
    pub name: String,
    pub train: Resolved,
    pub test: Resolved,
}

pub struct World {
    pub z_train: Resolved,
    pub z_test: Resolved,
    pub sources: Vec<DomainSplits>,
    pub ood: Vec<Resolved>,
    pub targets: Vec<DomainSplits>,
    entries: BTreeMap<String, DatasetEntry>,
    subsample_seeds: HashMap<String, u64>,
}

pub fn dataset_key(name: &str, split: Split) -> String {
    format!("{name}/{}", split.as_str())
}

fn alphabet_recipe(plan: &ExperimentPlan, name: &str) -> Result<AlphabetRecipe> {
    let a = plan
        .alphabet(name)
        .ok_or_else(|| HarnessError::Plan(format!("alphabet {name:?} undefined")))?;
    Ok(AlphabetRecipe {
        master_seed: derive(plan.world_seed, &[tag("alphabet"), tag(name)]),
        glyph_count: a.glyph_count,
        stroke_budget: a.stroke_budget,
    })
}

/// Content digest and entry for a freshly built recipe split.
fn recipe_entry(name: &str, recipe: &DomainRecipe, data: Dataset) -> Result<(Resolved, DatasetEntry)> {
    let key = dataset_key(name, data.split);
    let resolved = Resolved::new(key.clone(), data.with_name(name))?;
    let manifest = DatasetManifest {
        name: key,
        alphabet_id: resolved.data.alphabet_id.clone(),
        recipe: recipe.clone(),
        split: resolved.data.split,
        count: resolved.data.len(),
        digest: resolved.digest.clone(),
    };
    let entry = DatasetEntry {
        digest: resolved.digest.clone(),
        count: resolved.data.len(),
        source: DatasetSource::Recipe { manifest },
    };
    Ok((resolved, entry))
}

impl World {
    pub fn build(plan: &ExperimentPlan) -> Result<World> {
        let mut entries = BTreeMap::new();
        let mut alphabets = HashMap::new();
        for a in &plan.alphabets {
            let recipe = alphabet_recipe(plan, &a.name)?;
            alphabets.insert(a.name.clone(), recipe);
        }
        // make sure every alphabet can be drawn before generating data
        for (name, recipe) in &alphabets {
            recipe.build().map_err(|e| HarnessError::Plan(format!("alphabet {name}: {e}")))?;
        }

        let mut build = |d: &DomainSpec, n_train: usize, seed: u64| -> Result<DomainSplits> {
            let recipe = DomainRecipe {
                alphabet: alphabets[&d.alphabet].clone(),
                style: d.style,
                n_train,
                n_test: d.n_test,
                seed,
                max_len: plan.max_label_len,
            };
            let (train, test) = recipe.build()?;
            let (train, e_train) = recipe_entry(&d.name, &recipe, train)?;
            let (test, e_test) = recipe_entry(&d.name, &recipe, test)?;
            entries.insert(train.key.clone(), e_train);
            entries.insert(test.key.clone(), e_test);
            Ok(DomainSplits {
                name: d.name.clone(),
                train,
                test,
            })
        };
        let domain_seed = |name: &str| derive(plan.world_seed, &[tag("domain"), tag(name)]);

        let mut z_parts = Vec::new();
        for (i, style) in plan.pretrain.styles.iter().enumerate() {
            let spec = DomainSpec {
                name: format!("Z.{i}"),
                alphabet: plan.pretrain.alphabet.clone(),
                style: *style,
                n_train: plan.pretrain.n_train_per_style,
                n_test: plan.pretrain.n_test_per_style.max(1),
            };
            z_parts.push(build(&spec, spec.n_train, derive(plan.world_seed, &[tag("pretrain"), i as u64]))?);
        }
        let sources = plan
            .source_domains
            .iter()
            .map(|d| build(d, d.n_train, domain_seed(&d.name)))
            .collect::<Result<Vec<_>>>()?;
        let ood = plan
            .ood_sets
            .iter()
            .map(|d| build(d, d.n_train.max(1), domain_seed(&d.name)).map(|s| s.test))
            .collect::<Result<Vec<_>>>()?;
        let targets = plan
            .transfer_targets
            .iter()
            .map(|d| build(d, d.n_train, domain_seed(&d.name)))
            .collect::<Result<Vec<_>>>()?;

        let mut world = World {
            z_train: z_parts[0].train.clone(),
            z_test: z_parts[0].test.clone(),
            sources,
            ood,
            targets,
            entries,
            subsample_seeds: plan
                .source_domains
                .iter()
                .map(|d| (d.name.clone(), derive(plan.world_seed, &[tag("subsample"), tag(&d.name)])))
                .collect(),
        };
        let train_parts: Vec<&Resolved> = z_parts.iter().map(|p| &p.train).collect();
        let test_parts: Vec<&Resolved> = z_parts.iter().map(|p| &p.test).collect();
        world.z_train = world.pool("Z", &train_parts)?;
        world.z_test = world.pool("Z", &test_parts)?;
        Ok(world)
    }

    /// Concatenate resolved datasets and register the result.
    pub fn pool(&mut self, name: &str, parts: &[&Resolved]) -> Result<Resolved> {
        let data: Vec<&Dataset> = parts.iter().map(|p| p.data.as_ref()).collect();
        let pooled = Dataset::pooled(name, &data)?;
        let resolved = Resolved::new(dataset_key(name, pooled.split), pooled)?;
        self.entries.insert(
            resolved.key.clone(),
            DatasetEntry {
                digest: resolved.digest.clone(),
                count: resolved.data.len(),
                source: DatasetSource::Pooled {
                    name: name.into(),
                    parts: parts.iter().map(|p| p.key.clone()).collect(),
                },
            },
        );
        Ok(resolved)
    }

    /// Nested subsample of a source domain's training split.
    pub fn subsample_source(&mut self, index: usize, fraction: f64) -> Result<Resolved> {
        let parent = self.sources[index].train.clone();
        if fraction == 1.0 {
            return Ok(parent);
        }
        let seed = self.subsample_seeds[&self.sources[index].name];
        let data = subsample(&parent.data, fraction, seed)?;
        let resolved = Resolved::new(format!("{}@{fraction}", parent.key), data)?;
        self.entries.insert(
            resolved.key.clone(),
            DatasetEntry {
                digest: resolved.digest.clone(),
                count: resolved.data.len(),
                source: DatasetSource::Subsample {
                    parent: parent.key,
                    fraction,
                    seed,
                },
            },
        );
        Ok(resolved)
    }

    pub fn entries(&self) -> &BTreeMap<String, DatasetEntry> {
        &self.entries
    }

    pub fn source_index(&self, name: &str) -> Option<usize> {
        self.sources.iter().position(|s| s.name == name)
    }

    /// Test sets of the grid columns: every source domain, then every OOD set.
    pub fn eval_sets(&self) -> Vec<Resolved> {
        self.sources
            .iter()
            .map(|s| s.test.clone())
            .chain(self.ood.iter().cloned())
            .collect()
    }
}

/// Rebuild entry `key` (and, recursively, its inputs) from recipes.
pub fn rebuild(entries: &BTreeMap<String, DatasetEntry>, key: &str) -> Result<Dataset> {
    let entry = entries
        .get(key)
        .ok_or_else(|| HarnessError::Provenance(format!("dataset {key} has no manifest")))?;
    match &entry.source {
        DatasetSource::Recipe { manifest } => {
            let (train, test) = manifest.recipe.build()?;
            Ok(match manifest.split {
                Split::Train => train,
                Split::Test => test,
            })
        }
        DatasetSource::Pooled { name, parts } => {
            let data = parts.iter().map(|p| rebuild(entries, p)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Dataset> = data.iter().collect();
            Ok(Dataset::pooled(name.clone(), &refs)?)
        }
        DatasetSource::Subsample { parent, fraction, seed } => {
            Ok(subsample(&rebuild(entries, parent)?, *fraction, *seed)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::ExperimentPlan;

    fn small_plan() -> ExperimentPlan {
        let mut plan = ExperimentPlan::toy();
        plan.pretrain.n_train_per_style = 3;
        plan.pretrain.n_test_per_style = 2;
        for d in plan
            .source_domains
            .iter_mut()
            .chain(plan.ood_sets.iter_mut())
            .chain(plan.transfer_targets.iter_mut())
        {
            d.n_train = d.n_train.min(5);
            d.n_test = 2;
        }
        plan
    }

    #[test]
    fn every_entry_rebuilds_to_its_digest() {
        let mut world = World::build(&small_plan()).unwrap();
        world.subsample_source(1, 0.6).unwrap();
        let parts: Vec<Resolved> = world.sources.iter().map(|s| s.train.clone()).collect();
        world.pool("pooled", &parts.iter().collect::<Vec<_>>()).unwrap();
        assert!(world.entries().len() > 10);
        for (key, entry) in world.entries() {
            let d = rebuild(world.entries(), key).unwrap();
            assert_eq!(dataset_digest(&d).unwrap(), entry.digest, "{key}");
        }
    }

    #[test]
    fn names_not_order_fix_the_data() {
        let plan = small_plan();
        let mut swapped = plan.clone();
        swapped.source_domains.swap(0, 2);
        let a = World::build(&plan).unwrap();
        let b = World::build(&swapped).unwrap();
        assert_eq!(a.sources[0].train.digest, b.sources[2].train.digest);
        assert_eq!(a.z_train.digest, b.z_train.digest);
    }

    #[test]
    fn full_fraction_is_the_parent() {
        let mut world = World::build(&small_plan()).unwrap();
        let full = world.subsample_source(0, 1.0).unwrap();
        assert_eq!(full.key, world.sources[0].train.key);
    }
}
