//! Experiment orchestration. A [`Lab`] owns the resolved world and a
//! content-addressed cache of trained models, so θ₀ and every shared
//! fine-tune are computed once no matter how many experiments use them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use mergelab_core::checkpoint::params_digest;
use mergelab_core::eval::{evaluate, MetricsReport};
use mergelab_core::merge::{average_merge, meta_train, orthogonality_filter, task_vector, FilterSpec, RoundRecord};
use mergelab_core::nn::init_model;
use mergelab_core::rng::{derive, tag};
use mergelab_core::trainer::{transfer_finetune, update};
use mergelab_core::{MergePlan, ParamVector64, TaskVector64, TrainConfig};
use rayon::prelude::*;

use crate::error::{HarnessError, Result};
use crate::plan::ExperimentPlan;
use crate::report::{metric, mean_std, Cell, CheckpointEntry, Derivation, FilterAudit, Report, Table};
use crate::world::{DomainSplits, Resolved, World};

/// A trained (or initialized) model and its content digest.
#[derive(Debug)]
pub struct Model {
    pub digest: String,
    pub params: ParamVector64,
}

/// Result of an averaging pipeline, with the filter's audit if one ran.
struct Merged {
    model: Arc<Model>,
    audit: Option<FilterAudit>,
}

struct Registry {
    params: BTreeMap<String, Arc<Model>>,
    entries: BTreeMap<String, CheckpointEntry>,
}

pub struct Lab {
    plan: ExperimentPlan,
    world: Mutex<World>,
    pool: rayon::ThreadPool,
    registry: Mutex<Registry>,
    memo: Mutex<HashMap<String, Arc<Model>>>,
}

/// Cells and notes accumulated by one experiment.
struct Sheet {
    experiment: String,
    tables: Vec<Table>,
    cells: Vec<Cell>,
    audits: Vec<FilterAudit>,
    warnings: Vec<String>,
}

impl Sheet {
    fn new(experiment: &str) -> Self {
        Sheet {
            experiment: experiment.into(),
            tables: Vec::new(),
            cells: Vec::new(),
            audits: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn table(&mut self, name: &str, rows: Vec<String>, columns: Vec<String>) {
        self.tables.push(Table {
            name: name.into(),
            rows,
            columns,
        });
    }
}

struct CellAt<'a> {
    table: &'a str,
    row: &'a str,
    column: &'a str,
}

impl CellAt<'_> {
    fn value(&self, metric: &str, value: f64, checkpoints: Vec<String>, datasets: Vec<String>) -> Cell {
        Cell {
            table: self.table.into(),
            row: self.row.into(),
            column: self.column.into(),
            metric: metric.into(),
            value: Some(value),
            checkpoints,
            datasets,
            note: None,
        }
    }

    fn hole(&self, metric: &str, note: String) -> Cell {
        Cell {
            table: self.table.into(),
            row: self.row.into(),
            column: self.column.into(),
            metric: metric.into(),
            value: None,
            checkpoints: Vec::new(),
            datasets: Vec::new(),
            note: Some(note),
        }
    }

    /// Accuracy and CER cells for `model` on `data`, or holes explaining why not.
    fn metrics(&self, model: &Result<Arc<Model>>, data: &Resolved) -> (Vec<Cell>, Option<f64>) {
        let outcome = model
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|m| evaluate(&m.params, &data.data, false).map_err(|e| e.to_string()).map(|r| (m, r)));
        match outcome {
            Ok((m, MetricsReport { seq_accuracy, cer, .. })) => {
                let ck = vec![m.digest.clone()];
                let ds = vec![data.key.clone()];
                (
                    vec![
                        self.value(metric::ACCURACY, seq_accuracy, ck.clone(), ds.clone()),
                        self.value(metric::CER, cer, ck, ds),
                    ],
                    Some(seq_accuracy),
                )
            }
            Err(note) => (
                vec![self.hole(metric::ACCURACY, note.clone()), self.hole(metric::CER, note)],
                None,
            ),
        }
    }
}

fn at<'a>(table: &'a str, row: &'a str, column: &'a str) -> CellAt<'a> {
    CellAt { table, row, column }
}

pub const ROW_ZERO_SHOT: &str = "zero-shot";
pub const ROW_POOLED: &str = "pooled";
pub const ROW_FT_POOLED: &str = "FT (pooled)";
pub const ROW_AVG_GROUP: &str = "Avg (group)";
pub const ROW_AVG_IND: &str = "Avg (Ind.)";
pub const ROW_AVG_ORTH: &str = "Avg (Orth.)";
pub const ROW_BASELINE: &str = "baseline";
pub const ROW_CENTRALIZED: &str = "centralized";
pub const ROW_DISTRIBUTED: &str = "distributed";
pub const ROW_RANDOM: &str = "random";
pub const COL_X_DELTA: &str = "xDelta";
pub const COL_MEAN: &str = "mean";
pub const COL_STEPS: &str = "steps";

pub fn tk_row(t: usize, k: usize) -> String {
    format!("T={t},k={k}")
}

pub fn fraction_column(f: f64) -> String {
    format!("f={f}")
}

impl Lab {
    pub fn new(plan: ExperimentPlan, workers: usize) -> Result<Lab> {
        plan.validate()?;
        if workers == 0 {
            return Err(HarnessError::Usage("worker count must be >= 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| HarnessError::Usage(format!("thread pool: {e}")))?;
        let world = pool.install(|| World::build(&plan))?;
        Ok(Lab {
            plan,
            world: Mutex::new(world),
            pool,
            registry: Mutex::new(Registry {
                params: BTreeMap::new(),
                entries: BTreeMap::new(),
            }),
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn plan(&self) -> &ExperimentPlan {
        &self.plan
    }

    /// Run `f` on this lab's worker pool.
    pub fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.pool.install(f)
    }

    pub fn with_world<R>(&self, f: impl FnOnce(&mut World) -> R) -> R {
        f(&mut self.world.lock().expect("world lock"))
    }

    fn seed(&self, path: &[u64]) -> u64 {
        derive(self.plan.world_seed, path)
    }

    fn train_config(&self, stage: &str, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.plan.training.batch_size,
            lr: self.plan.training.lr,
            shuffle_seed: self.seed(&[tag("shuffle"), tag(stage)]),
            max_steps: None,
        }
    }

    fn register(
        &self,
        params: ParamVector64,
        derivation: Derivation,
        rounds: Vec<RoundRecord>,
    ) -> Arc<Model> {
        let digest = params_digest(&params);
        let mut reg = self.registry.lock().expect("registry lock");
        let model = reg
            .params
            .entry(digest.clone())
            .or_insert_with(|| Arc::new(Model { digest: digest.clone(), params }))
            .clone();
        let entry = reg.entries.entry(digest.clone()).or_insert_with(|| CheckpointEntry {
            file: CheckpointEntry::file_for(&digest),
            digest: digest.clone(),
            spec: model.params.spec().clone(),
            derivations: Vec::new(),
            rounds: Vec::new(),
        });
        if !entry.derivations.contains(&derivation) {
            entry.derivations.push(derivation);
            entry.derivations.sort();
        }
        if entry.rounds.is_empty() {
            entry.rounds = rounds;
        }
        model
    }

    /// Compute once per key. Concurrent callers may both compute; the
    /// results are identical, so whichever lands first is kept.
    fn memoized(&self, key: String, f: impl FnOnce() -> Result<Arc<Model>>) -> Result<Arc<Model>> {
        if let Some(m) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(m.clone());
        }
        let m = f()?;
        Ok(self.memo.lock().expect("memo lock").entry(key).or_insert(m).clone())
    }

    pub fn model(&self, digest: &str) -> Option<Arc<Model>> {
        self.registry.lock().expect("registry lock").params.get(digest).cloned()
    }

    pub fn checkpoint_entry(&self, digest: &str) -> Option<CheckpointEntry> {
        self.registry.lock().expect("registry lock").entries.get(digest).cloned()
    }

    // ---- building blocks -------------------------------------------------

    fn init(&self, stage: &str, seed: u64) -> Result<Arc<Model>> {
        self.memoized(format!("init|{seed}"), || {
            let params = init_model(&self.plan.spec, seed)?;
            Ok(self.register(
                params,
                Derivation {
                    stage: stage.into(),
                    parents: vec![],
                    datasets: vec![],
                    steps: 0,
                },
                vec![],
            ))
        })
    }

    /// θ₀: the seed model pretrained on Z.
    pub fn theta0(&self) -> Result<Arc<Model>> {
        let z = self.with_world(|w| w.z_train.clone());
        let init = self.init("init", self.seed(&[tag("init")]))?;
        self.memoized(format!("pretrain|{}|{}", init.digest, z.digest), || {
            let cfg = self.train_config("pretrain", self.plan.budgets.pretrain_epochs);
            let out = update(&z.data, &init.params, &cfg)?;
            Ok(self.register(
                out.params,
                Derivation {
                    stage: "pretrain".into(),
                    parents: vec![init.digest.clone()],
                    datasets: vec![z.key.clone()],
                    steps: out.steps,
                },
                vec![],
            ))
        })
    }

    /// The untrained model the random-seed control starts from.
    pub fn random_seed_model(&self) -> Result<Arc<Model>> {
        self.init("init-random", self.seed(&[tag("random-init")]))
    }

    /// U^k(d, θ): `epochs` epochs on `data` from `from`.
    pub fn finetune(&self, from: &Arc<Model>, data: &Resolved, epochs: usize) -> Result<Arc<Model>> {
        self.memoized(format!("ft|{}|{}|{epochs}", from.digest, data.digest), || {
            let out = update(&data.data, &from.params, &self.train_config("finetune", epochs))
                .map_err(|e| e.at_node(data.name()))?;
            Ok(self.register(
                out.params,
                Derivation {
                    stage: format!("finetune:{}", data.name()),
                    parents: vec![from.digest.clone()],
                    datasets: vec![data.key.clone()],
                    steps: out.steps,
                },
                vec![],
            ))
        })
    }

    fn filter_spec(&self, filter: bool) -> Option<FilterSpec> {
        filter.then_some(FilterSpec {
            threshold: self.plan.filter_threshold,
        })
    }

    /// `rounds` rounds of per-node training and averaging, starting at `from`.
    pub fn meta(
        &self,
        from: &Arc<Model>,
        nodes: &[Resolved],
        rounds: usize,
        epochs: usize,
        filter: bool,
    ) -> Result<Arc<Model>> {
        let digests: Vec<&str> = nodes.iter().map(|n| n.digest.as_str()).collect();
        let key = format!("meta|{}|{}|{rounds}|{epochs}|{filter}", from.digest, digests.join(","));
        self.memoized(key, || {
            let plan = MergePlan {
                node_ids: nodes.iter().map(|n| n.name().to_string()).collect(),
                rounds,
                epochs,
                filter: self.filter_spec(filter),
            };
            let data: Vec<&mergelab_core::Dataset> = nodes.iter().map(|n| n.data.as_ref()).collect();
            let (params, log) = meta_train(&from.params, &data, &plan, &self.train_config("finetune", epochs))?;
            Ok(self.register(
                params,
                Derivation {
                    stage: format!("meta-train:T={rounds},k={epochs},filter={filter}"),
                    parents: vec![from.digest.clone()],
                    datasets: nodes.iter().map(|n| n.key.clone()).collect(),
                    steps: log.iter().map(|r| r.steps).sum(),
                },
                log,
            ))
        })
    }

    /// Task arithmetic: fine-tune every node from `from` for the full budget,
    /// then average the task vectors (optionally after filtering).
    fn task_arithmetic(&self, from: &Arc<Model>, nodes: &[Resolved], filter: bool, name: &str) -> Result<Merged> {
        let epochs = self.plan.budgets.tk_product;
        let fts = nodes
            .par_iter()
            .map(|n| self.finetune(from, n, epochs))
            .collect::<Result<Vec<_>>>()?;
        let taus = fts
            .iter()
            .zip(nodes)
            .map(|(m, n)| task_vector(&m.params, &from.params, n.name()))
            .collect::<mergelab_core::Result<Vec<TaskVector64>>>()?;
        let tags: Vec<String> = taus.iter().map(|t| t.source_tag.clone()).collect();
        let (selected, audit) = if filter && taus.len() >= 2 && taus.iter().all(|t| t.l2_norm() > 0.0) {
            let out = orthogonality_filter(&taus, self.plan.filter_threshold)?;
            let selected: Vec<TaskVector64> = out.kept.iter().map(|&i| taus[i].clone()).collect();
            let audit = FilterAudit {
                name: name.into(),
                threshold: self.plan.filter_threshold,
                kept: out.kept.iter().map(|&i| tags[i].clone()).collect(),
                dropped: out.dropped.iter().map(|&i| tags[i].clone()).collect(),
                tags,
                matrix: out.matrix,
                trail: out.trail,
            };
            (selected, Some(audit))
        } else {
            (taus, None)
        };
        let params = average_merge(&from.params, &selected)?;
        let model = self.register(
            params,
            Derivation {
                stage: format!("task-arithmetic:filter={filter}"),
                parents: std::iter::once(from.digest.clone())
                    .chain(fts.iter().map(|m| m.digest.clone()))
                    .collect(),
                datasets: nodes.iter().map(|n| n.key.clone()).collect(),
                steps: fts.iter().map(|m| self.steps_of(&m.digest)).sum(),
            },
            vec![],
        );
        Ok(Merged { model, audit })
    }

    /// Plain (unfiltered) task-arithmetic merge of every source domain from θ₀.
    pub fn task_arithmetic_sources(&self, filter: bool) -> Result<Arc<Model>> {
        self.install(|| {
            let theta0 = self.theta0()?;
            let trains = self.source_trains();
            Ok(self.task_arithmetic(&theta0, &trains, filter, "sources")?.model)
        })
    }

    fn steps_of(&self, digest: &str) -> usize {
        self.checkpoint_entry(digest).map_or(0, |e| e.steps())
    }

    /// Fine-tune a seed model on a transfer target (head resized if needed).
    pub fn transfer(&self, from: &Arc<Model>, target: &DomainSplits) -> Result<Arc<Model>> {
        self.memoized(format!("transfer|{}|{}", from.digest, target.train.digest), || {
            let cfg = self.train_config("transfer", self.plan.budgets.transfer_epochs);
            let head_seed = self.seed(&[tag("head"), tag(&target.name)]);
            let out = transfer_finetune(&target.train.data, &from.params, &cfg, head_seed)
                .map_err(|e| e.at_node(&target.name))?;
            Ok(self.register(
                out.params,
                Derivation {
                    stage: format!("transfer:{}", target.name),
                    parents: vec![from.digest.clone()],
                    datasets: vec![target.train.key.clone()],
                    steps: out.steps,
                },
                vec![],
            ))
        })
    }

    pub fn source_trains(&self) -> Vec<Resolved> {
        self.with_world(|w| w.sources.iter().map(|s| s.train.clone()).collect())
    }

    fn pooled_sources(&self, trains: &[Resolved], name: &str) -> Result<Resolved> {
        self.with_world(|w| w.pool(name, &trains.iter().collect::<Vec<_>>()))
    }

    fn targets(&self) -> Vec<DomainSplits> {
        self.with_world(|w| w.targets.clone())
    }

    /// Transfer `seed` to every target; per-target cells in `table`/`row`,
    /// returning the accuracies (None for holes) and the digests of the seed
    /// and of every transferred model.
    fn transfer_row(
        &self,
        table: &str,
        row: &str,
        seed: &Result<Arc<Model>>,
        targets: &[DomainSplits],
    ) -> (Vec<Cell>, Vec<Option<f64>>, Vec<String>) {
        let results: Vec<(Vec<Cell>, Option<f64>, Option<String>)> = targets
            .par_iter()
            .map(|g| {
                let model = match seed {
                    Ok(s) => self.transfer(s, g),
                    Err(e) => Err(HarnessError::Usage(format!("seed model unavailable: {e}"))),
                };
                let digest = model.as_ref().ok().map(|m| m.digest.clone());
                let (mut cells, acc) = at(table, row, &g.name).metrics(&model, &g.test);
                // cite the seed first, then the transferred model
                if let (Ok(s), Some(_)) = (seed, acc) {
                    for c in &mut cells {
                        c.checkpoints.insert(0, s.digest.clone());
                    }
                }
                (cells, acc, digest)
            })
            .collect();
        let mut cells = Vec::new();
        let mut accs = Vec::new();
        let mut digests: Vec<String> = seed.iter().map(|s| s.digest.clone()).collect();
        for (c, a, d) in results {
            cells.extend(c);
            accs.push(a);
            digests.extend(d);
        }
        (cells, accs, digests)
    }

    fn finish(&self, sheet: Sheet) -> Report {
        let reg = self.registry.lock().expect("registry lock");
        let mut wanted: BTreeSet<String> = sheet.cells.iter().flat_map(|c| c.checkpoints.iter().cloned()).collect();
        let mut stack: Vec<String> = wanted.iter().cloned().collect();
        while let Some(d) = stack.pop() {
            if let Some(e) = reg.entries.get(&d) {
                for p in e.derivations.iter().flat_map(|x| &x.parents) {
                    if wanted.insert(p.clone()) {
                        stack.push(p.clone());
                    }
                }
            }
        }
        let checkpoints: BTreeMap<String, CheckpointEntry> = wanted
            .iter()
            .filter_map(|d| reg.entries.get(d).map(|e| (d.clone(), e.clone())))
            .collect();
        drop(reg);

        let world = self.world.lock().expect("world lock");
        let entries = world.entries();
        let mut keys: BTreeSet<String> = sheet.cells.iter().flat_map(|c| c.datasets.iter().cloned()).collect();
        keys.extend(checkpoints.values().flat_map(|e| e.derivations.iter().flat_map(|d| d.datasets.iter().cloned())));
        let mut datasets = BTreeMap::new();
        let mut stack: Vec<String> = keys.into_iter().collect();
        while let Some(k) = stack.pop() {
            if datasets.contains_key(&k) {
                continue;
            }
            if let Some(e) = entries.get(&k) {
                match &e.source {
                    crate::world::DatasetSource::Pooled { parts, .. } => stack.extend(parts.iter().cloned()),
                    crate::world::DatasetSource::Subsample { parent, .. } => stack.push(parent.clone()),
                    crate::world::DatasetSource::Recipe { .. } => {}
                }
                datasets.insert(k, e.clone());
            }
        }
        Report {
            experiment: sheet.experiment,
            plan_digest: self.plan.digest(),
            plan: self.plan.clone(),
            deviations: self.plan.deviations(),
            tables: sheet.tables,
            cells: sheet.cells,
            audits: sheet.audits,
            warnings: sheet.warnings,
            checkpoints,
            datasets,
        }
    }

    /// Parameters of every checkpoint a report references, for writing.
    pub fn params_for(&self, report: &Report) -> BTreeMap<String, ParamVector64> {
        let reg = self.registry.lock().expect("registry lock");
        report
            .checkpoints
            .keys()
            .filter_map(|d| reg.params.get(d).map(|m| (d.clone(), m.params.clone())))
            .collect()
    }

    /// Write `report` and its checkpoints to `dir`.
    pub fn write(&self, report: &Report, dir: impl AsRef<std::path::Path>) -> Result<()> {
        report.write(dir, &self.params_for(report))
    }

    // ---- experiments -----------------------------------------------------

    /// θ₀ evaluated on Z's train and test splits.
    pub fn run_pretrain(&self) -> Result<Report> {
        self.install(|| {
            let theta0 = Ok(self.theta0()?);
            let (train, test) = self.with_world(|w| (w.z_train.clone(), w.z_test.clone()));
            let mut sheet = Sheet::new("pretrain");
            sheet.table("pretrain", vec!["theta0".into()], vec![train.key.clone(), test.key.clone()]);
            for z in [&train, &test] {
                sheet.cells.extend(at("pretrain", "theta0", &z.key).metrics(&theta0, z).0);
            }
            Ok(self.finish(sheet))
        })
    }

    /// Train-set × test-set grid: per-domain fine-tunes, the pooled
    /// fine-tune and zero-shot θ₀ on every source and held-out test set.
    pub fn run_baseline_grid(&self) -> Result<Report> {
        self.install(|| {
            let theta0 = self.theta0()?;
            let trains = self.source_trains();
            let pooled = self.pooled_sources(&trains, ROW_POOLED)?;
            let epochs = self.plan.budgets.tk_product;
            let mut rows: Vec<(String, Resolved)> = trains.iter().map(|t| (t.name().to_string(), t.clone())).collect();
            rows.push((ROW_POOLED.into(), pooled));
            let mut models: Vec<(String, Result<Arc<Model>>)> = rows
                .par_iter()
                .map(|(name, data)| (name.clone(), self.finetune(&theta0, data, epochs)))
                .collect();
            models.push((ROW_ZERO_SHOT.into(), Ok(theta0)));

            let tests = self.with_world(|w| w.eval_sets());
            let mut sheet = Sheet::new("baseline-grid");
            sheet.table(
                "baseline_grid",
                models.iter().map(|(n, _)| n.clone()).collect(),
                tests.iter().map(|t| t.key.clone()).collect(),
            );
            let jobs: Vec<(&String, &Result<Arc<Model>>, &Resolved)> = models
                .iter()
                .flat_map(|(row, m)| tests.iter().map(move |t| (row, m, t)))
                .collect();
            let cells: Vec<Vec<Cell>> = jobs
                .par_iter()
                .map(|(row, m, t)| at("baseline_grid", row, &t.key).metrics(m, t).0)
                .collect();
            sheet.cells.extend(cells.into_iter().flatten());
            Ok(self.finish(sheet))
        })
    }

    /// Pooled fine-tune against group-level, individual and filtered
    /// task-vector averages, evaluated on in-domain and held-out sets.
    pub fn run_merge_variants(&self) -> Result<Report> {
        self.install(|| {
            let theta0 = self.theta0()?;
            let trains = self.source_trains();
            let mut sheet = Sheet::new("merge-variants");
            if trains.len() < 2 {
                return Err(HarnessError::Plan("merge variants need at least two source domains".into()));
            }
            let pooled = self.pooled_sources(&trains, ROW_POOLED)?;
            let mut rows: Vec<(String, Result<Arc<Model>>)> =
                vec![(ROW_FT_POOLED.into(), self.finetune(&theta0, &pooled, self.plan.budgets.tk_product))];

            if !self.plan.merge_groups.is_empty() {
                let groups = self.with_world(|w| {
                    self.plan
                        .merge_groups
                        .iter()
                        .map(|g| {
                            let parts: Vec<Resolved> = g
                                .domains
                                .iter()
                                .map(|d| w.sources[w.source_index(d).expect("validated domain")].train.clone())
                                .collect();
                            w.pool(&format!("group:{}", g.name), &parts.iter().collect::<Vec<_>>())
                        })
                        .collect::<Result<Vec<_>>>()
                })?;
                let merged = self.task_arithmetic(&theta0, &groups, false, ROW_AVG_GROUP).map(|m| m.model);
                rows.push((ROW_AVG_GROUP.into(), merged));
            }
            rows.push((
                ROW_AVG_IND.into(),
                self.task_arithmetic(&theta0, &trains, false, ROW_AVG_IND).map(|m| m.model),
            ));
            let orth = self.task_arithmetic(&theta0, &trains, true, ROW_AVG_ORTH);
            let orth = match orth {
                Ok(Merged { model, audit }) => {
                    if let Some(a) = audit {
                        if a.kept.len() == 1 {
                            sheet.warnings.push(format!(
                                "orthogonality filter at {} kept only {}; the merge is a single fine-tune",
                                a.threshold, a.kept[0]
                            ));
                        }
                        sheet.audits.push(a);
                    }
                    Ok(model)
                }
                Err(e) => Err(e),
            };
            rows.push((ROW_AVG_ORTH.into(), orth));

            let tests = self.with_world(|w| w.eval_sets());
            sheet.table(
                "merge_variants",
                rows.iter().map(|(n, _)| n.clone()).collect(),
                tests.iter().map(|t| t.key.clone()).collect(),
            );
            let jobs: Vec<(&String, &Result<Arc<Model>>, &Resolved)> = rows
                .iter()
                .flat_map(|(row, m)| tests.iter().map(move |t| (row, m, t)))
                .collect();
            let cells: Vec<Vec<Cell>> = jobs
                .par_iter()
                .map(|(row, m, t)| at("merge_variants", row, &t.key).metrics(m, t).0)
                .collect();
            sheet.cells.extend(cells.into_iter().flatten());

            // cosine table between the individual fine-tunes' task vectors
            if let Some(a) = sheet.audits.first().cloned() {
                let fts: Vec<String> = trains
                    .iter()
                    .map(|t| self.finetune(&theta0, t, self.plan.budgets.tk_product).map(|m| m.digest.clone()))
                    .collect::<Result<_>>()?;
                sheet.table("cosine", a.tags.clone(), a.tags.clone());
                for (i, ri) in a.tags.iter().enumerate() {
                    for (j, cj) in a.tags.iter().enumerate() {
                        sheet.cells.push(at("cosine", ri, cj).value(
                            metric::COSINE,
                            a.matrix[i][j],
                            vec![theta0.digest.clone(), fts[i].clone(), fts[j].clone()],
                            vec![trains[i].key.clone(), trains[j].key.clone()],
                        ));
                    }
                }
            }
            Ok(self.finish(sheet))
        })
    }

    /// Transfer from four seeds (θ₀, pooled fine-tune, distributed merge,
    /// random-start merge) to every target, plus ×Δ over the baseline.
    pub fn run_transfer(&self) -> Result<Report> {
        self.install(|| {
            let theta0 = self.theta0()?;
            let trains = self.source_trains();
            let pooled = self.pooled_sources(&trains, ROW_POOLED)?;
            let (t, k, filter) = self.plan.distributed_schedule();
            let (rt, rk) = self.plan.random_schedule();
            let random = self.random_seed_model()?;
            let jobs: Vec<(&str, Box<dyn Fn() -> Result<Arc<Model>> + Sync + '_>)> = vec![
                (ROW_BASELINE, Box::new(|| Ok(theta0.clone()))),
                (
                    ROW_CENTRALIZED,
                    Box::new(|| self.finetune(&theta0, &pooled, self.plan.budgets.tk_product)),
                ),
                (ROW_DISTRIBUTED, Box::new(|| self.meta(&theta0, &trains, t, k, filter))),
                (ROW_RANDOM, Box::new(|| self.meta(&random, &trains, rt, rk, filter))),
            ];
            let seeds: Vec<Result<Arc<Model>>> = jobs.par_iter().map(|(_, f)| f()).collect();
            let targets = self.targets();

            let mut sheet = Sheet::new("transfer");
            let mut columns: Vec<String> = targets.iter().map(|g| g.name.clone()).collect();
            columns.push(COL_X_DELTA.into());
            sheet.table("transfer", jobs.iter().map(|(n, _)| n.to_string()).collect(), columns);

            let rows: Vec<(Vec<Cell>, Vec<Option<f64>>, Vec<String>)> = jobs
                .par_iter()
                .zip(&seeds)
                .map(|((name, _), seed)| self.transfer_row("transfer", name, seed, &targets))
                .collect();
            let (_, base_acc, base_ck) = &rows[0];
            for ((name, _), (cells, accs, cks)) in jobs.iter().zip(&rows) {
                sheet.cells.extend(cells.iter().cloned());
                let loc = at("transfer", name, COL_X_DELTA);
                let ratios: Option<Vec<f64>> = accs
                    .iter()
                    .zip(base_acc)
                    .map(|(a, b)| match (a, b) {
                        (Some(a), Some(b)) if *b > 0.0 => Some(a / b),
                        _ => None,
                    })
                    .collect();
                sheet.cells.push(match ratios {
                    Some(r) => loc.value(
                        metric::X_DELTA,
                        r.iter().sum::<f64>() / r.len() as f64,
                        cks.iter().chain(base_ck).cloned().collect::<BTreeSet<_>>().into_iter().collect(),
                        targets.iter().map(|g| g.test.key.clone()).collect(),
                    ),
                    None => loc.hole(
                        metric::X_DELTA,
                        "undefined: a transfer failed or the baseline accuracy is zero".into(),
                    ),
                });
            }
            Ok(self.finish(sheet))
        })
    }

    /// Mean transfer accuracy for every (T, k) with T·k = budget.
    pub fn run_tk_sweep(&self) -> Result<Report> {
        self.install(|| {
            let theta0 = self.theta0()?;
            let trains = self.source_trains();
            let (_, _, filter) = self.plan.distributed_schedule();
            let budget = self.plan.budgets.tk_product;
            let targets = self.targets();
            let schedule: Vec<(usize, usize)> = self.plan.sweep.t_values.iter().map(|&t| (t, budget / t)).collect();

            let mut sheet = Sheet::new("tk-sweep");
            let mut columns: Vec<String> = targets.iter().map(|g| g.name.clone()).collect();
            columns.push(COL_MEAN.into());
            columns.push(COL_STEPS.into());
            sheet.table("tk_sweep", schedule.iter().map(|&(t, k)| tk_row(t, k)).collect(), columns);

            let rows: Vec<(String, Result<Arc<Model>>)> = schedule
                .par_iter()
                .map(|&(t, k)| (tk_row(t, k), self.meta(&theta0, &trains, t, k, filter)))
                .collect();
            for (row, seed) in &rows {
                let (cells, accs, cks) = self.transfer_row("tk_sweep", row, seed, &targets);
                sheet.cells.extend(cells);
                push_mean(&mut sheet, "tk_sweep", row, &accs, cks, &targets);
                let loc = at("tk_sweep", row, COL_STEPS);
                sheet.cells.push(match seed {
                    Ok(s) => loc.value(
                        metric::STEPS,
                        self.steps_of(&s.digest) as f64,
                        vec![s.digest.clone()],
                        trains.iter().map(|t| t.key.clone()).collect(),
                    ),
                    Err(e) => loc.hole(metric::STEPS, e.to_string()),
                });
            }
            Ok(self.finish(sheet))
        })
    }

    /// Distributed against centralized seeds when every source domain is
    /// cut to a nested fraction of its training data.
    pub fn run_subsample_sweep(&self, fractions: &[f64]) -> Result<Report> {
        for &f in fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(HarnessError::Plan(format!("fraction {f} outside (0, 1]")));
            }
        }
        self.install(|| {
            let theta0 = self.theta0()?;
            let (t, k, filter) = self.plan.distributed_schedule();
            let targets = self.targets();
            let n_sources = self.plan.source_domains.len();
            let mut sheet = Sheet::new("subsample-sweep");
            let columns: Vec<String> = fractions.iter().map(|&f| fraction_column(f)).collect();
            sheet.table("subsample", vec![ROW_CENTRALIZED.into(), ROW_DISTRIBUTED.into()], columns);
            let mut detail_rows = Vec::new();
            let mut summary = Vec::new();
            for &f in fractions {
                let parts = self.with_world(|w| {
                    (0..n_sources).map(|i| w.subsample_source(i, f)).collect::<Result<Vec<_>>>()
                })?;
                let name = if f == 1.0 { ROW_POOLED.to_string() } else { format!("{ROW_POOLED}@{f}") };
                let pooled = self.pooled_sources(&parts, &name)?;
                let seeds = [
                    (ROW_CENTRALIZED, self.finetune(&theta0, &pooled, self.plan.budgets.tk_product)),
                    (ROW_DISTRIBUTED, self.meta(&theta0, &parts, t, k, filter)),
                ];
                for (regime, seed) in &seeds {
                    let row = format!("{regime}@{f}");
                    let (cells, accs, cks) = self.transfer_row("subsample_targets", &row, seed, &targets);
                    sheet.cells.extend(cells);
                    push_mean(&mut sheet, "subsample_targets", &row, &accs, cks.clone(), &targets);
                    detail_rows.push(row);
                    summary.push((regime.to_string(), f, accs, cks));
                }
            }
            let mut columns: Vec<String> = targets.iter().map(|g| g.name.clone()).collect();
            columns.push(COL_MEAN.into());
            sheet.table("subsample_targets", detail_rows, columns);
            for (regime, f, accs, cks) in summary {
                let col = fraction_column(f);
                let loc = at("subsample", &regime, &col);
                match accs.iter().copied().collect::<Option<Vec<f64>>>() {
                    Some(a) => {
                        let (mean, std) = mean_std(&a);
                        let ds: Vec<String> = targets.iter().map(|g| g.test.key.clone()).collect();
                        sheet.cells.push(loc.value(metric::MEAN_ACCURACY, mean, cks.clone(), ds.clone()));
                        sheet.cells.push(loc.value(metric::STD_ACCURACY, std, cks, ds));
                    }
                    None => {
                        sheet.cells.push(loc.hole(metric::MEAN_ACCURACY, "a transfer failed".into()));
                        sheet.cells.push(loc.hole(metric::STD_ACCURACY, "a transfer failed".into()));
                    }
                }
            }
            Ok(self.finish(sheet))
        })
    }

    /// Transfer from task-vector averages with one domain (or one named
    /// group) left out, plus the all-domain reference.
    pub fn run_leave_one_out(&self) -> Result<Report> {
        self.install(|| {
            let theta0 = self.theta0()?;
            let trains = self.source_trains();
            if trains.len() < 2 {
                return Err(HarnessError::Plan("leave-one-out needs at least two source domains".into()));
            }
            let targets = self.targets();
            let mut subsets: Vec<(String, Vec<Resolved>)> = trains
                .iter()
                .map(|left| {
                    let rest = trains.iter().filter(|t| t.key != left.key).cloned().collect();
                    (format!("without {}", left.name()), rest)
                })
                .collect();
            for m in &self.plan.group_masks {
                let rest = trains
                    .iter()
                    .filter(|t| !m.domains.iter().any(|d| d == t.name()))
                    .cloned()
                    .collect();
                subsets.push((format!("mask:{}", m.name), rest));
            }
            subsets.push(("all".into(), trains.clone()));

            let seeds: Vec<Result<Arc<Model>>> = subsets
                .par_iter()
                .map(|(row, nodes)| self.task_arithmetic(&theta0, nodes, false, row).map(|m| m.model))
                .collect();

            let mut sheet = Sheet::new("leave-one-out");
            let mut columns: Vec<String> = targets.iter().map(|g| g.name.clone()).collect();
            columns.push(COL_MEAN.into());
            let n = subsets.len();
            sheet.table("loo", subsets[..n - 1].iter().map(|(r, _)| r.clone()).collect(), columns.clone());
            sheet.table("loo_reference", vec!["all".into()], columns);
            for (i, ((row, _), seed)) in subsets.iter().zip(&seeds).enumerate() {
                let table = if i + 1 == n { "loo_reference" } else { "loo" };
                let (cells, accs, cks) = self.transfer_row(table, row, seed, &targets);
                sheet.cells.extend(cells);
                push_mean(&mut sheet, table, row, &accs, cks, &targets);
            }
            Ok(self.finish(sheet))
        })
    }

    /// Bring a model from outside the lab (e.g. a checkpoint file) into the
    /// registry so reports can cite it.
    pub fn adopt(&self, params: ParamVector64, origin: &str) -> Arc<Model> {
        self.register(
            params,
            Derivation {
                stage: format!("external:{origin}"),
                parents: vec![],
                datasets: vec![],
                steps: 0,
            },
            vec![],
        )
    }

    fn source(&self, name: &str) -> Result<DomainSplits> {
        self.with_world(|w| w.source_index(name).map(|i| w.sources[i].clone()))
            .ok_or_else(|| HarnessError::Usage(format!("no source domain {name:?} in this plan")))
    }

    /// One node update U^k(d, θ) from θ₀ (or `from`), scored on the domain's test split.
    pub fn run_train_node(&self, domain: &str, from: Option<Arc<Model>>, epochs: Option<usize>) -> Result<Report> {
        self.install(|| {
            let d = self.source(domain)?;
            let from = match from {
                Some(m) => m,
                None => self.theta0()?,
            };
            let epochs = epochs.unwrap_or(self.plan.budgets.tk_product);
            let model = self.finetune(&from, &d.train, epochs);
            let mut sheet = Sheet::new("train-node");
            sheet.table("train_node", vec![domain.into()], vec![d.test.key.clone()]);
            sheet.cells.extend(at("train_node", domain, &d.test.key).metrics(&model, &d.test).0);
            Ok(self.finish(sheet))
        })
    }

    /// Multi-round averaging over every source domain from θ₀, scored on
    /// all source and held-out test sets.
    pub fn run_meta_train(&self, rounds: usize, epochs: usize, filter: bool) -> Result<Report> {
        if rounds == 0 || epochs == 0 {
            return Err(HarnessError::Plan("rounds and epochs must be >= 1".into()));
        }
        self.install(|| {
            let theta0 = self.theta0()?;
            let model = self.meta(&theta0, &self.source_trains(), rounds, epochs, filter);
            let row = tk_row(rounds, epochs);
            let tests = self.with_world(|w| w.eval_sets());
            let mut sheet = Sheet::new("meta-train");
            sheet.table("meta_train", vec![row.clone()], tests.iter().map(|t| t.key.clone()).collect());
            for t in &tests {
                sheet.cells.extend(at("meta_train", &row, &t.key).metrics(&model, t).0);
            }
            Ok(self.finish(sheet))
        })
    }

    /// Transfer θ₀ (or `from`) to one target.
    pub fn run_transfer_one(&self, target: &str, from: Option<Arc<Model>>) -> Result<Report> {
        self.install(|| {
            let g = self
                .targets()
                .into_iter()
                .find(|g| g.name == target)
                .ok_or_else(|| HarnessError::Usage(format!("no transfer target {target:?} in this plan")))?;
            let from = match from {
                Some(m) => m,
                None => self.theta0()?,
            };
            let mut sheet = Sheet::new("transfer-one");
            sheet.table("transfer_one", vec![from.digest.clone()], vec![g.name.clone()]);
            let (cells, _, _) = self.transfer_row("transfer_one", &from.digest, &Ok(from.clone()), &[g]);
            sheet.cells.extend(cells);
            Ok(self.finish(sheet))
        })
    }

    /// Evaluate an arbitrary model on a named dataset key.
    pub fn evaluate_on(&self, model: &ParamVector64, key: &str) -> Result<MetricsReport> {
        let data = self.with_world(|w| {
            w.eval_sets()
                .into_iter()
                .chain(w.sources.iter().map(|s| s.train.clone()))
                .chain(w.targets.iter().flat_map(|t| [t.train.clone(), t.test.clone()]))
                .chain([w.z_train.clone(), w.z_test.clone()])
                .find(|r| r.key == key)
        });
        let data = data.ok_or_else(|| HarnessError::Usage(format!("no dataset {key:?} in this plan")))?;
        let mut report = self.install(|| evaluate(model, &data.data, false))?;
        report.dataset_id = data.key;
        Ok(report)
    }
}

fn push_mean(
    sheet: &mut Sheet,
    table: &str,
    row: &str,
    accs: &[Option<f64>],
    checkpoints: Vec<String>,
    targets: &[DomainSplits],
) {
    let loc = at(table, row, COL_MEAN);
    sheet.cells.push(match accs.iter().copied().collect::<Option<Vec<f64>>>() {
        Some(a) => loc.value(
            metric::MEAN_ACCURACY,
            mean_std(&a).0,
            checkpoints,
            targets.iter().map(|g| g.test.key.clone()).collect(),
        ),
        None => loc.hole(metric::MEAN_ACCURACY, "a transfer failed".into()),
    });
}
