use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use mergelab_core::checkpoint::save_params;
use mergelab_core::glyphgen::write_glyf;
use mergelab_core::merge::{average_merge, orthogonality_filter, task_vector};
use mergelab_harness::lab::Model;
use mergelab_harness::provenance::{load_checkpoint, verify_provenance};
use mergelab_harness::report::{sidecar_path, CheckpointEntry, Derivation, Report};
use mergelab_harness::world::rebuild;
use mergelab_harness::{ExperimentPlan, HarnessError, Lab, Result};

#[derive(Parser)]
#[command(name = "mergelab", version, about = "Distributed task-vector merging experiments on synthetic glyph strings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment plan (JSON).
    #[arg(long)]
    plan: PathBuf,
    /// Output directory; defaults to the plan's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every dataset of a plan and write manifests plus GLYF files.
    GenData(Common),
    /// Train θ₀ on the pretraining mixture.
    Pretrain(Common),
    /// Fine-tune one source domain (a single node update).
    TrainNode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        domain: String,
        /// Start from this checkpoint instead of θ₀.
        #[arg(long)]
        from: Option<PathBuf>,
        /// Epochs; defaults to the plan's T·k budget.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Average the task vectors of node checkpoints relative to a base.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long = "node", required = true)]
        nodes: Vec<PathBuf>,
        /// Drop entangled task vectors first (|cos| above this threshold).
        #[arg(long)]
        filter: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-round averaging over every source domain, from θ₀.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        filter: bool,
    },
    /// Fine-tune θ₀ (or a checkpoint) on one transfer target.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        target: String,
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Per-domain, pooled and zero-shot models on every test set.
    BaselineGrid(Common),
    /// Pooled fine-tune against group, individual and filtered averages.
    MergeVariants(Common),
    /// Transfer accuracy for each T with T·k fixed.
    TkSweep(Common),
    /// Distributed against centralized under nested data subsampling.
    SubsampleSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated fractions; defaults to the plan's sweep.
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Leave-one-domain-out and group-mask ablations.
    Loo(Common),
    /// Score a checkpoint on one dataset of a plan (e.g. `upright/test`).
    Eval {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: String,
    },
    /// Check every digest and manifest a report relies on.
    VerifyProvenance { dir: PathBuf },
}

fn open_lab(common: &Common) -> Result<(Lab, PathBuf)> {
    let plan = ExperimentPlan::load(&common.plan)?;
    let out = common.out.clone().unwrap_or_else(|| plan.output_dir.clone());
    Ok((Lab::new(plan, common.workers)?, out))
}

fn emit(lab: &Lab, report: &Report, out: &Path) -> Result<()> {
    lab.write(report, out)?;
    print!("{}", report.render_text());
    println!("wrote {}", out.display());
    Ok(())
}

fn adopt(lab: &Lab, path: &Option<PathBuf>) -> Result<Option<Arc<Model>>> {
    path.as_ref()
        .map(|p| {
            let (params, _) = load_checkpoint(p)?;
            Ok(lab.adopt(params, &p.display().to_string()))
        })
        .transpose()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let (lab, out) = open_lab(&common)?;
            let dir = out.join("datasets");
            fs::create_dir_all(&dir).map_err(|e| HarnessError::Io { path: dir.clone(), source: e })?;
            let entries = lab.with_world(|w| w.entries().clone());
            for key in entries.keys() {
                let data = lab.install(|| rebuild(&entries, key))?;
                let path = dir.join(format!("{}.glyf", key.replace('/', "__")));
                let file = fs::File::create(&path).map_err(|e| HarnessError::Io { path: path.clone(), source: e })?;
                write_glyf(std::io::BufWriter::new(file), &data)?;
                println!("{key:24} {:6} samples  {}", entries[key].count, entries[key].digest);
            }
            let manifest = dir.join("manifests.json");
            let text = serde_json::to_string_pretty(&entries).expect("manifests serialize");
            fs::write(&manifest, text).map_err(|e| HarnessError::Io { path: manifest, source: e })?;
            Ok(())
        }
        Command::Pretrain(common) => {
            let (lab, out) = open_lab(&common)?;
            let report = lab.run_pretrain()?;
            emit(&lab, &report, &out)
        }
        Command::TrainNode { common, domain, from, epochs } => {
            let (lab, out) = open_lab(&common)?;
            let from = adopt(&lab, &from)?;
            let report = lab.run_train_node(&domain, from, epochs)?;
            emit(&lab, &report, &out)
        }
        Command::Merge { base, nodes, filter, out } => merge_files(&base, &nodes, filter, &out),
        Command::MetaTrain { common, rounds, epochs, filter } => {
            let (lab, out) = open_lab(&common)?;
            let (t, k, f) = lab.plan().distributed_schedule();
            let rounds = rounds.unwrap_or(t);
            let epochs = epochs.unwrap_or(if rounds == t { k } else { lab.plan().budgets.tk_product / rounds });
            let report = lab.run_meta_train(rounds, epochs, filter || f)?;
            emit(&lab, &report, &out)
        }
        Command::Transfer { common, target, from } => {
            let (lab, out) = open_lab(&common)?;
            let from = adopt(&lab, &from)?;
            let report = lab.run_transfer_one(&target, from)?;
            emit(&lab, &report, &out)
        }
        Command::BaselineGrid(common) => {
            let (lab, out) = open_lab(&common)?;
            let report = lab.run_baseline_grid()?;
            emit(&lab, &report, &out)
        }
        Command::MergeVariants(common) => {
            let (lab, out) = open_lab(&common)?;
            let report = lab.run_merge_variants()?;
            emit(&lab, &report, &out)
        }
        Command::TkSweep(common) => {
            let (lab, out) = open_lab(&common)?;
            let report = lab.run_tk_sweep()?;
            emit(&lab, &report, &out)
        }
        Command::SubsampleSweep { common, fractions } => {
            let (lab, out) = open_lab(&common)?;
            let fractions = fractions.unwrap_or_else(|| lab.plan().sweep.fractions.clone());
            let report = lab.run_subsample_sweep(&fractions)?;
            emit(&lab, &report, &out)
        }
        Command::Loo(common) => {
            let (lab, out) = open_lab(&common)?;
            let report = lab.run_leave_one_out()?;
            emit(&lab, &report, &out)
        }
        Command::Eval { plan, ckpt, dataset } => {
            let plan = ExperimentPlan::load(&plan)?;
            let lab = Lab::new(plan, 1)?;
            let (params, _) = load_checkpoint(&ckpt)?;
            let metrics = lab.evaluate_on(&params, &dataset)?;
            println!("{}", serde_json::to_string_pretty(&metrics).expect("metrics serialize"));
            Ok(())
        }
        Command::VerifyProvenance { dir } => {
            let s = verify_provenance(&dir)?;
            println!(
                "provenance ok: {} checkpoints, {} datasets regenerated, {} cells",
                s.checkpoints, s.datasets, s.cells
            );
            Ok(())
        }
    }
}

/// `merge` works on checkpoint files alone: no plan, no training.
fn merge_files(base: &Path, nodes: &[PathBuf], filter: Option<f64>, out: &Path) -> Result<()> {
    let (theta0, base_entry) = load_checkpoint(base)?;
    let mut taus = Vec::new();
    let mut parents = vec![base_entry.digest.clone()];
    for p in nodes {
        let (params, entry) = load_checkpoint(p)?;
        let tag = p.file_stem().map_or_else(|| entry.digest.clone(), |s| s.to_string_lossy().into_owned());
        taus.push(task_vector(&params, &theta0, tag)?);
        parents.push(entry.digest);
    }
    if let Some(threshold) = filter {
        if taus.len() >= 2 {
            let outcome = orthogonality_filter(&taus, threshold)?;
            for step in &outcome.trail {
                println!("dropped {} (mean |cos| {:.4})", step.tag, step.mean_abs_cos);
            }
            taus = outcome.kept.iter().map(|&i| taus[i].clone()).collect();
        }
    }
    let merged = average_merge(&theta0, &taus)?;
    let ckpt_dir = out.join("ckpt");
    fs::create_dir_all(&ckpt_dir).map_err(|e| HarnessError::Io { path: ckpt_dir.clone(), source: e })?;
    let digest = mergelab_core::checkpoint::params_digest(&merged);
    let entry = CheckpointEntry {
        file: CheckpointEntry::file_for(&digest),
        digest: digest.clone(),
        spec: merged.spec().clone(),
        derivations: vec![Derivation {
            stage: format!("merge:filter={filter:?}"),
            parents,
            datasets: vec![],
            steps: 0,
        }],
        rounds: vec![],
    };
    let path = out.join(&entry.file);
    save_params(&path, &merged)?;
    let sidecar = sidecar_path(&path);
    let text = serde_json::to_string_pretty(&entry).expect("entry serializes");
    fs::write(&sidecar, text).map_err(|e| HarnessError::Io { path: sidecar, source: e })?;
    println!("{digest}  {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
