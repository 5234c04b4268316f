//! Reports: named grids of metric cells plus the provenance needed to trace
//! every number back to checkpoints and dataset recipes.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mergelab_core::checkpoint::save_params;
use mergelab_core::merge::{FilterStep, RoundRecord};
use mergelab_core::{ModelSpec, ParamVector64};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::plan::{Deviation, ExperimentPlan};
use crate::world::DatasetEntry;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const ROUNDS_JSONL: &str = "rounds.jsonl";
pub const PLAN_JSON: &str = "plan.json";
pub const CKPT_DIR: &str = "ckpt";

pub mod metric {
    pub const ACCURACY: &str = "seq_accuracy";
    pub const CER: &str = "cer";
    pub const X_DELTA: &str = "x_delta";
    pub const MEAN_ACCURACY: &str = "mean_seq_accuracy";
    pub const STD_ACCURACY: &str = "std_seq_accuracy";
    pub const STEPS: &str = "grad_steps";
    pub const COSINE: &str = "cosine";
}

/// One number in one table. `value` is `None` for a hole, with the reason
/// in `note`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cell {
    pub table: String,
    pub row: String,
    pub column: String,
    pub metric: String,
    pub value: Option<f64>,
    /// Digests of the checkpoints this number was computed from.
    pub checkpoints: Vec<String>,
    /// Keys of the dataset entries it was computed on.
    pub datasets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub name: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
}

/// One way a checkpoint was produced.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Derivation {
    pub stage: String,
    pub parents: Vec<String>,
    pub datasets: Vec<String>,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub digest: String,
    pub file: String,
    pub spec: ModelSpec,
    /// Sorted; two pipelines that land on the same bits both appear.
    pub derivations: Vec<Derivation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rounds: Vec<RoundRecord>,
}

impl CheckpointEntry {
    pub fn file_for(digest: &str) -> String {
        format!("{CKPT_DIR}/{digest}.mmck")
    }

    pub fn steps(&self) -> usize {
        self.derivations.first().map_or(0, |d| d.steps)
    }
}

/// Pairwise cosines and the greedy filter's decisions for one merge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterAudit {
    pub name: String,
    pub threshold: f64,
    pub tags: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
    pub trail: Vec<FilterStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub experiment: String,
    pub plan_digest: String,
    pub plan: ExperimentPlan,
    pub deviations: Vec<Deviation>,
    pub tables: Vec<Table>,
    pub cells: Vec<Cell>,
    #[serde(default)]
    pub audits: Vec<FilterAudit>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub checkpoints: BTreeMap<String, CheckpointEntry>,
    pub datasets: BTreeMap<String, DatasetEntry>,
}

impl Report {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn cell(&self, table: &str, row: &str, column: &str, metric: &str) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.table == table && c.row == row && c.column == column && c.metric == metric)
    }

    pub fn value(&self, table: &str, row: &str, column: &str, metric: &str) -> Option<f64> {
        self.cell(table, row, column, metric).and_then(|c| c.value)
    }

    pub fn holes(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.value.is_none())
    }

    /// The CSV rendering: one line per cell, in cell order.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["table", "row", "column", "metric", "value", "checkpoints", "datasets", "note"])?;
        for c in &self.cells {
            let value = c.value.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                c.table.as_str(),
                c.row.as_str(),
                c.column.as_str(),
                c.metric.as_str(),
                value.as_str(),
                c.checkpoints.join(";").as_str(),
                c.datasets.join(";").as_str(),
                c.note.as_deref().unwrap_or(""),
            ])?;
        }
        w.into_inner().map_err(|e| HarnessError::Usage(format!("csv flush: {e}")))
    }

    pub fn rounds_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (digest, entry) in &self.checkpoints {
            for r in &entry.rounds {
                let line = serde_json::json!({ "checkpoint": digest, "record": r });
                writeln!(out, "{line}").expect("writing to a Vec cannot fail");
            }
        }
        out
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Report> {
        let path = dir.as_ref().join(REPORT_JSON);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|source| HarnessError::Json { path, source })
    }

    /// Write the report files and every referenced checkpoint under `dir`.
    /// `params` must hold the values of each checkpoint in `self.checkpoints`.
    pub fn write(&self, dir: impl AsRef<Path>, params: &BTreeMap<String, ParamVector64>) -> Result<()> {
        let dir = dir.as_ref();
        let ckpt = dir.join(CKPT_DIR);
        fs::create_dir_all(&ckpt).map_err(|e| HarnessError::io(&ckpt, e))?;
        for (digest, entry) in &self.checkpoints {
            let p = params
                .get(digest)
                .ok_or_else(|| HarnessError::Usage(format!("no parameters for checkpoint {digest}")))?;
            let path = dir.join(&entry.file);
            let written = save_params(&path, p).map_err(|e| match e {
                mergelab_core::Error::Io(source) => HarnessError::io(&path, source),
                other => other.into(),
            })?;
            debug_assert_eq!(&written, digest);
            write_json(&sidecar_path(&path), entry)?;
        }
        let plan_path = dir.join(PLAN_JSON);
        write_bytes(&plan_path, self.plan.to_json().as_bytes())?;
        write_json(&dir.join(REPORT_JSON), self)?;
        write_bytes(&dir.join(REPORT_CSV), &self.to_csv()?)?;
        write_bytes(&dir.join(ROUNDS_JSONL), &self.rounds_jsonl())
    }
}

impl Report {
    /// Plain-text grids of each table's first metric, for the terminal.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            let metric = self
                .cells
                .iter()
                .find(|c| c.table == t.name)
                .map_or("", |c| c.metric.as_str());
            out.push_str(&format!("[{}] {metric}\n", t.name));
            let width = t.rows.iter().map(|r| r.len()).max().unwrap_or(0).max(4);
            out.push_str(&format!("{:width$}", ""));
            for c in &t.columns {
                out.push_str(&format!("  {c:>10}"));
            }
            out.push('\n');
            for r in &t.rows {
                out.push_str(&format!("{r:width$}"));
                for c in &t.columns {
                    let cell = self
                        .cells
                        .iter()
                        .find(|x| x.table == t.name && &x.row == r && &x.column == c);
                    let text = match cell {
                        Some(Cell { value: Some(v), .. }) => format!("{v:.4}"),
                        Some(_) => "hole".into(),
                        None => "-".into(),
                    };
                    out.push_str(&format!("  {text:>10}"));
                }
                out.push('\n');
            }
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// `ckpt/<digest>.mmck` → `ckpt/<digest>.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Population mean and standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
