//! Re-check everything a report claims: plan digest, checkpoint envelopes
//! and digests, dataset manifests (by regeneration), and that every number
//! points at artifacts that exist.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use mergelab_core::checkpoint::{decode_params, verify_envelope, PARAMS_MAGIC};
use mergelab_core::glyphgen::dataset_digest;
use mergelab_core::ParamVector64;

use crate::error::{HarnessError, Result};
use crate::plan::ExperimentPlan;
use crate::report::{sidecar_path, CheckpointEntry, Report, PLAN_JSON, REPORT_CSV, ROUNDS_JSONL};
use crate::world::rebuild;

#[derive(Clone, Debug, PartialEq)]
pub struct ProvenanceSummary {
    pub checkpoints: usize,
    pub datasets: usize,
    pub cells: usize,
}

fn fail(msg: impl Into<String>) -> HarnessError {
    HarnessError::Provenance(msg.into())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| fail(format!("{}: {e}", path.display())))
}

/// Verify the report written to `dir`. Any mismatch is a
/// [`HarnessError::Provenance`].
pub fn verify_provenance(dir: impl AsRef<Path>) -> Result<ProvenanceSummary> {
    let dir = dir.as_ref();
    let report = Report::load(dir).map_err(|e| fail(format!("cannot load report: {e}")))?;

    let plan_text = String::from_utf8(read(&dir.join(PLAN_JSON))?).map_err(|_| fail("plan.json is not UTF-8"))?;
    let plan = ExperimentPlan::from_json(&plan_text).map_err(|e| fail(format!("plan.json: {e}")))?;
    if plan.digest() != report.plan_digest || report.plan.digest() != report.plan_digest {
        return Err(fail("plan digest does not match the report"));
    }

    for (digest, entry) in &report.checkpoints {
        verify_checkpoint(dir, digest, entry)?;
        for d in &entry.derivations {
            if let Some(p) = d.parents.iter().find(|p| !report.checkpoints.contains_key(*p)) {
                return Err(fail(format!("checkpoint {digest} names unknown parent {p}")));
            }
            if let Some(k) = d.datasets.iter().find(|k| !report.datasets.contains_key(*k)) {
                return Err(fail(format!("checkpoint {digest} names unknown dataset {k}")));
            }
        }
        if let Some(last) = entry.rounds.last() {
            if &last.merged_digest != digest {
                return Err(fail(format!("round log of {digest} ends at {}", last.merged_digest)));
            }
        }
    }

    for c in &report.cells {
        if c.value.is_none() {
            continue;
        }
        if c.checkpoints.is_empty() || c.datasets.is_empty() {
            return Err(fail(format!("cell {}/{}/{}/{} has no provenance", c.table, c.row, c.column, c.metric)));
        }
        if let Some(d) = c.checkpoints.iter().find(|d| !report.checkpoints.contains_key(*d)) {
            return Err(fail(format!("cell {}/{}/{} cites unknown checkpoint {d}", c.table, c.row, c.column)));
        }
        if let Some(k) = c.datasets.iter().find(|k| !report.datasets.contains_key(*k)) {
            return Err(fail(format!("cell {}/{}/{} cites unknown dataset {k}", c.table, c.row, c.column)));
        }
    }

    let mut rebuilt = BTreeMap::new();
    for (key, entry) in &report.datasets {
        let data = rebuild(&report.datasets, key).map_err(|e| fail(format!("dataset {key}: {e}")))?;
        let digest = dataset_digest(&data)?;
        if digest != entry.digest || data.len() != entry.count {
            return Err(fail(format!("dataset {key} regenerates to {digest}, manifest says {}", entry.digest)));
        }
        rebuilt.insert(key.clone(), digest);
    }

    if read(&dir.join(REPORT_CSV))? != report.to_csv()? {
        return Err(fail("report.csv does not match report.json"));
    }
    if read(&dir.join(ROUNDS_JSONL))? != report.rounds_jsonl() {
        return Err(fail("rounds.jsonl does not match report.json"));
    }

    Ok(ProvenanceSummary {
        checkpoints: report.checkpoints.len(),
        datasets: rebuilt.len(),
        cells: report.cells.len(),
    })
}

fn verify_checkpoint(dir: &Path, digest: &str, entry: &CheckpointEntry) -> Result<()> {
    if entry.digest != digest || entry.file != CheckpointEntry::file_for(digest) {
        return Err(fail(format!("checkpoint entry {digest} is inconsistent")));
    }
    let path = dir.join(&entry.file);
    let bytes = read(&path)?;
    let (magic, hash, found) = verify_envelope(&bytes).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    if &magic != PARAMS_MAGIC {
        return Err(fail(format!("{} is not a parameter checkpoint", path.display())));
    }
    if found != digest {
        return Err(fail(format!("{} has digest {found}, report says {digest}", path.display())));
    }
    let layout = entry.spec.layout()?;
    if &hash != layout.hash() {
        return Err(fail(format!("{} was written for a different layout", path.display())));
    }
    decode_params::<f64>(&bytes, layout).map_err(|e| fail(format!("{}: {e}", path.display())))?;
    let sidecar = read(&sidecar_path(&path))?;
    let recorded: CheckpointEntry =
        serde_json::from_slice(&sidecar).map_err(|e| fail(format!("sidecar of {digest}: {e}")))?;
    if &recorded != entry {
        return Err(fail(format!("sidecar of {digest} disagrees with the report")));
    }
    Ok(())
}

/// Load a checkpoint written by this tool, using its sidecar for the layout.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamVector64, CheckpointEntry)> {
    let path = path.as_ref();
    let sidecar = sidecar_path(path);
    let text = fs::read(&sidecar).map_err(|e| HarnessError::io(&sidecar, e))?;
    let entry: CheckpointEntry =
        serde_json::from_slice(&text).map_err(|source| HarnessError::Json { path: sidecar, source })?;
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    let params = decode_params(&bytes, entry.spec.layout()?)?;
    Ok((params, entry))
}
