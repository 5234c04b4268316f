mod common;

use std::collections::BTreeSet;

use mergelab_harness::lab::*;
use mergelab_harness::report::metric;
use mergelab_harness::Lab;

use common::tiny_plan;

#[test]
fn baseline_grid_is_rows_by_test_sets() {
    let lab = Lab::new(tiny_plan(), 1).unwrap();
    let report = lab.run_baseline_grid().unwrap();
    let t = report.table("baseline_grid").unwrap();
    // two per-domain rows, pooled, zero-shot × two source tests and one held-out set
    assert_eq!(t.rows, ["upright", "slanted", ROW_POOLED, ROW_ZERO_SHOT]);
    assert_eq!(t.columns.len(), 3);
    assert_eq!(report.cells.len(), 4 * 3 * 2);
    assert_eq!(report.holes().count(), 0);

    let theta0 = lab.theta0().unwrap();
    for c in report.cells.iter().filter(|c| c.row == ROW_ZERO_SHOT) {
        assert_eq!(c.checkpoints, [theta0.digest.clone()]);
    }
}

#[test]
fn merge_variants_rows_and_cosine_audit() {
    let lab = Lab::new(tiny_plan(), 1).unwrap();
    let report = lab.run_merge_variants().unwrap();
    let t = report.table("merge_variants").unwrap();
    assert_eq!(t.rows, [ROW_FT_POOLED, ROW_AVG_GROUP, ROW_AVG_IND, ROW_AVG_ORTH]);
    let audit = &report.audits[0];
    for (i, row) in audit.matrix.iter().enumerate() {
        assert_eq!(row[i], 1.0);
    }
    assert_eq!(report.value("cosine", "upright", "upright", metric::COSINE), Some(1.0));
    let a = report.value("cosine", "upright", "slanted", metric::COSINE).unwrap();
    assert_eq!(Some(a), report.value("cosine", "slanted", "upright", metric::COSINE));

    // single-domain groups: the group-level average is the individual average
    let first = |row: &str| report.cell("merge_variants", row, &t.columns[0], metric::ACCURACY).unwrap().checkpoints.clone();
    assert_eq!(first(ROW_AVG_GROUP), first(ROW_AVG_IND));
}

#[test]
fn orthogonality_filter_with_threshold_one_keeps_everything() {
    let mut plan = tiny_plan();
    plan.filter_threshold = 1.0;
    let lab = Lab::new(plan, 1).unwrap();
    let report = lab.run_merge_variants().unwrap();
    assert!(report.audits[0].dropped.is_empty());
    let col = &report.table("merge_variants").unwrap().columns[0];
    let ck = |row: &str| report.cell("merge_variants", row, col, metric::ACCURACY).unwrap().checkpoints.clone();
    assert_eq!(ck(ROW_AVG_ORTH), ck(ROW_AVG_IND));
}

#[test]
fn transfer_table_shape_and_baseline_ratio() {
    let lab = Lab::new(tiny_plan(), 1).unwrap();
    let report = lab.run_transfer().unwrap();
    let t = report.table("transfer").unwrap();
    assert_eq!(t.rows, [ROW_BASELINE, ROW_CENTRALIZED, ROW_DISTRIBUTED, ROW_RANDOM]);
    assert_eq!(t.columns, ["fresh-10", COL_X_DELTA]);
    if let Some(x) = report.value("transfer", ROW_BASELINE, COL_X_DELTA, metric::X_DELTA) {
        assert_eq!(x, 1.0);
    } else {
        // undefined only when the baseline scored zero
        assert_eq!(report.value("transfer", ROW_BASELINE, "fresh-10", metric::ACCURACY), Some(0.0));
    }
}

#[test]
fn tk_sweep_cells_share_one_budget() {
    let lab = Lab::new(tiny_plan(), 1).unwrap();
    let report = lab.run_tk_sweep().unwrap();
    let rows = &report.table("tk_sweep").unwrap().rows;
    assert_eq!(rows, &["T=1,k=12", "T=2,k=6", "T=3,k=4", "T=4,k=3", "T=6,k=2", "T=12,k=1"]);
    let steps: BTreeSet<u64> = rows
        .iter()
        .map(|r| report.value("tk_sweep", r, COL_STEPS, metric::STEPS).unwrap() as u64)
        .collect();
    assert_eq!(steps.len(), 1, "step counts differ: {steps:?}");

    // T = 1 is plain task arithmetic
    let seed = &report.cell("tk_sweep", "T=1,k=12", "fresh-10", metric::ACCURACY).unwrap().checkpoints[0];
    assert_eq!(seed, &lab.task_arithmetic_sources(false).unwrap().digest);
    let other = &report.cell("tk_sweep", "T=2,k=6", "fresh-10", metric::ACCURACY).unwrap().checkpoints[0];
    assert_ne!(seed, other);
}

#[test]
fn subsample_grid_and_full_fraction_identity() {
    let lab = Lab::new(tiny_plan(), 1).unwrap();
    let report = lab.run_subsample_sweep(&[0.2, 0.6, 1.0]).unwrap();
    let t = report.table("subsample").unwrap();
    assert_eq!(t.rows.len() * t.columns.len(), 6);
    assert_eq!(report.cells.iter().filter(|c| c.table == "subsample").count(), 12);

    let transfer = lab.run_transfer().unwrap();
    for (regime, col) in [(ROW_DISTRIBUTED, "fresh-10"), (ROW_CENTRALIZED, "fresh-10")] {
        let full = report.cell("subsample_targets", &format!("{regime}@1"), col, metric::ACCURACY).unwrap();
        let direct = transfer.cell("transfer", regime, col, metric::ACCURACY).unwrap();
        assert_eq!(full.checkpoints, direct.checkpoints, "{regime}");
    }
    let small = report.cell("subsample_targets", "distributed@0.2", "fresh-10", metric::ACCURACY).unwrap();
    let full = report.cell("subsample_targets", "distributed@1", "fresh-10", metric::ACCURACY).unwrap();
    assert_ne!(small.checkpoints, full.checkpoints);
}

#[test]
fn leave_one_out_rows_are_single_vector_merges() {
    let plan = tiny_plan();
    let lab = Lab::new(plan.clone(), 1).unwrap();
    let report = lab.run_leave_one_out().unwrap();
    let t = report.table("loo").unwrap();
    assert_eq!(t.rows.len(), plan.source_domains.len() + plan.group_masks.len());

    // with two domains, leaving one out merges a single task vector, which
    // reproduces the other domain's fine-tune exactly
    let grid = lab.run_baseline_grid().unwrap();
    let grid_col = &grid.table("baseline_grid").unwrap().columns[0];
    for (row, other) in [("without upright", "slanted"), ("without slanted", "upright")] {
        let seed = &report.cell("loo", row, "fresh-10", metric::ACCURACY).unwrap().checkpoints[0];
        let ft = &grid.cell("baseline_grid", other, grid_col, metric::ACCURACY).unwrap().checkpoints[0];
        assert_eq!(seed, ft, "{row}");
    }
    let masked = &report.cell("loo", "mask:drop-first", "fresh-10", metric::ACCURACY).unwrap().checkpoints[0];
    let without = &report.cell("loo", "without upright", "fresh-10", metric::ACCURACY).unwrap().checkpoints[0];
    assert_eq!(masked, without);
}

#[test]
fn every_report_verifies_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = |workers: usize, root: &std::path::Path| {
        let lab = Lab::new(tiny_plan(), workers).unwrap();
        let domain = lab.plan().source_names()[0].clone();
        let target = lab.plan().transfer_targets[0].name.clone();
        let reports = [
            ("pretrain", lab.run_pretrain().unwrap()),
            ("grid", lab.run_baseline_grid().unwrap()),
            ("variants", lab.run_merge_variants().unwrap()),
            ("transfer", lab.run_transfer().unwrap()),
            ("tk", lab.run_tk_sweep().unwrap()),
            ("subsample", lab.run_subsample_sweep(&[0.5, 1.0]).unwrap()),
            ("loo", lab.run_leave_one_out().unwrap()),
            ("node", lab.run_train_node(&domain, None, None).unwrap()),
            ("meta", lab.run_meta_train(2, 6, true).unwrap()),
            ("one", lab.run_transfer_one(&target, None).unwrap()),
        ];
        for (name, report) in &reports {
            lab.write(report, root.join(name)).unwrap();
        }
        reports.map(|(name, _)| name)
    };
    let names = run(1, &dir.path().join("a"));
    run(3, &dir.path().join("b"));
    for name in names {
        let a = dir.path().join("a").join(name);
        let summary = mergelab_harness::provenance::verify_provenance(&a).unwrap();
        assert!(summary.cells > 0, "{name}");
        let csv = |d: std::path::PathBuf| std::fs::read(d.join("report.csv")).unwrap();
        assert_eq!(csv(a.clone()), csv(dir.path().join("b").join(name)), "{name}");
    }
}
