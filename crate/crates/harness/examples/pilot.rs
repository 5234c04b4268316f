//! Pilot run: trains the toy world (or a plan given on the command line)
//! and prints the numbers the trend regressions look at, ending with one
//! JSON summary line.
//!
//! `cargo run --release --example pilot -- [plan.json | --dump]`

use std::time::Instant;

use mergelab_harness::lab::*;
use mergelab_harness::report::metric;
use mergelab_harness::{ExperimentPlan, Lab};

fn main() -> mergelab_harness::Result<()> {
    let mut plan = ExperimentPlan::toy();
    match std::env::args().nth(1).as_deref() {
        Some("--dump") => {
            println!("{}", plan.to_json());
            return Ok(());
        }
        Some(path) => plan = ExperimentPlan::load(path)?,
        None => {}
    }
    let transfer_only = std::env::var("PILOT_ONLY").is_ok();
    let lab = Lab::new(plan.clone(), 1)?;
    let t0 = Instant::now();
    let mut summary = serde_json::Map::new();

    let pre = lab.run_pretrain()?;
    let z_acc = pre.value("pretrain", "theta0", "Z/train", metric::ACCURACY);
    println!("pretrain train accuracy {z_acc:?} ({:.1}s)", t0.elapsed().as_secs_f64());
    summary.insert("pretrain".into(), z_acc.into());

    let tr = lab.run_transfer()?;
    for row in [ROW_BASELINE, ROW_CENTRALIZED, ROW_DISTRIBUTED, ROW_RANDOM] {
        let accs: Vec<Option<f64>> = plan
            .transfer_targets
            .iter()
            .map(|g| tr.value("transfer", row, &g.name, metric::ACCURACY))
            .collect();
        let x = tr.value("transfer", row, COL_X_DELTA, metric::X_DELTA);
        println!("{row:12} {accs:?} xΔ {x:?}");
        summary.insert(row.into(), serde_json::json!({ "acc": accs, "x_delta": x }));
    }
    println!("({:.1}s)", t0.elapsed().as_secs_f64());

    if !transfer_only {
        let tk = lab.run_tk_sweep()?;
        let mut curve = Vec::new();
        for t in &plan.sweep.t_values {
            let row = tk_row(*t, plan.budgets.tk_product / t);
            let mean = tk.value("tk_sweep", &row, COL_MEAN, metric::MEAN_ACCURACY);
            println!("{row:10} mean {mean:?}");
            curve.push(mean);
        }
        summary.insert("tk".into(), curve.into());
        println!("({:.1}s)", t0.elapsed().as_secs_f64());

        let ss = lab.run_subsample_sweep(&plan.sweep.fractions)?;
        let mut sub = Vec::new();
        for f in &plan.sweep.fractions {
            let c = fraction_column(*f);
            let cen = ss.value("subsample", ROW_CENTRALIZED, &c, metric::MEAN_ACCURACY);
            let dis = ss.value("subsample", ROW_DISTRIBUTED, &c, metric::MEAN_ACCURACY);
            println!("{c:8} centralized {cen:?} distributed {dis:?}");
            sub.push(serde_json::json!([cen, dis]));
        }
        summary.insert("subsample".into(), sub.into());
        println!("({:.1}s)", t0.elapsed().as_secs_f64());
    }
    println!("SUMMARY {}", serde_json::Value::Object(summary));
    Ok(())
}
