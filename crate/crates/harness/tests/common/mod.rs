#![allow(dead_code)]

use mergelab_harness::plan::{DomainGroup, ExperimentPlan};

/// A plan small enough to run every experiment in seconds: two source
/// domains, one held-out set, one transfer target.
pub fn tiny_plan() -> ExperimentPlan {
    let mut plan = ExperimentPlan::toy();
    plan.max_label_len = 2;
    plan.pretrain.styles.truncate(2);
    plan.pretrain.n_train_per_style = 16;
    plan.pretrain.n_test_per_style = 4;
    plan.source_domains.truncate(2);
    plan.ood_sets.truncate(1);
    plan.transfer_targets.truncate(1);
    for d in plan
        .source_domains
        .iter_mut()
        .chain(plan.ood_sets.iter_mut())
        .chain(plan.transfer_targets.iter_mut())
    {
        d.n_train = 12;
        d.n_test = 6;
    }
    plan.budgets.pretrain_epochs = 2;
    plan.budgets.transfer_epochs = 2;
    plan.training.batch_size = 8;
    let names = plan.source_names();
    plan.merge_groups = vec![
        DomainGroup { name: "first".into(), domains: vec![names[0].clone()] },
        DomainGroup { name: "second".into(), domains: vec![names[1].clone()] },
    ];
    plan.group_masks = vec![DomainGroup { name: "drop-first".into(), domains: vec![names[0].clone()] }];
    plan
}
