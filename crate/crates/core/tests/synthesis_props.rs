mod common;

use std::collections::BTreeMap;

use evoloop_core::action::TerminateStatus;
use evoloop_core::digest::rng_from;
use evoloop_core::model::{evaluate_reward, Check, Task, ValidatorSpec};
use evoloop_core::policy::{ScriptedPolicy, StochasticScripted};
use evoloop_core::sandbox;
use evoloop_core::synthesis::{
    consistency_check, consistency_filter, decontaminate, jaccard, sample_scenario, synthesize_task, ConsistencyConfig,
    ContaminationReason, DecontamConfig, Family, TemplateArchitect, Taxonomy,
};
use proptest::prelude::*;

fn corpus(seed: u64, n: usize) -> Vec<Task> {
    let tax = Taxonomy::default();
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| synthesize_task(&TemplateArchitect, &sample_scenario(&tax, &mut rng).unwrap(), 3).unwrap().task)
        .collect()
}

#[test]
fn capabilities_are_sampled_uniformly() {
    let mut tax = Taxonomy::default();
    tax.domains.remove("office/unsupported");
    assert_eq!(tax.leaves().len(), 4);
    let mut rng = rng_from(2024);
    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
    for _ in 0..10_000 {
        *counts.entry(sample_scenario(&tax, &mut rng).unwrap().capability).or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    for (cap, n) in counts {
        let f = n as f64 / 10_000.0;
        assert!((f - 0.25).abs() <= 0.05 * 0.25, "{cap}: {f}");
    }
}

#[test]
fn weights_skew_sampling() {
    let mut tax = Taxonomy::default();
    let paths: Vec<String> = tax.leaves().into_iter().map(|(p, _)| p).collect();
    for path in paths {
        if !path.ends_with("append_line") {
            tax.weights.insert(path, 0.0);
        }
    }
    let mut rng = rng_from(1);
    for _ in 0..50 {
        assert_eq!(sample_scenario(&tax, &mut rng).unwrap().family, Family::AppendLine);
    }
    tax.weights.insert("office/text/append_line".into(), 0.0);
    assert!(sample_scenario(&tax, &mut rng).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn accepted_tasks_verify(seed in any::<u64>()) {
        let mut rng = rng_from(seed);
        let sc = sample_scenario(&Taxonomy::default(), &mut rng).unwrap();
        let out = synthesize_task(&TemplateArchitect, &sc, 3).unwrap();
        prop_assert!(out.accepted);
        let task = &out.task;
        task.validator.validate().unwrap();
        let gt = task.solution.as_ref().unwrap();
        prop_assert_eq!(gt, &out.gt_solution);
        let end = sandbox::replay(task, 0, gt).unwrap();
        prop_assert_eq!(evaluate_reward(&task.validator, &end).unwrap(), 1);
        prop_assert!(gt.last().unwrap().is_terminate());
        if !task.feasible {
            prop_assert_eq!(end.done, Some(TerminateStatus::Failure));
        }
    }
}

#[test]
fn always_true_validators_are_flagged() {
    let agent = StochasticScripted::new(ScriptedPolicy::ground_truth(), 0.5);
    let cfg = ConsistencyConfig::default();
    let mut tasks = corpus(4, 12);
    tasks.retain(|t| t.feasible);
    for t in &mut tasks {
        t.validator = ValidatorSpec::default();
    }
    for t in &tasks {
        let r = consistency_check(t, &agent, &cfg);
        assert!(r.oracle_pass_rate < 1.0, "agent never failed on {}", t.id);
        assert!(r.flagged && r.false_positives > 0, "{r:?}");
    }
    let (kept, flagged) = consistency_filter(&tasks, &agent, &cfg);
    assert!(kept.is_empty());
    assert_eq!(flagged.len(), tasks.len());
}

#[test]
fn sound_validators_pass_the_filter() {
    let agent = StochasticScripted::new(ScriptedPolicy::ground_truth(), 0.5);
    let tasks = corpus(5, 15);
    let (kept, flagged) = consistency_filter(&tasks, &agent, &ConsistencyConfig::default());
    assert!(flagged.is_empty(), "{flagged:?}");
    assert_eq!(kept, tasks);
}

#[test]
fn weakened_validator_is_caught() {
    let agent = StochasticScripted::new(ScriptedPolicy::ground_truth(), 0.5);
    let mut task = synthesize_task(
        &TemplateArchitect,
        &evoloop_core::synthesis::Scenario { role: "x".into(), capability: "c".into(), family: Family::RenameFile, resource_seed: 3 },
        1,
    )
    .unwrap()
    .task;
    // Keep only the "old name is gone" half of the check.
    let Check::All { checks } = &task.validator.checks[0] else { panic!("{:?}", task.validator) };
    task.validator = ValidatorSpec::new(vec![checks[1].clone()]);
    let r = consistency_check(&task, &agent, &ConsistencyConfig::default());
    assert!(r.flagged, "{r:?}");
}

#[test]
fn decontamination_reasons_and_idempotence() {
    let tasks = corpus(6, 30);
    let mut bench: Vec<Task> = Vec::new();
    let mut sem = tasks[0].clone();
    sem.id = "bench-sem".into();
    sem.init_config.focused = Some("nothing-else".into());
    sem.validator = ValidatorSpec::new(vec![Check::ReportedStatus { status: TerminateStatus::Success }]);
    sem.solution = None;
    bench.push(sem);
    let mut cfg_dup = tasks[1].clone();
    cfg_dup.id = "bench-cfg".into();
    cfg_dup.instruction = "unrelated words entirely".into();
    cfg_dup.validator = ValidatorSpec::new(vec![Check::ReportedStatus { status: TerminateStatus::Failure }]);
    cfg_dup.solution = None;
    bench.push(cfg_dup);

    let (kept, removed) = decontaminate(&tasks, &bench, &DecontamConfig::default());
    assert_eq!(kept.len() + removed.len(), tasks.len());
    let by_id: BTreeMap<_, _> = removed.iter().map(|r| (r.task_id.clone(), r.reasons.clone())).collect();
    assert!(by_id[&tasks[0].id].iter().any(|r| matches!(r, ContaminationReason::Semantic { benchmark_id, .. } if benchmark_id == "bench-sem")));
    assert!(by_id[&tasks[1].id].iter().any(|r| matches!(r, ContaminationReason::Configuration { benchmark_id } if benchmark_id == "bench-cfg")));
    let (again, none) = decontaminate(&kept, &bench, &DecontamConfig::default());
    assert!(none.is_empty());
    assert_eq!(again, kept);
}

#[test]
fn corpus_is_deterministic() {
    let a = serde_json::to_string(&corpus(9, 20)).unwrap();
    let b = serde_json::to_string(&corpus(9, 20)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, serde_json::to_string(&corpus(10, 20)).unwrap());
}

#[test]
fn jaccard_examples() {
    assert_eq!(jaccard("", ""), 1.0);
    assert_eq!(jaccard("Sum the column", "sum THE column!"), 1.0);
    assert_eq!(jaccard("a b", "c d"), 0.0);
    assert!((jaccard("a a b", "a b") - 2.0 / 3.0).abs() < 1e-15);
}
