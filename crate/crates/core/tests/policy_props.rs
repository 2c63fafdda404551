mod common;

use common::synth;
use evoloop_core::action::serialize_action;
use evoloop_core::digest::rng_from;
use evoloop_core::model::build_context_from_steps;
use evoloop_core::policy::{Bucketing, LogitRow, Policy, ProposedAction, ScriptedPolicy, StochasticScripted, TabularPolicy};
use evoloop_core::sandbox;
use evoloop_core::synthesis::Family;
use proptest::prelude::*;

fn table(zl: Vec<f64>, al: Vec<f64>, temperature: f64) -> TabularPolicy {
    let task = synth(Family::SumColumn, 1);
    let mut p = TabularPolicy::new(temperature, Bucketing::default());
    let z = (0..zl.len()).map(|i| format!("t{i}")).collect();
    let gt = task.solution.unwrap();
    let a = (0..al.len()).map(|i| serialize_action(&gt[i % gt.len()])).collect();
    p.rows.insert("*#z".into(), LogitRow::new(z, zl));
    p.rows.insert("*#a".into(), LogitRow::new(a, al));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rows_are_distributions(logits in prop::collection::vec(-30.0f64..30.0, 1..12), temp in 0.05f64..5.0) {
        let p = table(vec![0.0], logits.clone(), temp);
        let lp = p.row_logprobs(&p.rows["*#a"]);
        prop_assert!(lp.iter().all(|l| *l <= 0.0));
        prop_assert!((lp.iter().map(|l| l.exp()).sum::<f64>() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn samples_score_themselves(zl in prop::collection::vec(-3.0f64..3.0, 1..5), al in prop::collection::vec(-3.0f64..3.0, 1..5), temp in prop_oneof![Just(0.0), 0.2f64..3.0], seed in any::<u64>()) {
        let p = table(zl, al, temp);
        let task = synth(Family::SumColumn, 1);
        let obs = sandbox::render(&sandbox::reset(&task, 0).unwrap());
        let ctx = build_context_from_steps(&task, &[], 0, 5).unwrap();
        let a = p.act(&task, seed, &ctx, &obs, &mut rng_from(seed)).unwrap();
        let b = p.act(&task, seed, &ctx, &obs, &mut rng_from(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(matches!(a.action, ProposedAction::Parsed(_)));
        a.response.check_invariants().unwrap();
        prop_assert_eq!(p.logprob(&ctx, &obs, &a.response).unwrap(), a.response.logprobs);
    }
}

#[test]
fn scripted_policies_self_score() {
    let task = synth(Family::MaxPerRow, 3);
    let obs = sandbox::render(&sandbox::reset(&task, 0).unwrap());
    let ctx = build_context_from_steps(&task, &[], 0, 5).unwrap();
    let policies: Vec<Box<dyn Policy>> = vec![
        Box::new(ScriptedPolicy::ground_truth()),
        Box::new(StochasticScripted::new(ScriptedPolicy::ground_truth(), 0.3)),
    ];
    for p in policies {
        for seed in 0..20 {
            let out = p.act(&task, seed, &ctx, &obs, &mut rng_from(seed)).unwrap();
            out.response.check_invariants().unwrap();
            assert_eq!(p.logprob(&ctx, &obs, &out.response).unwrap(), out.response.logprobs);
            assert!(!p.has_logprobs());
        }
    }
}
