mod common;
#[path = "common/instances.rs"]
mod instances;

use std::collections::BTreeSet;

use evoloop_core::coldstart::{TemplateProvider, REFLECTION_HEADER};
use evoloop_core::digest::rng_from;
use evoloop_core::policy::TokenSlot;
use evoloop_core::preference::{
    canonical_eq, construct_pairs, dpo_gradient, dpo_loss_from_margin, find_deviation, Equivalence, PairConfig, Paradigm,
};
use instances::{dpo_fd, dpo_instance, max_grad_err, planted_fork};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn planted_forks_are_recovered(seed in any::<u64>()) {
        let f = planted_fork(&mut rng_from(seed));
        let fork = find_deviation(&f.fail, &f.reference, Equivalence::Strict).unwrap();
        prop_assert_eq!(fork.t_star, f.t_star);
        let relaxed = find_deviation(&f.fail, &f.reference, Equivalence::Relaxed).unwrap();
        prop_assert_eq!(relaxed.t_star, f.t_star);
        let out = construct_pairs(&f.task, &f.fail, &f.reference, &PairConfig::default(), Some(&TemplateProvider)).unwrap();
        prop_assert_eq!(out.pairs.len(), if f.terminal { 1 } else { 2 });
        let p1 = &out.pairs[0];
        prop_assert_eq!(p1.paradigm, Paradigm::Correction);
        prop_assert_eq!(&p1.rejected.action, &f.fail.steps[f.t_star].action);
        prop_assert!(!canonical_eq(&p1.chosen.action, &p1.observation, &p1.rejected.action, &p1.observation));
        prop_assert_eq!(p1.context.step_index, f.t_star);
        if let Some(p2) = out.pairs.get(1) {
            prop_assert_eq!(p2.paradigm, Paradigm::Reflection);
            prop_assert!(p2.chosen.reasoning.starts_with(REFLECTION_HEADER));
            prop_assert_eq!(&p2.observation, &f.fail.steps[f.t_star + 1].observation);
            if let Some(w) = p2.observation.key_widget() {
                prop_assert!(p2.chosen.reasoning.contains(&w.text));
            }
        }
        let no_provider = construct_pairs(&f.task, &f.fail, &f.reference, &PairConfig::default(), None).unwrap();
        prop_assert_eq!(no_provider.pairs.len(), out.pairs.len());
    }

    #[test]
    fn dpo_loss_is_monotone(m in -20.0f64..20.0, dm in 1e-3f64..5.0, beta in 0.01f64..3.0, db in 1e-3f64..1.0) {
        prop_assert!(dpo_loss_from_margin(m + dm, beta) < dpo_loss_from_margin(m, beta));
        if m > 0.0 {
            prop_assert!(dpo_loss_from_margin(m, beta + db) < dpo_loss_from_margin(m, beta));
        }
    }

    #[test]
    fn dpo_gradient_matches_finite_differences(seed in any::<u64>()) {
        let (policy, reference, pair, beta) = dpo_instance(&mut rng_from(seed));
        let analytic = dpo_gradient(&policy, &reference, &pair, beta).unwrap();
        let err = max_grad_err(&analytic, &dpo_fd(&policy, &reference, &pair, beta));
        prop_assert!(err <= 1e-4, "relative error {err}");

        let slots = |r: &evoloop_core::preference::PairResponse| -> BTreeSet<TokenSlot> {
            policy.slots(&pair.context, &pair.observation, &r.tokens).unwrap().into_iter().collect()
        };
        let (w, l) = (slots(&pair.chosen), slots(&pair.rejected));
        for s in w.difference(&l) {
            prop_assert!(analytic[&s.row][s.index] < 0.0, "chosen slot {s:?} not raised");
        }
        for s in l.difference(&w) {
            prop_assert!(analytic[&s.row][s.index] > 0.0, "rejected slot {s:?} not lowered");
        }
    }
}
