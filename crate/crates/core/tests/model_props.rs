mod common;

use common::{arb_action, rollout, synth};
use evoloop_core::model::{build_context, Context, Task, Trajectory, CONTEXT_WINDOW};
use evoloop_core::synthesis::Family;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn context_partitions_history(
        actions in prop::collection::vec(arb_action(1280, 720).prop_filter("non-terminal", |a| !a.is_terminate()), 0..24),
        window in 0usize..8,
    ) {
        let task = synth(Family::SumColumn, 2);
        let traj = rollout(&task, actions, 0);
        for t in 0..=traj.len() {
            let ctx = build_context(&task, &traj, t, window).unwrap();
            prop_assert!(ctx.recent_steps.len() <= window);
            prop_assert_eq!(ctx.recent_steps.len() + ctx.compressed_history.len(), t);
            for (k, line) in ctx.compressed_history.iter().enumerate() {
                let prefix = format!("step {k}: ");
                prop_assert!(line.starts_with(&prefix));
                prop_assert!(!line.contains('\n'));
            }
            let recent: Vec<usize> = ctx.recent_steps.iter().map(|e| e.step_index).collect();
            let want: Vec<usize> = (ctx.compressed_history.len()..t).collect();
            prop_assert_eq!(recent, want);
        }
        prop_assert!(build_context(&task, &traj, traj.len() + 1, window).is_err());
    }
}

#[test]
fn records_round_trip_through_json() {
    for fam in [Family::MaxPerRow, Family::RenameFile, Family::Infeasible] {
        let task = synth(fam, 4);
        let traj = rollout(&task, task.solution.clone().unwrap(), 1);
        let ctx = build_context(&task, &traj, traj.len() - 1, CONTEXT_WINDOW).unwrap();
        let t2: Task = serde_json::from_str(&serde_json::to_string(&task).unwrap()).unwrap();
        let tr2: Trajectory = serde_json::from_str(&serde_json::to_string(&traj).unwrap()).unwrap();
        let c2: Context = serde_json::from_str(&serde_json::to_string(&ctx).unwrap()).unwrap();
        assert_eq!(t2, task);
        assert_eq!(tr2, traj);
        assert_eq!(c2, ctx);
    }
}

#[test]
fn trajectories_satisfy_invariants() {
    for fam in [Family::MaxPerRow, Family::SumColumn, Family::AppendLine, Family::RenameFile, Family::Infeasible] {
        let task = synth(fam, 8);
        let traj = rollout(&task, task.solution.clone().unwrap(), 2);
        traj.check_invariants().unwrap();
        assert!(traj.steps.last().unwrap().action.is_terminate());
        assert_eq!(traj.actions().filter(|a| a.is_terminate()).count(), 1);
        assert_eq!(traj.reward, 1, "{fam:?}");
        for s in &traj.steps {
            s.observation.check_invariants().unwrap();
            assert!(s.observation.widgets.iter().filter(|w| w.focused).count() <= 1);
        }
    }
}
