use std::sync::Arc;
use std::time::Duration;

use evoloop::orchestrator::{group_seeds, replay_hash, Delayed, Orchestrator, SessionSpec, SessionStatus};
use evoloop::pool::{recount, ExperiencePool};
use evoloop_core::digest::{derive_seed_indexed, rng_from};
use evoloop_core::model::Task;
use evoloop_core::policy::{ScriptedPolicy, StochasticScripted};
use evoloop_core::sandbox::NoiseConfig;
use evoloop_core::synthesis::{sample_scenario, synthesize_task, TemplateArchitect, Taxonomy};

fn tasks(n: usize, seed: u64) -> Vec<Arc<Task>> {
    let mut rng = rng_from(seed);
    (0..n)
        .map(|_| {
            let sc = sample_scenario(&Taxonomy::default(), &mut rng).unwrap();
            Arc::new(synthesize_task(&TemplateArchitect, &sc, 3).unwrap().task)
        })
        .collect()
}

#[test]
fn quota_holds_under_random_latency() {
    let ts = tasks(5, 1);
    let orch = Orchestrator::with_desktop(None);
    for (round, quota) in [1usize, 2, 3, 5, 8].into_iter().enumerate() {
        let cluster = orch.provision_cluster("desktop-sim", "v1", quota).unwrap();
        let policy = Delayed {
            inner: StochasticScripted::new(ScriptedPolicy::ground_truth(), 0.6),
            max_delay: Duration::from_micros(400 * (round as u64 + 1)),
            seed: round as u64,
        };
        let specs: Vec<SessionSpec> = (0..40)
            .map(|i| SessionSpec { task: ts[i % ts.len()].clone(), seed: derive_seed_indexed(7, "s", i as u64), step_budget: 20 })
            .collect();
        let pool = ExperiencePool::new(ts.iter().map(|t| t.id.clone()));
        let out = cluster.run_batch(&specs, &policy, &NoiseConfig::off(), Some(&pool));
        assert!(cluster.peak_active() <= quota, "peak {} > quota {quota}", cluster.peak_active());
        assert_eq!(out.len(), specs.len());
        for (i, r) in out.iter().enumerate() {
            assert_eq!(r.index, i);
            assert_eq!(r.status, SessionStatus::Done);
            let traj = r.trajectory().unwrap();
            assert!(traj.len() <= 20);
            let actions: Vec<_> = traj.actions().cloned().collect();
            assert_eq!(replay_hash(&specs[i].task, specs[i].seed, &actions).unwrap(), traj.terminal_state_hash);
        }
        assert_eq!(pool.len(), 40);
        assert_eq!(pool.stats(), recount(&pool.records()));
    }
}

#[test]
fn success_count_is_binomial() {
    let ts = tasks(1, 2);
    let orch = Orchestrator::with_desktop(None);
    let cluster = orch.provision_cluster("desktop-sim", "v1", 4).unwrap();
    let policy = StochasticScripted::new(ScriptedPolicy::ground_truth(), 0.5);
    let seeds = group_seeds(11, &ts[0].id, 200);
    let g = cluster.run_group(ts[0].clone(), &policy, 200, 30, &seeds, &NoiseConfig::off(), None).unwrap();
    let wins = g.trajectories.iter().filter(|t| t.reward == 1).count() as f64;
    // Mean 100, sd ~7.07; four standard deviations either side.
    assert!((wins - 100.0).abs() <= 4.0 * 50f64.sqrt(), "{wins} successes");
    let again = cluster.run_group(ts[0].clone(), &policy, 200, 30, &seeds, &NoiseConfig::off(), None).unwrap();
    assert_eq!(again.trajectories, g.trajectories);
}

#[test]
fn pool_batches_sample_without_replacement() {
    let ts = tasks(3, 3);
    let orch = Orchestrator::with_desktop(None);
    let cluster = orch.provision_cluster("desktop-sim", "v1", 3).unwrap();
    let pool = ExperiencePool::new(ts.iter().map(|t| t.id.clone()));
    let specs: Vec<SessionSpec> = (0..12).map(|i| SessionSpec { task: ts[i % 3].clone(), seed: i as u64, step_budget: 30 }).collect();
    cluster.run_batch(&specs, &ScriptedPolicy::ground_truth(), &NoiseConfig::off(), Some(&pool));
    let batch = pool.sample_batch(8, 5);
    assert_eq!(batch.len(), 8);
    let ids: std::collections::BTreeSet<String> = batch.iter().map(|t| t.id()).collect();
    assert_eq!(ids.len(), 8);
    assert_eq!(pool.sample_batch(8, 5), batch);
    assert_eq!(pool.sample_batch(100, 5).len(), 12);
    let stats = pool.stats();
    assert_eq!(stats.values().map(|s| s.successes).sum::<u64>(), 12);
}
