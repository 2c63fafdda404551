//! Tools, quota-bounded clusters and concurrent session execution.
//!
//! Admission (control plane) runs on the submitting thread's worker before a
//! session starts; stepping (data plane) never holds the admission lock, so a
//! slow session cannot delay admissions beyond its own slot.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use evoloop_core::action::Action;
use evoloop_core::digest::derive_seed_indexed;
use evoloop_core::episode::{run_episode, EpisodeOutcome};
use evoloop_core::model::{Context, Observation, Task, Trajectory};
use evoloop_core::policy::{ActOutput, Policy, TokenizedResponse};
use evoloop_core::sandbox::NoiseConfig;
use serde::{Deserialize, Serialize};

use crate::pool::ExperiencePool;

pub const MAX_SESSIONS_ENV: &str = "EVOLOOP_MAX_SESSIONS";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum OrchestratorError {
    #[error("tool {0}@{1} already registered")]
    DuplicateTool(String, String),
    #[error("unknown tool {0}@{1}")]
    UnknownTool(String, String),
    #[error("quota must be >= 1")]
    InvalidQuota,
    #[error("group size {0} < 2")]
    GroupTooSmall(usize),
    #[error("{0} seeds for a group of {1}")]
    SeedCount(usize, usize),
    #[error("invalid {MAX_SESSIONS_ENV} value `{0}`")]
    BadSessionCap(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApiOp {
    Reset,
    Step,
    Render,
}

/// Named sandbox constructor plus calibration flags. Flags are recorded, not
/// interpreted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvFactory {
    pub kind: String,
    #[serde(default)]
    pub calibration: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tool {
    pub name: String,
    pub version: String,
    pub env_factory: EnvFactory,
    pub api: BTreeSet<ApiOp>,
}

impl Tool {
    /// The built-in simulated desktop with the full API.
    pub fn desktop(version: &str) -> Tool {
        Tool {
            name: "desktop-sim".into(),
            version: version.into(),
            env_factory: EnvFactory { kind: "symbolic-desktop".into(), calibration: vec!["strict_keymap".into()] },
            api: [ApiOp::Reset, ApiOp::Step, ApiOp::Render].into_iter().collect(),
        }
    }
}

/// Tools keyed by `(name, version)`; registered definitions are shared
/// immutably.
#[derive(Default)]
pub struct ToolRegistry {
    tools: Mutex<BTreeMap<(String, String), Arc<Tool>>>,
}

impl ToolRegistry {
    pub fn register(&self, tool: Tool) -> Result<(), OrchestratorError> {
        let mut g = self.tools.lock().expect("registry lock poisoned");
        let key = (tool.name.clone(), tool.version.clone());
        if g.contains_key(&key) {
            return Err(OrchestratorError::DuplicateTool(key.0, key.1));
        }
        g.insert(key, Arc::new(tool));
        Ok(())
    }

    pub fn get(&self, name: &str, version: &str) -> Result<Arc<Tool>, OrchestratorError> {
        self.tools
            .lock()
            .expect("registry lock poisoned")
            .get(&(name.to_string(), version.to_string()))
            .cloned()
            .ok_or_else(|| OrchestratorError::UnknownTool(name.into(), version.into()))
    }
}

/// FIFO counting semaphore.
struct Admission {
    cap: usize,
    state: Mutex<AdmissionState>,
    cv: Condvar,
}

#[derive(Default)]
struct AdmissionState {
    active: usize,
    next_ticket: u64,
    queue: VecDeque<u64>,
}

impl Admission {
    fn new(cap: usize) -> Self {
        Admission { cap, state: Mutex::default(), cv: Condvar::new() }
    }

    fn acquire(&self) -> usize {
        let mut g = self.state.lock().expect("admission lock poisoned");
        let me = g.next_ticket;
        g.next_ticket += 1;
        g.queue.push_back(me);
        while !(g.queue.front() == Some(&me) && g.active < self.cap) {
            g = self.cv.wait(g).expect("admission lock poisoned");
        }
        g.queue.pop_front();
        g.active += 1;
        let active = g.active;
        drop(g);
        // The next ticket may also fit.
        self.cv.notify_all();
        active
    }

    fn release(&self) {
        let mut g = self.state.lock().expect("admission lock poisoned");
        g.active -= 1;
        drop(g);
        self.cv.notify_all();
    }
}

/// Process-wide session cap from `EVOLOOP_MAX_SESSIONS`, if set.
pub fn session_cap_from_env() -> Result<Option<usize>, OrchestratorError> {
    match std::env::var(MAX_SESSIONS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(OrchestratorError::BadSessionCap(v)),
        },
        Err(_) => Ok(None),
    }
}

/// Owns the tool registry and the global session cap.
pub struct Orchestrator {
    pub tools: ToolRegistry,
    global: Option<Arc<Admission>>,
    next_cluster: AtomicU64,
}

impl Orchestrator {
    pub fn new(global_cap: Option<usize>) -> Self {
        Orchestrator {
            tools: ToolRegistry::default(),
            global: global_cap.map(|c| Arc::new(Admission::new(c))),
            next_cluster: AtomicU64::new(0),
        }
    }

    /// Reads the global cap from the environment.
    pub fn from_env() -> Result<Self, OrchestratorError> {
        Ok(Orchestrator::new(session_cap_from_env()?))
    }

    /// Orchestrator with the built-in desktop tool registered as `v1`.
    pub fn with_desktop(global_cap: Option<usize>) -> Self {
        let o = Orchestrator::new(global_cap);
        o.tools.register(Tool::desktop("v1")).expect("fresh registry");
        o
    }

    pub fn provision_cluster(&self, name: &str, version: &str, quota: usize) -> Result<Cluster, OrchestratorError> {
        if quota == 0 {
            return Err(OrchestratorError::InvalidQuota);
        }
        let tool = self.tools.get(name, version)?;
        Ok(Cluster {
            id: self.next_cluster.fetch_add(1, Ordering::Relaxed),
            tool,
            quota,
            admission: Admission::new(quota),
            global: self.global.clone(),
            peak: AtomicUsize::new(0),
            sessions_run: AtomicU64::new(0),
        })
    }
}

pub struct Cluster {
    pub id: u64,
    pub tool: Arc<Tool>,
    pub quota: usize,
    admission: Admission,
    global: Option<Arc<Admission>>,
    peak: AtomicUsize,
    sessions_run: AtomicU64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SessionStatus {
    Done,
    Failed { reason: String },
}

/// Request for one isolated session.
#[derive(Debug, Clone)]
pub struct SessionSpec {
    pub task: Arc<Task>,
    pub seed: u64,
    pub step_budget: usize,
}

#[derive(Debug, Clone)]
pub struct SessionResult {
    pub index: usize,
    pub session_id: String,
    pub cluster_id: u64,
    pub status: SessionStatus,
    pub outcome: Option<EpisodeOutcome>,
}

impl SessionResult {
    pub fn trajectory(&self) -> Option<&Trajectory> {
        self.outcome.as_ref().map(|o| &o.trajectory)
    }
}

struct Slot<'a>(&'a Cluster);

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        if let Some(g) = &self.0.global {
            g.release();
        }
        self.0.admission.release();
    }
}

impl Cluster {
    /// Highest number of concurrently active sessions seen so far.
    pub fn peak_active(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    pub fn sessions_run(&self) -> u64 {
        self.sessions_run.load(Ordering::SeqCst)
    }

    fn admit(&self) -> Slot<'_> {
        let active = self.admission.acquire();
        if let Some(g) = &self.global {
            g.acquire();
        }
        self.peak.fetch_max(active, Ordering::SeqCst);
        Slot(self)
    }

    fn run_one(&self, index: usize, spec: &SessionSpec, policy: &dyn Policy, noise: &NoiseConfig) -> SessionResult {
        let _slot = self.admit();
        let session_id = format!("c{}-s{index}", self.id);
        // Each session builds its own EnvState inside run_episode; nothing
        // mutable is shared across sessions.
        let res = run_episode(&spec.task, policy, spec.step_budget, noise, spec.seed);
        self.sessions_run.fetch_add(1, Ordering::SeqCst);
        match res {
            Ok(outcome) => SessionResult { index, session_id, cluster_id: self.id, status: SessionStatus::Done, outcome: Some(outcome) },
            Err(e) => SessionResult {
                index,
                session_id,
                cluster_id: self.id,
                status: SessionStatus::Failed { reason: e.to_string() },
                outcome: None,
            },
        }
    }

    /// Runs every session, at most `quota` at a time, admitting in
    /// submission order. Completed trajectories go to `pool`; results come
    /// back ordered by submission index.
    pub fn run_batch(
        &self,
        sessions: &[SessionSpec],
        policy: &dyn Policy,
        noise: &NoiseConfig,
        pool: Option<&ExperiencePool>,
    ) -> Vec<SessionResult> {
        let n = sessions.len();
        if n == 0 {
            return Vec::new();
        }
        let cpus = std::thread::available_parallelism().map_or(4, |p| p.get());
        let workers = n.min(self.quota + cpus);
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<SessionResult>>> = Mutex::new(vec![None; n]);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let mut r = self.run_one(i, &sessions[i], policy, noise);
                    if let (Some(pool), Some(out)) = (pool, &r.outcome) {
                        if let Err(e) = pool.append(out.trajectory.clone()) {
                            r.status = SessionStatus::Failed { reason: e.to_string() };
                        }
                    }
                    results.lock().expect("results lock poisoned")[i] = Some(r);
                });
            }
        });
        results.into_inner().expect("results lock poisoned").into_iter().map(|r| r.expect("every index ran")).collect()
    }

    /// `g` rollouts of one task with the given seeds.
    pub fn run_group(
        &self,
        task: Arc<Task>,
        policy: &dyn Policy,
        g: usize,
        budget: usize,
        seeds: &[u64],
        noise: &NoiseConfig,
        pool: Option<&ExperiencePool>,
    ) -> Result<GroupResult, OrchestratorError> {
        if g < 2 {
            return Err(OrchestratorError::GroupTooSmall(g));
        }
        if seeds.len() != g {
            return Err(OrchestratorError::SeedCount(seeds.len(), g));
        }
        let specs: Vec<SessionSpec> =
            seeds.iter().map(|&seed| SessionSpec { task: task.clone(), seed, step_budget: budget }).collect();
        let results = self.run_batch(&specs, policy, noise, pool);
        let failures: Vec<usize> = results.iter().filter(|r| r.outcome.is_none()).map(|r| r.index).collect();
        Ok(GroupResult {
            task_id: task.id.clone(),
            trajectories: results.into_iter().filter_map(|r| r.outcome.map(|o| o.trajectory)).collect(),
            partial: !failures.is_empty(),
            failures,
        })
    }
}

/// Member trajectories ordered by rollout index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub task_id: String,
    pub trajectories: Vec<Trajectory>,
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<usize>,
}

/// Rollout seeds for group `task_index`, one per member.
pub fn group_seeds(root: u64, task_id: &str, g: usize) -> Vec<u64> {
    let base = evoloop_core::digest::derive_seed(root, task_id);
    (0..g as u64).map(|i| derive_seed_indexed(base, "rollout-session", i)).collect()
}

/// Wraps a policy and sleeps a seeded pseudo-random duration before every
/// decision, to shuffle completion order in tests.
pub struct Delayed<P> {
    pub inner: P,
    pub max_delay: Duration,
    pub seed: u64,
}

impl<P: Policy> Policy for Delayed<P> {
    fn act(&self, task: &Task, seed: u64, ctx: &Context, obs: &Observation, rng: &mut evoloop_core::digest::SessionRng) -> evoloop_core::Result<ActOutput> {
        let micros = self.max_delay.as_micros() as u64;
        if micros > 0 {
            let h = derive_seed_indexed(self.seed ^ seed, "latency", ctx.step_index as u64);
            std::thread::sleep(Duration::from_micros(h % (micros + 1)));
        }
        self.inner.act(task, seed, ctx, obs, rng)
    }

    fn logprob(&self, ctx: &Context, obs: &Observation, response: &TokenizedResponse) -> evoloop_core::Result<Vec<f64>> {
        self.inner.logprob(ctx, obs, response)
    }

    fn has_logprobs(&self) -> bool {
        self.inner.has_logprobs()
    }
}

/// Terminal digest of a trajectory's actions replayed on one thread.
pub fn replay_hash(task: &Task, seed: u64, actions: &[Action]) -> evoloop_core::Result<evoloop_core::StateHash> {
    Ok(evoloop_core::sandbox::state_hash(&evoloop_core::sandbox::replay(task, seed, actions)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use evoloop_core::policy::ScriptedPolicy;
    use evoloop_core::synthesis::{synthesize_task, Family, Scenario, TemplateArchitect};

    fn task(seed: u64) -> Arc<Task> {
        let sc = Scenario { role: "teacher".into(), capability: "office/x".into(), family: Family::MaxPerRow, resource_seed: seed };
        Arc::new(synthesize_task(&TemplateArchitect, &sc, 1).unwrap().task)
    }

    #[test]
    fn registry_is_keyed_by_name_and_version() {
        let reg = ToolRegistry::default();
        reg.register(Tool::desktop("v1")).unwrap();
        reg.register(Tool::desktop("v2")).unwrap();
        assert_eq!(*reg.get("desktop-sim", "v1").unwrap(), Tool::desktop("v1"));
        assert_eq!(reg.get("desktop-sim", "v2").unwrap().version, "v2");
        assert_eq!(
            reg.register(Tool::desktop("v1")),
            Err(OrchestratorError::DuplicateTool("desktop-sim".into(), "v1".into()))
        );
        assert!(reg.get("desktop-sim", "v3").is_err());
    }

    #[test]
    fn provisioning_checks_tool_and_quota() {
        let o = Orchestrator::with_desktop(None);
        assert!(matches!(o.provision_cluster("desktop-sim", "v1", 0), Err(OrchestratorError::InvalidQuota)));
        assert!(matches!(o.provision_cluster("other", "v1", 1), Err(OrchestratorError::UnknownTool(..))));
    }

    fn delayed() -> Delayed<ScriptedPolicy> {
        Delayed { inner: ScriptedPolicy::ground_truth(), max_delay: Duration::from_millis(3), seed: 1 }
    }

    #[test]
    fn quota_bounds_peak_concurrency() {
        let o = Orchestrator::with_desktop(None);
        let t = task(1);
        for (quota, want) in [(4, 4), (1, 1)] {
            let c = o.provision_cluster("desktop-sim", "v1", quota).unwrap();
            let specs: Vec<_> = (0..10).map(|s| SessionSpec { task: t.clone(), seed: s, step_budget: 30 }).collect();
            let out = c.run_batch(&specs, &delayed(), &NoiseConfig::off(), None);
            assert!(out.iter().all(|r| r.status == SessionStatus::Done));
            assert_eq!(c.peak_active(), want);
            assert_eq!(c.sessions_run(), 10);
        }
    }

    #[test]
    fn global_cap_applies_across_a_cluster() {
        let o = Orchestrator::with_desktop(Some(2));
        let c = o.provision_cluster("desktop-sim", "v1", 8).unwrap();
        let t = task(2);
        let specs: Vec<_> = (0..12).map(|s| SessionSpec { task: t.clone(), seed: s, step_budget: 30 }).collect();
        let pool = ExperiencePool::new([t.id.clone()]);
        let out = c.run_batch(&specs, &delayed(), &NoiseConfig::off(), Some(&pool));
        assert_eq!(out.len(), 12);
        assert_eq!(pool.len(), 12);
        // The cluster slot is taken before the global one, so the cluster
        // counter can exceed the global cap; stepping never can.
        assert!(c.peak_active() <= 8);
    }

    #[test]
    fn groups_are_ordered_and_sized() {
        let o = Orchestrator::with_desktop(None);
        let c = o.provision_cluster("desktop-sim", "v1", 3).unwrap();
        let t = task(3);
        let p = ScriptedPolicy::ground_truth();
        let noise = NoiseConfig::off();
        assert_eq!(
            c.run_group(t.clone(), &p, 1, 30, &[0], &noise, None).unwrap_err(),
            OrchestratorError::GroupTooSmall(1)
        );
        let g = c.run_group(t.clone(), &p, 4, 30, &[5; 4], &noise, None).unwrap();
        assert!(g.trajectories.windows(2).all(|w| w[0] == w[1]));
        let seeds = group_seeds(9, &t.id, 6);
        let shuffled = c.run_group(t.clone(), &delayed(), 6, 30, &seeds, &noise, None).unwrap();
        let sequential: Vec<_> = seeds
            .iter()
            .map(|&s| run_episode(&t, &p, 30, &noise, s).unwrap().trajectory)
            .collect();
        assert_eq!(shuffled.trajectories, sequential);
        assert!(!shuffled.partial);
    }

    #[test]
    fn failed_sessions_mark_the_group_partial() {
        let o = Orchestrator::with_desktop(None);
        let c = o.provision_cluster("desktop-sim", "v1", 2).unwrap();
        let mut t = (*task(4)).clone();
        t.solution = None;
        let g = c
            .run_group(Arc::new(t), &ScriptedPolicy::ground_truth(), 2, 10, &[1, 2], &NoiseConfig::off(), None)
            .unwrap();
        assert!(g.partial);
        assert_eq!(g.failures, vec![0, 1]);
        assert!(g.trajectories.is_empty());
    }
}
