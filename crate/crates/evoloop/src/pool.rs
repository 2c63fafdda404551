//! Transient experience pool shared by concurrent rollout workers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use evoloop_core::digest::rng_from;
use evoloop_core::model::Trajectory;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PoolError {
    #[error("task `{0}` is not registered with the pool")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskStats {
    pub successes: u64,
    pub failures: u64,
}

#[derive(Default)]
struct Inner {
    records: Vec<Trajectory>,
    stats: BTreeMap<String, TaskStats>,
}

/// Append-only store of trajectories. Records and stats live under one lock
/// so a reader never sees a record without its stats update.
#[derive(Default)]
pub struct ExperiencePool {
    registry: BTreeSet<String>,
    inner: Mutex<Inner>,
}

impl ExperiencePool {
    pub fn new<I, S>(task_ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ExperiencePool { registry: task_ids.into_iter().map(Into::into).collect(), inner: Mutex::default() }
    }

    pub fn append(&self, traj: Trajectory) -> Result<(), PoolError> {
        if !self.registry.contains(&traj.task_id) {
            return Err(PoolError::UnknownTask(traj.task_id));
        }
        let mut g = self.inner.lock().expect("pool lock poisoned");
        let s = g.stats.entry(traj.task_id.clone()).or_default();
        if traj.reward == 1 {
            s.successes += 1;
        } else {
            s.failures += 1;
        }
        g.records.push(traj);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("pool lock poisoned").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> BTreeMap<String, TaskStats> {
        self.inner.lock().expect("pool lock poisoned").stats.clone()
    }

    /// Snapshot of all records in append order.
    pub fn records(&self) -> Vec<Trajectory> {
        self.inner.lock().expect("pool lock poisoned").records.clone()
    }

    /// `min(n, len)` records drawn uniformly without replacement.
    pub fn sample_batch(&self, n: usize, seed: u64) -> Vec<Trajectory> {
        let g = self.inner.lock().expect("pool lock poisoned");
        let amount = n.min(g.records.len());
        let mut rng = rng_from(seed);
        rand::seq::index::sample(&mut rng, g.records.len(), amount)
            .into_iter()
            .map(|i| g.records[i].clone())
            .collect()
    }
}

/// Per-task counts recomputed from scratch.
pub fn recount(records: &[Trajectory]) -> BTreeMap<String, TaskStats> {
    let mut m: BTreeMap<String, TaskStats> = BTreeMap::new();
    for r in records {
        let s = m.entry(r.task_id.clone()).or_default();
        if r.reward == 1 {
            s.successes += 1;
        } else {
            s.failures += 1;
        }
    }
    m
}
