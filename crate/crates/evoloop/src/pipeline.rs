//! Stage functions shared by the subcommands and the end-to-end pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context as _, Result};
use evoloop_core::action::{serialize_action, Action, TerminateStatus};
use evoloop_core::coldstart::{decompose_to_samples, hindsight_annotate, ReasoningProvider, TemplateProvider, TrainingSample};
use evoloop_core::digest::{derive_seed, rng_from};
use evoloop_core::episode::noop_action;
use evoloop_core::model::{Task, Trajectory};
use evoloop_core::policy::{Bucketing, LogitRow, Policy, PolicyHandle, ScriptedPolicy, StochasticScripted, TabularGrad, TabularPolicy};
use evoloop_core::preference::{construct_pairs, dpo_margin, dpo_loss_from_margin, PairConfig, Paradigm, PreferencePair, SkipRecord};
use evoloop_core::rft::{denoise_with, pass_rates_from_prefix, select_budget, BudgetSpectrum, DenoiseConfig, DenoiseRule};
use evoloop_core::sandbox::NoiseConfig;
use evoloop_core::stepo::{grpo_trajectory_objective, group_from_trajectories, stepo_gradient, stepo_objective, ClipConfig};
use evoloop_core::synthesis::{
    consistency_check, decontaminate, sample_scenario, synthesize_task, ConsistencyConfig, ConsistencyReport,
    DecontamConfig, Removal, Scenario, Taxonomy, TemplateArchitect,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::formats::{file_digest, read_json, write_json, write_jsonl};
use crate::orchestrator::{group_seeds, Cluster, GroupResult, Orchestrator, SessionSpec};
use crate::pool::ExperiencePool;

/// Ordered parallel map over `items` with at most `threads` workers.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let n = items.len();
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(&items[i]);
                out.lock().expect("par_map lock poisoned")[i] = Some(r);
            });
        }
    });
    out.into_inner().expect("par_map lock poisoned").into_iter().map(|r| r.expect("ran")).collect()
}

fn cpus() -> usize {
    std::thread::available_parallelism().map_or(4, |p| p.get())
}

pub fn task_index(tasks: &[Task]) -> BTreeMap<&str, &Task> {
    tasks.iter().map(|t| (t.id.as_str(), t)).collect()
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthAttempt {
    pub scenario: Scenario,
    pub task_id: String,
    pub rounds: u32,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QaReport {
    pub attempts: Vec<SynthAttempt>,
    /// Consistency reports of flagged tasks. Flagged tasks are set aside for
    /// review, not published in the corpus.
    pub flagged: Vec<ConsistencyReport>,
    pub removed: Vec<Removal>,
    pub kept: usize,
}

pub struct SynthParams<'a> {
    pub taxonomy: &'a Taxonomy,
    pub benchmark: &'a [Task],
    pub count: usize,
    pub max_rounds: u32,
    pub consistency: ConsistencyConfig,
    pub reference_p_success: f64,
    pub decontam: DecontamConfig,
    pub seed: u64,
}

/// Parallel consistency checks, ordered like `tasks`.
pub fn consistency_filter_parallel(tasks: &[Task], agent: &dyn Policy, cfg: &ConsistencyConfig) -> (Vec<Task>, Vec<ConsistencyReport>) {
    let reports = par_map(tasks, cpus(), |t| consistency_check(t, agent, cfg));
    let mut kept = Vec::new();
    let mut flagged = Vec::new();
    for (t, r) in tasks.iter().zip(reports) {
        if r.flagged {
            flagged.push(r);
        } else {
            kept.push(t.clone());
        }
    }
    (kept, flagged)
}

/// Samples scenarios until `count` tasks are accepted (or `10 × count`
/// attempts), then filters for consistency and decontaminates.
pub fn synth_stage(p: &SynthParams<'_>) -> Result<(Vec<Task>, QaReport)> {
    let mut rng = rng_from(derive_seed(p.seed, "synthesis"));
    let mut report = QaReport::default();
    let mut accepted: Vec<Task> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut attempts = 0;
    while accepted.len() < p.count && attempts < p.count * 10 {
        attempts += 1;
        let sc = sample_scenario(p.taxonomy, &mut rng)?;
        let out = synthesize_task(&TemplateArchitect, &sc, p.max_rounds)?;
        report.attempts.push(SynthAttempt {
            scenario: sc,
            task_id: out.task.id.clone(),
            rounds: out.rounds,
            accepted: out.accepted,
            failure: out.failure.clone(),
        });
        if out.accepted && seen.insert(out.task.id.clone()) {
            accepted.push(out.task);
        }
    }
    let agent = StochasticScripted::new(ScriptedPolicy::ground_truth(), p.reference_p_success);
    let cfg = ConsistencyConfig { seed: derive_seed(p.seed, "consistency"), ..p.consistency };
    let (consistent, flagged) = consistency_filter_parallel(&accepted, &agent, &cfg);
    let (kept, removed) = decontaminate(&consistent, p.benchmark, &p.decontam);
    report.flagged = flagged;
    report.removed = removed;
    report.kept = kept.len();
    Ok((kept, report))
}

// ---------------------------------------------------------------------------
// rollout

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPassRate {
    pub successes: usize,
    pub rollouts: usize,
    pub pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutMetrics {
    pub sessions_run: u64,
    pub failed_sessions: usize,
    pub peak_concurrency: usize,
    pub quota: usize,
    pub pass_rates: BTreeMap<String, TaskPassRate>,
}

pub struct RolloutParams<'a> {
    pub group: usize,
    pub budget: usize,
    pub noise: &'a NoiseConfig,
    pub seed: u64,
}

/// `group` rollouts per task in one concurrent batch, regrouped by task in
/// input order. Completed trajectories are also appended to `pool`.
pub fn rollout_stage(
    cluster: &Cluster,
    tasks: &[Task],
    policy: &dyn Policy,
    p: &RolloutParams<'_>,
    pool: &ExperiencePool,
) -> Result<(Vec<GroupResult>, RolloutMetrics)> {
    if p.group < 2 {
        bail!("group size {} < 2", p.group);
    }
    let root = derive_seed(p.seed, "rollout");
    let mut specs = Vec::with_capacity(tasks.len() * p.group);
    for t in tasks {
        let task = Arc::new(t.clone());
        for seed in group_seeds(root, &t.id, p.group) {
            specs.push(SessionSpec { task: task.clone(), seed, step_budget: p.budget });
        }
    }
    let results = cluster.run_batch(&specs, policy, p.noise, Some(pool));
    let mut groups = Vec::with_capacity(tasks.len());
    let mut pass_rates = BTreeMap::new();
    let mut failed = 0;
    for (t, chunk) in tasks.iter().zip(results.chunks(p.group)) {
        let failures: Vec<usize> = chunk.iter().enumerate().filter(|(_, r)| r.outcome.is_none()).map(|(i, _)| i).collect();
        failed += failures.len();
        let trajectories: Vec<Trajectory> = chunk.iter().filter_map(|r| r.trajectory().cloned()).collect();
        let successes = trajectories.iter().filter(|x| x.reward == 1).count();
        pass_rates.insert(
            t.id.clone(),
            TaskPassRate {
                successes,
                rollouts: trajectories.len(),
                pass_rate: if trajectories.is_empty() { 0.0 } else { successes as f64 / trajectories.len() as f64 },
            },
        );
        groups.push(GroupResult { task_id: t.id.clone(), trajectories, partial: !failures.is_empty(), failures });
    }
    let metrics = RolloutMetrics {
        sessions_run: cluster.sessions_run(),
        failed_sessions: failed,
        peak_concurrency: cluster.peak_active(),
        quota: cluster.quota,
        pass_rates,
    };
    Ok((groups, metrics))
}

// ---------------------------------------------------------------------------
// budget

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRecord {
    pub task_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_rates: Option<BTreeMap<u32, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<u32>,
    /// False when no threshold was met and the largest budget was chosen.
    pub satisfied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Pass rate at every budget level from the first `k_i` of `k_n` rollouts.
pub fn estimate_pass_rates(
    cluster: &Cluster,
    task: &Task,
    policy: &dyn Policy,
    spectrum: &BudgetSpectrum,
    step_budget: usize,
    seed: u64,
) -> Result<BTreeMap<u32, f64>> {
    let kn = spectrum.max_budget() as usize;
    let task = Arc::new(task.clone());
    let specs: Vec<SessionSpec> = group_seeds(derive_seed(seed, "budget"), &task.id, kn)
        .into_iter()
        .map(|s| SessionSpec { task: task.clone(), seed: s, step_budget })
        .collect();
    let results = cluster.run_batch(&specs, policy, &NoiseConfig::off(), None);
    let mut rewards = Vec::with_capacity(kn);
    for r in results {
        match r.outcome {
            Some(o) => rewards.push(o.trajectory.reward),
            None => bail!("session {} failed: {:?}", r.index, r.status),
        }
    }
    Ok(pass_rates_from_prefix(&rewards, spectrum)?)
}

pub fn budget_stage(
    cluster: &Cluster,
    tasks: &[Task],
    policy: &dyn Policy,
    spectrum: &BudgetSpectrum,
    step_budget: usize,
    seed: u64,
) -> Vec<BudgetRecord> {
    tasks
        .iter()
        .map(|t| match estimate_pass_rates(cluster, t, policy, spectrum, step_budget, seed)
            .and_then(|sr| Ok((select_budget(&sr, spectrum)?, sr)))
        {
            Ok((choice, sr)) => BudgetRecord {
                task_id: t.id.clone(),
                pass_rates: Some(sr),
                budget: Some(choice.budget),
                satisfied: choice.satisfied,
                error: None,
            },
            Err(e) => BudgetRecord { task_id: t.id.clone(), pass_rates: None, budget: None, satisfied: false, error: Some(e.to_string()) },
        })
        .collect()
}

// ---------------------------------------------------------------------------
// denoise

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseEntry {
    pub trajectory_id: String,
    pub masked_indices: Vec<usize>,
    pub rules_fired: BTreeMap<usize, DenoiseRule>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenoiseSummary {
    pub entries: Vec<DenoiseEntry>,
    /// Trajectories that do not belong in RFT (feasible failures, infeasible
    /// runs not ending in `terminate failure`).
    pub rejected: usize,
    pub unknown_task: usize,
}

pub fn denoise_stage(tasks: &[Task], trajectories: &[Trajectory], cfg: &DenoiseConfig) -> Result<(Vec<Trajectory>, DenoiseSummary)> {
    let by_id = task_index(tasks);
    let mut kept = Vec::new();
    let mut summary = DenoiseSummary::default();
    for tr in trajectories {
        let Some(task) = by_id.get(tr.task_id.as_str()) else {
            summary.unknown_task += 1;
            continue;
        };
        match denoise_with(task, tr, cfg) {
            Ok((out, report)) => {
                summary.entries.push(DenoiseEntry {
                    trajectory_id: tr.id(),
                    masked_indices: report.masked_indices,
                    rules_fired: report.rules_fired,
                });
                kept.push(out);
            }
            Err(evoloop_core::Error::Rejected(_)) => summary.rejected += 1,
            Err(e) => return Err(anyhow!("{}: {e}", tr.id())),
        }
    }
    Ok((kept, summary))
}

// ---------------------------------------------------------------------------
// annotate / samples

pub fn annotate_stage(tasks: &[Task], trajectories: &[Trajectory], provider: &dyn ReasoningProvider) -> Result<Vec<Trajectory>> {
    let by_id = task_index(tasks);
    trajectories
        .iter()
        .map(|tr| {
            let task = by_id.get(tr.task_id.as_str()).ok_or_else(|| anyhow!("{}: unknown task", tr.id()))?;
            hindsight_annotate(task, tr, None, provider).map_err(|e| anyhow!("{}: {e}", tr.id()))
        })
        .collect()
}

pub fn samples_stage(tasks: &[Task], trajectories: &[Trajectory]) -> Result<Vec<TrainingSample>> {
    let by_id = task_index(tasks);
    let mut out = Vec::new();
    for tr in trajectories {
        let task = by_id.get(tr.task_id.as_str()).ok_or_else(|| anyhow!("{}: unknown task", tr.id()))?;
        out.extend(decompose_to_samples(task, tr).map_err(|e| anyhow!("{}: {e}", tr.id()))?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pairs

/// Reference for a failed trajectory: the first success of the same task,
/// else the first success of the same template family.
pub fn pick_reference<'a>(fail: &Trajectory, family: &str, tasks: &BTreeMap<&str, &Task>, pool: &'a [Trajectory]) -> Option<&'a Trajectory> {
    let ok = |t: &&Trajectory| t.reward == 1;
    pool.iter().filter(ok).find(|t| t.task_id == fail.task_id).or_else(|| {
        if family.is_empty() {
            return None;
        }
        pool.iter().filter(ok).find(|t| tasks.get(t.task_id.as_str()).is_some_and(|x| x.family == family))
    })
}

pub fn pairs_stage(
    tasks: &[Task],
    trajectories: &[Trajectory],
    cfg: &PairConfig,
    provider: Option<&dyn ReasoningProvider>,
) -> Result<(Vec<PreferencePair>, Vec<SkipRecord>)> {
    let by_id = task_index(tasks);
    let mut pairs = Vec::new();
    let mut skips = Vec::new();
    for fail in trajectories.iter().filter(|t| t.reward == 0) {
        let Some(task) = by_id.get(fail.task_id.as_str()) else { continue };
        if !task.feasible {
            continue;
        }
        let skip = |reason: String, t_star| SkipRecord { fail_traj_id: fail.id(), ref_traj_id: String::new(), t_star, reason };
        let Some(reference) = pick_reference(fail, &task.family, &by_id, trajectories) else {
            skips.push(skip("no successful reference".into(), None));
            continue;
        };
        match construct_pairs(task, fail, reference, cfg, provider) {
            Ok(out) => {
                pairs.extend(out.pairs);
                skips.extend(out.skipped);
            }
            Err(e @ (evoloop_core::Error::NoDeviation | evoloop_core::Error::Undiagnosable)) => {
                skips.push(SkipRecord { ref_traj_id: reference.id(), ..skip(e.to_string(), None) })
            }
            Err(e) => return Err(anyhow!("{}: {e}", fail.id())),
        }
    }
    Ok((pairs, skips))
}

// ---------------------------------------------------------------------------
// dpo-eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLoss {
    pub index: usize,
    pub paradigm: Paradigm,
    pub margin: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoMetrics {
    pub beta: f64,
    pub pairs: usize,
    pub mean_loss: f64,
    pub per_pair: Vec<PairLoss>,
}

pub fn dpo_eval(pairs: &[PreferencePair], policy: &dyn Policy, reference: &dyn Policy, beta: f64) -> Result<DpoMetrics> {
    if !(beta > 0.0) {
        bail!("beta must be > 0");
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let margin = dpo_margin(policy, reference, p).with_context(|| format!("pair {i}"))?;
        per_pair.push(PairLoss { index: i, paradigm: p.paradigm, margin, loss: dpo_loss_from_margin(margin, beta) });
    }
    let mean_loss = if per_pair.is_empty() {
        0.0
    } else {
        evoloop_core::math::compensated_sum(per_pair.iter().map(|p| p.loss)) / per_pair.len() as f64
    };
    Ok(DpoMetrics { beta, pairs: pairs.len(), mean_loss, per_pair })
}

// ---------------------------------------------------------------------------
// stepo

pub const TEMPLATE_IDS: [&str; 5] = ["script", "goal", "observe", "reflect", "terminate"];

/// Tabular policy for a rollout wave: one action row per `(task, step)`
/// whose vocabulary is every action seen for the task (ground truth plus
/// `extra` trajectories), with the ground-truth action at that step biased.
pub fn tabular_wave(tasks: &[Task], extra: &[Trajectory], max_steps: usize, gt_bias: f64, temperature: f64) -> TabularPolicy {
    let mut p = TabularPolicy::new(temperature, Bucketing::TaskStep);
    p.rows.insert(
        "*#z".into(),
        LogitRow::new(TEMPLATE_IDS.iter().map(|s| s.to_string()).collect(), vec![0.0; TEMPLATE_IDS.len()]),
    );
    let fallback: Vec<String> = [noop_action(), Action::terminate(TerminateStatus::Failure)].iter().map(serialize_action).collect();
    p.rows.insert("*#a".into(), LogitRow::new(fallback.clone(), vec![0.0; fallback.len()]));
    let mut seen: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for tr in extra {
        seen.entry(tr.task_id.as_str()).or_default().extend(tr.actions().map(serialize_action));
    }
    for t in tasks {
        let Some(gt) = &t.solution else { continue };
        if gt.is_empty() {
            continue;
        }
        let mut vocab: Vec<String> = Vec::new();
        for a in gt.iter().map(serialize_action).chain(fallback.iter().cloned()).chain(seen.get(t.id.as_str()).into_iter().flatten().cloned()) {
            if !vocab.contains(&a) {
                vocab.push(a);
            }
        }
        for step in 0..max_steps {
            let target = serialize_action(&gt[step.min(gt.len() - 1)]);
            let logits = vocab.iter().map(|v| if *v == target { gt_bias } else { 0.0 }).collect();
            p.rows.insert(format!("{}|{step}#a", t.id), LogitRow::new(vocab.clone(), logits));
        }
    }
    p
}

/// `policy + lr · grad`.
pub fn ascend(policy: &TabularPolicy, grad: &TabularGrad, lr: f64) -> TabularPolicy {
    let mut p = policy.clone();
    for (k, g) in grad {
        if let Some(row) = p.rows.get_mut(k) {
            for (l, d) in row.logits.iter_mut().zip(g) {
                *l += lr * d;
            }
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupObjective {
    pub task_id: String,
    pub size: usize,
    pub successes: usize,
    pub stepo_j: f64,
    pub grpo_j: f64,
    pub clip_active_fraction: f64,
    pub mean_kl: f64,
    pub total_tokens: usize,
    pub stepo_supervised_tokens: usize,
    pub grpo_supervised_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepoMetrics {
    pub groups: Vec<GroupObjective>,
    pub skipped: Vec<String>,
    pub mean_stepo_j: f64,
    pub mean_grpo_j: f64,
    pub mean_clip_active_fraction: f64,
    pub mean_kl: f64,
    pub total_tokens: usize,
    pub stepo_supervised_tokens: usize,
    pub grpo_supervised_tokens: usize,
}

/// Objectives of every complete group. `old = None` uses the log-probs
/// recorded at sampling time.
pub fn stepo_eval(
    tasks: &[Task],
    groups: &[GroupResult],
    new: &TabularPolicy,
    old: Option<&dyn Policy>,
    reference: &dyn Policy,
    clip: &ClipConfig,
) -> Result<StepoMetrics> {
    let by_id = task_index(tasks);
    let mut out = Vec::new();
    let mut skipped = Vec::new();
    for g in groups {
        let Some(task) = by_id.get(g.task_id.as_str()) else {
            skipped.push(format!("{}: unknown task", g.task_id));
            continue;
        };
        if g.partial || g.trajectories.len() < 2 {
            skipped.push(format!("{}: partial group", g.task_id));
            continue;
        }
        let group = match group_from_trajectories(task, &g.trajectories, old, reference, new) {
            Ok(x) => x,
            Err(e) => {
                skipped.push(format!("{}: {e}", g.task_id));
                continue;
            }
        };
        let (j, d) = stepo_objective(&group, clip)?;
        let (jg, dg) = grpo_trajectory_objective(&group, clip)?;
        out.push(GroupObjective {
            task_id: g.task_id.clone(),
            size: group.size(),
            successes: g.trajectories.iter().filter(|t| t.reward == 1).count(),
            stepo_j: j,
            grpo_j: jg,
            clip_active_fraction: d.clip_active_fraction,
            mean_kl: d.mean_kl,
            total_tokens: d.total_tokens,
            stepo_supervised_tokens: d.supervised_tokens,
            grpo_supervised_tokens: dg.supervised_tokens,
        });
    }
    let n = out.len().max(1) as f64;
    let mean = |f: fn(&GroupObjective) -> f64| evoloop_core::math::compensated_sum(out.iter().map(f)) / n;
    Ok(StepoMetrics {
        mean_stepo_j: mean(|g| g.stepo_j),
        mean_grpo_j: mean(|g| g.grpo_j),
        mean_clip_active_fraction: mean(|g| g.clip_active_fraction),
        mean_kl: mean(|g| g.mean_kl),
        total_tokens: out.iter().map(|g| g.total_tokens).sum(),
        stepo_supervised_tokens: out.iter().map(|g| g.stepo_supervised_tokens).sum(),
        grpo_supervised_tokens: out.iter().map(|g| g.grpo_supervised_tokens).sum(),
        groups: out,
        skipped,
    })
}

/// Sum of STEPO gradients over complete groups, scored on-policy.
pub fn stepo_wave_gradient(tasks: &[Task], groups: &[GroupResult], policy: &TabularPolicy, clip: &ClipConfig) -> Result<TabularGrad> {
    let by_id = task_index(tasks);
    let mut total = TabularGrad::new();
    for g in groups.iter().filter(|g| !g.partial && g.trajectories.len() >= 2) {
        let Some(task) = by_id.get(g.task_id.as_str()) else { continue };
        let group = group_from_trajectories(task, &g.trajectories, None, policy, policy)?;
        evoloop_core::policy::grad_axpy(&mut total, 1.0, &stepo_gradient(&group, clip, policy)?);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// pipeline

pub const STAGES: [&str; 6] = ["synth", "rollout", "budget", "denoise", "pairs", "stepo"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub completed_stages: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// File name → hex SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

/// Error carrying the stage that failed.
#[derive(Debug, thiserror::Error)]
#[error("stage `{stage}` failed")]
pub struct StageError {
    pub stage: String,
    pub source: anyhow::Error,
}

struct Run<'a> {
    dir: &'a Path,
    manifest: RunManifest,
}

impl Run<'_> {
    fn artifact<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        write_json(&path, value)?;
        self.record(name, &path)
    }

    fn artifact_lines<T: Serialize>(&mut self, name: &str, records: &[T]) -> Result<()> {
        let path = self.dir.join(name);
        write_jsonl(&path, records)?;
        self.record(name, &path)
    }

    fn record(&mut self, name: &str, path: &Path) -> Result<()> {
        self.manifest.artifacts.insert(name.to_string(), file_digest(path)?);
        Ok(())
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T, StageError> {
        match f(self) {
            Ok(v) => {
                self.manifest.completed_stages.push(name.to_string());
                Ok(v)
            }
            Err(source) => {
                self.manifest.failed_stage = Some(name.to_string());
                self.manifest.error = Some(format!("{source:#}"));
                let _ = write_json(&self.dir.join("run_manifest.json"), &self.manifest);
                Err(StageError { stage: name.to_string(), source })
            }
        }
    }
}

pub fn load_taxonomy(path: Option<&Path>) -> Result<Taxonomy> {
    let tax = match path {
        Some(p) => read_json::<Taxonomy>(p)?,
        None => Taxonomy::default(),
    };
    tax.validate().map_err(|e| anyhow!("taxonomy: {e}"))?;
    Ok(tax)
}

pub fn load_tasks(path: &Path) -> Result<Vec<Task>> {
    let tasks: Vec<Task> = read_json(path)?;
    for t in &tasks {
        t.validator.validate().map_err(|e| anyhow!("{}: task {}: {e}", path.display(), t.id))?;
    }
    Ok(tasks)
}

/// Runs every stage into `out_dir`. On failure the artifacts written so far
/// stay in place and the manifest names the failed stage.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path, orch: &Orchestrator) -> Result<RunManifest, StageError> {
    cfg.validate().map_err(|source| StageError { stage: "config".into(), source })?;
    std::fs::create_dir_all(out_dir).map_err(|e| StageError { stage: "config".into(), source: e.into() })?;
    let mut run = Run {
        dir: out_dir,
        manifest: RunManifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config: cfg.clone(),
            completed_stages: Vec::new(),
            failed_stage: None,
            error: None,
            artifacts: BTreeMap::new(),
        },
    };
    let seed = cfg.seed;

    let tasks: Vec<Task> = match &cfg.tasks_file {
        Some(_) => Vec::new(),
        None => run.stage("synth", |run| {
            let tax = load_taxonomy(cfg.synth.taxonomy.as_deref())?;
            let bench = match &cfg.synth.benchmark {
                Some(p) => load_tasks(p)?,
                None => Vec::new(),
            };
            let (tasks, qa) = synth_stage(&SynthParams {
                taxonomy: &tax,
                benchmark: &bench,
                count: cfg.synth.count,
                max_rounds: cfg.synth.max_rounds,
                consistency: cfg.synth.consistency,
                reference_p_success: cfg.synth.reference_p_success,
                decontam: cfg.synth.decontam,
                seed,
            })?;
            run.artifact("tasks.json", &tasks)?;
            run.artifact("synth_qa.json", &qa)?;
            Ok(tasks)
        })?,
    };

    let cluster = orch
        .provision_cluster("desktop-sim", "v1", cfg.rollout.quota)
        .map_err(|e| StageError { stage: "rollout".into(), source: e.into() })?;
    let (tasks, groups) = run.stage("rollout", |run| {
        let tasks = match &cfg.tasks_file {
            Some(p) => load_tasks(p)?,
            None => tasks,
        };
        let pool = ExperiencePool::new(tasks.iter().map(|t| t.id.clone()));
        let policy = StochasticScripted::new(ScriptedPolicy::ground_truth(), cfg.rollout.p_success);
        let (groups, metrics) = rollout_stage(
            &cluster,
            &tasks,
            &policy,
            &RolloutParams { group: cfg.rollout.group, budget: cfg.rollout.budget, noise: &cfg.rollout.noise, seed },
            &pool,
        )?;
        let flat: Vec<Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter().cloned()).collect();
        run.artifact_lines("pool.jsonl", &flat)?;
        run.artifact("rollout_metrics.json", &metrics)?;
        Ok((tasks, groups))
    })?;
    let flat: Vec<Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter().cloned()).collect();

    run.stage("budget", |run| {
        let policy = StochasticScripted::new(ScriptedPolicy::ground_truth(), cfg.rollout.p_success);
        let budgets = budget_stage(&cluster, &tasks, &policy, &cfg.rft.spectrum, cfg.rollout.budget, seed);
        run.artifact("budgets.json", &budgets)
    })?;

    run.stage("denoise", |run| {
        let (rft, summary) = denoise_stage(&tasks, &flat, &cfg.rft.denoise)?;
        run.artifact_lines("rft.jsonl", &rft)?;
        run.artifact("denoise_report.json", &summary)
    })?;

    run.stage("pairs", |run| {
        let pc = PairConfig {
            window: cfg.preference.window,
            equivalence: cfg.preference.equivalence,
            synthesize_fallback: cfg.preference.synthesize_fallback,
        };
        let (pairs, skips) = pairs_stage(&tasks, &flat, &pc, Some(&TemplateProvider))?;
        run.artifact_lines("pairs.jsonl", &pairs)?;
        run.artifact("pairs_skipped.json", &skips)
    })?;

    run.stage("stepo", |run| {
        let wave = tabular_wave(&tasks, &flat, cfg.rollout.budget, cfg.stepo.gt_bias, cfg.stepo.temperature);
        let solvable: Vec<Task> = tasks.iter().filter(|t| t.solution.is_some()).cloned().collect();
        let pool = ExperiencePool::new(solvable.iter().map(|t| t.id.clone()));
        let (wave_groups, _) = rollout_stage(
            &cluster,
            &solvable,
            &wave,
            &RolloutParams {
                group: cfg.rollout.group,
                budget: cfg.rollout.budget,
                noise: &cfg.rollout.noise,
                seed: derive_seed(seed, "stepo-wave"),
            },
            &pool,
        )?;
        let grad = stepo_wave_gradient(&solvable, &wave_groups, &wave, &cfg.stepo.clip)?;
        let updated = ascend(&wave, &grad, cfg.stepo.learning_rate);
        let metrics = stepo_eval(&solvable, &wave_groups, &updated, None, &wave, &cfg.stepo.clip)?;
        run.artifact("policy_wave.json", &wave)?;
        run.artifact("policy_updated.json", &updated)?;
        run.artifact_lines("groups.jsonl", &wave_groups)?;
        run.artifact("stepo_metrics.json", &metrics)
    })?;

    write_json(&out_dir.join("run_manifest.json"), &run.manifest)
        .map_err(|source| StageError { stage: "manifest".into(), source })?;
    Ok(run.manifest)
}

/// Default artifact directory.
pub fn default_out_dir() -> PathBuf {
    PathBuf::from("evoloop-out")
}

pub fn policy_as_tabular(h: &PolicyHandle, what: &str) -> Result<TabularPolicy> {
    h.as_tabular().cloned().ok_or_else(|| anyhow!("{what} policy must be tabular"))
}
