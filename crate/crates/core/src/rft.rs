//! Rejection-sampling curation: compute budget selection and step denoising.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::action::{Action, TerminateStatus};
use crate::digest::StateHash;
use crate::error::{Error, Result};
use crate::model::{evaluate_reward, Task, Trajectory};
use crate::sandbox::{self, NoiseConfig};

/// Ascending budgets paired with strictly descending pass-rate thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSpectrum {
    pub budgets: Vec<u32>,
    pub thresholds: Vec<f64>,
}

impl BudgetSpectrum {
    pub fn new(budgets: Vec<u32>, thresholds: Vec<f64>) -> Result<Self> {
        let s = BudgetSpectrum { budgets, thresholds };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() || self.budgets.len() != self.thresholds.len() {
            return Err(Error::Config("spectrum needs equal, non-zero numbers of budgets and thresholds".into()));
        }
        if self.budgets[0] == 0 || self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("budgets must be positive and strictly ascending".into()));
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) || self.thresholds.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::Config("thresholds must lie in [0, 1] and strictly descend".into()));
        }
        Ok(())
    }

    pub fn max_budget(&self) -> u32 {
        *self.budgets.last().expect("validated non-empty")
    }
}

impl Default for BudgetSpectrum {
    fn default() -> Self {
        BudgetSpectrum { budgets: alloc::vec![4, 8, 16], thresholds: alloc::vec![0.75, 0.5, 0.25] }
    }
}

/// Parses `k:τ,k:τ,...`, e.g. `4:0.75,8:0.5,16:0.25`.
impl FromStr for BudgetSpectrum {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut budgets = Vec::new();
        let mut thresholds = Vec::new();
        for part in s.split(',') {
            let (k, t) = part
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("spectrum entry `{part}` is not k:threshold")))?;
            budgets.push(k.trim().parse().map_err(|_| Error::Config(format!("bad budget `{k}`")))?);
            thresholds.push(t.trim().parse().map_err(|_| Error::Config(format!("bad threshold `{t}`")))?);
        }
        BudgetSpectrum::new(budgets, thresholds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetChoice {
    pub budget: u32,
    pub index: usize,
    /// False when no threshold was met and the largest budget was returned.
    pub satisfied: bool,
}

/// `K* = k_{i*}` with `i* = min { i | SR(k_i) ≥ τ_i }`; falls back to the
/// largest budget with `satisfied = false`.
pub fn select_budget(sr_by_k: &BTreeMap<u32, f64>, spectrum: &BudgetSpectrum) -> Result<BudgetChoice> {
    spectrum.validate()?;
    for (i, (k, tau)) in spectrum.budgets.iter().zip(&spectrum.thresholds).enumerate() {
        let sr = sr_by_k
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("no pass rate for budget {k}")))?;
        if *sr >= *tau {
            return Ok(BudgetChoice { budget: *k, index: i, satisfied: true });
        }
    }
    let n = spectrum.budgets.len() - 1;
    Ok(BudgetChoice { budget: spectrum.budgets[n], index: n, satisfied: false })
}

/// `SR(k_i)` over the first `k_i` of one shared run of rollout rewards.
pub fn pass_rates_from_prefix(rewards: &[u8], spectrum: &BudgetSpectrum) -> Result<BTreeMap<u32, f64>> {
    spectrum.validate()?;
    let need = spectrum.max_budget() as usize;
    if rewards.len() < need {
        return Err(Error::InvalidArgument(format!("{} rewards for a budget of {need}", rewards.len())));
    }
    Ok(spectrum
        .budgets
        .iter()
        .map(|k| {
            let k = *k as usize;
            let wins = rewards[..k].iter().filter(|r| **r == 1).count();
            (k as u32, wins as f64 / k as f64)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiseRule {
    Cycle,
    NoOp,
    PostSuccessRedundancy,
    InfeasibleCollapse,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DenoiseReport {
    pub masked_indices: Vec<usize>,
    pub rules_fired: BTreeMap<usize, DenoiseRule>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseConfig {
    /// Mask steps taken after the goal state is first reached. Needs a replay.
    #[serde(default)]
    pub post_success_redundancy: bool,
}

fn exempt(a: &Action) -> bool {
    matches!(a, Action::Wait { .. } | Action::Terminate { .. })
}

/// Rule-based masks for a feasible success, computed from the recorded state
/// hashes only. Existing masks are ignored, so the result is idempotent.
fn feasible_masks(traj: &Trajectory) -> BTreeMap<usize, DenoiseRule> {
    let n = traj.steps.len();
    let pre: Vec<StateHash> = traj.steps.iter().map(|s| s.state_hash).collect();
    let post: Vec<StateHash> = (0..n).map(|t| traj.post_state_hash(t)).collect();
    let mut fired = BTreeMap::new();

    // Revisit loops: steps i..=j whose net effect returns to the state before i.
    let mut i = 0;
    while i < n {
        let loop_end = (i + 1..n)
            .rev()
            .find(|&j| post[j] == pre[i] && !traj.steps[i..=j].iter().any(|s| s.action.is_terminate()));
        match loop_end {
            Some(j) if traj.steps[i..=j].iter().any(|s| !exempt(&s.action)) => {
                for k in i..=j {
                    fired.insert(k, DenoiseRule::Cycle);
                }
                i = j + 1;
            }
            _ => i += 1,
        }
    }
    // Runs of identical (pre-state, action): keep the first.
    for t in 1..n {
        if pre[t] == pre[t - 1] && traj.steps[t].action == traj.steps[t - 1].action {
            fired.entry(t).or_insert(DenoiseRule::Cycle);
        }
    }
    for t in 0..n {
        if pre[t] == post[t] && !exempt(&traj.steps[t].action) {
            fired.entry(t).or_insert(DenoiseRule::NoOp);
        }
    }
    fired
}

fn apply_masks(traj: &Trajectory, fired: BTreeMap<usize, DenoiseRule>) -> (Trajectory, DenoiseReport) {
    let mut out = traj.clone();
    for (t, s) in out.steps.iter_mut().enumerate() {
        s.loss_mask = !fired.contains_key(&t);
    }
    let report = DenoiseReport { masked_indices: fired.keys().copied().collect(), rules_fired: fired };
    (out, report)
}

/// Masks redundant steps of a successful feasible trajectory, or collapses an
/// infeasible-task trajectory to its final `terminate failure` step.
pub fn denoise(traj: &Trajectory, feasible: bool) -> Result<(Trajectory, DenoiseReport)> {
    if !feasible {
        return infeasible_collapse(traj);
    }
    if traj.reward != 1 {
        return Err(Error::Rejected(format!("{}: feasible task with reward 0", traj.id())));
    }
    Ok(apply_masks(traj, feasible_masks(traj)))
}

fn infeasible_collapse(traj: &Trajectory) -> Result<(Trajectory, DenoiseReport)> {
    let n = traj.steps.len();
    match traj.steps.last().map(|s| &s.action) {
        Some(Action::Terminate { status: TerminateStatus::Failure }) => {}
        _ => {
            return Err(Error::Rejected(format!(
                "{}: infeasible-task trajectory must end with terminate failure",
                traj.id()
            )))
        }
    }
    let fired = (0..n - 1).map(|t| (t, DenoiseRule::InfeasibleCollapse)).collect();
    Ok(apply_masks(traj, fired))
}

/// [`denoise`] with the optional replay-based rules enabled by `cfg`.
pub fn denoise_with(task: &Task, traj: &Trajectory, cfg: &DenoiseConfig) -> Result<(Trajectory, DenoiseReport)> {
    if !task.feasible || !cfg.post_success_redundancy {
        return denoise(traj, task.feasible);
    }
    if traj.reward != 1 {
        return Err(Error::Rejected(format!("{}: feasible task with reward 0", traj.id())));
    }
    let mut fired = feasible_masks(traj);
    let noise = NoiseConfig::off();
    let mut state = sandbox::reset(task, traj.seed)?;
    let mut reached = None;
    for (t, s) in traj.steps.iter().enumerate() {
        if s.action.is_terminate() {
            break;
        }
        state = sandbox::step(&state, &s.action, &noise)?.0;
        if evaluate_reward(&task.validator, &state)? == 1 {
            reached = Some(t);
            break;
        }
    }
    if let Some(done_at) = reached {
        for (t, s) in traj.steps.iter().enumerate().skip(done_at + 1) {
            if !s.action.is_terminate() {
                fired.entry(t).or_insert(DenoiseRule::PostSuccessRedundancy);
            }
        }
    }
    Ok(apply_masks(traj, fired))
}

/// Actions of the supervised steps, in order.
pub fn unmasked_actions(traj: &Trajectory) -> Vec<Action> {
    traj.steps.iter().filter(|s| s.loss_mask).map(|s| s.action.clone()).collect()
}

/// Human-readable one-line summary of a report.
pub fn report_line(traj_id: &str, report: &DenoiseReport) -> String {
    format!("{traj_id}: {} masked", report.masked_indices.len())
}
