//! Step-level group-relative policy optimization math, plus the
//! trajectory-level baseline that supervises only each rollout's final step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{compensated_sum, CompensatedSum};
use crate::model::{build_context, Task, Trajectory, CONTEXT_WINDOW};
use crate::policy::{grad_axpy, Policy, TabularGrad, TabularPolicy, TokenSlot};

/// Log-probabilities of one token under the behavior (`old`), reference and
/// current (`new`) policies. `slot` locates the token in a tabular policy so
/// gradients can flow into its logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogProbs {
    pub old: f64,
    pub reference: f64,
    pub new: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<TokenSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTokens {
    pub tokens: Vec<TokenLogProbs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMember {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub trajectory_id: String,
    pub reward: f64,
    pub steps: Vec<StepTokens>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    #[serde(default)]
    pub task_id: String,
    pub trajectories: Vec<GroupMember>,
}

impl GroupRollout {
    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories.iter().map(|m| m.reward).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories.len() < 2 {
            return Err(Error::Shape(format!("group size {} < 2", self.trajectories.len())));
        }
        for (i, m) in self.trajectories.iter().enumerate() {
            if !m.reward.is_finite() {
                return Err(Error::Shape(format!("trajectory {i}: non-finite reward")));
            }
            if m.steps.is_empty() {
                return Err(Error::Shape(format!("trajectory {i} has no steps")));
            }
            for (t, s) in m.steps.iter().enumerate() {
                if s.tokens.is_empty() {
                    return Err(Error::Shape(format!("trajectory {i} step {t} has no tokens")));
                }
                for tok in &s.tokens {
                    if !(tok.old.is_finite() && tok.reference.is_finite() && tok.new.is_finite()) {
                        return Err(Error::Shape(format!("trajectory {i} step {t}: non-finite log-prob")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Copy with every slotted token's `new` log-prob re-scored under `policy`.
    pub fn rescored(&self, policy: &TabularPolicy) -> Result<GroupRollout> {
        let mut g = self.clone();
        for m in &mut g.trajectories {
            for s in &mut m.steps {
                for tok in &mut s.tokens {
                    if let Some(slot) = &tok.slot {
                        tok.new = policy.slot_logprob(slot)?;
                    }
                }
            }
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub beta_kl: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig { eps_low: 0.2, eps_high: 0.2, beta_kl: 0.01 }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_high > 0.0 && self.eps_low < 1.0 && self.eps_high.is_finite()) {
            return Err(Error::Config("need 0 < eps_low < 1 and 0 < eps_high".into()));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return Err(Error::Config("beta_kl must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn clip(&self, r: f64) -> f64 {
        r.clamp(1.0 - self.eps_low, 1.0 + self.eps_high)
    }
}

/// `Â_i = (R_i − mean) / std` with population std; all zeros when std = 0.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidArgument(format!("group size {g} < 2")));
    }
    let n = g as f64;
    let mean = compensated_sum(rewards.iter().copied()) / n;
    let var = compensated_sum(rewards.iter().map(|r| (r - mean) * (r - mean))) / n;
    let std = libm::sqrt(var);
    if std == 0.0 {
        return Ok(alloc::vec![0.0; g]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `Â_{i,t} = Â_i / T_i` for every step.
pub fn allocate_step_advantages(advantage: f64, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("trajectory has no steps".into()));
    }
    Ok(alloc::vec![advantage / steps as f64; steps])
}

/// `r = exp(logp_new − logp_old)` elementwise.
pub fn importance_ratios(logp_new: &[f64], logp_old: &[f64]) -> Result<Vec<f64>> {
    if logp_new.len() != logp_old.len() {
        return Err(Error::Shape(format!("{} vs {} log-probs", logp_new.len(), logp_old.len())));
    }
    Ok(logp_new.iter().zip(logp_old).map(|(n, o)| libm::exp(n - o)).collect())
}

/// Per-token KL estimator `e^d − d − 1` with `d = logp_ref − logp_new`.
pub fn kl_estimate(logp_ref: f64, logp_new: f64) -> f64 {
    let d = logp_ref - logp_new;
    libm::expm1(d) - d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageTable {
    pub trajectory: Vec<f64>,
    pub steps: Vec<Vec<f64>>,
}

pub fn advantage_table(group: &GroupRollout) -> Result<AdvantageTable> {
    let trajectory = group_advantages(&group.rewards())?;
    let steps = trajectory
        .iter()
        .zip(&group.trajectories)
        .map(|(a, m)| allocate_step_advantages(*a, m.steps.len()))
        .collect::<Result<_>>()?;
    Ok(AdvantageTable { trajectory, steps })
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveDiagnostics {
    /// Fraction of supervised tokens where the clipped branch is strictly
    /// smaller than the unclipped one.
    pub clip_active_fraction: f64,
    pub mean_kl: f64,
    pub supervised_tokens: usize,
    pub total_tokens: usize,
    pub supervised_steps: usize,
    pub total_steps: usize,
    /// Per trajectory, per step: did the step receive supervision.
    pub step_supervised: Vec<Vec<bool>>,
}

/// Which steps receive advantage: `(trajectory, step) -> bool`.
pub type StepMask<'a> = &'a dyn Fn(usize, usize) -> bool;

struct TokenTerm {
    value: f64,
    clip_active: bool,
    kl: f64,
    /// d(term)/d(logp_new).
    dnew: f64,
}

fn token_term(tok: &TokenLogProbs, adv: f64, cfg: &ClipConfig) -> TokenTerm {
    let r = libm::exp(tok.new - tok.old);
    let unclipped = r * adv;
    let clipped = cfg.clip(r) * adv;
    let kl = kl_estimate(tok.reference, tok.new);
    let (sur, dsur) = if unclipped <= clipped { (unclipped, r * adv) } else { (clipped, 0.0) };
    let d = tok.reference - tok.new;
    TokenTerm {
        value: sur - cfg.beta_kl * kl,
        clip_active: clipped < unclipped,
        kl,
        dnew: dsur + cfg.beta_kl * libm::expm1(d),
    }
}

/// Shared surrogate: `adv(i, t)` gives the advantage of supervised steps and
/// `None` for unsupervised ones. Optionally accumulates the gradient.
fn surrogate(
    group: &GroupRollout,
    cfg: &ClipConfig,
    adv: &dyn Fn(usize, usize) -> Option<f64>,
    policy: Option<&TabularPolicy>,
) -> Result<(f64, ObjectiveDiagnostics, TabularGrad)> {
    group.validate()?;
    cfg.validate()?;
    let g = group.size() as f64;
    let mut diag = ObjectiveDiagnostics::default();
    let mut grad = TabularGrad::new();
    let mut clip_hits = 0usize;
    let mut kl_sum = CompensatedSum::new();
    let mut total = CompensatedSum::new();
    for (i, m) in group.trajectories.iter().enumerate() {
        let mut traj_sum = CompensatedSum::new();
        let mut flags = Vec::with_capacity(m.steps.len());
        for (t, s) in m.steps.iter().enumerate() {
            diag.total_steps += 1;
            diag.total_tokens += s.tokens.len();
            let Some(a) = adv(i, t) else {
                flags.push(false);
                continue;
            };
            flags.push(true);
            diag.supervised_steps += 1;
            diag.supervised_tokens += s.tokens.len();
            let k = s.tokens.len() as f64;
            let mut step_sum = CompensatedSum::new();
            for tok in &s.tokens {
                let term = token_term(tok, a, cfg);
                step_sum.add(term.value);
                kl_sum.add(term.kl);
                clip_hits += term.clip_active as usize;
                if let (Some(p), Some(slot)) = (policy, &tok.slot) {
                    grad_axpy(&mut grad, term.dnew / (g * k), &p.slot_grad(slot)?);
                }
            }
            traj_sum.add(step_sum.value() / k);
        }
        diag.step_supervised.push(flags);
        total.add(traj_sum.value());
    }
    if diag.supervised_tokens > 0 {
        diag.clip_active_fraction = clip_hits as f64 / diag.supervised_tokens as f64;
        diag.mean_kl = kl_sum.value() / diag.supervised_tokens as f64;
    }
    Ok((total.value() / g, diag, grad))
}

/// Step-level objective: every step of every trajectory is supervised with
/// `Â_i / T_i`, each step's tokens averaged.
pub fn stepo_objective(group: &GroupRollout, cfg: &ClipConfig) -> Result<(f64, ObjectiveDiagnostics)> {
    stepo_objective_masked(group, cfg, &|_, _| true)
}

/// [`stepo_objective`] restricted to the steps selected by `mask`.
pub fn stepo_objective_masked(group: &GroupRollout, cfg: &ClipConfig, mask: StepMask<'_>) -> Result<(f64, ObjectiveDiagnostics)> {
    let table = advantage_table(group)?;
    let (j, d, _) = surrogate(group, cfg, &|i, t| mask(i, t).then(|| table.steps[i][t]), None)?;
    Ok((j, d))
}

/// Trajectory-level baseline: `Â_i` applied to the final step's tokens only.
pub fn grpo_trajectory_objective(group: &GroupRollout, cfg: &ClipConfig) -> Result<(f64, ObjectiveDiagnostics)> {
    let adv = group_advantages(&group.rewards())?;
    let last: Vec<usize> = group.trajectories.iter().map(|m| m.steps.len().saturating_sub(1)).collect();
    let (j, d, _) = surrogate(group, cfg, &|i, t| (t == last[i]).then(|| adv[i]), None)?;
    Ok((j, d))
}

/// Analytic gradient of [`stepo_objective`] w.r.t. the tabular logits that
/// produced the `new` log-probs. Clipping is piecewise: at a kink the
/// unclipped branch is used.
pub fn stepo_gradient(group: &GroupRollout, cfg: &ClipConfig, policy: &TabularPolicy) -> Result<TabularGrad> {
    if policy.temperature == 0.0 {
        return Err(Error::Policy("gradient undefined at temperature 0".into()));
    }
    let table = advantage_table(group)?;
    let (_, _, grad) = surrogate(group, cfg, &|i, t| Some(table.steps[i][t]), Some(policy))?;
    Ok(grad)
}

/// Assembles a group from recorded rollouts.
///
/// `old` log-probs are the ones recorded at sampling time unless an `old`
/// policy is given to rescore them; `reference` and `new` are scored now.
/// `new` must be tabular so tokens carry slots.
pub fn group_from_trajectories(
    task: &Task,
    trajectories: &[Trajectory],
    old: Option<&dyn Policy>,
    reference: &dyn Policy,
    new: &TabularPolicy,
) -> Result<GroupRollout> {
    let mut members = Vec::with_capacity(trajectories.len());
    for traj in trajectories {
        let mut steps = Vec::with_capacity(traj.steps.len());
        for (t, step) in traj.steps.iter().enumerate() {
            let resp = step
                .response
                .as_ref()
                .ok_or_else(|| Error::Policy(format!("{} step {t}: no recorded response", traj.id())))?;
            let ctx = build_context(task, traj, t, CONTEXT_WINDOW)?;
            let olds = match old {
                Some(p) => p.logprob(&ctx, &step.observation, resp)?,
                None => resp.logprobs.clone(),
            };
            let refs = reference.logprob(&ctx, &step.observation, resp)?;
            let slots = new.slots(&ctx, &step.observation, resp)?;
            let tokens = olds
                .iter()
                .zip(refs)
                .zip(slots)
                .map(|((old, reference), slot)| {
                    Ok(TokenLogProbs { old: *old, reference, new: new.slot_logprob(&slot)?, slot: Some(slot) })
                })
                .collect::<Result<Vec<_>>>()?;
            steps.push(StepTokens { tokens });
        }
        members.push(GroupMember { trajectory_id: traj.id(), reward: traj.reward as f64, steps });
    }
    Ok(GroupRollout { task_id: task.id.clone(), trajectories: members })
}
