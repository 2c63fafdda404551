//! Step-level preference pairs: critical deviation discovery, reference
//! alignment, correction and reflection pairs, and the DPO loss.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::action::{Action, Point};
use crate::coldstart::{Phase, ReasoningProvider, ReasoningRequest, TemplateProvider};
use crate::digest::StateHash;
use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus};
use crate::model::{build_context, describe_target, Context, Observation, Step, Task, Trajectory};
use crate::policy::{grad_axpy, template_id_for, Policy, TabularGrad, TabularPolicy, TokenizedResponse};

/// State-equivalence predicate used to compare failure and reference steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Equivalence {
    /// Clock-excluding state digest equality.
    #[default]
    Strict,
    /// Digest equality ignoring focus, selection, cursor and scroll.
    Relaxed,
}

impl Equivalence {
    pub fn key(self, step: &Step) -> StateHash {
        match self {
            Equivalence::Strict => step.state_hash,
            Equivalence::Relaxed => step.relaxed_hash,
        }
    }

    pub fn holds(self, a: &Step, b: &Step) -> bool {
        self.key(a) == self.key(b)
    }
}

/// Action equality where pointer actions of the same kind are equal when they
/// hit the same widget in their respective observations.
pub fn canonical_eq(a: &Action, obs_a: &Observation, b: &Action, obs_b: &Observation) -> bool {
    if a.kind() != b.kind() {
        return false;
    }
    match (obs_a.target_of(a), obs_b.target_of(b)) {
        (Some(wa), Some(wb)) => wa.id == wb.id,
        _ => a == b,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForkingPoint {
    pub t_star: usize,
    pub fail_action: Action,
    pub ref_action: Action,
    /// `(failure state key, reference state key)` at `t_star`.
    pub equivalence_evidence: (StateHash, StateHash),
}

/// Smallest `t` where the two trajectories sit in equivalent states but take
/// canonically different actions.
pub fn find_deviation(fail: &Trajectory, reference: &Trajectory, equiv: Equivalence) -> Result<ForkingPoint> {
    let n = fail.steps.len().min(reference.steps.len());
    let mut all_same = fail.steps.len() == reference.steps.len();
    for t in 0..n {
        let (f, r) = (&fail.steps[t], &reference.steps[t]);
        let same_state = equiv.holds(f, r);
        let same_action = canonical_eq(&f.action, &f.observation, &r.action, &r.observation);
        if same_state && !same_action {
            return Ok(ForkingPoint {
                t_star: t,
                fail_action: f.action.clone(),
                ref_action: r.action.clone(),
                equivalence_evidence: (equiv.key(f), equiv.key(r)),
            });
        }
        all_same &= same_state && same_action;
    }
    if all_same {
        Err(Error::NoDeviation)
    } else {
        Err(Error::Undiagnosable)
    }
}

/// Remaps a pointer action onto the center of the widget it targets in
/// `source`, as laid out in `target`. Coordinate-free actions pass through.
/// Returns `None` when the widget is missing from `target` or the action
/// hits no widget.
pub fn normalize_coords(action: &Action, source: &Observation, target: &Observation) -> Option<Action> {
    if action.coordinate().is_none() {
        return Some(action.clone());
    }
    let widget = source.target_of(action)?;
    let there = target.widget(&widget.id)?;
    let (x, y) = there.bounds.center();
    Some(action.with_coordinate(Point::new(x, y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedStep {
    pub ref_index: usize,
    pub reasoning: String,
    pub action: Action,
}

/// Searches reference steps `t_star − w ..= t_star + w`, nearest first, for
/// an action that differs from the failure's action and whose target widget
/// exists in the failure observation at `t_star`.
pub fn align_reference(fail: &Trajectory, reference: &Trajectory, t_star: usize, w: usize) -> Option<AlignedStep> {
    let f = fail.steps.get(t_star)?;
    let lo = t_star.saturating_sub(w);
    let hi = (t_star + w).min(reference.steps.len().saturating_sub(1));
    let mut order: Vec<usize> = (lo..=hi).collect();
    order.sort_by_key(|k| (k.abs_diff(t_star), *k));
    for k in order {
        let Some(r) = reference.steps.get(k) else { continue };
        if canonical_eq(&r.action, &r.observation, &f.action, &f.observation) {
            continue;
        }
        if let Some(action) = normalize_coords(&r.action, &r.observation, &f.observation) {
            return Some(AlignedStep { ref_index: k, reasoning: r.reasoning.clone(), action });
        }
    }
    None
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Action correction at the critical step.
    Correction,
    /// Reflection and recovery at the step after it.
    Reflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResponse {
    pub reasoning: String,
    pub action: Action,
    pub tokens: TokenizedResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSource {
    pub fail_traj_id: String,
    pub ref_traj_id: String,
    pub t_star: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub context: Context,
    #[serde(rename = "obs")]
    pub observation: Observation,
    pub chosen: PairResponse,
    pub rejected: PairResponse,
    pub paradigm: Paradigm,
    pub source: PairSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub fail_traj_id: String,
    pub ref_traj_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_star: Option<usize>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairOutcome {
    pub pairs: Vec<PreferencePair>,
    pub skipped: Vec<SkipRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub window: usize,
    pub equivalence: Equivalence,
    /// Fall back to the ground-truth action when alignment finds nothing.
    pub synthesize_fallback: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig { window: 2, equivalence: Equivalence::Strict, synthesize_fallback: true }
    }
}

fn response(reasoning: String, action: Action, phase_id: &str) -> PairResponse {
    let tokens = TokenizedResponse::unscored(&template_id_for(&reasoning, phase_id), &action);
    PairResponse { reasoning, action, tokens }
}

fn recorded(step: &Step) -> PairResponse {
    let tokens = step
        .response
        .clone()
        .unwrap_or_else(|| TokenizedResponse::unscored(crate::policy::SCRIPT_TEMPLATE, &step.action));
    PairResponse { reasoning: step.reasoning.clone(), action: step.action.clone(), tokens }
}

/// Builds the correction pair at the critical step and, when a next step
/// exists, the reflection pair after it. Without an aligned reference step
/// and without the ground-truth fallback no pair is emitted; a skip record
/// explains why.
pub fn construct_pairs(
    task: &Task,
    fail: &Trajectory,
    reference: &Trajectory,
    cfg: &PairConfig,
    provider: Option<&dyn ReasoningProvider>,
) -> Result<PairOutcome> {
    let fork = find_deviation(fail, reference, cfg.equivalence)?;
    let t = fork.t_star;
    let source = PairSource { fail_traj_id: fail.id(), ref_traj_id: reference.id(), t_star: t };
    let skip = |reason: &str| PairOutcome {
        pairs: Vec::new(),
        skipped: alloc::vec![SkipRecord {
            fail_traj_id: fail.id(),
            ref_traj_id: reference.id(),
            t_star: Some(t),
            reason: reason.to_string(),
        }],
    };
    let o_t = &fail.steps[t].observation;
    let template = TemplateProvider;
    let writer: &dyn ReasoningProvider = provider.unwrap_or(&template);

    let (ref_reasoning, corrective) = match align_reference(fail, reference, t, cfg.window) {
        Some(a) => (Some(a.reasoning), a.action),
        None => {
            if provider.is_none() || !cfg.synthesize_fallback {
                return Ok(skip("no aligned reference step and synthesis disabled"));
            }
            match task.solution.as_ref().and_then(|s| s.get(t)) {
                Some(gt) if gt.coordinate().is_none() || o_t.target_of(gt).is_some() => (None, gt.clone()),
                _ => return Ok(skip("no aligned reference step and no grounded ground-truth action")),
            }
        }
    };

    let think = |phase: Phase, obs: &Observation, action: &Action, err: Option<&str>| {
        writer.generate(&ReasoningRequest {
            phase,
            instruction: &task.instruction,
            observation: obs,
            previous: None,
            action,
            error_context: err,
            history: &[],
        })
    };
    let z_enhanced = match (provider, ref_reasoning) {
        (None, Some(r)) if !r.is_empty() => r,
        _ => think(Phase::Observation, o_t, &corrective, None)?,
    };
    let mut pairs = alloc::vec![PreferencePair {
        context: build_context(task, fail, t, crate::model::CONTEXT_WINDOW)?,
        observation: o_t.clone(),
        chosen: response(z_enhanced, corrective.clone(), Phase::Observation.template_id()),
        rejected: recorded(&fail.steps[t]),
        paradigm: Paradigm::Correction,
        source: source.clone(),
    }];

    if let Some(next) = fail.steps.get(t + 1) {
        let o_next = &next.observation;
        let recovery = normalize_coords(&corrective, o_t, o_next).unwrap_or_else(|| corrective.clone());
        let err = format!(
            "my previous action, {} {}, did not produce the expected result",
            fork.fail_action.kind().name(),
            describe_target(&fork.fail_action, o_t)
        );
        let z_reflect = think(Phase::Reflect, o_next, &recovery, Some(&err))?;
        pairs.push(PreferencePair {
            context: build_context(task, fail, t + 1, crate::model::CONTEXT_WINDOW)?,
            observation: o_next.clone(),
            chosen: response(z_reflect, recovery, Phase::Reflect.template_id()),
            rejected: recorded(next),
            paradigm: Paradigm::Reflection,
            source,
        });
    }
    Ok(PairOutcome { pairs, skipped: Vec::new() })
}

/// `−log σ(β · margin)`.
pub fn dpo_loss_from_margin(margin: f64, beta: f64) -> f64 {
    softplus(-beta * margin)
}

fn total(policy: &dyn Policy, ctx: &Context, obs: &Observation, r: &PairResponse) -> Result<f64> {
    Ok(crate::math::compensated_sum(policy.logprob(ctx, obs, &r.tokens)?))
}

/// `Δ_w − Δ_l` with `Δ_x = Σ log π_θ(x) − Σ log π_ref(x)` over all tokens.
pub fn dpo_margin(policy: &dyn Policy, reference: &dyn Policy, pair: &PreferencePair) -> Result<f64> {
    let (c, o) = (&pair.context, &pair.observation);
    let dw = total(policy, c, o, &pair.chosen)? - total(reference, c, o, &pair.chosen)?;
    let dl = total(policy, c, o, &pair.rejected)? - total(reference, c, o, &pair.rejected)?;
    Ok(dw - dl)
}

pub fn dpo_loss(policy: &dyn Policy, reference: &dyn Policy, pair: &PreferencePair, beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument("beta must be positive".into()));
    }
    Ok(dpo_loss_from_margin(dpo_margin(policy, reference, pair)?, beta))
}

/// Analytic gradient of [`dpo_loss`] w.r.t. the logits of a tabular policy:
/// `−β σ(−β m) (∇ log π_θ(w) − ∇ log π_θ(l))`.
pub fn dpo_gradient(policy: &TabularPolicy, reference: &dyn Policy, pair: &PreferencePair, beta: f64) -> Result<TabularGrad> {
    let m = dpo_margin(policy, reference, pair)?;
    let scale = -beta * sigmoid(-beta * m);
    let mut grad = TabularGrad::new();
    let (c, o) = (&pair.context, &pair.observation);
    for (resp, sign) in [(&pair.chosen, 1.0), (&pair.rejected, -1.0)] {
        for slot in policy.slots(c, o, &resp.tokens)? {
            grad_axpy(&mut grad, sign * scale, &policy.slot_grad(&slot)?);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::run_episode;
    use crate::model::{Rect, ScreenDims, Widget, WidgetKind};
    use crate::policy::ScriptedPolicy;
    use crate::sandbox::tests::{cell_center, toy_max_script, toy_sheet_task};
    use crate::sandbox::NoiseConfig;
    use crate::coldstart::REFLECTION_HEADER;
    use alloc::vec;

    fn gt() -> Vec<Action> {
        toy_max_script(&["=MAX(A1:C1)", "=MAX(A2:C2)", "=MAX(A3:C3)"])
    }

    fn rollout(task: &Task, actions: Vec<Action>, seed: u64) -> Trajectory {
        let mut t = task.clone();
        t.solution = Some(actions);
        run_episode(&t, &ScriptedPolicy::ground_truth(), 40, &NoiseConfig::off(), seed).unwrap().trajectory
    }

    fn fixture() -> (Task, Trajectory, Trajectory) {
        let mut task = toy_sheet_task();
        task.solution = Some(gt());
        let r = rollout(&task, gt(), 0);
        let mut bad = gt();
        bad[3] = Action::type_text("=SUM(A2:C2)");
        let f = rollout(&task, bad, 1);
        assert_eq!((r.reward, f.reward), (1, 0));
        (task, f, r)
    }

    #[test]
    fn identical_trajectories_have_no_deviation() {
        let (_, _, r) = fixture();
        assert_eq!(find_deviation(&r, &r, Equivalence::Strict).unwrap_err(), Error::NoDeviation);
    }

    #[test]
    fn planted_fork_is_found() {
        let (_, f, r) = fixture();
        let fork = find_deviation(&f, &r, Equivalence::Strict).unwrap();
        assert_eq!(fork.t_star, 3);
        assert_eq!(fork.equivalence_evidence.0, fork.equivalence_evidence.1);
    }

    #[test]
    fn same_widget_clicks_are_not_a_fork() {
        let (task, _, r) = fixture();
        let (x, y) = cell_center(0, 3);
        let mut a = gt();
        a[0] = Action::click(x + 17, y + 4);
        a[5] = Action::type_text("=SUM(A3:C3)");
        let f = rollout(&task, a, 2);
        let fork = find_deviation(&f, &r, Equivalence::Strict).unwrap();
        assert_eq!(fork.t_star, 5);
    }

    fn obs_with(id: &str, x: u32, y: u32) -> Observation {
        Observation {
            step_index: 0,
            widgets: vec![Widget {
                id: id.into(),
                kind: WidgetKind::Toolbar,
                bounds: Rect::new(x, y, 60, 20),
                text: "OK".into(),
                focused: false,
            }],
            screen_dims: ScreenDims { height: 720, width: 1280 },
            meta: Default::default(),
        }
    }

    #[test]
    fn coordinates_follow_the_widget() {
        let src = obs_with("ok", 470, 290);
        let dst = obs_with("ok", 480, 310);
        let a = normalize_coords(&Action::click(500, 300), &src, &dst).unwrap();
        assert_eq!(a.coordinate(), Some(Point::new(480 + 30, 310 + 10)));
        let gone = obs_with("cancel", 480, 310);
        assert!(normalize_coords(&Action::click(500, 300), &src, &gone).is_none());
        let k = Action::press("enter");
        assert_eq!(normalize_coords(&k, &src, &gone), Some(k));
    }

    #[test]
    fn alignment_prefers_the_critical_step() {
        let (_, f, r) = fixture();
        let a = align_reference(&f, &r, 3, 0).unwrap();
        assert_eq!(a.ref_index, 3);
        assert_eq!(a.action, Action::type_text("=MAX(A2:C2)"));
    }

    #[test]
    fn two_pairs_for_interior_fork() {
        let (task, f, r) = fixture();
        let out = construct_pairs(&task, &f, &r, &PairConfig::default(), Some(&TemplateProvider)).unwrap();
        assert_eq!(out.pairs.len(), 2);
        let p2 = &out.pairs[1];
        assert_eq!(out.pairs[0].paradigm, Paradigm::Correction);
        assert_eq!(p2.paradigm, Paradigm::Reflection);
        assert!(p2.chosen.reasoning.starts_with(REFLECTION_HEADER));
        let key = p2.observation.key_widget().unwrap();
        assert!(p2.chosen.reasoning.contains(&key.text));
        assert_eq!(p2.chosen.tokens.tokens[0], "z:reflect");
        assert_eq!(out.pairs[0].chosen.action, Action::type_text("=MAX(A2:C2)"));
        assert_eq!(out.pairs[0].rejected.action, Action::type_text("=SUM(A2:C2)"));
    }

    #[test]
    fn terminal_fork_yields_one_pair() {
        let (task, _, r) = fixture();
        let mut a = gt();
        let n = a.len();
        a[n - 1] = Action::terminate(crate::action::TerminateStatus::Failure);
        let f = rollout(&task, a, 3);
        let out = construct_pairs(&task, &f, &r, &PairConfig::default(), Some(&TemplateProvider)).unwrap();
        assert_eq!(out.pairs.len(), 1);
        assert_eq!(out.pairs[0].source.t_star, n - 1);
    }

    #[test]
    fn no_fabrication_without_synthesizer() {
        let (task, _, r) = fixture();
        let d1 = r.steps[0].observation.target_of(&r.steps[0].action).unwrap().id.clone();
        let mut f = r.clone();
        f.seed = 9;
        let (x, y) = cell_center(0, 0);
        f.steps[0].action = Action::click(x, y);
        f.steps[0].observation.widgets.retain(|w| w.id != d1);
        let cfg = PairConfig { window: 0, ..PairConfig::default() };
        assert!(align_reference(&f, &r, 0, 0).is_none());
        let out = construct_pairs(&task, &f, &r, &cfg, None).unwrap();
        assert!(out.pairs.is_empty());
        assert_eq!(out.skipped.len(), 1);
        // The ground-truth fallback is not grounded in that observation either.
        let out = construct_pairs(&task, &f, &r, &cfg, Some(&TemplateProvider)).unwrap();
        assert!(out.pairs.is_empty());
    }

    #[test]
    fn dpo_identities() {
        assert!((dpo_loss_from_margin(0.0, 0.1) - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((dpo_loss_from_margin(2.0, 1.0) - libm::log1p(libm::exp(-2.0))).abs() < 1e-15);
        assert!((dpo_loss_from_margin(2.0, 1.0) - 0.126928).abs() < 1e-6);
        assert!(dpo_loss_from_margin(60.0, 1.0) < dpo_loss_from_margin(59.0, 1.0));
    }
}
