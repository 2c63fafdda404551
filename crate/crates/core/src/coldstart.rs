//! Hindsight reasoning generation and single-turn sample decomposition.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::action::{Action, TerminateStatus};
use crate::error::{Error, Result};
use crate::model::{build_context, describe_target, Context, Observation, Task, Trajectory, CONTEXT_WINDOW};
use crate::policy::TokenizedResponse;

pub const REFLECTION_HEADER: &str = "Reflection: ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Goal,
    Reflect,
    Observation,
    Termination,
}

impl Phase {
    /// Reasoning template id used as the `z:` token.
    pub fn template_id(self) -> &'static str {
        match self {
            Phase::Goal => "goal",
            Phase::Reflect => "reflect",
            Phase::Observation => "observe",
            Phase::Termination => "terminate",
        }
    }
}

/// Phase of step `t` in a trajectory whose last index is `last`.
pub fn phase_for(t: usize, last: usize, has_error_context: bool) -> Phase {
    if t == 0 {
        if has_error_context {
            Phase::Reflect
        } else {
            Phase::Goal
        }
    } else if t == last {
        Phase::Termination
    } else {
        Phase::Observation
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReasoningRequest<'a> {
    pub phase: Phase,
    pub instruction: &'a str,
    pub observation: &'a Observation,
    /// Observation before the previous action, if any.
    pub previous: Option<&'a Observation>,
    pub action: &'a Action,
    pub error_context: Option<&'a str>,
    /// `(reasoning, action)` pairs already generated for earlier steps.
    pub history: &'a [(String, Action)],
}

pub trait ReasoningProvider: Send + Sync {
    fn generate(&self, req: &ReasoningRequest<'_>) -> Result<String>;
}

/// Deterministic template provider.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateProvider;

fn screen_summary(obs: &Observation) -> String {
    match obs.key_widget() {
        Some(w) if !w.text.is_empty() => format!("{} showing \"{}\"", w.label(), w.text),
        Some(w) => format!("{} (empty)", w.label()),
        None => "an empty screen".to_string(),
    }
}

fn change_summary(prev: Option<&Observation>, now: &Observation) -> String {
    let Some(prev) = prev else {
        return "the screen is as it was".to_string();
    };
    for w in &now.widgets {
        match prev.widget(&w.id) {
            Some(old) if old.text != w.text => return format!("{} now shows \"{}\"", w.label(), w.text),
            None => return format!("{} appeared", w.label()),
            _ => {}
        }
    }
    match (prev.focused().map(|w| &w.id), now.focused()) {
        (old, Some(w)) if old != Some(&w.id) => format!("focus moved to {}", w.label()),
        _ => "nothing visible changed".to_string(),
    }
}

impl ReasoningProvider for TemplateProvider {
    fn generate(&self, req: &ReasoningRequest<'_>) -> Result<String> {
        let verb = req.action.kind().name().replace('_', " ");
        let target = describe_target(req.action, req.observation);
        let text = match req.phase {
            Phase::Goal => format!(
                "The screen shows {}. The goal is: {} I need to plan the steps, and I start by using {verb} on {target}.",
                screen_summary(req.observation),
                req.instruction.trim()
            ),
            Phase::Reflect => format!(
                "{REFLECTION_HEADER}I realize my previous attempt went wrong because {}. The screen now shows {}. Now I will try a different approach and use {verb} on {target}.",
                req.error_context.unwrap_or("the result did not match the goal").trim_end_matches('.'),
                screen_summary(req.observation)
            ),
            Phase::Observation => format!(
                "What changed: {}. Why this action is needed: {verb} on {target} moves the task forward toward: {}",
                change_summary(req.previous, req.observation),
                req.instruction.trim()
            ),
            Phase::Termination => {
                let evidence = screen_summary(req.observation);
                match req.action {
                    Action::Terminate { status: TerminateStatus::Success } => format!(
                        "Verification: comparing the final screen with the goal, {evidence}, which matches what was asked. The task is complete, so I terminate with success."
                    ),
                    Action::Terminate { status: TerminateStatus::Failure } => format!(
                        "Verification: the final screen shows {evidence}, and the goal cannot be achieved here. I terminate with failure."
                    ),
                    _ => format!(
                        "Verification: the screen shows {evidence}. One more step is needed: {verb} on {target}."
                    ),
                }
            }
        };
        Ok(scrub_coordinates(&text))
    }
}

/// Replaces any `(x,y)` or `(x, y)` integer pair with `(..)`.
pub fn scrub_coordinates(text: &str) -> String {
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'(' {
            if let Some(len) = coordinate_len(&bytes[i..]) {
                out.push_str("(..)");
                i += len;
                continue;
            }
        }
        let ch = text[i..].chars().next().expect("in bounds");
        out.push(ch);
        i += ch.len_utf8();
    }
    out
}

fn coordinate_len(b: &[u8]) -> Option<usize> {
    let mut i = 1;
    let digits = |i: &mut usize| {
        let start = *i;
        while *i < b.len() && b[*i].is_ascii_digit() {
            *i += 1;
        }
        *i > start
    };
    let spaces = |i: &mut usize| {
        while *i < b.len() && b[*i] == b' ' {
            *i += 1;
        }
    };
    spaces(&mut i);
    if !digits(&mut i) {
        return None;
    }
    spaces(&mut i);
    if b.get(i) != Some(&b',') {
        return None;
    }
    i += 1;
    spaces(&mut i);
    if !digits(&mut i) {
        return None;
    }
    spaces(&mut i);
    (b.get(i) == Some(&b')')).then_some(i + 1)
}

/// Fills every step's reasoning following the phase dispatch: goal (or
/// reflection with an error context) at the first step, termination check at
/// the last, observation consistency in between. On provider failure the
/// input is left untouched and the error returned.
pub fn hindsight_annotate(
    task: &Task,
    traj: &Trajectory,
    error_context: Option<&str>,
    provider: &dyn ReasoningProvider,
) -> Result<Trajectory> {
    let mut out = traj.clone();
    let Some(last) = traj.steps.len().checked_sub(1) else {
        return Ok(out);
    };
    let mut history: Vec<(String, Action)> = Vec::with_capacity(traj.steps.len());
    for (t, step) in traj.steps.iter().enumerate() {
        let phase = phase_for(t, last, error_context.is_some());
        let req = ReasoningRequest {
            phase,
            instruction: &task.instruction,
            observation: &step.observation,
            previous: t.checked_sub(1).map(|p| &traj.steps[p].observation),
            action: &step.action,
            error_context: if phase == Phase::Reflect { error_context } else { None },
            history: &history,
        };
        let z = provider.generate(&req)?;
        if z.is_empty() {
            return Err(Error::Provider(format!("empty trace for step {t}")));
        }
        history.push((z.clone(), step.action.clone()));
        out.steps[t].reasoning = z;
        out.steps[t].response = Some(TokenizedResponse::unscored(phase.template_id(), &step.action));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Loss covers only the target step's reasoning and action.
    #[default]
    CurrentStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub trajectory_id: String,
    pub step_index: usize,
    pub context: Context,
    #[serde(rename = "obs")]
    pub observation: Observation,
    pub target_reasoning: String,
    pub target_action: Action,
    #[serde(default)]
    pub loss_scope: LossScope,
}

/// One single-turn sample per supervised step.
pub fn decompose_to_samples(task: &Task, traj: &Trajectory) -> Result<Vec<TrainingSample>> {
    let mut out = Vec::new();
    for (t, step) in traj.steps.iter().enumerate() {
        if !step.loss_mask {
            continue;
        }
        if step.reasoning.trim().is_empty() {
            return Err(Error::Unannotated { index: t });
        }
        out.push(TrainingSample {
            trajectory_id: traj.id(),
            step_index: t,
            context: build_context(task, traj, t, CONTEXT_WINDOW)?,
            observation: step.observation.clone(),
            target_reasoning: step.reasoning.clone(),
            target_action: step.action.clone(),
            loss_scope: LossScope::CurrentStep,
        });
    }
    Ok(out)
}
