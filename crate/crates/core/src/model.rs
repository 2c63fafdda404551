//! Tasks, observations, steps, trajectories, and rollout contexts.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::action::{Action, TerminateStatus};
use crate::digest::StateHash;
use crate::error::{Error, Result};
use crate::policy::TokenizedResponse;
use crate::sandbox::{AppState, EnvState, InitConfig};

/// Default number of full-payload entries kept in a [`Context`].
pub const CONTEXT_WINDOW: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub instruction: String,
    #[serde(rename = "evaluator")]
    pub validator: ValidatorSpec,
    #[serde(rename = "config")]
    pub init_config: InitConfig,
    /// Taxonomy path, e.g. `office/spreadsheet/max_per_row`.
    pub domain_tag: String,
    #[serde(default = "default_true")]
    pub feasible: bool,
    /// Template family; tasks sharing a family are semantically equivalent
    /// for reference retrieval.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub family: String,
    /// Verified ground-truth action script.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<Vec<Action>>,
}

fn default_true() -> bool {
    true
}

/// Conjunction of primitive predicates over a terminal environment state.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ValidatorSpec {
    pub checks: Vec<Check>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case")]
pub enum Check {
    /// Displayed value of a spreadsheet cell equals `value` exactly.
    CellEquals { app: String, cell: String, value: String },
    /// Numeric value of a spreadsheet cell is within `tolerance` of `expected`.
    NumericEquals { app: String, cell: String, expected: f64, tolerance: f64 },
    FileExists { app: String, name: String },
    FileAbsent { app: String, name: String },
    /// Text-editor buffer, or the named file's content, contains `needle`.
    TextContains {
        app: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        file: Option<String>,
        needle: String,
    },
    /// The agent ended the episode with this status.
    ReportedStatus { status: TerminateStatus },
    All { checks: Vec<Check> },
}

impl ValidatorSpec {
    pub fn new(checks: Vec<Check>) -> Self {
        ValidatorSpec { checks }
    }

    /// Static well-formedness check; errors name the offending check path.
    pub fn validate(&self) -> Result<()> {
        for (i, c) in self.checks.iter().enumerate() {
            c.validate(&format!("checks[{i}]"))?;
        }
        Ok(())
    }

    /// Deterministic verdict over a terminal state. An empty check list passes.
    pub fn evaluate(&self, state: &EnvState) -> Result<bool> {
        self.validate()?;
        Ok(self.checks.iter().all(|c| c.holds(state)))
    }
}

impl Check {
    fn validate(&self, path: &str) -> Result<()> {
        let bad = |reason: String| Error::MalformedCheck { path: path.to_string(), reason };
        match self {
            Check::CellEquals { cell, .. } => {
                crate::sandbox::parse_cell_ref(cell).ok_or_else(|| bad(format!("bad cell `{cell}`")))?;
            }
            Check::NumericEquals { cell, expected, tolerance, .. } => {
                crate::sandbox::parse_cell_ref(cell).ok_or_else(|| bad(format!("bad cell `{cell}`")))?;
                if !expected.is_finite() {
                    return Err(bad("expected value is not finite".into()));
                }
                if !(tolerance.is_finite() && *tolerance >= 0.0) {
                    return Err(bad("tolerance must be finite and >= 0".into()));
                }
            }
            Check::FileExists { name, .. } | Check::FileAbsent { name, .. } => {
                if name.is_empty() {
                    return Err(bad("empty file name".into()));
                }
            }
            Check::TextContains { .. } | Check::ReportedStatus { .. } => {}
            Check::All { checks } => {
                for (i, c) in checks.iter().enumerate() {
                    c.validate(&format!("{path}.checks[{i}]"))?;
                }
            }
        }
        Ok(())
    }

    fn holds(&self, state: &EnvState) -> bool {
        match self {
            Check::CellEquals { app, cell, value } => match state.apps.get(app) {
                Some(AppState::Spreadsheet(s)) => s.display_at(cell).as_deref() == Some(value.as_str()),
                _ => false,
            },
            Check::NumericEquals { app, cell, expected, tolerance } => match state.apps.get(app) {
                Some(AppState::Spreadsheet(s)) => s
                    .numeric_at(cell)
                    .is_some_and(|v| libm::fabs(v - expected) <= *tolerance),
                _ => false,
            },
            Check::FileExists { app, name } => match state.apps.get(app) {
                Some(AppState::FileManager(f)) => f.files.contains_key(name),
                _ => false,
            },
            Check::FileAbsent { app, name } => match state.apps.get(app) {
                Some(AppState::FileManager(f)) => !f.files.contains_key(name),
                _ => false,
            },
            Check::TextContains { app, file, needle } => match (state.apps.get(app), file) {
                (Some(AppState::TextEditor(e)), None) => e.buffer.contains(needle.as_str()),
                (Some(AppState::FileManager(f)), Some(name)) => {
                    f.files.get(name).is_some_and(|c| c.contains(needle.as_str()))
                }
                _ => false,
            },
            Check::ReportedStatus { status } => state.done == Some(*status),
            Check::All { checks } => checks.iter().all(|c| c.holds(state)),
        }
    }
}

/// Binary verifiable reward: 1 iff every check passes on the terminal state.
pub fn evaluate_reward(validator: &ValidatorSpec, terminal_state: &EnvState) -> Result<u8> {
    Ok(validator.evaluate(terminal_state)? as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.w && y < self.y + self.h
    }

    pub fn center(&self) -> (u32, u32) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidgetKind {
    Toolbar,
    Cell,
    TextArea,
    FileItem,
    Input,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Widget {
    pub id: String,
    pub kind: WidgetKind,
    pub bounds: Rect,
    pub text: String,
    pub focused: bool,
}

impl Widget {
    /// Human-readable label such as `cell G1` or `file report.txt`.
    pub fn label(&self) -> String {
        match self.kind {
            WidgetKind::Cell => format!("cell {}", self.id),
            WidgetKind::FileItem => format!("file {}", self.text),
            WidgetKind::TextArea => "the text area".to_string(),
            WidgetKind::Input => "the rename box".to_string(),
            WidgetKind::Toolbar => format!("the {} toolbar", self.text),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenDims {
    pub height: u32,
    pub width: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObsMeta {
    /// The last pointer action fell outside the screen.
    #[serde(default, skip_serializing_if = "is_false")]
    pub out_of_bounds: bool,
    /// The last pointer action hit no widget.
    #[serde(default, skip_serializing_if = "is_false")]
    pub no_target: bool,
    /// The last input was dropped by the noise layer.
    #[serde(default, skip_serializing_if = "is_false")]
    pub dropped_input: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Symbolic rendering of the focused application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub step_index: u64,
    #[serde(rename = "screen")]
    pub widgets: Vec<Widget>,
    pub screen_dims: ScreenDims,
    #[serde(default)]
    pub meta: ObsMeta,
}

impl Observation {
    /// Topmost widget containing the point; later widgets win ties.
    pub fn hit_test(&self, x: u32, y: u32) -> Option<&Widget> {
        self.widgets.iter().rev().find(|w| w.bounds.contains(x, y))
    }

    pub fn widget(&self, id: &str) -> Option<&Widget> {
        self.widgets.iter().find(|w| w.id == id)
    }

    pub fn focused(&self) -> Option<&Widget> {
        self.widgets.iter().find(|w| w.focused)
    }

    /// The widget a reasoning trace should cite: the focused one, else the
    /// first non-toolbar widget, else the toolbar.
    pub fn key_widget(&self) -> Option<&Widget> {
        self.focused()
            .or_else(|| self.widgets.iter().find(|w| w.kind != WidgetKind::Toolbar))
            .or_else(|| self.widgets.first())
    }

    /// Widget targeted by a pointer action, if any.
    pub fn target_of(&self, action: &Action) -> Option<&Widget> {
        action.coordinate().and_then(|p| self.hit_test(p.x, p.y))
    }

    pub fn check_invariants(&self) -> Result<()> {
        let d = self.screen_dims;
        for w in &self.widgets {
            if w.bounds.x + w.bounds.w > d.width || w.bounds.y + w.bounds.h > d.height {
                return Err(Error::EnvInvariant(format!("widget {} outside screen", w.id)));
            }
        }
        if self.widgets.iter().filter(|w| w.focused).count() > 1 {
            return Err(Error::EnvInvariant("more than one focused widget".into()));
        }
        Ok(())
    }
}

/// One (observation, reasoning, action) entry.
///
/// `loss_mask` is `true` when the step is supervised and `false` when it has
/// been masked out of the loss. `state_hash` and `relaxed_hash` digest the
/// environment state the action was taken from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    #[serde(rename = "obs")]
    pub observation: Observation,
    pub reasoning: String,
    pub action: Action,
    pub loss_mask: bool,
    pub state_hash: StateHash,
    pub relaxed_hash: StateHash,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<TokenizedResponse>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub seed: u64,
    pub reward: u8,
    pub terminal_state_hash: StateHash,
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn id(&self) -> String {
        format!("{}#{}", self.task_id, self.seed)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.steps.iter().map(|s| &s.action)
    }

    /// Hash of the state after step `t`.
    pub fn post_state_hash(&self, t: usize) -> StateHash {
        self.steps.get(t + 1).map(|s| s.state_hash).unwrap_or(self.terminal_state_hash)
    }

    /// Checks the `terminate` placement invariant.
    pub fn check_invariants(&self) -> Result<()> {
        let n = self.steps.len();
        for (i, s) in self.steps.iter().enumerate() {
            if s.action.is_terminate() && i + 1 != n {
                return Err(Error::InvalidArgument(format!(
                    "terminate at step {i} is not the final action"
                )));
            }
        }
        if self.reward > 1 {
            return Err(Error::InvalidArgument("reward must be 0 or 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub step_index: usize,
    #[serde(rename = "obs")]
    pub observation: Observation,
    pub reasoning: String,
    pub action: Action,
}

/// Conditioning context for step `step_index`: the last few steps in full,
/// earlier steps as one-line text summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub task_id: String,
    pub domain: String,
    pub instruction: String,
    pub step_index: usize,
    pub recent_steps: Vec<ContextEntry>,
    pub compressed_history: Vec<String>,
}

/// Builds the context for step `t` of a trajectory.
pub fn build_context(task: &Task, traj: &Trajectory, t: usize, window: usize) -> Result<Context> {
    build_context_from_steps(task, &traj.steps, t, window)
}

pub fn build_context_from_steps(task: &Task, steps: &[Step], t: usize, window: usize) -> Result<Context> {
    if t > steps.len() {
        return Err(Error::OutOfRange { index: t, len: steps.len() });
    }
    let split = t.saturating_sub(window);
    let compressed_history = steps[..split]
        .iter()
        .enumerate()
        .map(|(k, s)| summarize_step(k, &s.action, &s.observation))
        .collect();
    let recent_steps = steps[split..t]
        .iter()
        .enumerate()
        .map(|(off, s)| ContextEntry {
            step_index: split + off,
            observation: s.observation.clone(),
            reasoning: s.reasoning.clone(),
            action: s.action.clone(),
        })
        .collect();
    Ok(Context {
        task_id: task.id.clone(),
        domain: task.domain_tag.clone(),
        instruction: task.instruction.clone(),
        step_index: t,
        recent_steps,
        compressed_history,
    })
}

/// One-line history entry: `step k: <verb> <target summary>`.
pub fn summarize_step(k: usize, action: &Action, obs: &Observation) -> String {
    format!("step {k}: {} {}", action.kind().name(), describe_target(action, obs))
}

/// Coordinate-free description of what an action operates on.
pub fn describe_target(action: &Action, obs: &Observation) -> String {
    match action {
        Action::Key { keys } | Action::KeyDown { keys } | Action::KeyUp { keys } => keys.join("+"),
        Action::Type { text } => format!("\"{}\"", one_line(text, 40)),
        Action::Scroll { pixels } => {
            format!("{} {}px", if *pixels >= 0 { "down" } else { "up" }, pixels.unsigned_abs())
        }
        Action::HScroll { pixels } => {
            format!("{} {}px", if *pixels >= 0 { "right" } else { "left" }, pixels.unsigned_abs())
        }
        Action::Wait { time } => format!("{time}s"),
        Action::Terminate { status } => status.as_str().to_string(),
        _ => match obs.target_of(action) {
            Some(w) => w.label(),
            None => "empty space".to_string(),
        },
    }
}

fn one_line(text: &str, max_chars: usize) -> String {
    let mut out = String::new();
    for (i, c) in text.chars().enumerate() {
        if i == max_chars {
            out.push_str("...");
            break;
        }
        match c {
            '\n' => out.push_str("\\n"),
            '\r' | '\t' => out.push(' '),
            c => out.push(c),
        }
    }
    out
}
