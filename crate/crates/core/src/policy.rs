//! Policies over (reasoning, action) with per-token log-probabilities.
//!
//! Tokens are symbolic: one `z:<template id>` token for the reasoning trace
//! followed by one `a:<canonical action text>` token for the action.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{parse_action, serialize_action, Action, TerminateStatus};
use crate::digest::{derive_seed, rng_from, StateHash};
use crate::error::{Error, Result};
use crate::math::log_sum_exp;
use crate::model::{describe_target, Context, Observation, Task};

pub const REASONING_PREFIX: &str = "z:";
pub const ACTION_PREFIX: &str = "a:";
/// Reasoning template id used by scripted policies.
pub const SCRIPT_TEMPLATE: &str = "script";

/// Token sequence for one step: reasoning tokens first, then action tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizedResponse {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
}

impl TokenizedResponse {
    /// Tokens for `(reasoning template, action)` with log-probs left at 0.
    pub fn unscored(template_id: &str, action: &Action) -> Self {
        let tokens = response_tokens(template_id, action);
        let logprobs = vec![0.0; tokens.len()];
        TokenizedResponse { tokens, logprobs }
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.tokens.len() != self.logprobs.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} log-probs",
                self.tokens.len(),
                self.logprobs.len()
            )));
        }
        if self.logprobs.iter().any(|l| l.is_nan() || *l > 0.0) {
            return Err(Error::Policy("log-probs must be <= 0".into()));
        }
        let first_action = self.tokens.iter().position(|t| t.starts_with(ACTION_PREFIX));
        if let Some(i) = first_action {
            if self.tokens[i..].iter().any(|t| t.starts_with(REASONING_PREFIX)) {
                return Err(Error::Policy("reasoning token after action token".into()));
            }
        }
        if self.tokens.iter().any(|t| !t.starts_with(REASONING_PREFIX) && !t.starts_with(ACTION_PREFIX)) {
            return Err(Error::OutOfVocabulary("token without z:/a: prefix".into()));
        }
        Ok(())
    }

    pub fn total_logprob(&self) -> f64 {
        crate::math::compensated_sum(self.logprobs.iter().copied())
    }
}

pub fn response_tokens(template_id: &str, action: &Action) -> Vec<String> {
    vec![
        format!("{REASONING_PREFIX}{template_id}"),
        format!("{ACTION_PREFIX}{}", serialize_action(action)),
    ]
}

/// Template id of a reasoning trace: reflections are `reflect`, anything else
/// uses the supplied phase id.
pub fn template_id_for(reasoning: &str, phase_id: &str) -> String {
    if reasoning.starts_with(crate::coldstart::REFLECTION_HEADER) {
        "reflect".into()
    } else {
        phase_id.into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProposedAction {
    Parsed(Action),
    /// Text that failed to parse; the episode loop records it as a no-op.
    Raw(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub reasoning: String,
    pub action: ProposedAction,
    pub response: TokenizedResponse,
}

/// π(z, a | h, o). Implementations are stateless so one handle can be shared
/// read-only by many sessions; per-session state is derived from `seed`.
pub trait Policy: Send + Sync {
    fn act(&self, task: &Task, seed: u64, ctx: &Context, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<ActOutput>;

    /// Per-token log-probabilities of `response` under this policy.
    fn logprob(&self, ctx: &Context, obs: &Observation, response: &TokenizedResponse) -> Result<Vec<f64>>;

    /// False for policies whose log-probs are placeholders.
    fn has_logprobs(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyHandle {
    Scripted(ScriptedPolicy),
    Tabular(TabularPolicy),
    StochasticScripted(StochasticScripted),
}

impl PolicyHandle {
    pub fn validate(&self) -> Result<()> {
        match self {
            PolicyHandle::Scripted(_) => Ok(()),
            PolicyHandle::Tabular(t) => t.validate(),
            PolicyHandle::StochasticScripted(s) => s.validate(),
        }
    }

    pub fn as_tabular(&self) -> Option<&TabularPolicy> {
        match self {
            PolicyHandle::Tabular(t) => Some(t),
            _ => None,
        }
    }
}

impl Policy for PolicyHandle {
    fn act(&self, task: &Task, seed: u64, ctx: &Context, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<ActOutput> {
        match self {
            PolicyHandle::Scripted(p) => p.act(task, seed, ctx, obs, rng),
            PolicyHandle::Tabular(p) => p.act(task, seed, ctx, obs, rng),
            PolicyHandle::StochasticScripted(p) => p.act(task, seed, ctx, obs, rng),
        }
    }

    fn logprob(&self, ctx: &Context, obs: &Observation, response: &TokenizedResponse) -> Result<Vec<f64>> {
        match self {
            PolicyHandle::Scripted(p) => p.logprob(ctx, obs, response),
            PolicyHandle::Tabular(p) => p.logprob(ctx, obs, response),
            PolicyHandle::StochasticScripted(p) => p.logprob(ctx, obs, response),
        }
    }

    fn has_logprobs(&self) -> bool {
        matches!(self, PolicyHandle::Tabular(_))
    }
}

// ---------------------------------------------------------------------------
// Scripted

/// Replays a fixed action script per task.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedPolicy {
    /// Scripts keyed by task id.
    #[serde(default)]
    pub scripts: BTreeMap<String, Vec<Action>>,
    /// Fall back to the task's ground-truth solution when no script is listed.
    #[serde(default)]
    pub use_solutions: bool,
}

impl ScriptedPolicy {
    /// Policy that replays every task's ground-truth solution.
    pub fn ground_truth() -> Self {
        ScriptedPolicy { scripts: BTreeMap::new(), use_solutions: true }
    }

    pub fn script_for<'a>(&'a self, task: &'a Task) -> Result<&'a [Action]> {
        if let Some(s) = self.scripts.get(&task.id) {
            return Ok(s);
        }
        match (&task.solution, self.use_solutions) {
            (Some(s), true) => Ok(s),
            _ => Err(Error::Policy(format!("no script for task `{}`", task.id))),
        }
    }
}

fn scripted_output(script: &[Action], t: usize, obs: &Observation) -> ActOutput {
    let (reasoning, action) = match script.get(t) {
        Some(a) => (
            format!("Next I will {} {}.", a.kind().name(), describe_target(a, obs)),
            a.clone(),
        ),
        None => (
            "The script is exhausted, so I stop and report failure.".to_string(),
            Action::terminate(TerminateStatus::Failure),
        ),
    };
    let response = TokenizedResponse::unscored(SCRIPT_TEMPLATE, &action);
    ActOutput { reasoning, action: ProposedAction::Parsed(action), response }
}

fn placeholder_logprobs(response: &TokenizedResponse) -> Result<Vec<f64>> {
    for t in &response.tokens {
        if !t.starts_with(REASONING_PREFIX) && !t.starts_with(ACTION_PREFIX) {
            return Err(Error::OutOfVocabulary(t.clone()));
        }
    }
    Ok(vec![0.0; response.tokens.len()])
}

impl Policy for ScriptedPolicy {
    fn act(&self, task: &Task, _seed: u64, ctx: &Context, obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<ActOutput> {
        Ok(scripted_output(self.script_for(task)?, ctx.step_index, obs))
    }

    fn logprob(&self, _ctx: &Context, _obs: &Observation, response: &TokenizedResponse) -> Result<Vec<f64>> {
        placeholder_logprobs(response)
    }

    fn has_logprobs(&self) -> bool {
        false
    }
}

/// Scripted policy that succeeds with probability `p_success` per session.
///
/// The success branch replays the script. The failure branch replays the same
/// script with one seeded step corrupted, so the two branches share a prefix
/// and differ at a single fork.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticScripted {
    pub base: ScriptedPolicy,
    pub p_success: f64,
}

impl StochasticScripted {
    pub fn new(base: ScriptedPolicy, p_success: f64) -> Self {
        StochasticScripted { base, p_success }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_success) {
            return Err(Error::Policy("p_success must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn succeeds(&self, seed: u64) -> bool {
        rng_from(derive_seed(seed, "stochastic-branch")).gen::<f64>() < self.p_success
    }

    /// The script this session will follow.
    pub fn session_script(&self, task: &Task, seed: u64) -> Result<Vec<Action>> {
        let script = self.base.script_for(task)?;
        if self.succeeds(seed) {
            return Ok(script.to_vec());
        }
        Ok(corrupt_script(script, seed))
    }
}

/// Corrupts one step of a script: a seeded `type` step gets mangled text;
/// without typing steps a final `terminate` flips status, otherwise the last
/// non-terminate step is dropped.
pub fn corrupt_script(script: &[Action], seed: u64) -> Vec<Action> {
    let mut out = script.to_vec();
    let typed: Vec<usize> = (0..out.len()).filter(|&i| matches!(out[i], Action::Type { .. })).collect();
    if !typed.is_empty() {
        let mut rng = rng_from(derive_seed(seed, "corrupt"));
        let i = typed[rng.gen_range(0..typed.len())];
        if let Action::Type { text } = &mut out[i] {
            text.pop();
            text.push('?');
        }
        return out;
    }
    let non_term = out.iter().rposition(|a| !a.is_terminate());
    match (out.last(), non_term) {
        (Some(Action::Terminate { status }), None) => {
            let flipped = match status {
                TerminateStatus::Success => TerminateStatus::Failure,
                TerminateStatus::Failure => TerminateStatus::Success,
            };
            let n = out.len();
            out[n - 1] = Action::terminate(flipped);
        }
        (_, Some(i)) => {
            out.remove(i);
        }
        _ => {}
    }
    out
}

impl Policy for StochasticScripted {
    fn act(&self, task: &Task, seed: u64, ctx: &Context, obs: &Observation, _rng: &mut ChaCha8Rng) -> Result<ActOutput> {
        let script = self.session_script(task, seed)?;
        Ok(scripted_output(&script, ctx.step_index, obs))
    }

    fn logprob(&self, _ctx: &Context, _obs: &Observation, response: &TokenizedResponse) -> Result<Vec<f64>> {
        placeholder_logprobs(response)
    }

    fn has_logprobs(&self) -> bool {
        false
    }
}

// ---------------------------------------------------------------------------
// Tabular

/// How contexts map to table rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Bucketing {
    /// `domain|<8 hex digits of the observation digest>|<step mod modulus>`.
    Observation { modulus: u64 },
    /// `task_id|step`. Used for per-task tables such as a tabular wave seeded
    /// from ground-truth scripts.
    TaskStep,
}

impl Default for Bucketing {
    fn default() -> Self {
        Bucketing::Observation { modulus: 16 }
    }
}

impl Bucketing {
    pub fn bucket(&self, ctx: &Context, obs: &Observation) -> String {
        match self {
            Bucketing::Observation { modulus } => {
                let digest = StateHash::of_json(&obs.widgets).to_hex();
                format!("{}|{}|{}", ctx.domain, &digest[..8], ctx.step_index as u64 % (*modulus).max(1))
            }
            Bucketing::TaskStep => format!("{}|{}", ctx.task_id, ctx.step_index),
        }
    }
}

/// Logits over a small vocabulary of token payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogitRow {
    pub vocab: Vec<String>,
    pub logits: Vec<f64>,
}

impl LogitRow {
    pub fn new(vocab: Vec<String>, logits: Vec<f64>) -> Self {
        LogitRow { vocab, logits }
    }

    pub fn index_of(&self, payload: &str) -> Option<usize> {
        self.vocab.iter().position(|v| v == payload)
    }
}

/// A parameter coordinate: row key and index within the row.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenSlot {
    pub row: String,
    pub index: usize,
}

/// Gradient with the same shape as a table's rows.
pub type TabularGrad = BTreeMap<String, Vec<f64>>;

/// Adds `scale * src` into `dst`, allocating rows as needed.
pub fn grad_axpy(dst: &mut TabularGrad, scale: f64, src: &TabularGrad) {
    for (k, v) in src {
        let d = dst.entry(k.clone()).or_insert_with(|| vec![0.0; v.len()]);
        for (a, b) in d.iter_mut().zip(v) {
            *a += scale * b;
        }
    }
}

/// Softmax-over-logits policy. Rows are keyed `<bucket>#z` and `<bucket>#a`
/// with `*#z` / `*#a` as fallbacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TabularPolicy {
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub bucketing: Bucketing,
    pub rows: BTreeMap<String, LogitRow>,
}

fn one() -> f64 {
    1.0
}

pub const FALLBACK_BUCKET: &str = "*";

impl TabularPolicy {
    pub fn new(temperature: f64, bucketing: Bucketing) -> Self {
        TabularPolicy { temperature, bucketing, rows: BTreeMap::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Policy("temperature must be finite and >= 0".into()));
        }
        for (k, r) in &self.rows {
            if !(k.ends_with("#z") || k.ends_with("#a")) {
                return Err(Error::Policy(format!("row key `{k}` must end in #z or #a")));
            }
            if r.vocab.is_empty() || r.vocab.len() != r.logits.len() {
                return Err(Error::Policy(format!("row `{k}`: vocab/logit shape mismatch")));
            }
            if r.logits.iter().any(|l| !l.is_finite()) {
                return Err(Error::Policy(format!("row `{k}`: non-finite logit")));
            }
            if k.ends_with("#a") {
                for v in &r.vocab {
                    parse_action(v).map_err(|e| Error::Policy(format!("row `{k}`: vocab entry `{v}`: {e}")))?;
                }
            }
        }
        Ok(())
    }

    /// Row key used for a token class (`'z'` or `'a'`) in this context.
    pub fn row_key(&self, ctx: &Context, obs: &Observation, class: char) -> Result<String> {
        let specific = format!("{}#{class}", self.bucketing.bucket(ctx, obs));
        if self.rows.contains_key(&specific) {
            return Ok(specific);
        }
        let fallback = format!("{FALLBACK_BUCKET}#{class}");
        if self.rows.contains_key(&fallback) {
            return Ok(fallback);
        }
        Err(Error::Policy(format!("no `{class}` row for bucket `{specific}`")))
    }

    /// Log-probabilities of every vocabulary entry of a row.
    pub fn row_logprobs(&self, row: &LogitRow) -> Vec<f64> {
        if self.temperature == 0.0 {
            let best = argmax(&row.logits);
            return (0..row.logits.len()).map(|i| if i == best { 0.0 } else { f64::NEG_INFINITY }).collect();
        }
        let scaled: Vec<f64> = row.logits.iter().map(|l| l / self.temperature).collect();
        let lse = log_sum_exp(&scaled);
        scaled.iter().map(|s| s - lse).collect()
    }

    pub fn slot_logprob(&self, slot: &TokenSlot) -> Result<f64> {
        let row = self
            .rows
            .get(&slot.row)
            .ok_or_else(|| Error::Policy(format!("unknown row `{}`", slot.row)))?;
        self.row_logprobs(row)
            .get(slot.index)
            .copied()
            .ok_or(Error::OutOfRange { index: slot.index, len: row.vocab.len() })
    }

    /// Gradient of `log p(slot)` w.r.t. the slot row's logits: `(δ − p) / T`.
    pub fn slot_grad(&self, slot: &TokenSlot) -> Result<TabularGrad> {
        if self.temperature == 0.0 {
            return Err(Error::Policy("log-probs are not differentiable at temperature 0".into()));
        }
        let row = self
            .rows
            .get(&slot.row)
            .ok_or_else(|| Error::Policy(format!("unknown row `{}`", slot.row)))?;
        let lp = self.row_logprobs(row);
        let g = lp
            .iter()
            .enumerate()
            .map(|(i, l)| ((i == slot.index) as u8 as f64 - libm::exp(*l)) / self.temperature)
            .collect();
        let mut out = TabularGrad::new();
        out.insert(slot.row.clone(), g);
        Ok(out)
    }

    /// Resolves each response token to its table slot.
    pub fn slots(&self, ctx: &Context, obs: &Observation, response: &TokenizedResponse) -> Result<Vec<TokenSlot>> {
        response
            .tokens
            .iter()
            .map(|tok| {
                let (class, payload) = if let Some(p) = tok.strip_prefix(REASONING_PREFIX) {
                    ('z', p)
                } else if let Some(p) = tok.strip_prefix(ACTION_PREFIX) {
                    ('a', p)
                } else {
                    return Err(Error::OutOfVocabulary(tok.clone()));
                };
                let row = self.row_key(ctx, obs, class)?;
                let index = self.rows[&row].index_of(payload).ok_or_else(|| Error::OutOfVocabulary(tok.clone()))?;
                Ok(TokenSlot { row, index })
            })
            .collect()
    }

    fn sample(&self, row: &LogitRow, rng: &mut ChaCha8Rng) -> (usize, f64) {
        let lp = self.row_logprobs(row);
        if self.temperature == 0.0 {
            let i = argmax(&row.logits);
            return (i, lp[i]);
        }
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, l) in lp.iter().enumerate() {
            acc += libm::exp(*l);
            if u < acc {
                return (i, *l);
            }
        }
        let i = lp.len() - 1;
        (i, lp[i])
    }

    /// Adds `delta` to one logit. Used by finite-difference checks.
    pub fn nudged(&self, row: &str, index: usize, delta: f64) -> Self {
        let mut p = self.clone();
        if let Some(r) = p.rows.get_mut(row) {
            r.logits[index] += delta;
        }
        p
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

impl Policy for TabularPolicy {
    fn act(&self, _task: &Task, _seed: u64, ctx: &Context, obs: &Observation, rng: &mut ChaCha8Rng) -> Result<ActOutput> {
        let zrow = &self.rows[&self.row_key(ctx, obs, 'z')?];
        let arow = &self.rows[&self.row_key(ctx, obs, 'a')?];
        let (zi, zlp) = self.sample(zrow, rng);
        let (ai, alp) = self.sample(arow, rng);
        let template = &zrow.vocab[zi];
        let text = &arow.vocab[ai];
        let action = match parse_action(text) {
            Ok(a) => ProposedAction::Parsed(a),
            Err(_) => ProposedAction::Raw(text.clone()),
        };
        let reasoning = match &action {
            ProposedAction::Parsed(a) => format!(
                "[{template}] I will {} {}.",
                a.kind().name(),
                describe_target(a, obs)
            ),
            ProposedAction::Raw(_) => format!("[{template}] I will act."),
        };
        let response = TokenizedResponse {
            tokens: vec![format!("{REASONING_PREFIX}{template}"), format!("{ACTION_PREFIX}{text}")],
            logprobs: vec![zlp, alp],
        };
        Ok(ActOutput { reasoning, action, response })
    }

    fn logprob(&self, ctx: &Context, obs: &Observation, response: &TokenizedResponse) -> Result<Vec<f64>> {
        self.slots(ctx, obs, response)?.iter().map(|s| self.slot_logprob(s)).collect()
    }
}
