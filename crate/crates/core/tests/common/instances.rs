//! Seeded random instances for the property tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use evoloop_core::action::{serialize_action, Action, ActionKind, TerminateStatus};
use evoloop_core::digest::SessionRng;
use evoloop_core::episode::run_episode;
use evoloop_core::model::{Context, Observation, ScreenDims, Task, Trajectory, ValidatorSpec};
use evoloop_core::policy::{Bucketing, LogitRow, ScriptedPolicy, TabularGrad, TabularPolicy, TokenSlot, TokenizedResponse};
use evoloop_core::preference::{dpo_loss, PairResponse, PairSource, Paradigm, PreferencePair};
use evoloop_core::rft::BudgetSpectrum;
use evoloop_core::sandbox::{AppInit, InitConfig, NoiseConfig, COL_WIDTH, ROW_HEIGHT, TOOLBAR_HEIGHT};
use evoloop_core::stepo::{stepo_objective, ClipConfig, GroupMember, GroupRollout, StepTokens, TokenLogProbs};
use evoloop_core::synthesis::{synthesize_task, Family, Scenario, TemplateArchitect};
use rand::Rng;

pub const FD_H: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|)`, or the absolute error when both are tiny.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-6 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

pub fn binary_rewards(rng: &mut SessionRng, g: usize) -> Vec<f64> {
    loop {
        let r: Vec<f64> = (0..g).map(|_| rng.gen_range(0..=1) as f64).collect();
        if r.iter().any(|x| *x != r[0]) {
            return r;
        }
    }
}

fn random_rows(rng: &mut SessionRng, n: usize) -> BTreeMap<String, LogitRow> {
    (0..n)
        .map(|i| {
            let width = rng.gen_range(2..=5);
            let vocab = (0..width).map(|v| format!("v{v}")).collect();
            let logits = (0..width).map(|_| rng.gen_range(-2.0..2.0)).collect();
            (format!("r{i}#z"), LogitRow::new(vocab, logits))
        })
        .collect()
}

/// A tabular policy and a group whose `new` log-probs come from it. Every
/// importance ratio stays at least `margin` away from the clip kinks.
pub fn stepo_instance(rng: &mut SessionRng, cfg: &ClipConfig, margin: f64) -> (TabularPolicy, GroupRollout) {
    let mut policy = TabularPolicy::new(rng.gen_range(0.5..2.0), Bucketing::TaskStep);
    let n = rng.gen_range(1..=4);
    policy.rows = random_rows(rng, n);
    let keys: Vec<String> = policy.rows.keys().cloned().collect();
    let g = rng.gen_range(2..=6);
    let rewards = binary_rewards(rng, g);
    let wide = rng.gen_bool(0.5);
    let trajectories = rewards
        .into_iter()
        .map(|reward| GroupMember {
            trajectory_id: String::new(),
            reward,
            steps: (0..rng.gen_range(1..=5))
                .map(|_| StepTokens {
                    tokens: (0..rng.gen_range(1..=4))
                        .map(|_| {
                            let row = keys[rng.gen_range(0..keys.len())].clone();
                            let index = rng.gen_range(0..policy.rows[&row].vocab.len());
                            let slot = TokenSlot { row, index };
                            let new = policy.slot_logprob(&slot).unwrap();
                            let old = loop {
                                let d: f64 = if wide { rng.gen_range(-0.5..0.5) } else { rng.gen_range(-0.15..0.15) };
                                let r = (-d).exp();
                                if (r - (1.0 - cfg.eps_low)).abs() > margin && (r - (1.0 + cfg.eps_high)).abs() > margin {
                                    break new + d;
                                }
                            };
                            TokenLogProbs { old, reference: new + rng.gen_range(-0.3..0.3), new, slot: Some(slot) }
                        })
                        .collect(),
                })
                .collect(),
        })
        .collect();
    (policy, GroupRollout { task_id: "t".into(), trajectories })
}

/// Central-difference derivative of `f` along every logit of `policy`.
pub fn finite_differences(policy: &TabularPolicy, f: impl Fn(&TabularPolicy) -> f64) -> TabularGrad {
    policy
        .rows
        .iter()
        .map(|(k, row)| {
            let g = (0..row.logits.len())
                .map(|i| (f(&policy.nudged(k, i, FD_H)) - f(&policy.nudged(k, i, -FD_H))) / (2.0 * FD_H))
                .collect();
            (k.clone(), g)
        })
        .collect()
}

/// Largest relative error between an analytic and a numeric gradient.
pub fn max_grad_err(analytic: &TabularGrad, numeric: &TabularGrad) -> f64 {
    let mut worst: f64 = 0.0;
    for (k, fd) in numeric {
        for (i, n) in fd.iter().enumerate() {
            let a = analytic.get(k).map_or(0.0, |v| v[i]);
            worst = worst.max(rel_err(a, *n));
        }
    }
    worst
}

pub fn stepo_fd(policy: &TabularPolicy, group: &GroupRollout, cfg: &ClipConfig) -> TabularGrad {
    finite_differences(policy, |p| stepo_objective(&group.rescored(p).unwrap(), cfg).unwrap().0)
}

fn blank_obs() -> Observation {
    Observation { step_index: 0, widgets: Vec::new(), screen_dims: ScreenDims { height: 720, width: 1280 }, meta: Default::default() }
}

fn blank_context(step: usize) -> Context {
    Context {
        task_id: "dpo".into(),
        domain: "office/test".into(),
        instruction: "Do the thing.".into(),
        step_index: step,
        recent_steps: Vec::new(),
        compressed_history: Vec::new(),
    }
}

const Z_VOCAB: &[&str] = &["script", "goal", "observe", "reflect", "terminate"];

fn a_vocab() -> Vec<String> {
    [
        Action::click(10, 60),
        Action::press("enter"),
        Action::type_text("42"),
        Action::Scroll { pixels: -20 },
        Action::terminate(TerminateStatus::Success),
    ]
    .iter()
    .map(serialize_action)
    .collect()
}

fn tabular_pair_policy(rng: &mut SessionRng, specific: Option<&str>) -> TabularPolicy {
    let mut p = TabularPolicy::new(rng.gen_range(0.5..2.0), Bucketing::TaskStep);
    let mut add = |p: &mut TabularPolicy, bucket: &str| {
        let z: Vec<String> = Z_VOCAB.iter().map(|s| s.to_string()).collect();
        let a = a_vocab();
        let zl = (0..z.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let al = (0..a.len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        p.rows.insert(format!("{bucket}#z"), LogitRow::new(z, zl));
        p.rows.insert(format!("{bucket}#a"), LogitRow::new(a, al));
    };
    add(&mut p, "*");
    if let Some(b) = specific {
        add(&mut p, b);
    }
    p
}

fn pair_response(template: &str, action: &str) -> PairResponse {
    let action = evoloop_core::action::parse_action(action).unwrap();
    PairResponse {
        reasoning: format!("{template} reasoning"),
        tokens: TokenizedResponse { tokens: vec![format!("z:{template}"), format!("a:{}", serialize_action(&action))], logprobs: vec![0.0; 2] },
        action,
    }
}

/// Policy, reference, pair and β for a sequence-level DPO check.
pub fn dpo_instance(rng: &mut SessionRng) -> (TabularPolicy, TabularPolicy, PreferencePair, f64) {
    let step = rng.gen_range(0..3);
    let specific = rng.gen_bool(0.5).then(|| format!("dpo|{step}"));
    let policy = tabular_pair_policy(rng, specific.as_deref());
    let reference = tabular_pair_policy(rng, None);
    let a = a_vocab();
    let wa = rng.gen_range(0..a.len());
    let la = (wa + rng.gen_range(1..a.len())) % a.len();
    let pair = PreferencePair {
        context: blank_context(step),
        observation: blank_obs(),
        chosen: pair_response(Z_VOCAB[rng.gen_range(0..Z_VOCAB.len())], &a[wa]),
        rejected: pair_response(Z_VOCAB[rng.gen_range(0..Z_VOCAB.len())], &a[la]),
        paradigm: Paradigm::Correction,
        source: PairSource { fail_traj_id: "f#0".into(), ref_traj_id: "r#0".into(), t_star: step },
    };
    (policy, reference, pair, rng.gen_range(0.05..2.0))
}

pub fn dpo_fd(policy: &TabularPolicy, reference: &TabularPolicy, pair: &PreferencePair, beta: f64) -> TabularGrad {
    finite_differences(policy, |p| dpo_loss(p, reference, pair, beta).unwrap())
}

// ---------------------------------------------------------------------------
// Trajectories

pub fn rollout(task: &Task, actions: Vec<Action>, seed: u64) -> Trajectory {
    let mut t = task.clone();
    t.solution = Some(actions);
    run_episode(&t, &ScriptedPolicy::ground_truth(), 64, &NoiseConfig::off(), seed).unwrap().trajectory
}

/// Large blank sheet so every click in the first rows of the viewport hits a cell.
pub fn canvas_task() -> Task {
    Task {
        id: "canvas".into(),
        instruction: "Fill in the sheet.".into(),
        validator: ValidatorSpec::default(),
        init_config: InitConfig {
            apps: vec![AppInit::Spreadsheet { id: "sheet".into(), title: None, rows: 200, cols: 20, generator: None, cells: BTreeMap::new() }],
            focused: None,
        },
        domain_tag: "office/spreadsheet/canvas".into(),
        feasible: true,
        family: String::new(),
        solution: None,
    }
}

const FORK_KINDS: [ActionKind; 5] = [ActionKind::LeftClick, ActionKind::DoubleClick, ActionKind::Type, ActionKind::Key, ActionKind::Scroll];

fn canvas_action(rng: &mut SessionRng, kind: ActionKind) -> Action {
    let (r, c) = (rng.gen_range(0..10u32), rng.gen_range(0..6u32));
    let (x, y) = (c * COL_WIDTH + rng.gen_range(5..95), TOOLBAR_HEIGHT + r * ROW_HEIGHT + rng.gen_range(3..17));
    match kind {
        ActionKind::Type => Action::type_text(&rng.gen_range(0..1000).to_string()),
        ActionKind::Key => Action::press(["enter", "tab", "up", "down", "escape"][rng.gen_range(0..5)]),
        ActionKind::Scroll => Action::Scroll { pixels: if rng.gen_bool(0.5) { 20 } else { -20 } },
        k => Action::pointer(k, x, y).unwrap(),
    }
}

pub struct PlantedFork {
    pub task: Task,
    pub fail: Trajectory,
    pub reference: Trajectory,
    pub t_star: usize,
    pub terminal: bool,
}

/// Reference of length `T ≤ 30` and a failure that copies it except at a
/// planted index in `1..T`. The last index swaps the terminate status.
pub fn planted_fork(rng: &mut SessionRng) -> PlantedFork {
    let task = canvas_task();
    let len = rng.gen_range(2..=30);
    let mut ref_actions: Vec<Action> =
        (0..len - 1)
        .map(|_| {
            let k = FORK_KINDS[rng.gen_range(0..FORK_KINDS.len())];
            canvas_action(rng, k)
        })
        .collect();
    ref_actions.push(Action::terminate(TerminateStatus::Success));
    let t_star = rng.gen_range(1..len);
    let mut fail_actions = ref_actions.clone();
    let terminal = t_star == len - 1;
    fail_actions[t_star] = if terminal {
        Action::terminate(TerminateStatus::Failure)
    } else {
        let kinds: Vec<ActionKind> = FORK_KINDS.iter().copied().filter(|k| *k != ref_actions[t_star].kind()).collect();
        let k = kinds[rng.gen_range(0..kinds.len())];
        canvas_action(rng, k)
    };
    let seed = rng.gen();
    PlantedFork {
        reference: rollout(&task, ref_actions, seed),
        fail: rollout(&task, fail_actions, seed.wrapping_add(1)),
        task,
        t_star,
        terminal,
    }
}

pub struct InjectedSuccess {
    pub task: Task,
    pub trajectory: Trajectory,
    /// Indices of the inserted redundant steps.
    pub injected: Vec<usize>,
}

/// A verified ground-truth success with redundant no-ops and key-hold loops
/// spliced in before random non-terminal steps.
pub fn injected_success(rng: &mut SessionRng) -> InjectedSuccess {
    let fam = [Family::MaxPerRow, Family::SumColumn, Family::AppendLine, Family::RenameFile][rng.gen_range(0..4)];
    let sc = Scenario { role: "clerk".into(), capability: "office/test".into(), family: fam, resource_seed: rng.gen() };
    let task = synthesize_task(&TemplateArchitect, &sc, 1).unwrap().task;
    let gt = task.solution.clone().unwrap();
    let mut actions = Vec::new();
    let mut injected = Vec::new();
    for a in &gt {
        if !a.is_terminate() && rng.gen_bool(0.4) {
            for _ in 0..rng.gen_range(1..=2) {
                let block = match rng.gen_range(0..3) {
                    0 => vec![Action::MouseMove { coordinate: (rng.gen_range(0..1280), rng.gen_range(0..720)).into() }],
                    1 => vec![Action::click(1279 + rng.gen_range(1..50), 100)],
                    _ => {
                        let k = ["x", "shift", "f9"][rng.gen_range(0..3)].to_string();
                        vec![Action::KeyDown { keys: vec![k.clone()] }, Action::KeyUp { keys: vec![k] }]
                    }
                };
                for b in block {
                    injected.push(actions.len());
                    actions.push(b);
                }
            }
        }
        actions.push(a.clone());
    }
    let trajectory = rollout(&task, actions, rng.gen());
    InjectedSuccess { task, trajectory, injected }
}

// ---------------------------------------------------------------------------
// Budgets

pub fn random_spectrum(rng: &mut SessionRng) -> BudgetSpectrum {
    let n = rng.gen_range(1..=6);
    let mut budgets: Vec<u32> = Vec::new();
    let mut k = 0;
    for _ in 0..n {
        k += rng.gen_range(1..=8);
        budgets.push(k);
    }
    loop {
        let mut thresholds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if let Ok(s) = BudgetSpectrum::new(budgets.clone(), thresholds) {
            return s;
        }
    }
}

pub fn random_sr(rng: &mut SessionRng, spec: &BudgetSpectrum) -> BTreeMap<u32, f64> {
    spec.budgets
        .iter()
        .map(|k| {
            let v = if rng.gen_bool(0.2) { spec.thresholds[rng.gen_range(0..spec.thresholds.len())] } else { rng.gen_range(0.0..=1.0) };
            (*k, v)
        })
        .collect()
}

/// Brute force: collect every qualifying index and take the minimum.
pub fn budget_oracle(sr: &BTreeMap<u32, f64>, spec: &BudgetSpectrum) -> (u32, bool) {
    let ok: Vec<usize> = (0..spec.budgets.len()).filter(|&i| sr[&spec.budgets[i]] >= spec.thresholds[i]).collect();
    match ok.iter().min() {
        Some(&i) => (spec.budgets[i], true),
        None => (*spec.budgets.last().unwrap(), false),
    }
}
