//! Verifiable task synthesis: scenario sampling, template-family drafting
//! with closed-loop verification, consistency filtering and
//! decontamination against a benchmark.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, TerminateStatus};
use crate::digest::{derive_seed, derive_seed_indexed, rng_from, StateHash};
use crate::episode::run_episode;
use crate::error::{Error, Result};
use crate::model::{Check, Task, ValidatorSpec};
use crate::policy::Policy;
use crate::sandbox::{
    self, cell_name, AppInit, AppState, InitConfig, NoiseConfig, SheetGenerator, COL_WIDTH, FILE_ITEM_WIDTH,
    FILE_ROW_HEIGHT, ROW_HEIGHT, TOOLBAR_HEIGHT,
};

/// Template families with a registered generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MaxPerRow,
    SumColumn,
    AppendLine,
    RenameFile,
    /// Asks for something the environment cannot provide.
    Infeasible,
    /// Max-per-row with a ground-truth script that never verifies.
    BrokenGt,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::MaxPerRow,
        Family::SumColumn,
        Family::AppendLine,
        Family::RenameFile,
        Family::Infeasible,
        Family::BrokenGt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::MaxPerRow => "max_per_row",
            Family::SumColumn => "sum_column",
            Family::AppendLine => "append_line",
            Family::RenameFile => "rename_file",
            Family::Infeasible => "infeasible",
            Family::BrokenGt => "broken_gt",
        }
    }

    pub fn from_name(s: &str) -> Option<Family> {
        Family::ALL.into_iter().find(|f| f.name() == s)
    }
}

/// Domain tree: domain → capability → generator family name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taxonomy {
    pub domains: BTreeMap<String, BTreeMap<String, String>>,
    pub personas: Vec<String>,
    /// Optional per-capability weight keyed `domain/capability`; missing
    /// entries weigh 1.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub weights: BTreeMap<String, f64>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        let mut domains = BTreeMap::new();
        let leaf = |pairs: &[(&str, Family)]| -> BTreeMap<String, String> {
            pairs.iter().map(|(c, f)| (c.to_string(), f.name().to_string())).collect()
        };
        domains.insert(
            "office/spreadsheet".into(),
            leaf(&[("max_per_row", Family::MaxPerRow), ("sum_column", Family::SumColumn)]),
        );
        domains.insert("office/text".into(), leaf(&[("append_line", Family::AppendLine)]));
        domains.insert("office/files".into(), leaf(&[("rename_file", Family::RenameFile)]));
        domains.insert("office/unsupported".into(), leaf(&[("missing_resource", Family::Infeasible)]));
        Taxonomy {
            domains,
            personas: ["financial analyst", "office manager", "research assistant", "teacher"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            weights: BTreeMap::new(),
        }
    }
}

impl Taxonomy {
    pub fn validate(&self) -> Result<()> {
        if self.personas.is_empty() || self.leaves().is_empty() {
            return Err(Error::Config("taxonomy needs at least one persona and one capability".into()));
        }
        for (path, family) in self.leaves() {
            if Family::from_name(family).is_none() {
                return Err(Error::Config(format!("capability `{path}` maps to unknown generator `{family}`")));
            }
        }
        for (k, w) in &self.weights {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::Config(format!("weight for `{k}` must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// `(domain/capability, family name)` for every leaf.
    pub fn leaves(&self) -> Vec<(String, &String)> {
        self.domains
            .iter()
            .flat_map(|(d, caps)| caps.iter().map(move |(c, f)| (format!("{d}/{c}"), f)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub role: String,
    /// `domain/capability`.
    pub capability: String,
    pub family: Family,
    /// Seed of the parametric resource generator.
    pub resource_seed: u64,
}

/// Persona uniform, capability by weight (uniform by default).
pub fn sample_scenario(tax: &Taxonomy, rng: &mut ChaCha8Rng) -> Result<Scenario> {
    tax.validate()?;
    let leaves = tax.leaves();
    let weights: Vec<f64> = leaves.iter().map(|(p, _)| tax.weights.get(p).copied().unwrap_or(1.0)).collect();
    let dist = WeightedIndex::new(&weights).map_err(|_| Error::Config("capability weights sum to zero".into()))?;
    let (capability, family) = &leaves[dist.sample(rng)];
    let role = tax.personas[rng.gen_range(0..tax.personas.len())].clone();
    Ok(Scenario {
        role,
        capability: capability.clone(),
        family: Family::from_name(family).expect("validated"),
        resource_seed: rng.gen(),
    })
}

/// A proposed task together with the script claimed to solve it.
#[derive(Debug, Clone, PartialEq)]
pub struct Draft {
    pub task: Task,
    pub gt: Vec<Action>,
}

/// Produces drafts; `feedback` carries the previous round's failure.
pub trait Architect {
    fn draft(&self, sc: &Scenario, round: u32, feedback: Option<&str>) -> Result<Draft>;
}

/// Parameterized instruction, validator and script per family. A failed
/// round redraws the resources from a fresh stream.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateArchitect;

const SHEET_TITLES: &[&str] = &["budget", "grades", "inventory", "survey", "expenses"];
const FILE_STEMS: &[&str] = &["report", "draft", "minutes", "invoice", "summary", "notes", "plan", "agenda"];
const FILE_EXTS: &[&str] = &["txt", "md", "csv"];
const LINES: &[&str] = &["Follow up with finance", "Meeting moved to Friday", "Review the Q3 numbers", "Send slides to the team"];

fn file_name(rng: &mut ChaCha8Rng) -> String {
    format!(
        "{}_{}.{}",
        FILE_STEMS.choose(rng).expect("non-empty"),
        rng.gen_range(1..100u32),
        FILE_EXTS.choose(rng).expect("non-empty")
    )
}

fn cell_click(r: u32, c: u32) -> Action {
    Action::click(c * COL_WIDTH + COL_WIDTH / 2, TOOLBAR_HEIGHT + r * ROW_HEIGHT + ROW_HEIGHT / 2)
}

fn sheet_of(cfg: &InitConfig) -> Result<sandbox::Sheet> {
    match sandbox::materialize(cfg, 0)?.apps.get("sheet") {
        Some(AppState::Spreadsheet(s)) => Ok(s.clone()),
        _ => Err(Error::Synthesis("template produced no sheet".into())),
    }
}

impl Architect for TemplateArchitect {
    fn draft(&self, sc: &Scenario, round: u32, _feedback: Option<&str>) -> Result<Draft> {
        let seed = derive_seed_indexed(sc.resource_seed, "round", round as u64);
        let mut rng = rng_from(seed);
        let id = format!("{}-{:016x}", sc.family.name(), seed);
        let role = &sc.role;
        let domain_tag = format!("{}/{}", sc.capability, sc.family.name());
        let (instruction, init_config, checks, gt, feasible) = match sc.family {
            Family::MaxPerRow | Family::BrokenGt => {
                let rows = rng.gen_range(2..=6u32);
                let title = SHEET_TITLES.choose(&mut rng).expect("non-empty").to_string();
                let cfg = InitConfig {
                    apps: vec![AppInit::Spreadsheet {
                        id: "sheet".into(),
                        title: Some(title.clone()),
                        rows,
                        cols: 7,
                        generator: Some(SheetGenerator::Integers { lo: 1, hi: 99, cols: 6, seed: Some(rng.gen()) }),
                        cells: BTreeMap::new(),
                    }],
                    focused: None,
                };
                let sheet = sheet_of(&cfg)?;
                let mut checks = Vec::new();
                let mut gt = vec![cell_click(0, 6)];
                for r in 0..rows {
                    let max = (0..6).filter_map(|c| sheet.numeric(r, c)).fold(f64::NEG_INFINITY, f64::max);
                    checks.push(Check::NumericEquals { app: "sheet".into(), cell: cell_name(r, 6), expected: max, tolerance: 1e-9 });
                    let f = if sc.family == Family::BrokenGt { "SUM" } else { "MAX" };
                    gt.push(Action::type_text(&format!("={f}(A{n}:F{n})", n = r + 1)));
                    gt.push(Action::press("enter"));
                }
                gt.push(Action::terminate(TerminateStatus::Success));
                let instr = format!(
                    "As a {role}, fill column G of the {title} sheet with the largest value in columns A to F of each row."
                );
                (instr, cfg, checks, gt, true)
            }
            Family::SumColumn => {
                let rows = rng.gen_range(4..=15u32);
                let title = SHEET_TITLES.choose(&mut rng).expect("non-empty").to_string();
                let cfg = InitConfig {
                    apps: vec![AppInit::Spreadsheet {
                        id: "sheet".into(),
                        title: Some(title.clone()),
                        rows,
                        cols: 7,
                        generator: Some(SheetGenerator::Sales { seed: Some(rng.gen()) }),
                        cells: BTreeMap::new(),
                    }],
                    focused: None,
                };
                let sheet = sheet_of(&cfg)?;
                let total: f64 = (1..rows).filter_map(|r| sheet.numeric(r, 3)).sum();
                let checks =
                    vec![Check::NumericEquals { app: "sheet".into(), cell: "G2".into(), expected: total, tolerance: 1e-9 }];
                let gt = vec![
                    cell_click(1, 6),
                    Action::type_text(&format!("=SUM(D2:D{rows})")),
                    Action::press("enter"),
                    Action::terminate(TerminateStatus::Success),
                ];
                let instr = format!("As a {role}, put the total quantity sold in cell G2 of the {title} sheet.");
                (instr, cfg, checks, gt, true)
            }
            Family::AppendLine => {
                let n = rng.gen_range(1..=3usize);
                let body: Vec<&str> = LINES.choose_multiple(&mut rng, n + 1).copied().collect();
                let (existing, new_line) = body.split_at(n);
                let new_line = format!("{} ({})", new_line[0], rng.gen_range(1..1000u32));
                let cfg = InitConfig {
                    apps: vec![AppInit::TextEditor { id: "editor".into(), title: Some("notes".into()), text: existing.join("\n") }],
                    focused: None,
                };
                let checks = vec![Check::TextContains { app: "editor".into(), file: None, needle: format!("\n{new_line}") }];
                let gt = vec![
                    Action::click(640, 360),
                    Action::press("enter"),
                    Action::type_text(&new_line),
                    Action::terminate(TerminateStatus::Success),
                ];
                let instr = format!("As a {role}, add the line \"{new_line}\" at the end of the notes.");
                (instr, cfg, checks, gt, true)
            }
            Family::RenameFile | Family::Infeasible => {
                let mut files = BTreeMap::new();
                while files.len() < rng.gen_range(3..=6usize) {
                    files.insert(file_name(&mut rng), format!("content {}", rng.gen_range(0..1000u32)));
                }
                let mut fresh = file_name(&mut rng);
                while files.contains_key(&fresh) {
                    fresh = file_name(&mut rng);
                }
                let cfg = InitConfig {
                    apps: vec![AppInit::FileManager { id: "files".into(), title: Some("documents".into()), files: files.clone() }],
                    focused: None,
                };
                if sc.family == Family::Infeasible {
                    let mut missing = file_name(&mut rng);
                    while files.contains_key(&missing) || missing == fresh {
                        missing = file_name(&mut rng);
                    }
                    let checks = vec![Check::ReportedStatus { status: TerminateStatus::Failure }];
                    let gt = vec![Action::terminate(TerminateStatus::Failure)];
                    let instr = format!("As a {role}, rename {missing} to {fresh} in the documents folder.");
                    (instr, cfg, checks, gt, false)
                } else {
                    let keys: Vec<&String> = files.keys().collect();
                    let i = rng.gen_range(0..keys.len());
                    let old = keys[i].clone();
                    let y = TOOLBAR_HEIGHT + i as u32 * FILE_ROW_HEIGHT + FILE_ROW_HEIGHT / 2;
                    let checks = vec![Check::All {
                        checks: vec![
                            Check::FileExists { app: "files".into(), name: fresh.clone() },
                            Check::FileAbsent { app: "files".into(), name: old.clone() },
                        ],
                    }];
                    let gt = vec![
                        Action::click(FILE_ITEM_WIDTH / 2, y),
                        Action::press("f2"),
                        Action::type_text(&fresh),
                        Action::press("enter"),
                        Action::terminate(TerminateStatus::Success),
                    ];
                    let instr = format!("As a {role}, rename {old} to {fresh} in the documents folder.");
                    (instr, cfg, checks, gt, true)
                }
            }
        };
        let task = Task {
            id,
            instruction,
            validator: ValidatorSpec::new(checks),
            init_config,
            domain_tag,
            feasible,
            family: sc.family.name().into(),
            solution: Some(gt.clone()),
        };
        Ok(Draft { task, gt })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutcome {
    pub task: Task,
    pub gt_solution: Vec<Action>,
    pub rounds: u32,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

/// Verdict of replaying `gt` from reset; `Err` carries the failure text fed
/// back to the architect.
pub fn verify_draft(draft: &Draft) -> core::result::Result<(), String> {
    let state = sandbox::replay(&draft.task, 0, &draft.gt).map_err(|e| format!("replay failed: {e}"))?;
    match draft.task.validator.evaluate(&state) {
        Ok(true) => Ok(()),
        Ok(false) => Err(format!("ground truth ends in a state the validator rejects ({})", sandbox::state_hash(&state).to_hex())),
        Err(e) => Err(format!("validator error: {e}")),
    }
}

/// Draft, execute the ground truth, feed back the failure, retry.
pub fn synthesize_task(architect: &dyn Architect, sc: &Scenario, max_rounds: u32) -> Result<SynthesisOutcome> {
    if max_rounds == 0 {
        return Err(Error::InvalidArgument("max_rounds must be >= 1".into()));
    }
    let mut feedback: Option<String> = None;
    let mut last = None;
    for round in 0..max_rounds {
        let draft = architect.draft(sc, round, feedback.as_deref())?;
        match verify_draft(&draft) {
            Ok(()) => {
                return Ok(SynthesisOutcome {
                    task: draft.task,
                    gt_solution: draft.gt,
                    rounds: round + 1,
                    accepted: true,
                    failure: None,
                })
            }
            Err(msg) => {
                feedback = Some(msg);
                last = Some(draft);
            }
        }
    }
    let draft = last.expect("max_rounds >= 1");
    Ok(SynthesisOutcome { task: draft.task, gt_solution: draft.gt, rounds: max_rounds, accepted: false, failure: feedback })
}

// ---------------------------------------------------------------------------
// Consistency filtering

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub k: u32,
    /// Maximum tolerated validator/oracle disagreement rate.
    pub delta: f64,
    pub budget: usize,
    pub seed: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig { k: 8, delta: 0.25, budget: 30, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub task_id: String,
    pub validator_pass_rate: f64,
    pub oracle_pass_rate: f64,
    pub disagreement_rate: f64,
    /// Rollouts the validator accepted but the oracle rejected.
    pub false_positives: u32,
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Seed of the `i`-th reference rollout for `task_id`.
pub fn consistency_seed(cfg: &ConsistencyConfig, task_id: &str, i: u32) -> u64 {
    derive_seed_indexed(derive_seed(cfg.seed, task_id), "consistency", i as u64)
}

fn flagged(task_id: &str, reason: String) -> ConsistencyReport {
    ConsistencyReport {
        task_id: task_id.into(),
        validator_pass_rate: 0.0,
        oracle_pass_rate: 0.0,
        disagreement_rate: 1.0,
        false_positives: 0,
        flagged: true,
        reason: Some(reason),
    }
}

/// Runs `k` reference rollouts and compares the validator with a scripted
/// oracle: does the rollout end where the ground truth ends (same state
/// digest and reported status)? Flags any false positive, or a disagreement
/// rate above `delta`.
pub fn consistency_check(task: &Task, agent: &dyn Policy, cfg: &ConsistencyConfig) -> ConsistencyReport {
    if cfg.k == 0 {
        return flagged(&task.id, "k must be >= 1".into());
    }
    let Some(gt) = task.solution.as_ref() else {
        return flagged(&task.id, "task has no ground-truth script".into());
    };
    let (mut v_pass, mut o_pass, mut disagree, mut fp) = (0u32, 0u32, 0u32, 0u32);
    for i in 0..cfg.k {
        let seed = consistency_seed(cfg, &task.id, i);
        let gt_end = match sandbox::replay(task, seed, gt) {
            Ok(s) => s,
            Err(e) => return flagged(&task.id, format!("ground-truth replay failed: {e}")),
        };
        let out = match run_episode(task, agent, cfg.budget, &NoiseConfig::off(), seed) {
            Ok(o) => o,
            Err(e) => return flagged(&task.id, format!("reference agent crashed: {e}")),
        };
        let v = out.trajectory.reward == 1;
        let o = sandbox::state_hash(&out.terminal_state) == sandbox::state_hash(&gt_end)
            && out.terminal_state.done == gt_end.done;
        v_pass += v as u32;
        o_pass += o as u32;
        disagree += (v != o) as u32;
        fp += (v && !o) as u32;
    }
    let k = cfg.k as f64;
    let rate = disagree as f64 / k;
    let reason = if fp > 0 {
        Some(format!("validator accepted {fp} rollout(s) the oracle rejected"))
    } else if rate > cfg.delta {
        Some(format!("disagreement rate {rate:.3} exceeds {:.3}", cfg.delta))
    } else {
        None
    };
    ConsistencyReport {
        task_id: task.id.clone(),
        validator_pass_rate: v_pass as f64 / k,
        oracle_pass_rate: o_pass as f64 / k,
        disagreement_rate: rate,
        false_positives: fp,
        flagged: reason.is_some(),
        reason,
    }
}

pub fn consistency_filter(tasks: &[Task], agent: &dyn Policy, cfg: &ConsistencyConfig) -> (Vec<Task>, Vec<ConsistencyReport>) {
    let mut kept = Vec::new();
    let mut flagged = Vec::new();
    for t in tasks {
        let r = consistency_check(t, agent, cfg);
        if r.flagged {
            flagged.push(r);
        } else {
            kept.push(t.clone());
        }
    }
    (kept, flagged)
}

// ---------------------------------------------------------------------------
// Decontamination

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn normalized_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Multiset Jaccard: Σ min counts / Σ max counts. Two empty inputs score 1.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let count = |s: &str| {
        let mut m: BTreeMap<String, u32> = BTreeMap::new();
        for t in normalized_tokens(s) {
            *m.entry(t).or_default() += 1;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let (mut inter, mut union) = (0u32, 0u32);
    for (t, &n) in &ca {
        let m = cb.get(t).copied().unwrap_or(0);
        inter += n.min(m);
        union += n.max(m);
    }
    union += cb.iter().filter(|(t, _)| !ca.contains_key(*t)).map(|(_, n)| n).sum::<u32>();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecontamConfig {
    pub theta_sem: f64,
}

impl Default for DecontamConfig {
    fn default() -> Self {
        DecontamConfig { theta_sem: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ContaminationReason {
    Semantic { benchmark_id: String, similarity: f64 },
    Configuration { benchmark_id: String },
    Evaluator { benchmark_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub task_id: String,
    pub reasons: Vec<ContaminationReason>,
}

pub fn config_hash(task: &Task) -> StateHash {
    StateHash::of_json(&task.init_config)
}

pub fn validator_hash(task: &Task) -> StateHash {
    StateHash::of_json(&task.validator)
}

/// Terminal digest of the task's ground truth replayed from seed 0.
pub fn gt_terminal_hash(task: &Task) -> Option<StateHash> {
    let gt = task.solution.as_ref()?;
    sandbox::replay(task, 0, gt).ok().map(|s| sandbox::state_hash(&s))
}

struct Fingerprint {
    id: String,
    instruction: String,
    config: StateHash,
    validator: StateHash,
    gt_end: Option<StateHash>,
}

fn fingerprint(t: &Task) -> Fingerprint {
    Fingerprint {
        id: t.id.clone(),
        instruction: t.instruction.clone(),
        config: config_hash(t),
        validator: validator_hash(t),
        gt_end: gt_terminal_hash(t),
    }
}

/// Removes tasks that resemble a benchmark item in instruction, initial
/// configuration or evaluator. Every matching reason is recorded.
pub fn decontaminate(tasks: &[Task], benchmark: &[Task], cfg: &DecontamConfig) -> (Vec<Task>, Vec<Removal>) {
    let bench: Vec<Fingerprint> = benchmark.iter().map(fingerprint).collect();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for t in tasks {
        let f = fingerprint(t);
        let mut reasons = Vec::new();
        // Most similar benchmark instruction only, to keep reports short.
        let best = bench
            .iter()
            .map(|b| (jaccard(&f.instruction, &b.instruction), b))
            .fold(None::<(f64, &Fingerprint)>, |acc, x| match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            });
        if let Some((sim, b)) = best {
            if sim >= cfg.theta_sem {
                reasons.push(ContaminationReason::Semantic { benchmark_id: b.id.clone(), similarity: sim });
            }
        }
        if let Some(b) = bench.iter().find(|b| b.config == f.config) {
            reasons.push(ContaminationReason::Configuration { benchmark_id: b.id.clone() });
        }
        if let Some(b) = bench
            .iter()
            .find(|b| b.validator == f.validator || (f.gt_end.is_some() && b.gt_end == f.gt_end))
        {
            reasons.push(ContaminationReason::Evaluator { benchmark_id: b.id.clone() });
        }
        if reasons.is_empty() {
            kept.push(t.clone());
        } else {
            removed.push(Removal { task_id: t.id.clone(), reasons });
        }
    }
    (kept, removed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{ScriptedPolicy, StochasticScripted};

    fn scenario(family: Family, seed: u64) -> Scenario {
        Scenario { role: "teacher".into(), capability: "office/test".into(), family, resource_seed: seed }
    }

    #[test]
    fn single_leaf_taxonomy_is_deterministic() {
        let mut tax = Taxonomy::default();
        tax.domains.retain(|d, _| d == "office/text");
        tax.personas.truncate(1);
        let mut rng = rng_from(1);
        let s = sample_scenario(&tax, &mut rng).unwrap();
        assert_eq!((s.role.as_str(), s.capability.as_str()), ("financial analyst", "office/text/append_line"));
        let draw = |seed| {
            let mut rng = rng_from(seed);
            (0..20).map(|_| sample_scenario(&Taxonomy::default(), &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn empty_taxonomy_rejected() {
        let tax = Taxonomy { domains: BTreeMap::new(), personas: vec!["x".into()], weights: BTreeMap::new() };
        assert!(sample_scenario(&tax, &mut rng_from(0)).is_err());
        let mut bad = Taxonomy::default();
        bad.domains.get_mut("office/text").unwrap().insert("poetry".into(), "sonnet".into());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn max_per_row_checks_row_maxima() {
        for seed in 0..20 {
            let out = synthesize_task(&TemplateArchitect, &scenario(Family::MaxPerRow, seed), 3).unwrap();
            assert!(out.accepted);
            assert_eq!(out.rounds, 1);
            let state = sandbox::materialize(&out.task.init_config, 0).unwrap();
            let AppState::Spreadsheet(s) = &state.apps["sheet"] else { panic!() };
            assert_eq!(out.task.validator.checks.len() as u32, s.rows);
            for (r, c) in out.task.validator.checks.iter().enumerate() {
                let mut m = i64::MIN;
                for col in 0..6 {
                    m = m.max(s.cells[r][col].parse::<i64>().unwrap());
                }
                let want = Check::NumericEquals {
                    app: "sheet".into(),
                    cell: format!("G{}", r + 1),
                    expected: m as f64,
                    tolerance: 1e-9,
                };
                assert_eq!(*c, want);
            }
        }
    }

    #[test]
    fn broken_ground_truth_exhausts_rounds() {
        let out = synthesize_task(&TemplateArchitect, &scenario(Family::BrokenGt, 3), 4).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.rounds, 4);
        assert!(out.failure.unwrap().contains("rejects"));
        assert!(synthesize_task(&TemplateArchitect, &scenario(Family::MaxPerRow, 3), 0).is_err());
    }

    #[test]
    fn every_family_but_broken_verifies() {
        for f in Family::ALL {
            for seed in 0..10 {
                let out = synthesize_task(&TemplateArchitect, &scenario(f, seed), 2).unwrap();
                assert_eq!(out.accepted, f != Family::BrokenGt, "{f:?} seed {seed}");
                assert_eq!(out.task.feasible, f != Family::Infeasible);
            }
        }
    }

    #[test]
    fn rename_validator_is_exists_and_absent() {
        let out = synthesize_task(&TemplateArchitect, &scenario(Family::RenameFile, 5), 1).unwrap();
        assert!(out.accepted);
        let Check::All { checks } = &out.task.validator.checks[0] else { panic!() };
        assert!(matches!(checks[0], Check::FileExists { .. }));
        assert!(matches!(checks[1], Check::FileAbsent { .. }));
    }

    fn accepted(f: Family, seed: u64) -> Task {
        synthesize_task(&TemplateArchitect, &scenario(f, seed), 1).unwrap().task
    }

    #[test]
    fn consistent_task_is_kept() {
        let t = accepted(Family::MaxPerRow, 1);
        let r = consistency_check(&t, &ScriptedPolicy::ground_truth(), &ConsistencyConfig::default());
        assert!(!r.flagged);
        assert_eq!((r.validator_pass_rate, r.oracle_pass_rate), (1.0, 1.0));
    }

    #[test]
    fn always_true_validator_is_flagged() {
        let mut t = accepted(Family::MaxPerRow, 1);
        t.validator = ValidatorSpec::new(vec![]);
        let agent = StochasticScripted { base: ScriptedPolicy::ground_truth(), p_success: 0.5 };
        let r = consistency_check(&t, &agent, &ConsistencyConfig::default());
        assert!(r.flagged);
        assert!(r.false_positives >= 1);
    }

    #[test]
    fn wrong_cell_validator_is_flagged() {
        let mut t = accepted(Family::SumColumn, 2);
        if let Check::NumericEquals { cell, .. } = &mut t.validator.checks[0] {
            *cell = "G3".into();
        }
        let r = consistency_check(&t, &ScriptedPolicy::ground_truth(), &ConsistencyConfig::default());
        assert!(r.flagged);
        assert_eq!(r.disagreement_rate, 1.0);
    }

    #[test]
    fn crash_is_flagged() {
        let t = accepted(Family::AppendLine, 2);
        let r = consistency_check(&t, &ScriptedPolicy::default(), &ConsistencyConfig::default());
        assert!(r.flagged);
        assert!(r.reason.unwrap().contains("crashed"));
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard("rename report.txt to final.txt", "rename the file report.txt to final.txt"), 0.75);
        assert_eq!(jaccard("Same words", "same, WORDS!"), 1.0);
    }

    #[test]
    fn decontamination_reasons_and_idempotence() {
        let a = accepted(Family::RenameFile, 1);
        let b = accepted(Family::RenameFile, 2);
        let mut same_cfg = accepted(Family::RenameFile, 3);
        same_cfg.init_config = b.init_config.clone();
        same_cfg.instruction = "Completely unrelated wording here".into();
        let mut copy = a.clone();
        copy.id = "copy".into();
        let bench = vec![a, b];
        let fresh = accepted(Family::MaxPerRow, 9);
        let (kept, removed) = decontaminate(&[copy, same_cfg, fresh.clone()], &bench, &DecontamConfig::default());
        assert_eq!(kept, vec![fresh]);
        assert!(matches!(&removed[0].reasons[0], ContaminationReason::Semantic { similarity, .. } if *similarity == 1.0));
        assert_eq!(removed[1].reasons, vec![ContaminationReason::Configuration { benchmark_id: bench[1].id.clone() }]);
        let (again, none) = decontaminate(&kept, &bench, &DecontamConfig::default());
        assert_eq!((again, none.len()), (kept, 0));
    }

    #[test]
    fn semantic_threshold_is_inclusive() {
        let mut t = accepted(Family::RenameFile, 4);
        let mut b = accepted(Family::RenameFile, 5);
        t.instruction = "rename report.txt to final.txt".into();
        b.instruction = "rename the file report.txt to final.txt".into();
        let at = |theta| decontaminate(core::slice::from_ref(&t), core::slice::from_ref(&b), &DecontamConfig { theta_sem: theta }).1.len();
        assert_eq!(at(0.75), 1);
        assert_eq!(at(0.76), 0);
    }
}
