use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context as _, Result};
use clap::{Parser, Subcommand};
use evoloop::config::RunConfig;
use evoloop::formats::{read_json, read_jsonl, write_json, write_jsonl};
use evoloop::inspect::{pair_report, to_html, trajectory_report, ReportFormat};
use evoloop::orchestrator::{GroupResult, Orchestrator};
use evoloop::pipeline::{self, RolloutParams, SynthParams};
use evoloop::policy_spec::parse_policy_spec;
use evoloop::pool::ExperiencePool;
use evoloop_core::coldstart::TemplateProvider;
use evoloop_core::model::{Task, Trajectory};
use evoloop_core::preference::{Equivalence, PairConfig, PreferencePair};
use evoloop_core::rft::{BudgetSpectrum, DenoiseConfig};
use evoloop_core::stepo::ClipConfig;

#[derive(Parser)]
#[command(name = "evoloop", version, about = "Experience-loop toolkit for computer-use agents on a simulated desktop")]
struct Cli {
    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run configuration (unknown keys are rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for outputs given as bare file names.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize a verified task corpus.
    Synth {
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long, default_value = "tasks.json")]
        out: PathBuf,
        /// QA report (attempts, flags, removals).
        #[arg(long, default_value = "synth_qa.json")]
        qa: PathBuf,
    },
    /// Run grouped rollouts into a trajectory pool.
    Rollout {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "stochastic_scripted:gt:0.5")]
        policy: String,
        #[arg(long)]
        cluster_quota: Option<usize>,
        #[arg(long)]
        group: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value = "pool.jsonl")]
        out: PathBuf,
        #[arg(long, default_value = "rollout_metrics.json")]
        metrics: PathBuf,
        /// Also write the per-task groups (input of `stepo`).
        #[arg(long)]
        groups_out: Option<PathBuf>,
    },
    /// Estimate pass rates and select a compute budget per task.
    Budget {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "stochastic_scripted:gt:0.5")]
        policy: String,
        #[arg(long)]
        spectrum: Option<BudgetSpectrum>,
        #[arg(long, default_value = "budgets.json")]
        out: PathBuf,
    },
    /// Fill reasoning traces in hindsight.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "template")]
        provider: String,
        #[arg(long, default_value = "annotated.jsonl")]
        out: PathBuf,
    },
    /// Split annotated trajectories into single-step training samples.
    Samples {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "samples.jsonl")]
        out: PathBuf,
    },
    /// Mask redundant steps of RFT trajectories.
    Denoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "rft.jsonl")]
        out: PathBuf,
        #[arg(long, default_value = "denoise_report.json")]
        report: PathBuf,
        /// Also mask steps taken after the goal was already reached.
        #[arg(long)]
        post_success_redundancy: bool,
    },
    /// Build step-level preference pairs from failed rollouts.
    Pairs {
        #[arg(long)]
        fail: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        window: Option<usize>,
        #[arg(long)]
        relaxed: bool,
        /// Never fall back to the ground-truth action.
        #[arg(long)]
        no_synthesizer: bool,
        #[arg(long, default_value = "pairs.jsonl")]
        out: PathBuf,
        #[arg(long, default_value = "pairs_skipped.json")]
        skipped: PathBuf,
    },
    /// Score preference pairs with the DPO loss.
    DpoEval {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        policy: String,
        #[arg(long = "ref")]
        reference: String,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, default_value = "dpo_metrics.json")]
        out: PathBuf,
    },
    /// Evaluate the STEPO and trajectory-level GRPO objectives on groups.
    Stepo {
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        policy: String,
        /// Behavior policy; defaults to the log-probs recorded at sampling.
        #[arg(long)]
        old: Option<String>,
        #[arg(long = "ref")]
        reference: String,
        #[arg(long)]
        eps: Option<f64>,
        #[arg(long)]
        beta_kl: Option<f64>,
        #[arg(long, default_value = "stepo_metrics.json")]
        out: PathBuf,
    },
    /// Run synth → rollout → budget → denoise → pairs → stepo.
    Pipeline {
        /// Skip synthesis and use this corpus.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Print a read-only report of one trajectory or one preference pair.
    Inspect {
        #[arg(long, conflicts_with = "pairs")]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        tasks: Option<PathBuf>,
        /// Restrict to trajectories of this task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "text")]
        format: ReportFormat,
    },
}

struct Ctx {
    cfg: RunConfig,
    out_dir: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.out_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_trajectories(p: &Path) -> Result<Vec<Trajectory>> {
    read_jsonl(p)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg: RunConfig = match &cli.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx { cfg, out_dir: cli.out_dir.clone() };
    let orch = Orchestrator::from_env()?;
    orch.tools.register(evoloop::orchestrator::Tool::desktop("v1"))?;
    let cfg = &ctx.cfg;

    match cli.cmd {
        Cmd::Synth { taxonomy, count, benchmark, out, qa } => {
            let tax = pipeline::load_taxonomy(taxonomy.as_deref().or(cfg.synth.taxonomy.as_deref()))?;
            let bench = match benchmark.as_ref().or(cfg.synth.benchmark.as_ref()) {
                Some(p) => pipeline::load_tasks(p)?,
                None => Vec::new(),
            };
            let (tasks, report) = pipeline::synth_stage(&SynthParams {
                taxonomy: &tax,
                benchmark: &bench,
                count: count.unwrap_or(cfg.synth.count),
                max_rounds: cfg.synth.max_rounds,
                consistency: cfg.synth.consistency,
                reference_p_success: cfg.synth.reference_p_success,
                decontam: cfg.synth.decontam,
                seed: cfg.seed,
            })?;
            write_json(&ctx.out(&out), &tasks)?;
            write_json(&ctx.out(&qa), &report)?;
            eprintln!("{} tasks kept, {} flagged, {} removed", tasks.len(), report.flagged.len(), report.removed.len());
        }
        Cmd::Rollout { tasks, policy, cluster_quota, group, budget, out, metrics, groups_out } => {
            let tasks = pipeline::load_tasks(&tasks)?;
            let policy = parse_policy_spec(&policy)?;
            let cluster = orch.provision_cluster("desktop-sim", "v1", cluster_quota.unwrap_or(cfg.rollout.quota))?;
            let pool = ExperiencePool::new(tasks.iter().map(|t| t.id.clone()));
            let params = RolloutParams {
                group: group.unwrap_or(cfg.rollout.group),
                budget: budget.unwrap_or(cfg.rollout.budget),
                noise: &cfg.rollout.noise,
                seed: cfg.seed,
            };
            let (groups, m) = pipeline::rollout_stage(&cluster, &tasks, &policy, &params, &pool)?;
            let flat: Vec<Trajectory> = groups.iter().flat_map(|g| g.trajectories.iter().cloned()).collect();
            write_jsonl(&ctx.out(&out), &flat)?;
            write_json(&ctx.out(&metrics), &m)?;
            if let Some(g) = groups_out {
                write_jsonl(&ctx.out(&g), &groups)?;
            }
            eprintln!("{} sessions, peak concurrency {}", m.sessions_run, m.peak_concurrency);
        }
        Cmd::Budget { tasks, policy, spectrum, out } => {
            let tasks = pipeline::load_tasks(&tasks)?;
            let policy = parse_policy_spec(&policy)?;
            let spectrum = spectrum.unwrap_or_else(|| cfg.rft.spectrum.clone());
            let cluster = orch.provision_cluster("desktop-sim", "v1", cfg.rollout.quota)?;
            let recs = pipeline::budget_stage(&cluster, &tasks, &policy, &spectrum, cfg.rollout.budget, cfg.seed);
            write_json(&ctx.out(&out), &recs)?;
        }
        Cmd::Annotate { input, tasks, provider, out } => {
            if provider != "template" {
                bail!("unknown reasoning provider `{provider}` (available: template)");
            }
            let tasks = pipeline::load_tasks(&tasks)?;
            let trajs = load_trajectories(&input)?;
            let annotated = pipeline::annotate_stage(&tasks, &trajs, &TemplateProvider)?;
            write_jsonl(&ctx.out(&out), &annotated)?;
        }
        Cmd::Samples { input, tasks, out } => {
            let tasks = pipeline::load_tasks(&tasks)?;
            let samples = pipeline::samples_stage(&tasks, &load_trajectories(&input)?)?;
            write_jsonl(&ctx.out(&out), &samples)?;
        }
        Cmd::Denoise { input, tasks, out, report, post_success_redundancy } => {
            let tasks = pipeline::load_tasks(&tasks)?;
            let dc = DenoiseConfig { post_success_redundancy: post_success_redundancy || cfg.rft.denoise.post_success_redundancy };
            let (rft, summary) = pipeline::denoise_stage(&tasks, &load_trajectories(&input)?, &dc)?;
            write_jsonl(&ctx.out(&out), &rft)?;
            write_json(&ctx.out(&report), &summary)?;
        }
        Cmd::Pairs { fail, tasks, window, relaxed, no_synthesizer, out, skipped } => {
            let tasks = pipeline::load_tasks(&tasks)?;
            let pc = PairConfig {
                window: window.unwrap_or(cfg.preference.window),
                equivalence: if relaxed { Equivalence::Relaxed } else { cfg.preference.equivalence },
                synthesize_fallback: cfg.preference.synthesize_fallback && !no_synthesizer,
            };
            let provider: Option<&dyn evoloop_core::coldstart::ReasoningProvider> =
                if no_synthesizer { None } else { Some(&TemplateProvider) };
            let (pairs, skips) = pipeline::pairs_stage(&tasks, &load_trajectories(&fail)?, &pc, provider)?;
            write_jsonl(&ctx.out(&out), &pairs)?;
            write_json(&ctx.out(&skipped), &skips)?;
            eprintln!("{} pairs, {} skipped", pairs.len(), skips.len());
        }
        Cmd::DpoEval { pairs, policy, reference, beta, out } => {
            let pairs: Vec<PreferencePair> = read_jsonl(&pairs)?;
            let m = pipeline::dpo_eval(
                &pairs,
                &parse_policy_spec(&policy)?,
                &parse_policy_spec(&reference)?,
                beta.unwrap_or(cfg.preference.beta),
            )?;
            write_json(&ctx.out(&out), &m)?;
        }
        Cmd::Stepo { groups, tasks, policy, old, reference, eps, beta_kl, out } => {
            let tasks = pipeline::load_tasks(&tasks)?;
            let groups: Vec<GroupResult> = read_jsonl(&groups)?;
            let new = pipeline::policy_as_tabular(&parse_policy_spec(&policy)?, "--policy")?;
            let old = old.map(|s| parse_policy_spec(&s)).transpose()?;
            let reference = parse_policy_spec(&reference)?;
            let mut clip: ClipConfig = cfg.stepo.clip;
            if let Some(e) = eps {
                clip.eps_low = e;
                clip.eps_high = e;
            }
            if let Some(b) = beta_kl {
                clip.beta_kl = b;
            }
            clip.validate().map_err(|e| anyhow!("{e}"))?;
            let old_ref = old.as_ref().map(|p| p as &dyn evoloop_core::policy::Policy);
            let m = pipeline::stepo_eval(&tasks, &groups, &new, old_ref, &reference, &clip)?;
            write_json(&ctx.out(&out), &m)?;
        }
        Cmd::Pipeline { tasks, count } => {
            let mut cfg = ctx.cfg.clone();
            if tasks.is_some() {
                cfg.tasks_file = tasks;
            }
            if let Some(c) = count {
                cfg.synth.count = c;
            }
            let dir = ctx.out_dir.clone().unwrap_or_else(pipeline::default_out_dir);
            let m = pipeline::run_pipeline(&cfg, &dir, &orch)?;
            eprintln!("pipeline complete: {} artifacts in {}", m.artifacts.len(), dir.display());
        }
        Cmd::Inspect { trajectories, pairs, tasks, task, index, format } => {
            let tasks: Vec<Task> = match &tasks {
                Some(p) => pipeline::load_tasks(p)?,
                None => Vec::new(),
            };
            let (title, text) = if let Some(p) = pairs {
                let all: Vec<PreferencePair> = read_jsonl(&p)?;
                let pair = all.get(index).ok_or_else(|| anyhow!("no pair at index {index} ({} pairs)", all.len()))?;
                (format!("pair {index}"), pair_report(index, pair))
            } else {
                let p = trajectories.context("one of --trajectories or --pairs is required")?;
                let all: Vec<Trajectory> = load_trajectories(&p)?;
                let matching: Vec<&Trajectory> =
                    all.iter().filter(|t| task.as_deref().is_none_or(|id| t.task_id == id)).collect();
                let tr = matching.get(index).ok_or_else(|| anyhow!("no trajectory at index {index} ({} match)", matching.len()))?;
                let t = tasks.iter().find(|t| t.id == tr.task_id);
                (tr.id(), trajectory_report(tr, t))
            };
            match format {
                ReportFormat::Text => print!("{text}"),
                ReportFormat::Html => print!("{}", to_html(&title, &text)),
            }
        }
    }
    Ok(())
}
