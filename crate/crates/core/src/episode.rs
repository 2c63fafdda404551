//! Single-session rollout loop: render, build context, act, step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::action::Action;
use crate::digest::{derive_seed_indexed, rng_from};
use crate::error::Result;
use crate::model::{build_context_from_steps, evaluate_reward, Step, Task, Trajectory, CONTEXT_WINDOW};
use crate::policy::{Policy, ProposedAction};
use crate::sandbox::{self, EnvState, NoiseConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeEnd {
    Terminated,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    pub end: EpisodeEnd,
    /// Unparseable policy outputs, one message per affected step.
    pub violations: Vec<String>,
    pub terminal_state: EnvState,
}

/// Action recorded in place of an unparseable policy output.
pub fn noop_action() -> Action {
    Action::Wait { time: 1.0 }
}

/// Noise settings for one session: the configured stream forked by the
/// session seed.
pub fn session_noise(noise: &NoiseConfig, seed: u64) -> NoiseConfig {
    NoiseConfig { seed: derive_seed_indexed(noise.seed, "session", seed), ..noise.clone() }
}

/// Runs one episode until `terminate` or `budget` steps.
///
/// Errors from the policy or from an environment invariant breach fail the
/// episode; unparseable actions do not.
pub fn run_episode(task: &Task, policy: &dyn Policy, budget: usize, noise: &NoiseConfig, seed: u64) -> Result<EpisodeOutcome> {
    let noise = session_noise(noise, seed);
    let mut state = sandbox::reset(task, seed)?;
    let mut obs = sandbox::render_noisy(&state, &noise);
    let mut steps: Vec<Step> = Vec::new();
    let mut violations = Vec::new();
    let mut end = EpisodeEnd::BudgetExhausted;

    for t in 0..budget {
        let ctx = build_context_from_steps(task, &steps, t, CONTEXT_WINDOW)?;
        let mut rng = rng_from(derive_seed_indexed(seed, "policy", t as u64));
        let out = policy.act(task, seed, &ctx, &obs, &mut rng)?;
        let action = match out.action {
            ProposedAction::Parsed(a) if a.validate().is_ok() => a,
            ProposedAction::Parsed(a) => {
                violations.push(format!("step {t}: invalid action `{a}`"));
                noop_action()
            }
            ProposedAction::Raw(raw) => {
                violations.push(format!("step {t}: unparseable action `{raw}`"));
                noop_action()
            }
        };
        let (next, next_obs) = sandbox::step(&state, &action, &noise)?;
        let terminated = action.is_terminate();
        steps.push(Step {
            observation: obs,
            reasoning: out.reasoning,
            action,
            loss_mask: true,
            state_hash: sandbox::state_hash(&state),
            relaxed_hash: sandbox::relaxed_state_hash(&state),
            response: Some(out.response),
        });
        state = next;
        obs = next_obs;
        if terminated {
            end = EpisodeEnd::Terminated;
            break;
        }
    }

    let reward = evaluate_reward(&task.validator, &state)?;
    let trajectory = Trajectory {
        task_id: task.id.clone(),
        seed,
        reward,
        terminal_state_hash: sandbox::state_hash(&state),
        steps,
    };
    Ok(EpisodeOutcome { trajectory, end, violations, terminal_state: state })
}
