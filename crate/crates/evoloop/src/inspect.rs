//! Read-only per-step reports of trajectories and preference pairs.

use std::fmt::Write as _;

use evoloop_core::action::serialize_action;
use evoloop_core::model::{Observation, Task, Trajectory};
use evoloop_core::preference::{PairResponse, PreferencePair};
use evoloop_core::sandbox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Text,
    Html,
}

fn screen_summary(obs: &Observation) -> String {
    let focused = obs.focused().map(|w| w.label()).unwrap_or_else(|| "nothing".into());
    let mut texts: Vec<String> = obs
        .widgets
        .iter()
        .filter(|w| !w.text.is_empty())
        .take(4)
        .map(|w| format!("{}={:?}", w.id, w.text.lines().next().unwrap_or("")))
        .collect();
    if obs.widgets.len() > 4 {
        texts.push("…".into());
    }
    format!("{} widgets, focus on {focused}; {}", obs.widgets.len(), texts.join(", "))
}

/// Replayed verdict of the trajectory's actions, when the task is known.
fn replay_verdict(task: &Task, traj: &Trajectory) -> String {
    let actions: Vec<_> = traj.actions().cloned().collect();
    match sandbox::replay(task, traj.seed, &actions).and_then(|s| task.validator.evaluate(&s)) {
        Ok(v) => {
            let agree = if v as u8 == traj.reward { "matches" } else { "DIFFERS FROM" };
            format!("replayed verdict {} {agree} recorded reward", if v { "PASS" } else { "FAIL" })
        }
        Err(e) => format!("replay failed: {e}"),
    }
}

pub fn trajectory_report(traj: &Trajectory, task: Option<&Task>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "trajectory {} (task {}, seed {})", traj.id(), traj.task_id, traj.seed);
    if let Some(t) = task {
        let _ = writeln!(s, "instruction: {}", t.instruction);
    }
    for (i, st) in traj.steps.iter().enumerate() {
        let tag = if st.loss_mask { "" } else { "  [MASKED]" };
        let _ = writeln!(s, "--- frame {i}{tag}");
        let _ = writeln!(s, "  state:     {}", &st.state_hash.to_hex()[..16]);
        let _ = writeln!(s, "  screen:    {}", screen_summary(&st.observation));
        let _ = writeln!(s, "  reasoning: {}", st.reasoning.replace('\n', " "));
        let _ = writeln!(s, "  action:    {}", serialize_action(&st.action));
    }
    let masked = traj.steps.iter().filter(|s| !s.loss_mask).count();
    let _ = writeln!(
        s,
        "=== verdict: {}  steps: {}  masked: {masked}  terminal: {}",
        if traj.reward == 1 { "PASS" } else { "FAIL" },
        traj.steps.len(),
        &traj.terminal_state_hash.to_hex()[..16]
    );
    if let Some(t) = task {
        let _ = writeln!(s, "=== {}", replay_verdict(t, traj));
    }
    s
}

fn side(label: &str, r: &PairResponse) -> [String; 3] {
    [label.to_string(), format!("z: {}", r.reasoning.replace('\n', " ")), format!("a: {}", serialize_action(&r.action))]
}

pub fn pair_report(index: usize, pair: &PreferencePair) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "pair {index} ({:?}) fail {} vs ref {} at t*={}, shown at step {}",
        pair.paradigm, pair.source.fail_traj_id, pair.source.ref_traj_id, pair.source.t_star, pair.context.step_index
    );
    let _ = writeln!(s, "screen: {}", screen_summary(&pair.observation));
    let (c, r) = (side("CHOSEN", &pair.chosen), side("REJECTED", &pair.rejected));
    let width = c.iter().map(|x| x.chars().count()).max().unwrap_or(0).min(70);
    for (a, b) in c.iter().zip(&r) {
        let a: String = a.chars().take(70).collect();
        let _ = writeln!(s, "{a:<width$} | {b}");
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Wraps a text report in a static HTML page.
pub fn to_html(title: &str, text: &str) -> String {
    let mut body = String::new();
    for line in text.lines() {
        let cls = if line.contains("[MASKED]") { " class=\"masked\"" } else { "" };
        let _ = writeln!(body, "<div{cls}>{}</div>", escape(line));
    }
    format!(
        "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>{}</title>\
         <style>body{{font-family:monospace;white-space:pre}} .masked{{color:#999;text-decoration:line-through}}</style>\
         </head><body>\n{body}</body></html>\n",
        escape(title)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use evoloop_core::episode::run_episode;
    use evoloop_core::policy::ScriptedPolicy;
    use evoloop_core::rft::denoise;
    use evoloop_core::sandbox::NoiseConfig;
    use evoloop_core::synthesis::{synthesize_task, Family, Scenario, TemplateArchitect};

    fn task() -> Task {
        let sc = Scenario { role: "teacher".into(), capability: "office/x".into(), family: Family::MaxPerRow, resource_seed: 4 };
        synthesize_task(&TemplateArchitect, &sc, 1).unwrap().task
    }

    #[test]
    fn one_frame_per_step_and_masked_tags() {
        let t = task();
        let mut tr = run_episode(&t, &ScriptedPolicy::ground_truth(), 30, &NoiseConfig::off(), 0).unwrap().trajectory;
        let rep = trajectory_report(&tr, Some(&t));
        assert_eq!(rep.matches("--- frame").count(), tr.steps.len());
        assert!(rep.contains("verdict: PASS"));
        assert!(rep.contains("matches recorded reward"));
        let a = tr.steps[1].clone();
        tr.steps.insert(1, a);
        let (d, _) = denoise(&tr, true).unwrap();
        let rep = trajectory_report(&d, None);
        assert!(rep.contains("[MASKED]"));
        assert!(to_html("x", &rep).contains("class=\"masked\""));
    }
}
