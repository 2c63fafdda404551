#![allow(dead_code)]

use std::collections::BTreeMap;

use evoloop_core::action::{Action, ActionKind, Point, TerminateStatus};
use evoloop_core::episode::run_episode;
use evoloop_core::model::{Task, Trajectory, ValidatorSpec};
use evoloop_core::policy::ScriptedPolicy;
use evoloop_core::sandbox::{cell_name, AppInit, InitConfig, NoiseConfig, COL_WIDTH, ROW_HEIGHT, TOOLBAR_HEIGHT};
use evoloop_core::synthesis::{synthesize_task, Family, Scenario, TemplateArchitect};
use proptest::prelude::*;

pub const KEYS: &[&str] = &["a", "z", "1", "ctrl", "shift", "alt", "super", "enter", "tab", "escape", "f2", "up", "down", "left", "right", "backspace", "delete", "home", "end", "space", "-", "/"];

pub fn synth(family: Family, seed: u64) -> Task {
    let sc = Scenario { role: "analyst".into(), capability: "office/test".into(), family, resource_seed: seed };
    synthesize_task(&TemplateArchitect, &sc, 1).unwrap().task
}

pub fn rollout(task: &Task, actions: Vec<Action>, seed: u64) -> Trajectory {
    let mut t = task.clone();
    t.solution = Some(actions);
    run_episode(&t, &ScriptedPolicy::ground_truth(), 64, &NoiseConfig::off(), seed).unwrap().trajectory
}

pub fn cell_center(row: u32, col: u32) -> (u32, u32) {
    (col * COL_WIDTH + COL_WIDTH / 2, TOOLBAR_HEIGHT + row * ROW_HEIGHT + ROW_HEIGHT / 2)
}

/// Literal-cell spreadsheet task with an empty validator.
pub fn sheet_task(id: &str, rows: u32, cols: u32, cells: &[(u32, u32, String)]) -> Task {
    let cells: BTreeMap<String, String> = cells.iter().map(|(r, c, v)| (cell_name(*r, *c), v.clone())).collect();
    Task {
        id: id.into(),
        instruction: "Edit the sheet.".into(),
        validator: ValidatorSpec::default(),
        init_config: InitConfig {
            apps: vec![AppInit::Spreadsheet { id: "sheet".into(), title: None, rows, cols, generator: None, cells }],
            focused: None,
        },
        domain_tag: "office/spreadsheet/test".into(),
        feasible: true,
        family: String::new(),
        solution: None,
    }
}

/// Three apps, focused on a random one.
pub fn desktop_task(files: Vec<String>, text: String, focus: usize) -> Task {
    let mut t = sheet_task("desk", 6, 4, &[(0, 0, "5".into()), (1, 0, "7".into()), (2, 0, "=SUM(A1:A2)".into())]);
    t.init_config.apps.push(AppInit::TextEditor { id: "editor".into(), title: None, text });
    t.init_config
        .apps
        .push(AppInit::FileManager { id: "files".into(), title: None, files: files.into_iter().map(|f| (f, "x".into())).collect() });
    t.init_config.focused = Some(["sheet", "editor", "files"][focus % 3].into());
    t
}

pub fn arb_keys() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(KEYS), 1..=4).prop_map(|v| v.into_iter().map(String::from).collect())
}

pub fn arb_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z0-9 =():,.+-]{0,16}",
        "\\PC{0,12}",
        prop::sample::select(vec!["\"q\"", "a\\b", "line\nnext", "tab\there", "\r", "=SUM(A1:B2)"]).prop_map(String::from),
    ]
}

pub fn arb_point(max_x: u32, max_y: u32) -> impl Strategy<Value = Point> {
    (0..=max_x, 0..=max_y).prop_map(|(x, y)| Point::new(x, y))
}

/// Any valid action of the given kind.
pub fn arb_action_of(kind: ActionKind, max_x: u32, max_y: u32) -> BoxedStrategy<Action> {
    match kind {
        ActionKind::Key => arb_keys().prop_map(|keys| Action::Key { keys }).boxed(),
        ActionKind::KeyDown => arb_keys().prop_map(|keys| Action::KeyDown { keys }).boxed(),
        ActionKind::KeyUp => arb_keys().prop_map(|keys| Action::KeyUp { keys }).boxed(),
        ActionKind::Type => arb_text().prop_map(|text| Action::Type { text }).boxed(),
        ActionKind::Scroll => (-1_000_000i64..=1_000_000).prop_map(|pixels| Action::Scroll { pixels }).boxed(),
        ActionKind::HScroll => (-1_000_000i64..=1_000_000).prop_map(|pixels| Action::HScroll { pixels }).boxed(),
        ActionKind::Wait => prop_oneof![1e-6f64..1e6, (1u32..600).prop_map(|s| s as f64 / 4.0)]
            .prop_map(|time| Action::Wait { time })
            .boxed(),
        ActionKind::Terminate => prop::bool::ANY
            .prop_map(|ok| Action::terminate(if ok { TerminateStatus::Success } else { TerminateStatus::Failure }))
            .boxed(),
        pointer => arb_point(max_x, max_y)
            .prop_map(move |p| Action::pointer(pointer, p.x, p.y).unwrap())
            .boxed(),
    }
}

pub fn arb_action(max_x: u32, max_y: u32) -> impl Strategy<Value = Action> {
    prop::sample::select(ActionKind::ALL.to_vec()).prop_flat_map(move |k| arb_action_of(k, max_x, max_y))
}
