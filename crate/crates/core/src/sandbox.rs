//! Deterministic simulated desktop with three micro-apps (spreadsheet, text
//! editor, file manager), a symbolic renderer, and an optional noise layer.
//!
//! Geometry is fixed: a 1280x720 screen, a 40px toolbar, 100x20px spreadsheet
//! cells and 24px file rows.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::{Action, TerminateStatus};
use crate::digest::{derive_seed, derive_seed_indexed, rng_from, StateHash};
use crate::error::{Error, Result};
use crate::model::{ObsMeta, Observation, Rect, ScreenDims, Task, Widget, WidgetKind};

pub const SCREEN_WIDTH: u32 = 1280;
pub const SCREEN_HEIGHT: u32 = 720;
pub const TOOLBAR_HEIGHT: u32 = 40;
pub const ROW_HEIGHT: u32 = 20;
pub const COL_WIDTH: u32 = 100;
pub const FILE_ROW_HEIGHT: u32 = 24;
pub const FILE_ITEM_WIDTH: u32 = 400;
pub const MAX_ROWS: u32 = 1000;
pub const MAX_COLS: u32 = 104;
/// Maximum jitter applied to widget bounds when `stable_layout` is off.
pub const LAYOUT_JITTER_PX: i64 = 2;

pub const SCREEN: ScreenDims = ScreenDims { height: SCREEN_HEIGHT, width: SCREEN_WIDTH };

// ---------------------------------------------------------------------------
// Init configuration

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub apps: Vec<AppInit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focused: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AppInit {
    Spreadsheet {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        title: Option<String>,
        rows: u32,
        cols: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        generator: Option<SheetGenerator>,
        /// Literal cell contents keyed by A1-style reference; applied after
        /// the generator.
        #[serde(default)]
        cells: BTreeMap<String, String>,
    },
    TextEditor {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        title: Option<String>,
        #[serde(default)]
        text: String,
    },
    FileManager {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        title: Option<String>,
        #[serde(default)]
        files: BTreeMap<String, String>,
    },
}

impl AppInit {
    pub fn id(&self) -> &str {
        match self {
            AppInit::Spreadsheet { id, .. } | AppInit::TextEditor { id, .. } | AppInit::FileManager { id, .. } => id,
        }
    }
}

/// Parametric data generator for spreadsheet apps. When `seed` is absent the
/// reset seed is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum SheetGenerator {
    /// Uniform integers in `lo..=hi` over the first `cols` columns of every row.
    Integers {
        lo: i64,
        hi: i64,
        cols: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// Header row `Name, Product, Price, Qty, Date` followed by sales lines.
    Sales {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

pub const SALES_NAMES: &[&str] = &["Alice", "Bao", "Carmen", "Dmitri", "Esi", "Farid", "Grace", "Hiro"];
pub const SALES_PRODUCTS: &[&str] = &["Widget", "Gadget", "Sprocket", "Gizmo", "Doohickey"];
pub const SALES_HEADER: [&str; 5] = ["Name", "Product", "Price", "Qty", "Date"];

impl SheetGenerator {
    fn seed(&self) -> Option<u64> {
        match self {
            SheetGenerator::Integers { seed, .. } | SheetGenerator::Sales { seed } => *seed,
        }
    }

    fn fill(&self, grid: &mut [Vec<String>], seed: u64) -> Result<()> {
        let mut rng = rng_from(seed);
        let cols = grid.first().map_or(0, Vec::len);
        match self {
            SheetGenerator::Integers { lo, hi, cols: gen_cols, .. } => {
                if lo > hi || *gen_cols as usize > cols {
                    return Err(Error::Config("integer generator range or width invalid".into()));
                }
                for row in grid.iter_mut() {
                    for cell in row.iter_mut().take(*gen_cols as usize) {
                        *cell = rng.gen_range(*lo..=*hi).to_string();
                    }
                }
            }
            SheetGenerator::Sales { .. } => {
                if cols < SALES_HEADER.len() {
                    return Err(Error::Config("sales generator needs at least 5 columns".into()));
                }
                for (c, h) in SALES_HEADER.iter().enumerate() {
                    grid[0][c] = (*h).to_owned();
                }
                for row in grid.iter_mut().skip(1) {
                    row[0] = SALES_NAMES[rng.gen_range(0..SALES_NAMES.len())].to_owned();
                    row[1] = SALES_PRODUCTS[rng.gen_range(0..SALES_PRODUCTS.len())].to_owned();
                    let cents: u32 = rng.gen_range(100..10_000);
                    row[2] = format!("{}.{:02}", cents / 100, cents % 100);
                    row[3] = rng.gen_range(1..=20u32).to_string();
                    let month: u32 = rng.gen_range(1..=12);
                    let day: u32 = rng.gen_range(1..=28);
                    row[4] = format!("2024-{month:02}-{day:02}");
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// State

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub apps: BTreeMap<String, AppState>,
    pub focused_app: String,
    pub held_keys: Vec<String>,
    pub clipboard: String,
    pub clock: u64,
    /// Inputs whose UI effect is delayed by the noise layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pending: Vec<PendingInput>,
    /// Set by `terminate`; excluded from the state digest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub done: Option<TerminateStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingInput {
    pub due: u64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AppState {
    Spreadsheet(Sheet),
    TextEditor(Editor),
    FileManager(FileBrowser),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppKind {
    Spreadsheet,
    TextEditor,
    FileManager,
}

impl AppState {
    pub fn kind(&self) -> AppKind {
        match self {
            AppState::Spreadsheet(_) => AppKind::Spreadsheet,
            AppState::TextEditor(_) => AppKind::TextEditor,
            AppState::FileManager(_) => AppKind::FileManager,
        }
    }

    fn title(&self) -> &str {
        match self {
            AppState::Spreadsheet(s) => &s.title,
            AppState::TextEditor(e) => &e.title,
            AppState::FileManager(f) => &f.title,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sheet {
    pub title: String,
    pub rows: u32,
    pub cols: u32,
    /// Raw cell contents, row-major. Formulas start with `=`.
    pub cells: Vec<Vec<String>>,
    pub selected: Option<(u32, u32)>,
    pub editing: bool,
    pub scroll_row: u32,
    pub scroll_col: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Editor {
    pub title: String,
    pub buffer: String,
    /// Cursor position in characters.
    pub cursor: usize,
    pub focused: bool,
    pub select_all: bool,
    pub scroll_line: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileBrowser {
    pub title: String,
    pub files: BTreeMap<String, String>,
    pub selected: Option<String>,
    /// Rename buffer while a rename is in progress.
    pub rename: Option<String>,
}

// ---------------------------------------------------------------------------
// Cell references and formulas

/// Parses `A1`-style references into zero-based `(row, col)`.
pub fn parse_cell_ref(s: &str) -> Option<(u32, u32)> {
    let s = s.trim();
    let letters: &str = &s[..s.find(|c: char| !c.is_ascii_alphabetic()).unwrap_or(s.len())];
    let digits = &s[letters.len()..];
    if letters.is_empty() || letters.len() > 3 || digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let mut col: u32 = 0;
    for b in letters.bytes() {
        col = col * 26 + (b.to_ascii_uppercase() - b'A' + 1) as u32;
    }
    let row: u32 = digits.parse().ok()?;
    if row == 0 {
        return None;
    }
    Some((row - 1, col - 1))
}

pub fn column_name(col: u32) -> String {
    let mut n = col + 1;
    let mut out = Vec::new();
    while n > 0 {
        let r = (n - 1) % 26;
        out.push(b'A' + r as u8);
        n = (n - 1) / 26;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

pub fn cell_name(row: u32, col: u32) -> String {
    format!("{}{}", column_name(col), row + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormulaFn {
    Max,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formula {
    pub func: FormulaFn,
    pub from: (u32, u32),
    pub to: (u32, u32),
}

impl Formula {
    /// Parses `=MAX(A1:F1)` / `=SUM(B2:B9)` (case-insensitive).
    pub fn parse(raw: &str) -> Option<Formula> {
        let body = raw.strip_prefix('=')?.trim();
        let open = body.find('(')?;
        let name = body[..open].trim().to_ascii_uppercase();
        let func = match name.as_str() {
            "MAX" => FormulaFn::Max,
            "SUM" => FormulaFn::Sum,
            _ => return None,
        };
        let inner = body[open + 1..].strip_suffix(')')?;
        let (a, b) = inner.split_once(':')?;
        let a = parse_cell_ref(a)?;
        let b = parse_cell_ref(b)?;
        Some(Formula {
            func,
            from: (a.0.min(b.0), a.1.min(b.1)),
            to: (a.0.max(b.0), a.1.max(b.1)),
        })
    }

    fn cells(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (self.from.0..=self.to.0).flat_map(move |r| (self.from.1..=self.to.1).map(move |c| (r, c)))
    }
}

fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v}")
}

impl Sheet {
    fn new(title: String, rows: u32, cols: u32) -> Sheet {
        Sheet {
            title,
            rows,
            cols,
            cells: vec![vec![String::new(); cols as usize]; rows as usize],
            selected: None,
            editing: false,
            scroll_row: 0,
            scroll_col: 0,
        }
    }

    pub fn raw(&self, r: u32, c: u32) -> Option<&str> {
        self.cells.get(r as usize)?.get(c as usize).map(String::as_str)
    }

    fn in_grid(&self, (r, c): (u32, u32)) -> bool {
        r < self.rows && c < self.cols
    }

    /// Numeric value of a cell: literal numbers parse, formulas evaluate,
    /// text and empty cells are `None`.
    pub fn numeric(&self, r: u32, c: u32) -> Option<f64> {
        self.numeric_guarded(r, c, 0)
    }

    fn numeric_guarded(&self, r: u32, c: u32, depth: u32) -> Option<f64> {
        if depth > self.rows * self.cols + 1 {
            return None;
        }
        let raw = self.raw(r, c)?;
        if raw.starts_with('=') {
            let f = Formula::parse(raw)?;
            if !self.in_grid(f.to) {
                return None;
            }
            let vals = f.cells().filter_map(|(rr, cc)| self.numeric_guarded(rr, cc, depth + 1));
            Some(match f.func {
                FormulaFn::Max => vals.fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))).unwrap_or(0.0),
                FormulaFn::Sum => crate::math::compensated_sum(vals),
            })
        } else {
            let v: f64 = raw.trim().parse().ok()?;
            v.is_finite().then_some(v)
        }
    }

    /// Displayed text: formulas show their value (or `#ERR`), other cells
    /// show raw content.
    pub fn display(&self, r: u32, c: u32) -> Option<String> {
        let raw = self.raw(r, c)?;
        if raw.starts_with('=') {
            Some(match self.numeric(r, c) {
                Some(v) => format_number(v),
                None => "#ERR".into(),
            })
        } else {
            Some(raw.to_owned())
        }
    }

    pub fn display_at(&self, cell: &str) -> Option<String> {
        let (r, c) = parse_cell_ref(cell)?;
        self.display(r, c)
    }

    pub fn numeric_at(&self, cell: &str) -> Option<f64> {
        let (r, c) = parse_cell_ref(cell)?;
        self.numeric(r, c)
    }

    /// True if the formula graph reachable from `(r, c)` revisits a cell.
    fn has_cycle_from(&self, start: (u32, u32)) -> bool {
        fn visit(s: &Sheet, at: (u32, u32), stack: &mut BTreeSet<(u32, u32)>, done: &mut BTreeSet<(u32, u32)>) -> bool {
            if stack.contains(&at) {
                return true;
            }
            if done.contains(&at) {
                return false;
            }
            let Some(f) = s.raw(at.0, at.1).and_then(Formula::parse) else {
                done.insert(at);
                return false;
            };
            stack.insert(at);
            for dep in f.cells() {
                if s.in_grid(dep) && visit(s, dep, stack, done) {
                    return true;
                }
            }
            stack.remove(&at);
            done.insert(at);
            false
        }
        visit(self, start, &mut BTreeSet::new(), &mut BTreeSet::new())
    }

    pub fn has_cycle(&self) -> bool {
        (0..self.rows).any(|r| (0..self.cols).any(|c| self.has_cycle_from((r, c))))
    }

    fn visible_rows(&self) -> u32 {
        (SCREEN_HEIGHT - TOOLBAR_HEIGHT) / ROW_HEIGHT
    }

    fn visible_cols(&self) -> u32 {
        SCREEN_WIDTH / COL_WIDTH
    }

    /// Writes raw content, rejecting writes that would create a reference cycle.
    fn write(&mut self, (r, c): (u32, u32), raw: String) -> bool {
        let old = core::mem::replace(&mut self.cells[r as usize][c as usize], raw);
        if self.cells[r as usize][c as usize].starts_with('=') && self.has_cycle_from((r, c)) {
            self.cells[r as usize][c as usize] = old;
            return false;
        }
        true
    }
}

// ---------------------------------------------------------------------------
// Noise

/// Stochastic perturbation of transitions and rendering.
///
/// `strict_keymap` and `stable_layout` model the two calibration patches of a
/// well-prepared desktop image; turning either off lets the noise layer swap
/// shifted symbols or jitter widget bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub perturb_prob: f64,
    #[serde(default)]
    pub latency_steps: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub strict_keymap: bool,
    #[serde(default = "yes")]
    pub stable_layout: bool,
}

fn yes() -> bool {
    true
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { perturb_prob: 0.0, latency_steps: 0, seed: 0, strict_keymap: true, stable_layout: true }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.perturb_prob) {
            return Err(Error::Config("perturb_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.perturb_prob == 0.0 && self.strict_keymap && self.stable_layout
    }
}

// ---------------------------------------------------------------------------
// Reset

/// Materializes a task's initial configuration.
pub fn reset(task: &Task, seed: u64) -> Result<EnvState> {
    materialize(&task.init_config, seed)
}

pub fn materialize(config: &InitConfig, seed: u64) -> Result<EnvState> {
    if config.apps.is_empty() {
        return Err(Error::Config("init config declares no apps".into()));
    }
    let mut apps = BTreeMap::new();
    for app in &config.apps {
        let id = app.id().to_owned();
        if id.is_empty() {
            return Err(Error::Config("app id must not be empty".into()));
        }
        let state = match app {
            AppInit::Spreadsheet { title, rows, cols, generator, cells, .. } => {
                if *rows == 0 || *cols == 0 || *rows > MAX_ROWS || *cols > MAX_COLS {
                    return Err(Error::Config(format!("sheet {id}: bad dimensions {rows}x{cols}")));
                }
                let mut sheet = Sheet::new(title.clone().unwrap_or_else(|| id.clone()), *rows, *cols);
                if let Some(g) = generator {
                    let gseed = g.seed().unwrap_or_else(|| derive_seed(seed, &format!("sheet:{id}")));
                    g.fill(&mut sheet.cells, gseed)?;
                }
                for (name, value) in cells {
                    let at = parse_cell_ref(name)
                        .filter(|rc| sheet.in_grid(*rc))
                        .ok_or_else(|| Error::Config(format!("sheet {id}: bad cell `{name}`")))?;
                    sheet.cells[at.0 as usize][at.1 as usize] = value.clone();
                }
                if sheet.has_cycle() {
                    return Err(Error::Config(format!("sheet {id}: formula cycle")));
                }
                AppState::Spreadsheet(sheet)
            }
            AppInit::TextEditor { title, text, .. } => AppState::TextEditor(Editor {
                title: title.clone().unwrap_or_else(|| id.clone()),
                buffer: text.clone(),
                cursor: text.chars().count(),
                focused: false,
                select_all: false,
                scroll_line: 0,
            }),
            AppInit::FileManager { title, files, .. } => {
                if files.keys().any(String::is_empty) {
                    return Err(Error::Config(format!("file manager {id}: empty file name")));
                }
                AppState::FileManager(FileBrowser {
                    title: title.clone().unwrap_or_else(|| id.clone()),
                    files: files.clone(),
                    selected: None,
                    rename: None,
                })
            }
        };
        if apps.insert(id.clone(), state).is_some() {
            return Err(Error::Config(format!("duplicate app id `{id}`")));
        }
    }
    let focused_app = match &config.focused {
        Some(f) if apps.contains_key(f) => f.clone(),
        Some(f) => return Err(Error::Config(format!("focused app `{f}` is not declared"))),
        None => config.apps[0].id().to_owned(),
    };
    Ok(EnvState {
        apps,
        focused_app,
        held_keys: Vec::new(),
        clipboard: String::new(),
        clock: 0,
        pending: Vec::new(),
        done: None,
    })
}

// ---------------------------------------------------------------------------
// Rendering

/// Symbolic screen of the focused application. Pure function of `state`.
pub fn render(state: &EnvState) -> Observation {
    Observation {
        step_index: state.clock,
        widgets: layout(state),
        screen_dims: SCREEN,
        meta: ObsMeta::default(),
    }
}

fn layout(state: &EnvState) -> Vec<Widget> {
    let Some(app) = state.apps.get(&state.focused_app) else {
        return Vec::new();
    };
    let mut widgets = vec![Widget {
        id: "toolbar".into(),
        kind: WidgetKind::Toolbar,
        bounds: Rect::new(0, 0, SCREEN_WIDTH, TOOLBAR_HEIGHT),
        text: app.title().to_owned(),
        focused: false,
    }];
    match app {
        AppState::Spreadsheet(s) => {
            let row_end = s.rows.min(s.scroll_row + s.visible_rows());
            let col_end = s.cols.min(s.scroll_col + s.visible_cols());
            for r in s.scroll_row..row_end {
                for c in s.scroll_col..col_end {
                    widgets.push(Widget {
                        id: cell_name(r, c),
                        kind: WidgetKind::Cell,
                        bounds: Rect::new(
                            (c - s.scroll_col) * COL_WIDTH,
                            TOOLBAR_HEIGHT + (r - s.scroll_row) * ROW_HEIGHT,
                            COL_WIDTH,
                            ROW_HEIGHT,
                        ),
                        text: s.display(r, c).unwrap_or_default(),
                        focused: s.selected == Some((r, c)),
                    });
                }
            }
        }
        AppState::TextEditor(e) => widgets.push(Widget {
            id: "editor".into(),
            kind: WidgetKind::TextArea,
            bounds: Rect::new(0, TOOLBAR_HEIGHT, SCREEN_WIDTH, SCREEN_HEIGHT - TOOLBAR_HEIGHT),
            text: e.buffer.lines().skip(e.scroll_line as usize).collect::<Vec<_>>().join("\n"),
            focused: e.focused,
        }),
        AppState::FileManager(f) => {
            let max_items = ((SCREEN_HEIGHT - TOOLBAR_HEIGHT) / FILE_ROW_HEIGHT) as usize;
            for (i, name) in f.files.keys().take(max_items).enumerate() {
                widgets.push(Widget {
                    id: format!("file:{name}"),
                    kind: WidgetKind::FileItem,
                    bounds: Rect::new(0, TOOLBAR_HEIGHT + i as u32 * FILE_ROW_HEIGHT, FILE_ITEM_WIDTH, FILE_ROW_HEIGHT),
                    text: name.clone(),
                    focused: f.rename.is_none() && f.selected.as_deref() == Some(name.as_str()),
                });
            }
            if let Some(buf) = &f.rename {
                widgets.push(Widget {
                    id: "rename".into(),
                    kind: WidgetKind::Input,
                    bounds: Rect::new(FILE_ITEM_WIDTH + 20, TOOLBAR_HEIGHT, FILE_ITEM_WIDTH, FILE_ROW_HEIGHT),
                    text: buf.clone(),
                    focused: true,
                });
            }
        }
    }
    widgets
}

/// Rendering as seen through the noise layer (layout jitter when
/// `stable_layout` is off).
pub fn render_noisy(state: &EnvState, noise: &NoiseConfig) -> Observation {
    let mut obs = render(state);
    if !noise.stable_layout {
        let mut rng = rng_from(derive_seed_indexed(noise.seed, "layout", state.clock));
        for w in &mut obs.widgets {
            let dx = rng.gen_range(-LAYOUT_JITTER_PX..=LAYOUT_JITTER_PX);
            let dy = rng.gen_range(-LAYOUT_JITTER_PX..=LAYOUT_JITTER_PX);
            let max_x = (SCREEN_WIDTH - w.bounds.w) as i64;
            let max_y = (SCREEN_HEIGHT - w.bounds.h) as i64;
            w.bounds.x = (w.bounds.x as i64 + dx).clamp(0, max_x) as u32;
            w.bounds.y = (w.bounds.y as i64 + dy).clamp(0, max_y) as u32;
        }
    }
    obs
}

// ---------------------------------------------------------------------------
// Transition

/// Applies one action. With `perturb_prob == 0` and calibration flags on this
/// is a pure deterministic function of `(state, action)`.
///
/// Out-of-screen or widget-less pointer actions are no-ops flagged in the
/// returned observation's metadata.
pub fn step(state: &EnvState, action: &Action, noise: &NoiseConfig) -> Result<(EnvState, Observation)> {
    noise.validate()?;
    action.validate()?;
    let mut next = state.clone();
    next.clock += 1;
    let mut meta = ObsMeta::default();

    if state.done.is_none() {
        let mut rng = rng_from(derive_seed_indexed(noise.seed, "transition", state.clock));
        let dropped = noise.perturb_prob > 0.0 && rng.gen::<f64>() < noise.perturb_prob;
        if dropped {
            meta.dropped_input = true;
        } else if let Action::Terminate { status } = action {
            next.done = Some(*status);
        } else {
            let due: Vec<PendingInput> = {
                let (due, keep): (Vec<_>, Vec<_>) =
                    core::mem::take(&mut next.pending).into_iter().partition(|p| p.due <= next.clock);
                next.pending = keep;
                due
            };
            for p in &due {
                apply(&mut next, &p.action, &mut ObsMeta::default());
            }
            let mut action = action.clone();
            if !noise.strict_keymap {
                if let Action::Type { text } = &mut action {
                    *text = text
                        .chars()
                        .map(|c| match c {
                            '<' if rng.gen_bool(0.5) => '>',
                            '>' if rng.gen_bool(0.5) => '<',
                            c => c,
                        })
                        .collect();
                }
            }
            if noise.latency_steps > 0 && !matches!(action, Action::Wait { .. }) {
                next.pending.push(PendingInput { due: next.clock + noise.latency_steps as u64, action });
            } else {
                apply(&mut next, &action, &mut meta);
            }
        }
    }
    check_state(&next)?;
    let mut obs = render_noisy(&next, noise);
    obs.meta = meta;
    Ok((next, obs))
}

fn apply(state: &mut EnvState, action: &Action, meta: &mut ObsMeta) {
    match action {
        Action::KeyDown { keys } => {
            for k in keys {
                if !state.held_keys.contains(k) {
                    state.held_keys.push(k.clone());
                }
            }
            return;
        }
        Action::KeyUp { keys } => {
            state.held_keys.retain(|h| !keys.contains(h));
            return;
        }
        Action::Wait { .. } | Action::Terminate { .. } => return,
        _ => {}
    }
    if let Some(p) = action.coordinate() {
        if p.x >= SCREEN_WIDTH || p.y >= SCREEN_HEIGHT {
            meta.out_of_bounds = true;
            return;
        }
        let obs = render(state);
        let Some(target) = obs.hit_test(p.x, p.y).cloned() else {
            meta.no_target = true;
            return;
        };
        pointer(state, action, &target);
        return;
    }
    match action {
        Action::Type { text } => type_text(state, text),
        Action::Key { keys } => chord(state, keys),
        Action::Scroll { pixels } | Action::HScroll { pixels } => {
            let horizontal = matches!(action, Action::HScroll { .. });
            if let Some(app) = state.apps.get_mut(&state.focused_app) {
                scroll(app, *pixels, horizontal);
            }
        }
        _ => {}
    }
}

fn pointer(state: &mut EnvState, action: &Action, target: &Widget) {
    let Some(app) = state.apps.get_mut(&state.focused_app) else {
        return;
    };
    let selecting = matches!(
        action,
        Action::LeftClick { .. } | Action::DoubleClick { .. } | Action::TripleClick { .. }
    );
    if !selecting {
        return;
    }
    match (app, target.kind) {
        (AppState::Spreadsheet(s), WidgetKind::Cell) => {
            if let Some(rc) = parse_cell_ref(&target.id) {
                s.selected = Some(rc);
                s.editing = false;
            }
        }
        (AppState::TextEditor(e), WidgetKind::TextArea) => {
            e.focused = true;
            e.cursor = e.buffer.chars().count();
            e.select_all = matches!(action, Action::TripleClick { .. });
        }
        (AppState::FileManager(f), WidgetKind::FileItem) => {
            if f.rename.is_none() {
                f.selected = Some(target.text.clone());
            }
        }
        _ => {}
    }
}

fn type_text(state: &mut EnvState, text: &str) {
    let Some(app) = state.apps.get_mut(&state.focused_app) else {
        return;
    };
    match app {
        AppState::Spreadsheet(s) => {
            if let Some(rc) = s.selected {
                let new = if s.editing {
                    let mut v = s.cells[rc.0 as usize][rc.1 as usize].clone();
                    v.push_str(text);
                    v
                } else {
                    text.to_owned()
                };
                if s.write(rc, new) {
                    s.editing = true;
                }
            }
        }
        AppState::TextEditor(e) => {
            if e.focused {
                if e.select_all {
                    e.buffer = text.to_owned();
                    e.select_all = false;
                    e.cursor = e.buffer.chars().count();
                } else {
                    let at = byte_index(&e.buffer, e.cursor);
                    e.buffer.insert_str(at, text);
                    e.cursor += text.chars().count();
                }
            }
        }
        AppState::FileManager(f) => {
            if let Some(buf) = &mut f.rename {
                buf.push_str(text);
            }
        }
    }
}

fn byte_index(s: &str, chars: usize) -> usize {
    s.char_indices().nth(chars).map_or(s.len(), |(i, _)| i)
}

fn chord(state: &mut EnvState, keys: &[String]) {
    let combo = keys.join("+");
    if combo == "alt+tab" {
        let ids: Vec<&String> = state.apps.keys().collect();
        let at = ids.iter().position(|id| **id == state.focused_app).unwrap_or(0);
        state.focused_app = ids[(at + 1) % ids.len()].clone();
        return;
    }
    if combo == "ctrl+c" {
        let copied = match state.apps.get(&state.focused_app) {
            Some(AppState::Spreadsheet(s)) => s.selected.and_then(|(r, c)| s.display(r, c)),
            Some(AppState::TextEditor(e)) if e.focused => Some(e.buffer.clone()),
            Some(AppState::FileManager(f)) => f.selected.clone(),
            _ => None,
        };
        if let Some(c) = copied {
            state.clipboard = c;
        }
        return;
    }
    if combo == "ctrl+v" {
        let clip = state.clipboard.clone();
        type_text(state, &clip);
        return;
    }
    let Some(app) = state.apps.get_mut(&state.focused_app) else {
        return;
    };
    match app {
        AppState::Spreadsheet(s) => sheet_key(s, &combo),
        AppState::TextEditor(e) => editor_key(e, &combo),
        AppState::FileManager(f) => files_key(f, &combo),
    }
}

fn sheet_key(s: &mut Sheet, combo: &str) {
    let Some((r, c)) = s.selected else {
        return;
    };
    match combo {
        "enter" | "down" => {
            s.editing = false;
            s.selected = Some(((r + 1).min(s.rows - 1), c));
        }
        "tab" | "right" => {
            s.editing = false;
            s.selected = Some((r, (c + 1).min(s.cols - 1)));
        }
        "up" => {
            s.editing = false;
            s.selected = Some((r.saturating_sub(1), c));
        }
        "left" => {
            s.editing = false;
            s.selected = Some((r, c.saturating_sub(1)));
        }
        "escape" => s.editing = false,
        "delete" => {
            s.cells[r as usize][c as usize].clear();
            s.editing = false;
        }
        "backspace" => {
            let cell = &mut s.cells[r as usize][c as usize];
            if s.editing {
                let mut v = cell.clone();
                v.pop();
                s.write((r, c), v);
            } else {
                cell.clear();
                s.editing = true;
            }
        }
        _ => {}
    }
}

fn editor_key(e: &mut Editor, combo: &str) {
    if !e.focused {
        return;
    }
    let len = e.buffer.chars().count();
    match combo {
        "ctrl+a" => e.select_all = true,
        "backspace" | "delete" if e.select_all => {
            e.buffer.clear();
            e.cursor = 0;
            e.select_all = false;
        }
        "backspace" => {
            if e.cursor > 0 {
                let at = byte_index(&e.buffer, e.cursor - 1);
                e.buffer.remove(at);
                e.cursor -= 1;
            }
        }
        "delete" => {
            if e.cursor < len {
                let at = byte_index(&e.buffer, e.cursor);
                e.buffer.remove(at);
            }
        }
        "enter" => {
            let at = byte_index(&e.buffer, e.cursor);
            e.buffer.insert(at, '\n');
            e.cursor += 1;
            e.select_all = false;
        }
        "left" => {
            e.cursor = e.cursor.saturating_sub(1);
            e.select_all = false;
        }
        "right" => {
            e.cursor = (e.cursor + 1).min(len);
            e.select_all = false;
        }
        "home" => {
            e.cursor = 0;
            e.select_all = false;
        }
        "end" => {
            e.cursor = len;
            e.select_all = false;
        }
        "escape" => e.select_all = false,
        _ => {}
    }
}

fn files_key(f: &mut FileBrowser, combo: &str) {
    match (combo, f.rename.is_some()) {
        ("f2", false) => {
            if f.selected.is_some() {
                f.rename = Some(String::new());
            }
        }
        ("enter", true) => {
            let buf = f.rename.take().unwrap_or_default();
            if let Some(old) = f.selected.clone() {
                if !buf.is_empty() && !f.files.contains_key(&buf) {
                    let content = f.files.remove(&old).unwrap_or_default();
                    f.files.insert(buf.clone(), content);
                    f.selected = Some(buf);
                }
            }
        }
        ("escape", true) => f.rename = None,
        ("backspace", true) => {
            if let Some(b) = &mut f.rename {
                b.pop();
            }
        }
        ("delete", false) => {
            if let Some(sel) = f.selected.take() {
                f.files.remove(&sel);
            }
        }
        ("down", false) | ("up", false) => {
            let names: Vec<&String> = f.files.keys().collect();
            if names.is_empty() {
                return;
            }
            let at = f.selected.as_ref().and_then(|s| names.iter().position(|n| *n == s));
            let next = match (at, combo) {
                (None, _) => 0,
                (Some(i), "down") => (i + 1).min(names.len() - 1),
                (Some(i), _) => i.saturating_sub(1),
            };
            f.selected = Some(names[next].clone());
        }
        _ => {}
    }
}

fn scroll(app: &mut AppState, pixels: i64, horizontal: bool) {
    match app {
        AppState::Spreadsheet(s) => {
            if horizontal {
                let delta = pixels.div_euclid(COL_WIDTH as i64);
                s.scroll_col = (s.scroll_col as i64 + delta).clamp(0, s.cols as i64 - 1) as u32;
            } else {
                let delta = pixels.div_euclid(ROW_HEIGHT as i64);
                s.scroll_row = (s.scroll_row as i64 + delta).clamp(0, s.rows as i64 - 1) as u32;
            }
        }
        AppState::TextEditor(e) if !horizontal => {
            let lines = e.buffer.lines().count().max(1) as i64;
            let delta = pixels.div_euclid(ROW_HEIGHT as i64);
            e.scroll_line = (e.scroll_line as i64 + delta).clamp(0, lines - 1) as u32;
        }
        _ => {}
    }
}

/// Checks every state invariant.
pub fn check_state(state: &EnvState) -> Result<()> {
    if !state.apps.contains_key(&state.focused_app) {
        return Err(Error::EnvInvariant(format!("focused app `{}` missing", state.focused_app)));
    }
    let mut seen = BTreeSet::new();
    for k in &state.held_keys {
        if !seen.insert(k) {
            return Err(Error::EnvInvariant(format!("key `{k}` held twice")));
        }
    }
    for (id, app) in &state.apps {
        match app {
            AppState::Spreadsheet(s) => {
                if s.cells.len() != s.rows as usize || s.cells.iter().any(|r| r.len() != s.cols as usize) {
                    return Err(Error::EnvInvariant(format!("sheet {id}: grid shape")));
                }
                if s.selected.is_some_and(|rc| !s.in_grid(rc)) {
                    return Err(Error::EnvInvariant(format!("sheet {id}: selection outside grid")));
                }
                if s.has_cycle() {
                    return Err(Error::EnvInvariant(format!("sheet {id}: formula cycle")));
                }
            }
            AppState::TextEditor(e) => {
                if e.cursor > e.buffer.chars().count() {
                    return Err(Error::EnvInvariant(format!("editor {id}: cursor past end")));
                }
            }
            AppState::FileManager(f) => {
                if f.selected.as_ref().is_some_and(|s| !f.files.contains_key(s)) {
                    return Err(Error::EnvInvariant(format!("files {id}: selection missing")));
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Digests

#[derive(Serialize)]
struct DigestView<'a> {
    apps: &'a BTreeMap<String, AppState>,
    focused_app: &'a str,
    held_keys: &'a [String],
    clipboard: &'a str,
    pending: Vec<(u64, &'a Action)>,
}

fn digest_view<'a>(state: &'a EnvState, apps: &'a BTreeMap<String, AppState>) -> DigestView<'a> {
    DigestView {
        apps,
        focused_app: &state.focused_app,
        held_keys: &state.held_keys,
        clipboard: &state.clipboard,
        pending: state.pending.iter().map(|p| (p.due.saturating_sub(state.clock), &p.action)).collect(),
    }
}

/// Stable digest of a state. Ignores the clock and the episode-done marker,
/// so functionally equal states hash equal.
pub fn state_hash(state: &EnvState) -> StateHash {
    StateHash::of_json(&digest_view(state, &state.apps))
}

/// Digest that additionally ignores focus, selection, cursor, and scroll.
pub fn relaxed_state_hash(state: &EnvState) -> StateHash {
    let apps: BTreeMap<String, AppState> = state
        .apps
        .iter()
        .map(|(id, app)| {
            let mut app = app.clone();
            match &mut app {
                AppState::Spreadsheet(s) => {
                    s.selected = None;
                    s.editing = false;
                    s.scroll_row = 0;
                    s.scroll_col = 0;
                }
                AppState::TextEditor(e) => {
                    e.cursor = 0;
                    e.focused = false;
                    e.select_all = false;
                    e.scroll_line = 0;
                }
                AppState::FileManager(f) => f.selected = None,
            }
            (id.clone(), app)
        })
        .collect();
    StateHash::of_json(&digest_view(state, &apps))
}

/// Canonical JSON dump of a state for debugging.
pub fn state_dump(state: &EnvState) -> String {
    serde_json::to_string(state).expect("state JSON encoding cannot fail")
}

/// Replays an action list from reset without noise; returns the terminal state.
pub fn replay(task: &Task, seed: u64, actions: &[Action]) -> Result<EnvState> {
    let noise = NoiseConfig::off();
    let mut state = reset(task, seed)?;
    for a in actions {
        state = step(&state, a, &noise)?.0;
    }
    Ok(state)
}
