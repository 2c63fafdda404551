//! Unified native action space: grammar, canonical serializer, and the
//! held-key sequence validator.
//!
//! Canonical text form is `kind arg=value`. Every kind takes exactly one
//! argument:
//!
//! | kind | argument |
//! |------|----------|
//! | `key`, `key_down`, `key_up` | `keys=[k1,k2,...]` (1 to 8 keys) |
//! | `type` | `text="..."` (escapes `\"`, `\\`, `\n`, `\r`, `\t`) |
//! | `mouse_move`, `left_click`, `right_click`, `middle_click`, `double_click`, `triple_click`, `left_click_drag` | `coordinate=(x,y)` |
//! | `scroll`, `hscroll` | `pixels=n` (signed; positive is down/right) |
//! | `wait` | `time=s` (seconds, > 0) |
//! | `terminate` | `status=success` or `status=failure` |
//!
//! The JSON form `{"action": "left_click", "args": {"coordinate": [100, 200]}}`
//! is accepted by [`parse_action`] as well.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest accepted key chord.
pub const MAX_KEYS: usize = 8;
/// Largest accepted scroll magnitude.
pub const MAX_SCROLL_PIXELS: i64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(u32, u32)", into = "(u32, u32)")]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

impl Point {
    pub const fn new(x: u32, y: u32) -> Self {
        Point { x, y }
    }
}

impl From<(u32, u32)> for Point {
    fn from((x, y): (u32, u32)) -> Self {
        Point { x, y }
    }
}

impl From<Point> for (u32, u32) {
    fn from(p: Point) -> Self {
        (p.x, p.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminateStatus {
    Success,
    Failure,
}

impl TerminateStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminateStatus::Success => "success",
            TerminateStatus::Failure => "failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", content = "args", rename_all = "snake_case")]
pub enum Action {
    Key { keys: Vec<String> },
    KeyDown { keys: Vec<String> },
    KeyUp { keys: Vec<String> },
    Type { text: String },
    MouseMove { coordinate: Point },
    LeftClick { coordinate: Point },
    RightClick { coordinate: Point },
    MiddleClick { coordinate: Point },
    DoubleClick { coordinate: Point },
    TripleClick { coordinate: Point },
    LeftClickDrag { coordinate: Point },
    Scroll { pixels: i64 },
    #[serde(rename = "hscroll")]
    HScroll { pixels: i64 },
    Wait { time: f64 },
    Terminate { status: TerminateStatus },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionKind {
    Key,
    KeyDown,
    KeyUp,
    Type,
    MouseMove,
    LeftClick,
    RightClick,
    MiddleClick,
    DoubleClick,
    TripleClick,
    LeftClickDrag,
    Scroll,
    HScroll,
    Wait,
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ArgKind {
    Keys,
    Text,
    Coordinate,
    Pixels,
    Time,
    Status,
}

impl ArgKind {
    fn name(self) -> &'static str {
        match self {
            ArgKind::Keys => "keys",
            ArgKind::Text => "text",
            ArgKind::Coordinate => "coordinate",
            ArgKind::Pixels => "pixels",
            ArgKind::Time => "time",
            ArgKind::Status => "status",
        }
    }
}

impl ActionKind {
    pub const ALL: [ActionKind; 15] = [
        ActionKind::Key,
        ActionKind::KeyDown,
        ActionKind::KeyUp,
        ActionKind::Type,
        ActionKind::MouseMove,
        ActionKind::LeftClick,
        ActionKind::RightClick,
        ActionKind::MiddleClick,
        ActionKind::DoubleClick,
        ActionKind::TripleClick,
        ActionKind::LeftClickDrag,
        ActionKind::Scroll,
        ActionKind::HScroll,
        ActionKind::Wait,
        ActionKind::Terminate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Key => "key",
            ActionKind::KeyDown => "key_down",
            ActionKind::KeyUp => "key_up",
            ActionKind::Type => "type",
            ActionKind::MouseMove => "mouse_move",
            ActionKind::LeftClick => "left_click",
            ActionKind::RightClick => "right_click",
            ActionKind::MiddleClick => "middle_click",
            ActionKind::DoubleClick => "double_click",
            ActionKind::TripleClick => "triple_click",
            ActionKind::LeftClickDrag => "left_click_drag",
            ActionKind::Scroll => "scroll",
            ActionKind::HScroll => "hscroll",
            ActionKind::Wait => "wait",
            ActionKind::Terminate => "terminate",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ActionKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    fn arg(self) -> ArgKind {
        match self {
            ActionKind::Key | ActionKind::KeyDown | ActionKind::KeyUp => ArgKind::Keys,
            ActionKind::Type => ArgKind::Text,
            ActionKind::Scroll | ActionKind::HScroll => ArgKind::Pixels,
            ActionKind::Wait => ArgKind::Time,
            ActionKind::Terminate => ArgKind::Status,
            _ => ArgKind::Coordinate,
        }
    }

    pub fn is_pointer(self) -> bool {
        self.arg() == ArgKind::Coordinate
    }
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Key { .. } => ActionKind::Key,
            Action::KeyDown { .. } => ActionKind::KeyDown,
            Action::KeyUp { .. } => ActionKind::KeyUp,
            Action::Type { .. } => ActionKind::Type,
            Action::MouseMove { .. } => ActionKind::MouseMove,
            Action::LeftClick { .. } => ActionKind::LeftClick,
            Action::RightClick { .. } => ActionKind::RightClick,
            Action::MiddleClick { .. } => ActionKind::MiddleClick,
            Action::DoubleClick { .. } => ActionKind::DoubleClick,
            Action::TripleClick { .. } => ActionKind::TripleClick,
            Action::LeftClickDrag { .. } => ActionKind::LeftClickDrag,
            Action::Scroll { .. } => ActionKind::Scroll,
            Action::HScroll { .. } => ActionKind::HScroll,
            Action::Wait { .. } => ActionKind::Wait,
            Action::Terminate { .. } => ActionKind::Terminate,
        }
    }

    /// Builds a keyboard action, normalizing key names.
    pub fn keys(kind: ActionKind, keys: &[&str]) -> Result<Action> {
        let keys = keys.iter().map(|k| normalize_key(k)).collect::<Result<Vec<_>>>()?;
        let a = match kind {
            ActionKind::Key => Action::Key { keys },
            ActionKind::KeyDown => Action::KeyDown { keys },
            ActionKind::KeyUp => Action::KeyUp { keys },
            other => {
                return Err(Error::InvalidAction(format!("{} does not take keys", other.name())))
            }
        };
        a.validate()?;
        Ok(a)
    }

    pub fn pointer(kind: ActionKind, x: u32, y: u32) -> Result<Action> {
        let coordinate = Point::new(x, y);
        Ok(match kind {
            ActionKind::MouseMove => Action::MouseMove { coordinate },
            ActionKind::LeftClick => Action::LeftClick { coordinate },
            ActionKind::RightClick => Action::RightClick { coordinate },
            ActionKind::MiddleClick => Action::MiddleClick { coordinate },
            ActionKind::DoubleClick => Action::DoubleClick { coordinate },
            ActionKind::TripleClick => Action::TripleClick { coordinate },
            ActionKind::LeftClickDrag => Action::LeftClickDrag { coordinate },
            other => {
                return Err(Error::InvalidAction(format!(
                    "{} does not take a coordinate",
                    other.name()
                )))
            }
        })
    }

    pub fn click(x: u32, y: u32) -> Action {
        Action::LeftClick { coordinate: Point::new(x, y) }
    }

    pub fn type_text(text: &str) -> Action {
        Action::Type { text: text.to_owned() }
    }

    /// Single key press. Panics on an invalid key name; meant for literals.
    pub fn press(key: &str) -> Action {
        Action::Key { keys: alloc::vec![normalize_key(key).expect("valid key literal")] }
    }

    pub fn terminate(status: TerminateStatus) -> Action {
        Action::Terminate { status }
    }

    pub fn coordinate(&self) -> Option<Point> {
        match self {
            Action::MouseMove { coordinate }
            | Action::LeftClick { coordinate }
            | Action::RightClick { coordinate }
            | Action::MiddleClick { coordinate }
            | Action::DoubleClick { coordinate }
            | Action::TripleClick { coordinate }
            | Action::LeftClickDrag { coordinate } => Some(*coordinate),
            _ => None,
        }
    }

    /// Returns a copy with the coordinate replaced; coordinate-free actions
    /// are returned unchanged.
    pub fn with_coordinate(&self, p: Point) -> Action {
        let mut a = self.clone();
        match &mut a {
            Action::MouseMove { coordinate }
            | Action::LeftClick { coordinate }
            | Action::RightClick { coordinate }
            | Action::MiddleClick { coordinate }
            | Action::DoubleClick { coordinate }
            | Action::TripleClick { coordinate }
            | Action::LeftClickDrag { coordinate } => *coordinate = p,
            _ => {}
        }
        a
    }

    pub fn key_list(&self) -> Option<&[String]> {
        match self {
            Action::Key { keys } | Action::KeyDown { keys } | Action::KeyUp { keys } => Some(keys),
            _ => None,
        }
    }

    pub fn is_terminate(&self) -> bool {
        matches!(self, Action::Terminate { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Action::Key { keys } | Action::KeyDown { keys } | Action::KeyUp { keys } => {
                if keys.is_empty() {
                    return Err(Error::InvalidAction("keys must not be empty".into()));
                }
                if keys.len() > MAX_KEYS {
                    return Err(Error::InvalidAction(format!(
                        "at most {MAX_KEYS} keys per chord, got {}",
                        keys.len()
                    )));
                }
                for k in keys {
                    let n = normalize_key(k)?;
                    if &n != k {
                        return Err(Error::InvalidAction(format!(
                            "key `{k}` is not in normalized form `{n}`"
                        )));
                    }
                }
                Ok(())
            }
            Action::Wait { time } => {
                if time.is_finite() && *time > 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidAction("time must be > 0".into()))
                }
            }
            Action::Scroll { pixels } | Action::HScroll { pixels } => {
                if pixels.unsigned_abs() > MAX_SCROLL_PIXELS as u64 {
                    Err(Error::InvalidAction(format!(
                        "scroll magnitude exceeds {MAX_SCROLL_PIXELS} pixels"
                    )))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }

    /// Rewrites key names into normalized form (used after JSON decoding).
    pub fn normalized(mut self) -> Result<Action> {
        if let Action::Key { keys } | Action::KeyDown { keys } | Action::KeyUp { keys } = &mut self {
            for k in keys.iter_mut() {
                *k = normalize_key(k)?;
            }
        }
        self.validate()?;
        Ok(self)
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind().name())?;
        f.write_str(" ")?;
        match self {
            Action::Key { keys } | Action::KeyDown { keys } | Action::KeyUp { keys } => {
                write!(f, "keys=[{}]", keys.join(","))
            }
            Action::Type { text } => {
                f.write_str("text=\"")?;
                for c in text.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\r' => f.write_str("\\r")?,
                        '\t' => f.write_str("\\t")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
            Action::Scroll { pixels } | Action::HScroll { pixels } => write!(f, "pixels={pixels}"),
            Action::Wait { time } => write!(f, "time={time}"),
            Action::Terminate { status } => write!(f, "status={}", status.as_str()),
            other => {
                let p = other.coordinate().expect("remaining kinds are pointer actions");
                write!(f, "coordinate=({},{})", p.x, p.y)
            }
        }
    }
}

/// Canonical text form; `parse_action(&serialize_action(a)) == a`.
pub fn serialize_action(a: &Action) -> String {
    a.to_string()
}

/// JSON encoding `{"action": ..., "args": {...}}`.
pub fn action_to_json(a: &Action) -> String {
    serde_json::to_string(a).expect("action JSON encoding cannot fail")
}

const KEY_ALIASES: &[(&str, &str)] = &[
    ("control", "ctrl"),
    ("ctl", "ctrl"),
    ("return", "enter"),
    ("esc", "escape"),
    ("del", "delete"),
    ("bksp", "backspace"),
    ("cmd", "super"),
    ("command", "super"),
    ("win", "super"),
    ("meta", "super"),
    ("option", "alt"),
    ("pgup", "pageup"),
    ("pgdn", "pagedown"),
    ("spacebar", "space"),
    ("arrowleft", "left"),
    ("arrowright", "right"),
    ("arrowup", "up"),
    ("arrowdown", "down"),
];

fn is_reserved_key_char(c: char) -> bool {
    c.is_whitespace() || matches!(c, ',' | '[' | ']' | '"' | '=' | '(' | ')')
}

/// Lowercases a key name and resolves aliases such as `Shift`/`Control`.
pub fn normalize_key(raw: &str) -> Result<String> {
    if raw.is_empty() {
        return Err(Error::InvalidAction("empty key name".into()));
    }
    if let Some(c) = raw.chars().find(|c| is_reserved_key_char(*c)) {
        return Err(Error::InvalidAction(format!("key `{raw}` contains reserved character {c:?}")));
    }
    let lower = raw.to_lowercase();
    Ok(KEY_ALIASES
        .iter()
        .find(|(alias, _)| *alias == lower)
        .map(|(_, canon)| (*canon).to_owned())
        .unwrap_or(lower))
}

/// Parses either the canonical text form or the JSON form of an action.
pub fn parse_action(text: &str) -> Result<Action> {
    let trimmed_start = text.len() - text.trim_start().len();
    if text.trim_start().starts_with('{') {
        return parse_json(text, trimmed_start);
    }
    Parser { src: text, pos: 0 }.action()
}

fn parse_json(text: &str, start: usize) -> Result<Action> {
    let a: Action = serde_json::from_str(text).map_err(|e| Error::Parse {
        offset: start + e.column().saturating_sub(1),
        message: e.to_string(),
    })?;
    a.normalized().map_err(|e| Error::Parse { offset: start, message: e.to_string() })
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

enum Value {
    Keys(Vec<String>),
    Text(String),
    Coordinate(Point),
    Bare(String),
}

impl<'a> Parser<'a> {
    fn err<T>(&self, offset: usize, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse { offset, message: message.into() })
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) -> usize {
        let start = self.pos;
        while self.peek().is_some_and(char::is_whitespace) {
            self.bump();
        }
        self.pos - start
    }

    fn ident(&mut self) -> &'a str {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_alphanumeric() || c == '_') {
            self.bump();
        }
        &self.src[start..self.pos]
    }

    fn expect(&mut self, c: char) -> Result<()> {
        match self.peek() {
            Some(got) if got == c => {
                self.bump();
                Ok(())
            }
            Some(got) => self.err(self.pos, format!("expected {c:?}, found {got:?}")),
            None => self.err(self.pos, format!("expected {c:?}, found end of input")),
        }
    }

    fn action(mut self) -> Result<Action> {
        self.skip_ws();
        let kind_at = self.pos;
        let name = self.ident();
        if name.is_empty() {
            return self.err(kind_at, "expected action kind");
        }
        let kind = match ActionKind::from_name(name) {
            Some(k) => k,
            None => return self.err(kind_at, format!("unknown action kind `{name}`")),
        };
        let want = kind.arg();
        let mut found: Option<(usize, Value)> = None;
        loop {
            let ws = self.skip_ws();
            if self.peek().is_none() {
                break;
            }
            if ws == 0 {
                return self.err(self.pos, "expected whitespace between arguments");
            }
            let arg_at = self.pos;
            let arg = self.ident();
            if arg.is_empty() {
                return self.err(arg_at, "expected argument name");
            }
            self.expect('=')?;
            let value_at = self.pos;
            let value = self.value()?;
            if arg != want.name() {
                return self.err(
                    arg_at,
                    format!("unexpected argument `{arg}` for {} (expects `{}`)", kind.name(), want.name()),
                );
            }
            if found.is_some() {
                return self.err(arg_at, format!("duplicate argument `{arg}`"));
            }
            found = Some((value_at, value));
        }
        let (value_at, value) = match found {
            Some(v) => v,
            None => {
                return self.err(
                    self.pos,
                    format!("{} requires argument `{}`", kind.name(), want.name()),
                )
            }
        };
        let action = self.build(kind, value_at, value)?;
        action
            .validate()
            .map_err(|e| Error::Parse { offset: value_at, message: e.to_string() })?;
        Ok(action)
    }

    fn build(&self, kind: ActionKind, at: usize, value: Value) -> Result<Action> {
        let mismatch = |expected: &str| Error::Parse {
            offset: at,
            message: format!("{} expects {expected}", kind.name()),
        };
        Ok(match (kind.arg(), value) {
            (ArgKind::Keys, Value::Keys(keys)) => match kind {
                ActionKind::Key => Action::Key { keys },
                ActionKind::KeyDown => Action::KeyDown { keys },
                _ => Action::KeyUp { keys },
            },
            (ArgKind::Keys, _) => return Err(mismatch("a key list `[k1,k2]`")),
            (ArgKind::Text, Value::Text(text)) => Action::Type { text },
            (ArgKind::Text, _) => return Err(mismatch("a quoted string")),
            (ArgKind::Coordinate, Value::Coordinate(p)) => {
                Action::pointer(kind, p.x, p.y).expect("pointer kind")
            }
            (ArgKind::Coordinate, _) => return Err(mismatch("a coordinate `(x,y)`")),
            (ArgKind::Pixels, Value::Bare(s)) => {
                let pixels: i64 = s.parse().map_err(|_| mismatch("an integer pixel count"))?;
                if kind == ActionKind::Scroll {
                    Action::Scroll { pixels }
                } else {
                    Action::HScroll { pixels }
                }
            }
            (ArgKind::Pixels, _) => return Err(mismatch("an integer pixel count")),
            (ArgKind::Time, Value::Bare(s)) => {
                let time: f64 = s.parse().map_err(|_| mismatch("a number of seconds"))?;
                Action::Wait { time }
            }
            (ArgKind::Time, _) => return Err(mismatch("a number of seconds")),
            (ArgKind::Status, Value::Bare(s)) => Action::Terminate {
                status: match s.as_str() {
                    "success" => TerminateStatus::Success,
                    "failure" => TerminateStatus::Failure,
                    _ => return Err(mismatch("`success` or `failure`")),
                },
            },
            (ArgKind::Status, _) => return Err(mismatch("`success` or `failure`")),
        })
    }

    fn value(&mut self) -> Result<Value> {
        match self.peek() {
            Some('"') => self.string().map(Value::Text),
            Some('(') => self.coordinate().map(Value::Coordinate),
            Some('[') => self.key_list().map(Value::Keys),
            Some(_) => {
                let start = self.pos;
                while self.peek().is_some_and(|c| !c.is_whitespace()) {
                    self.bump();
                }
                Ok(Value::Bare(self.src[start..self.pos].to_owned()))
            }
            None => self.err(self.pos, "expected a value"),
        }
    }

    fn string(&mut self) -> Result<String> {
        let open = self.pos;
        self.expect('"')?;
        let mut out = String::new();
        loop {
            let at = self.pos;
            match self.bump() {
                None => return self.err(open, "unterminated string"),
                Some('"') => return Ok(out),
                Some('\\') => match self.bump() {
                    Some('"') => out.push('"'),
                    Some('\\') => out.push('\\'),
                    Some('n') => out.push('\n'),
                    Some('r') => out.push('\r'),
                    Some('t') => out.push('\t'),
                    Some(c) => return self.err(at, format!("unknown escape \\{c}")),
                    None => return self.err(at, "unterminated escape"),
                },
                Some(c) => out.push(c),
            }
        }
    }

    fn number_u32(&mut self) -> Result<u32> {
        self.skip_ws();
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.bump();
        }
        let digits = &self.src[start..self.pos];
        if digits.is_empty() {
            return self.err(start, "expected a nonnegative integer coordinate");
        }
        let n = digits
            .parse()
            .or_else(|_| self.err(start, "coordinate does not fit in 32 bits"))?;
        self.skip_ws();
        Ok(n)
    }

    fn coordinate(&mut self) -> Result<Point> {
        self.expect('(')?;
        let x = self.number_u32()?;
        self.expect(',')?;
        let y = self.number_u32()?;
        self.expect(')')?;
        Ok(Point::new(x, y))
    }

    fn key_list(&mut self) -> Result<Vec<String>> {
        self.expect('[')?;
        let mut keys = Vec::new();
        loop {
            self.skip_ws();
            let start = self.pos;
            while self.peek().is_some_and(|c| !is_reserved_key_char(c)) {
                self.bump();
            }
            let raw = &self.src[start..self.pos];
            if raw.is_empty() {
                return self.err(start, "expected a key name");
            }
            keys.push(normalize_key(raw).or_else(|e| self.err(start, e.to_string()))?);
            self.skip_ws();
            match self.bump() {
                Some(',') => continue,
                Some(']') => return Ok(keys),
                Some(c) => return self.err(self.pos - c.len_utf8(), format!("unexpected {c:?} in key list")),
                None => return self.err(self.pos, "unterminated key list"),
            }
        }
    }
}

/// Rules checked by [`validate_sequence`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceRule {
    /// A key held by `key_down` is never released.
    UnreleasedKey,
    /// `key_up` of a key that is not held.
    ReleaseNotHeld,
    /// `terminate` anywhere but the final position.
    TerminateNotFinal,
    /// `key_up` releases keys out of reverse-hold order.
    ReleaseOrder,
    /// The sequence does not end with `terminate`.
    MissingTerminate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step_index: usize,
    pub rule: SequenceRule,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SequenceReport {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

/// Checks held-key balance and terminate placement over an action list.
///
/// Held keys form a stack: `key_down [a,b]` pushes `a` then `b`, and
/// `key_up [a,b]` releases `b` then `a`, each release expected at the top.
pub fn validate_sequence(actions: &[Action]) -> SequenceReport {
    let mut violations = Vec::new();
    let mut held: Vec<(String, usize)> = Vec::new();
    let last = actions.len().checked_sub(1);
    for (i, a) in actions.iter().enumerate() {
        match a {
            Action::KeyDown { keys } => {
                held.extend(keys.iter().map(|k| (k.clone(), i)));
            }
            Action::KeyUp { keys } => {
                for k in keys.iter().rev() {
                    match held.iter().rposition(|(h, _)| h == k) {
                        None => violations.push(Violation {
                            step_index: i,
                            rule: SequenceRule::ReleaseNotHeld,
                            message: format!("key_up of `{k}` which is not held"),
                        }),
                        Some(pos) => {
                            if pos + 1 != held.len() {
                                violations.push(Violation {
                                    step_index: i,
                                    rule: SequenceRule::ReleaseOrder,
                                    message: format!(
                                        "`{k}` released before `{}`, which was pressed later",
                                        held[held.len() - 1].0
                                    ),
                                });
                            }
                            held.remove(pos);
                        }
                    }
                }
            }
            Action::Terminate { .. } if Some(i) != last => violations.push(Violation {
                step_index: i,
                rule: SequenceRule::TerminateNotFinal,
                message: "terminate must be the final action".into(),
            }),
            _ => {}
        }
    }
    for (k, at) in held {
        violations.push(Violation {
            step_index: at,
            rule: SequenceRule::UnreleasedKey,
            message: format!("`{k}` is never released"),
        });
    }
    if !actions.last().is_some_and(Action::is_terminate) {
        violations.push(Violation {
            step_index: actions.len(),
            rule: SequenceRule::MissingTerminate,
            message: "sequence does not end with terminate".into(),
        });
    }
    SequenceReport { valid: violations.is_empty(), violations }
}
