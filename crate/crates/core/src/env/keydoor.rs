//! A small side-view platformer with a key and a door.
//!
//! The agent walks, climbs ladders and ropes, leaps two cells with `jump`, and
//! falls under gravity. Falling three or more cells, touching a static hazard,
//! or meeting a patrolling hazard ends the episode with nothing. Picking up the
//! key pays 100 once; entering the door while holding the key pays 300 and
//! ends the episode. Episodes also end, unrewarded, after `max_steps` actions.
//!
//! # Map format
//!
//! ```text
//! # comment
//! max_steps = 120
//! patrol = 6,7 7,7 8,7 7,7      # one line per patrolling hazard, cyclic path of x,y cells
//! ---
//! ##########
//! #S..H...D#
//! ...
//! ```
//!
//! One character per cell: `#` wall, `.` empty, `H` ladder, `|` rope,
//! `^` hazard, `k` key, `D` door, `S` start. Everything outside the map is wall.
//!
//! Payload layout (version 1):
//! `u16 x | u16 y | u8 facing | u8 has_key | u32 tick | u8 outcome`.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    check_snapshot, check_step, Action, EnvSnapshot, Environment, GridObservation, Observation,
    StepResult,
};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const ENV_ID: &str = "key_door_grid";
const VERSION: u32 = 1;

pub const KEY_REWARD: f64 = 100.0;
pub const DOOR_REWARD: f64 = 300.0;
const FATAL_FALL: i32 = 3;

pub const ACTION_NAMES: &[&str] = &["left", "right", "up", "down", "jump", "noop"];

/// The shipped layout.
pub const DEFAULT_MAP: &str = include_str!("../../maps/default.map");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Left = 0,
    Right = 1,
    Up = 2,
    Down = 3,
    Jump = 4,
    Noop = 5,
}

impl Move {
    pub const ALL: [Move; 6] = [Move::Left, Move::Right, Move::Up, Move::Down, Move::Jump, Move::Noop];

    pub fn from_action(a: Action) -> Option<Move> {
        Self::ALL.get(a.index()).copied()
    }

    pub fn action(self) -> Action {
        Action(self as u32)
    }

    pub fn from_name(name: &str) -> Option<Move> {
        ACTION_NAMES.iter().position(|n| *n == name).map(|i| Self::ALL[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    Empty,
    Wall,
    Ladder,
    Rope,
    Hazard,
    Key,
    Door,
}

impl Cell {
    fn from_char(c: char) -> Option<Cell> {
        Some(match c {
            '.' | 'S' => Cell::Empty,
            '#' => Cell::Wall,
            'H' => Cell::Ladder,
            '|' => Cell::Rope,
            '^' => Cell::Hazard,
            'k' => Cell::Key,
            'D' => Cell::Door,
            _ => return None,
        })
    }

    fn to_char(self) -> char {
        match self {
            Cell::Empty => '.',
            Cell::Wall => '#',
            Cell::Ladder => 'H',
            Cell::Rope => '|',
            Cell::Hazard => '^',
            Cell::Key => 'k',
            Cell::Door => 'D',
        }
    }

    fn climbable(self) -> bool {
        matches!(self, Cell::Ladder | Cell::Rope)
    }
}

/// Codes used in [`GridObservation::cells`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum CellCode {
    Empty = 0,
    Wall = 1,
    Ladder = 2,
    Rope = 3,
    Hazard = 4,
    Key = 5,
    Door = 6,
    Patrol = 7,
    Agent = 8,
}

impl From<Cell> for CellCode {
    fn from(c: Cell) -> Self {
        match c {
            Cell::Empty => CellCode::Empty,
            Cell::Wall => CellCode::Wall,
            Cell::Ladder => CellCode::Ladder,
            Cell::Rope => CellCode::Rope,
            Cell::Hazard => CellCode::Hazard,
            Cell::Key => CellCode::Key,
            Cell::Door => CellCode::Door,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Running = 0,
    Door = 1,
    Dead = 2,
    Timeout = 3,
}

impl Outcome {
    fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Outcome::Running,
            1 => Outcome::Door,
            2 => Outcome::Dead,
            3 => Outcome::Timeout,
            _ => return Err(Error::decode(format!("invalid outcome byte {b}"))),
        })
    }

    fn name(self) -> &'static str {
        match self {
            Outcome::Running => "running",
            Outcome::Door => "door",
            Outcome::Dead => "dead",
            Outcome::Timeout => "timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub(crate) struct State {
    x: u16,
    y: u16,
    /// 0 = left, 1 = right.
    facing: u8,
    has_key: bool,
    tick: u32,
    outcome: Outcome,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapText {
    map: String,
}

/// Parsed layout plus patrol paths and the step limit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "MapText", into = "MapText")]
pub struct KeyDoorGridConfig {
    pub width: usize,
    pub height: usize,
    /// Row-major cells; the start cell is stored as `Empty`.
    pub layout: Vec<Cell>,
    pub start: (usize, usize),
    pub hazard_patrols: Vec<Vec<(usize, usize)>>,
    pub max_episode_steps: u32,
}

impl TryFrom<MapText> for KeyDoorGridConfig {
    type Error = Error;

    fn try_from(m: MapText) -> Result<Self> {
        if m.map == "default" {
            return Ok(Self::default_layout());
        }
        Self::parse(&m.map)
    }
}

impl From<KeyDoorGridConfig> for MapText {
    fn from(c: KeyDoorGridConfig) -> Self {
        MapText { map: c.to_map_text() }
    }
}

/// A shortest action sequence reaching the door with the key.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub actions: Vec<Action>,
    pub total_return: f64,
}

impl KeyDoorGridConfig {
    pub fn default_layout() -> Self {
        Self::parse(DEFAULT_MAP).expect("shipped map parses")
    }

    /// Parse the plain-text map format. Checks structure only; solvability is
    /// checked when an environment is built.
    pub fn parse(text: &str) -> Result<Self> {
        let mut max_steps = None;
        let mut patrols = Vec::new();
        let mut lines = text.lines();
        let mut saw_separator = false;
        for raw in lines.by_ref() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if raw.trim() == "---" {
                saw_separator = true;
                break;
            }
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("expected 'key = value', got '{line}'")))?;
            match key.trim() {
                "max_steps" => {
                    let v: u32 = value
                        .trim()
                        .parse()
                        .map_err(|e| Error::validation(format!("bad max_steps: {e}")))?;
                    max_steps = Some(v);
                }
                "patrol" => {
                    let path = value
                        .split_whitespace()
                        .map(|p| {
                            let (x, y) = p
                                .split_once(',')
                                .ok_or_else(|| Error::validation(format!("bad patrol cell '{p}'")))?;
                            let x = x.parse().map_err(|_| Error::validation(format!("bad patrol cell '{p}'")))?;
                            let y = y.parse().map_err(|_| Error::validation(format!("bad patrol cell '{p}'")))?;
                            Ok((x, y))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    patrols.push(path);
                }
                other => return Err(Error::validation(format!("unknown map key '{other}'"))),
            }
        }
        if !saw_separator {
            return Err(Error::validation("map is missing the '---' separator"));
        }
        let rows: Vec<&str> = lines.map(str::trim_end).filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(Error::validation("map has no rows"));
        }
        let width = rows[0].chars().count();
        let height = rows.len();
        if width < 3 || height < 3 {
            return Err(Error::validation("map must be at least 3x3"));
        }
        let mut layout = Vec::with_capacity(width * height);
        let mut start = None;
        let (mut keys, mut doors) = (0, 0);
        for (y, row) in rows.iter().enumerate() {
            if row.chars().count() != width {
                return Err(Error::validation(format!("row {y} has a different width")));
            }
            for (x, ch) in row.chars().enumerate() {
                let cell = Cell::from_char(ch)
                    .ok_or_else(|| Error::validation(format!("unknown map character '{ch}' at {x},{y}")))?;
                match ch {
                    'S' if start.is_some() => return Err(Error::validation("more than one start cell")),
                    'S' => start = Some((x, y)),
                    'k' => keys += 1,
                    'D' => doors += 1,
                    _ => {}
                }
                layout.push(cell);
            }
        }
        let start = start.ok_or_else(|| Error::validation("map has no start cell"))?;
        if keys != 1 || doors != 1 {
            return Err(Error::validation(format!(
                "map needs exactly one key and one door, found {keys} and {doors}"
            )));
        }
        let config = Self {
            width,
            height,
            layout,
            start,
            hazard_patrols: patrols,
            max_episode_steps: max_steps.ok_or_else(|| Error::validation("map is missing max_steps"))?,
        };
        config.check_structure()?;
        Ok(config)
    }

    fn check_structure(&self) -> Result<()> {
        if self.max_episode_steps == 0 {
            return Err(Error::validation("max_steps must be positive"));
        }
        for (i, path) in self.hazard_patrols.iter().enumerate() {
            if path.is_empty() {
                return Err(Error::validation(format!("patrol {i} is empty")));
            }
            for &(x, y) in path {
                if x >= self.width || y >= self.height {
                    return Err(Error::validation(format!("patrol {i} leaves the map at {x},{y}")));
                }
                if matches!(self.at(x, y), Cell::Wall | Cell::Door) {
                    return Err(Error::validation(format!("patrol {i} enters a wall or door at {x},{y}")));
                }
            }
            if path[0] == self.start {
                return Err(Error::validation(format!("patrol {i} starts on the start cell")));
            }
        }
        let (sx, sy) = (self.start.0 as i32, self.start.1 as i32);
        if !self.supported(sx, sy) {
            return Err(Error::validation("start cell is not supported"));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_map_text(&self) -> String {
        let mut out = format!("max_steps = {}\n", self.max_episode_steps);
        for path in &self.hazard_patrols {
            let cells: Vec<String> = path.iter().map(|(x, y)| format!("{x},{y}")).collect();
            out.push_str(&format!("patrol = {}\n", cells.join(" ")));
        }
        out.push_str("---\n");
        for y in 0..self.height {
            for x in 0..self.width {
                if (x, y) == self.start {
                    out.push('S');
                } else {
                    out.push(self.at(x, y).to_char());
                }
            }
            out.push('\n');
        }
        out
    }

    fn at(&self, x: usize, y: usize) -> Cell {
        self.layout[y * self.width + x]
    }

    fn cell(&self, x: i32, y: i32) -> Cell {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            Cell::Wall
        } else {
            self.at(x as usize, y as usize)
        }
    }

    fn passable(&self, x: i32, y: i32, has_key: bool) -> bool {
        match self.cell(x, y) {
            Cell::Wall => false,
            Cell::Door => has_key,
            _ => true,
        }
    }

    fn supported(&self, x: i32, y: i32) -> bool {
        let below = self.cell(x, y + 1);
        self.cell(x, y).climbable() || matches!(below, Cell::Wall | Cell::Door | Cell::Ladder)
    }

    /// Least common multiple of the patrol lengths.
    pub fn patrol_period(&self) -> usize {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        self.hazard_patrols.iter().fold(1, |acc, p| acc / gcd(acc, p.len()) * p.len())
    }

    fn patrol_positions(&self, tick: u32) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.hazard_patrols.iter().map(move |p| p[tick as usize % p.len()])
    }

    fn patrol_hits(&self, x: i32, y: i32, tick: u32) -> bool {
        let here = (x as usize, y as usize);
        self.hazard_patrols
            .iter()
            .any(|p| p[tick as usize % p.len()] == here || p[(tick as usize + 1) % p.len()] == here)
    }

    pub(crate) fn initial_state(&self) -> State {
        State {
            x: self.start.0 as u16,
            y: self.start.1 as u16,
            facing: 1,
            has_key: false,
            tick: 0,
            outcome: Outcome::Running,
        }
    }

    /// One deterministic transition. `s` must be running.
    pub(crate) fn transition(&self, s: &State, mv: Move) -> (State, f64) {
        let mut n = *s;
        let (mut x, mut y) = (s.x as i32, s.y as i32);
        let here = self.cell(x, y);
        let dir = |facing: u8| if facing == 0 { -1 } else { 1 };
        match mv {
            Move::Left | Move::Right => {
                n.facing = if mv == Move::Left { 0 } else { 1 };
                let d = dir(n.facing);
                if self.passable(x + d, y, s.has_key) {
                    x += d;
                }
            }
            Move::Up => {
                if here.climbable() && self.passable(x, y - 1, s.has_key) {
                    y -= 1;
                }
            }
            Move::Down => {
                if (here.climbable() || self.cell(x, y + 1) == Cell::Ladder) && self.passable(x, y + 1, s.has_key) {
                    y += 1;
                }
            }
            Move::Jump => {
                if self.supported(x, y) && !here.climbable() {
                    let d = dir(n.facing);
                    if self.passable(x + d, y, s.has_key) {
                        x += if self.passable(x + 2 * d, y, s.has_key) { 2 * d } else { d };
                    }
                }
            }
            Move::Noop => {}
        }
        n.tick = s.tick + 1;

        if self.cell(x, y) == Cell::Door {
            n.x = x as u16;
            n.y = y as u16;
            n.outcome = Outcome::Door;
            return (n, DOOR_REWARD);
        }

        let mut fall = 0;
        while !self.supported(x, y) {
            y += 1;
            fall += 1;
        }
        n.x = x as u16;
        n.y = y as u16;

        let mut reward = 0.0;
        if fall >= FATAL_FALL || self.cell(x, y) == Cell::Hazard || self.patrol_hits(x, y, s.tick) {
            n.outcome = Outcome::Dead;
        } else if self.cell(x, y) == Cell::Key && !s.has_key {
            n.has_key = true;
            reward = KEY_REWARD;
        }
        if n.outcome == Outcome::Running && n.tick >= self.max_episode_steps {
            n.outcome = Outcome::Timeout;
        }
        (n, reward)
    }

    /// Breadth-first search over the deterministic state graph for the
    /// shortest action sequence that enters the door holding the key.
    pub fn solve(&self) -> Option<Solution> {
        let period = self.patrol_period() as u32;
        type Key = (u16, u16, u8, bool, u32);
        let key_of = |s: &State| -> Key { (s.x, s.y, s.facing, s.has_key, s.tick % period) };
        let start = self.initial_state();
        let mut parent: HashMap<Key, (Key, Move)> = HashMap::new();
        let mut queue = VecDeque::new();
        parent.insert(key_of(&start), (key_of(&start), Move::Noop));
        queue.push_back((start, 0.0));
        while let Some((s, ret)) = queue.pop_front() {
            for mv in Move::ALL {
                let (n, r) = self.transition(&s, mv);
                match n.outcome {
                    Outcome::Door if n.has_key || s.has_key => {
                        let mut actions = vec![mv.action()];
                        let mut k = key_of(&s);
                        let root = key_of(&start);
                        while k != root {
                            let (p, m) = parent[&k];
                            actions.push(m.action());
                            k = p;
                        }
                        actions.reverse();
                        return Some(Solution { actions, total_return: ret + r });
                    }
                    Outcome::Running => {
                        let k = key_of(&n);
                        if let std::collections::hash_map::Entry::Vacant(e) = parent.entry(k) {
                            e.insert((key_of(&s), mv));
                            queue.push_back((n, ret + r));
                        }
                    }
                    _ => {}
                }
            }
        }
        None
    }
}

impl fmt::Display for KeyDoorGridConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_map_text())
    }
}

/// The grid environment. Construction verifies the layout is solvable.
#[derive(Debug, Clone)]
pub struct KeyDoorGrid {
    config: KeyDoorGridConfig,
    period: usize,
    state: State,
}

impl KeyDoorGrid {
    pub fn new(config: KeyDoorGridConfig) -> Result<Self> {
        config.check_structure()?;
        if config.solve().is_none() {
            return Err(Error::validation(
                "layout has no action sequence that reaches the door with the key",
            ));
        }
        let period = config.patrol_period();
        let state = config.initial_state();
        Ok(Self { config, period, state })
    }

    pub fn config(&self) -> &KeyDoorGridConfig {
        &self.config
    }

    pub fn has_key(&self) -> bool {
        self.state.has_key
    }

    pub fn agent(&self) -> (usize, usize) {
        (self.state.x as usize, self.state.y as usize)
    }

    pub fn outcome(&self) -> Outcome {
        self.state.outcome
    }

    fn payload(&self) -> Vec<u8> {
        let s = &self.state;
        let mut w = Writer::new();
        w.u16(s.x).u16(s.y).u8(s.facing).bool(s.has_key).u32(s.tick).u8(s.outcome as u8);
        w.finish()
    }

    fn cell_codes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut cells: Vec<u8> = c
            .layout
            .iter()
            .map(|&cell| {
                if cell == Cell::Key && self.state.has_key {
                    CellCode::Empty as u8
                } else {
                    CellCode::from(cell) as u8
                }
            })
            .collect();
        for (x, y) in c.patrol_positions(self.state.tick) {
            cells[y * c.width + x] = CellCode::Patrol as u8;
        }
        cells[self.state.y as usize * c.width + self.state.x as usize] = CellCode::Agent as u8;
        cells
    }
}

impl Environment for KeyDoorGrid {
    fn env_id(&self) -> &'static str {
        ENV_ID
    }

    fn snapshot_version(&self) -> u32 {
        VERSION
    }

    fn action_count(&self) -> usize {
        Move::ALL.len()
    }

    fn action_names(&self) -> &'static [&'static str] {
        ACTION_NAMES
    }

    fn reset(&mut self) -> Observation {
        self.state = self.config.initial_state();
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation::Grid(GridObservation {
            width: self.config.width,
            height: self.config.height,
            cells: self.cell_codes(),
            agent: self.agent(),
            facing: self.state.facing,
            has_key: self.state.has_key,
            phase: self.state.tick as usize % self.period,
            period: self.period,
        })
    }

    fn is_done(&self) -> bool {
        self.state.outcome != Outcome::Running
    }

    fn step_index(&self) -> u64 {
        self.state.tick as u64
    }

    fn step(&mut self, action: Action) -> Result<StepResult> {
        check_step(self, action)?;
        let mv = Move::from_action(action).expect("checked above");
        let (next, reward) = self.config.transition(&self.state, mv);
        self.state = next;
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: self.is_done(),
            snapshot_after: self.snapshot(),
        })
    }

    fn snapshot(&self) -> EnvSnapshot {
        EnvSnapshot {
            env_id: ENV_ID.into(),
            version: VERSION,
            step_index: self.state.tick as u64,
            payload: self.payload(),
        }
    }

    fn restore(&mut self, snap: &EnvSnapshot) -> Result<()> {
        check_snapshot(self, snap)?;
        let mut r = Reader::new(&snap.payload);
        let s = State {
            x: r.u16()?,
            y: r.u16()?,
            facing: r.u8()?,
            has_key: r.bool()?,
            tick: r.u32()?,
            outcome: Outcome::from_u8(r.u8()?)?,
        };
        r.finish()?;
        if s.x as usize >= self.config.width || s.y as usize >= self.config.height || s.facing > 1 {
            return Err(Error::Incompatible("snapshot position does not fit this layout".into()));
        }
        if s.tick as u64 != snap.step_index {
            return Err(Error::decode("step index disagrees with payload"));
        }
        self.state = s;
        Ok(())
    }

    fn render_view(&self) -> serde_json::Value {
        let c = &self.config;
        let rows: Vec<String> = (0..c.height)
            .map(|y| {
                (0..c.width)
                    .map(|x| match c.at(x, y) {
                        Cell::Key if self.state.has_key => '.',
                        cell => cell.to_char(),
                    })
                    .collect()
            })
            .collect();
        let hazards: Vec<_> = c
            .patrol_positions(self.state.tick)
            .map(|(x, y)| serde_json::json!({ "x": x, "y": y }))
            .collect();
        serde_json::json!({
            "env": ENV_ID,
            "width": c.width,
            "height": c.height,
            "rows": rows,
            "agent": {
                "x": self.state.x,
                "y": self.state.y,
                "facing": if self.state.facing == 0 { "left" } else { "right" },
            },
            "hazards": hazards,
            "has_key": self.state.has_key,
            "outcome": self.state.outcome.name(),
            "done": self.is_done(),
            "step_index": self.state.tick,
            "max_steps": c.max_episode_steps,
        })
    }
}
