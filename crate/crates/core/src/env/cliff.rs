//! Blind cliff walk: an N-state chain with two actions per state. One action
//! advances, the other falls off and ends the episode with reward 0. Reaching
//! past the last state pays 1. The observation is the bare state index, so
//! nothing generalizes across states.
//!
//! Payload layout (version 1): `u32 position | u32 steps | u8 outcome`
//! where outcome is 0 = running, 1 = reached the end, 2 = fell.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_snapshot, check_step, Action, EnvSnapshot, Environment, Observation, StepResult};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub const ENV_ID: &str = "blind_cliff_walk";
const VERSION: u32 = 1;
const ACTION_NAMES: &[&str] = &["a0", "a1"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectActionScheme {
    AllZero,
    Alternating,
    SeededRandom(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlindCliffWalkConfig {
    pub n_states: usize,
    #[serde(default = "default_scheme")]
    pub correct_action_scheme: CorrectActionScheme,
}

fn default_scheme() -> CorrectActionScheme {
    CorrectActionScheme::SeededRandom(0)
}

impl BlindCliffWalkConfig {
    pub fn new(n_states: usize, correct_action_scheme: CorrectActionScheme) -> Self {
        Self { n_states, correct_action_scheme }
    }

    /// Seeded-random correct actions, the default scheme.
    pub fn seeded(n_states: usize, seed: u64) -> Self {
        Self::new(n_states, CorrectActionScheme::SeededRandom(seed))
    }

    pub fn correct_actions(&self) -> Vec<Action> {
        match self.correct_action_scheme {
            CorrectActionScheme::AllZero => vec![Action(0); self.n_states],
            CorrectActionScheme::Alternating => (0..self.n_states).map(|s| Action((s % 2) as u32)).collect(),
            CorrectActionScheme::SeededRandom(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..self.n_states).map(|_| Action(rng.gen_range(0..2))).collect()
            }
        }
    }

    pub(crate) fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.n_states as u32);
        match self.correct_action_scheme {
            CorrectActionScheme::AllZero => w.u8(0).u64(0),
            CorrectActionScheme::Alternating => w.u8(1).u64(0),
            CorrectActionScheme::SeededRandom(s) => w.u8(2).u64(s),
        };
        w.finish()
    }

    pub(crate) fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let n = r.u32()? as usize;
        let tag = r.u8()?;
        let seed = r.u64()?;
        r.finish()?;
        let scheme = match tag {
            0 => CorrectActionScheme::AllZero,
            1 => CorrectActionScheme::Alternating,
            2 => CorrectActionScheme::SeededRandom(seed),
            t => return Err(Error::decode(format!("unknown correct-action scheme tag {t}"))),
        };
        Ok(Self::new(n, scheme))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Running = 0,
    Goal = 1,
    Fell = 2,
}

#[derive(Debug, Clone)]
pub struct BlindCliffWalk {
    config: BlindCliffWalkConfig,
    correct: Vec<Action>,
    position: u32,
    steps: u32,
    outcome: Outcome,
}

impl BlindCliffWalk {
    pub fn new(config: BlindCliffWalkConfig) -> Result<Self> {
        if config.n_states < 2 {
            return Err(Error::validation(format!(
                "blind cliff walk needs at least 2 states, got {}",
                config.n_states
            )));
        }
        let correct = config.correct_actions();
        Ok(Self { config, correct, position: 0, steps: 0, outcome: Outcome::Running })
    }

    pub fn config(&self) -> &BlindCliffWalkConfig {
        &self.config
    }

    pub fn n_states(&self) -> usize {
        self.config.n_states
    }

    pub fn correct_action(&self, state: usize) -> Action {
        self.correct[state]
    }

    pub fn position(&self) -> usize {
        self.position as usize
    }

    fn encode_payload(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.position).u32(self.steps).u8(self.outcome as u8);
        w.finish()
    }
}

impl Environment for BlindCliffWalk {
    fn env_id(&self) -> &'static str {
        ENV_ID
    }

    fn snapshot_version(&self) -> u32 {
        VERSION
    }

    fn action_count(&self) -> usize {
        2
    }

    fn action_names(&self) -> &'static [&'static str] {
        ACTION_NAMES
    }

    fn reset(&mut self) -> Observation {
        self.position = 0;
        self.steps = 0;
        self.outcome = Outcome::Running;
        self.observe()
    }

    fn observe(&self) -> Observation {
        Observation::Index { index: self.position as usize, count: self.config.n_states }
    }

    fn is_done(&self) -> bool {
        self.outcome != Outcome::Running
    }

    fn step_index(&self) -> u64 {
        self.steps as u64
    }

    fn step(&mut self, action: Action) -> Result<StepResult> {
        check_step(self, action)?;
        self.steps += 1;
        let mut reward = 0.0;
        if action != self.correct[self.position as usize] {
            self.outcome = Outcome::Fell;
        } else if self.position as usize == self.config.n_states - 1 {
            self.outcome = Outcome::Goal;
            reward = 1.0;
        } else {
            self.position += 1;
        }
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
            step_index: self.steps as u64,
            payload: self.encode_payload(),
        }
    }

    fn restore(&mut self, s: &EnvSnapshot) -> Result<()> {
        check_snapshot(self, s)?;
        let mut r = Reader::new(&s.payload);
        let position = r.u32()?;
        let steps = r.u32()?;
        let outcome = match r.u8()? {
            0 => Outcome::Running,
            1 => Outcome::Goal,
            2 => Outcome::Fell,
            b => return Err(Error::decode(format!("invalid cliff outcome byte {b}"))),
        };
        r.finish()?;
        if position as usize >= self.config.n_states {
            return Err(Error::Incompatible(format!(
                "position {position} does not exist in a {}-state cliff",
                self.config.n_states
            )));
        }
        if steps as u64 != s.step_index {
            return Err(Error::decode("step index disagrees with payload"));
        }
        self.position = position;
        self.steps = steps;
        self.outcome = outcome;
        Ok(())
    }

    fn render_view(&self) -> serde_json::Value {
        serde_json::json!({
            "env": ENV_ID,
            "n_states": self.config.n_states,
            "position": self.position,
            "outcome": match self.outcome {
                Outcome::Running => "running",
                Outcome::Goal => "goal",
                Outcome::Fell => "fell",
            },
            "done": self.is_done(),
            "step_index": self.steps,
        })
    }
}
