//! The resettable-environment contract.
//!
//! Every task is fully deterministic given its snapshot: all randomness lives
//! in the policy. A snapshot carries the environment id and format version so
//! that state captured under one environment revision is rejected by another.
//!
//! Snapshot wire format (little-endian):
//!
//! ```text
//! u32 len | env_id utf-8
//! u32     | format version
//! u64     | step index
//! u32 len | payload (environment-specific, see each environment module)
//! ```

pub mod cliff;
pub mod keydoor;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};

pub use cliff::{BlindCliffWalk, BlindCliffWalkConfig, CorrectActionScheme};
pub use keydoor::{KeyDoorGrid, KeyDoorGridConfig};

/// Complete, serializable environment state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub env_id: String,
    pub version: u32,
    /// Number of actions applied since the episode's true start.
    pub step_index: u64,
    pub payload: Vec<u8>,
}

impl EnvSnapshot {
    pub fn encode(&self, w: &mut Writer) {
        w.str(&self.env_id).u32(self.version).u64(self.step_index).bytes(&self.payload);
    }

    pub fn decode(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Self {
            env_id: r.str()?.to_owned(),
            version: r.u32()?,
            step_index: r.u64()?,
            payload: r.bytes()?.to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let s = Self::decode(&mut r)?;
        r.finish()?;
        Ok(s)
    }
}

/// A discrete action index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub u32);

impl Action {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<usize> for Action {
    fn from(i: usize) -> Self {
        Action(i as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Index,
    Grid,
}

/// Symbolic grid observation: one cell code per cell plus the scalar
/// attributes a tabular policy needs to key its table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridObservation {
    pub width: usize,
    pub height: usize,
    /// Row-major cell codes, see [`keydoor::CellCode`].
    pub cells: Vec<u8>,
    pub agent: (usize, usize),
    /// 0 = facing left, 1 = facing right.
    pub facing: u8,
    pub has_key: bool,
    /// Patrol phase in `0..period`.
    pub phase: usize,
    pub period: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observation {
    /// Bare state index out of `count` states.
    Index { index: usize, count: usize },
    Grid(GridObservation),
}

impl Observation {
    pub fn kind(&self) -> ObservationKind {
        match self {
            Observation::Index { .. } => ObservationKind::Index,
            Observation::Grid(_) => ObservationKind::Grid,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub snapshot_after: EnvSnapshot,
}

pub trait Environment: Send {
    fn env_id(&self) -> &'static str;

    fn snapshot_version(&self) -> u32;

    fn action_count(&self) -> usize;

    fn action_names(&self) -> &'static [&'static str];

    /// Return to the true initial state.
    fn reset(&mut self) -> Observation;

    fn observe(&self) -> Observation;

    fn is_done(&self) -> bool;

    fn step_index(&self) -> u64;

    fn step(&mut self, action: Action) -> Result<StepResult>;

    fn snapshot(&self) -> EnvSnapshot;

    fn restore(&mut self, snapshot: &EnvSnapshot) -> Result<()>;

    /// Structured state view for clients that draw the environment themselves.
    fn render_view(&self) -> serde_json::Value;
}

/// Shared precondition checks for `step`.
pub(crate) fn check_step(env: &dyn Environment, action: Action) -> Result<()> {
    if env.is_done() {
        return Err(Error::ContractViolation(
            "episode is done; restore or reset before stepping".into(),
        ));
    }
    if action.index() >= env.action_count() {
        return Err(Error::validation(format!(
            "action {} out of range for {} actions",
            action.0,
            env.action_count()
        )));
    }
    Ok(())
}

pub(crate) fn check_snapshot(env: &dyn Environment, s: &EnvSnapshot) -> Result<()> {
    if s.env_id != env.env_id() {
        return Err(Error::Incompatible(format!(
            "snapshot for '{}' cannot restore into '{}'",
            s.env_id,
            env.env_id()
        )));
    }
    if s.version != env.snapshot_version() {
        return Err(Error::Incompatible(format!(
            "snapshot version {} does not match environment version {}",
            s.version,
            env.snapshot_version()
        )));
    }
    Ok(())
}

/// Everything needed to build an environment instance. Its canonical byte
/// form is what demonstration headers store and digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "snake_case")]
pub enum EnvSpec {
    BlindCliffWalk(BlindCliffWalkConfig),
    KeyDoorGrid(KeyDoorGridConfig),
}

impl EnvSpec {
    pub fn env_id(&self) -> &'static str {
        match self {
            EnvSpec::BlindCliffWalk(_) => cliff::ENV_ID,
            EnvSpec::KeyDoorGrid(_) => keydoor::ENV_ID,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::BlindCliffWalk(c) => Box::new(BlindCliffWalk::new(c.clone())?),
            EnvSpec::KeyDoorGrid(c) => Box::new(KeyDoorGrid::new(c.clone())?),
        })
    }

    pub fn config_bytes(&self) -> Vec<u8> {
        match self {
            EnvSpec::BlindCliffWalk(c) => c.to_bytes(),
            EnvSpec::KeyDoorGrid(c) => c.to_map_text().into_bytes(),
        }
    }

    pub fn from_config_bytes(env_id: &str, bytes: &[u8]) -> Result<Self> {
        match env_id {
            cliff::ENV_ID => Ok(EnvSpec::BlindCliffWalk(BlindCliffWalkConfig::from_bytes(bytes)?)),
            keydoor::ENV_ID => {
                let text = std::str::from_utf8(bytes)
                    .map_err(|e| Error::decode(format!("map text is not utf-8: {e}")))?;
                Ok(EnvSpec::KeyDoorGrid(KeyDoorGridConfig::parse(text)?))
            }
            other => Err(Error::Incompatible(format!("unknown environment id '{other}'"))),
        }
    }

    /// SHA-256 over env id and canonical config bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.env_id().as_bytes());
        h.update([0u8]);
        h.update(self.config_bytes());
        h.finalize().into()
    }

    pub fn observation_kind(&self) -> ObservationKind {
        match self {
            EnvSpec::BlindCliffWalk(_) => ObservationKind::Index,
            EnvSpec::KeyDoorGrid(_) => ObservationKind::Grid,
        }
    }
}

impl std::str::FromStr for EnvSpec {
    type Err = Error;

    /// Short forms: `cliff:<n>` or `cliff:<n>:<seed>` for a seeded cliff
    /// walk, and `keydoor` for the default key-door layout.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| t.parse::<u64>().map_err(|_| Error::validation(format!("'{t}' is not a number")));
        match parts.as_slice() {
            ["cliff", n] => Ok(EnvSpec::BlindCliffWalk(BlindCliffWalkConfig::seeded(num(n)? as usize, 0))),
            ["cliff", n, seed] => Ok(EnvSpec::BlindCliffWalk(BlindCliffWalkConfig::seeded(num(n)? as usize, num(seed)?))),
            ["keydoor"] => Ok(EnvSpec::KeyDoorGrid(KeyDoorGridConfig::default_layout())),
            _ => Err(Error::validation(format!("unknown environment '{s}'; use cliff:<n>[:<seed>] or keydoor"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_bytes_round_trip() {
        let s = EnvSnapshot {
            env_id: "x".into(),
            version: 3,
            step_index: 9,
            payload: vec![1, 2, 3],
        };
        assert_eq!(EnvSnapshot::from_bytes(&s.to_bytes()).unwrap(), s);
    }

    #[test]
    fn spec_round_trips_through_config_bytes() {
        let specs = [
            EnvSpec::BlindCliffWalk(BlindCliffWalkConfig::new(7, CorrectActionScheme::SeededRandom(3))),
            EnvSpec::KeyDoorGrid(KeyDoorGridConfig::default_layout()),
        ];
        for spec in specs {
            let back = EnvSpec::from_config_bytes(spec.env_id(), &spec.config_bytes()).unwrap();
            assert_eq!(back, spec);
            assert_eq!(back.digest(), spec.digest());
        }
    }

    #[test]
    fn digest_distinguishes_configs() {
        let a = EnvSpec::BlindCliffWalk(BlindCliffWalkConfig::new(4, CorrectActionScheme::AllZero));
        let b = EnvSpec::BlindCliffWalk(BlindCliffWalkConfig::new(5, CorrectActionScheme::AllZero));
        assert_ne!(a.digest(), b.digest());
    }
}
