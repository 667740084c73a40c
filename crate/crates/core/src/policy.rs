//! Softmax policies over a discrete state encoding.
//!
//! Both policies are linear in their parameters: the logits for a state are
//! the sum of one or two parameter rows of length `action_count`. The learner
//! relies on that structure (see [`Policy::rows`]) to differentiate log
//! probabilities without a general autodiff.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, Observation, ObservationKind};
use crate::error::{Error, Result};

/// A versioned parameter vector. Only the optimizer produces new versions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub version: u64,
    pub values: Vec<f64>,
}

/// Maps an observation to a state index for table lookup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservationEncoder {
    Index { count: usize },
    /// Key on agent cell, facing, key possession and patrol phase.
    Grid { width: usize, height: usize, period: usize },
}

impl ObservationEncoder {
    pub fn for_spec(spec: &EnvSpec) -> Self {
        match spec {
            EnvSpec::BlindCliffWalk(c) => ObservationEncoder::Index { count: c.n_states },
            EnvSpec::KeyDoorGrid(c) => {
                ObservationEncoder::Grid { width: c.width, height: c.height, period: c.patrol_period() }
            }
        }
    }

    pub fn kind(&self) -> ObservationKind {
        match self {
            ObservationEncoder::Index { .. } => ObservationKind::Index,
            ObservationEncoder::Grid { .. } => ObservationKind::Grid,
        }
    }

    pub fn state_count(&self) -> usize {
        match *self {
            ObservationEncoder::Index { count } => count,
            ObservationEncoder::Grid { width, height, period } => width * height * 2 * 2 * period,
        }
    }

    pub fn encode(&self, obs: &Observation) -> Result<usize> {
        match (self, obs) {
            (ObservationEncoder::Index { count }, Observation::Index { index, .. }) => {
                if index < count {
                    Ok(*index)
                } else {
                    Err(Error::validation(format!("state index {index} outside {count} states")))
                }
            }
            (ObservationEncoder::Grid { width, height, period }, Observation::Grid(g)) => {
                if g.width != *width || g.height != *height || g.period != *period {
                    return Err(Error::validation("grid observation dimensions do not match the policy"));
                }
                let (x, y) = g.agent;
                let slot = (g.phase * 2 + g.has_key as usize) * 2 + g.facing as usize;
                Ok((slot * height + y) * width + x)
            }
            _ => Err(Error::validation(format!(
                "policy expects {:?} observations, got {:?}",
                self.kind(),
                obs.kind()
            ))),
        }
    }
}

/// Encoded keys of the most recent observations, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HiddenState(pub Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// One logit row per state.
    Tabular,
    /// Tabular row plus a row keyed on the previous observation; the hidden
    /// state is a window of the last `window` observations.
    HistoryWindow { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    #[default]
    Sample,
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActOutput {
    pub action: usize,
    pub log_prob: f64,
    pub hidden: HiddenState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    pub encoder: ObservationEncoder,
    pub action_count: usize,
}

impl Policy {
    pub fn new(kind: PolicyKind, encoder: ObservationEncoder, action_count: usize) -> Self {
        Self { kind, encoder, action_count }
    }

    pub fn tabular(encoder: ObservationEncoder, action_count: usize) -> Self {
        Self::new(PolicyKind::Tabular, encoder, action_count)
    }

    pub fn for_spec(kind: PolicyKind, spec: &EnvSpec) -> Result<Self> {
        let actions = spec.build()?.action_count();
        Ok(Self::new(kind, ObservationEncoder::for_spec(spec), actions))
    }

    pub fn state_count(&self) -> usize {
        self.encoder.state_count()
    }

    pub fn param_count(&self) -> usize {
        let s = self.state_count();
        let a = self.action_count;
        match self.kind {
            PolicyKind::Tabular => s * a,
            // the extra row at index `s` stands for "no previous observation"
            PolicyKind::HistoryWindow { .. } => s * a + (s + 1) * a,
        }
    }

    pub fn initial_params(&self) -> PolicyParams {
        PolicyParams { version: 0, values: vec![0.0; self.param_count()] }
    }

    pub fn initial_hidden(&self) -> HiddenState {
        HiddenState::default()
    }

    pub fn is_stateful(&self) -> bool {
        matches!(self.kind, PolicyKind::HistoryWindow { .. })
    }

    pub fn encode(&self, obs: &Observation) -> Result<usize> {
        self.encoder.encode(obs)
    }

    /// Start offsets of the parameter rows whose sum gives the logits.
    pub fn rows(&self, key: usize, hidden: &HiddenState) -> ([usize; 2], usize) {
        let a = self.action_count;
        match self.kind {
            PolicyKind::Tabular => ([key * a, 0], 1),
            PolicyKind::HistoryWindow { .. } => {
                let s = self.state_count();
                let prev = hidden.0.last().copied().unwrap_or(s);
                ([key * a, s * a + prev * a], 2)
            }
        }
    }

    pub fn logits_for_key(&self, params: &[f64], key: usize, hidden: &HiddenState) -> Vec<f64> {
        let a = self.action_count;
        let (rows, n) = self.rows(key, hidden);
        let mut z = vec![0.0; a];
        for &r in &rows[..n] {
            for (zi, p) in z.iter_mut().zip(&params[r..r + a]) {
                *zi += p;
            }
        }
        z
    }

    pub fn logits(&self, params: &[f64], obs: &Observation, hidden: &HiddenState) -> Result<Vec<f64>> {
        Ok(self.logits_for_key(params, self.encode(obs)?, hidden))
    }

    pub fn probs(&self, params: &[f64], obs: &Observation, hidden: &HiddenState) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(params, obs, hidden)?))
    }

    /// Hidden state after observing `key`.
    pub fn advance(&self, hidden: &HiddenState, key: usize) -> HiddenState {
        match self.kind {
            PolicyKind::Tabular => hidden.clone(),
            PolicyKind::HistoryWindow { window } => {
                if window == 0 {
                    return HiddenState::default();
                }
                let mut h = hidden.0.clone();
                h.push(key);
                if h.len() > window {
                    h.drain(..h.len() - window);
                }
                HiddenState(h)
            }
        }
    }

    /// Pick an action for `obs`. `log_prob` is the exact log probability of
    /// the chosen action under the softmax, in either mode.
    pub fn act<R: Rng + ?Sized>(
        &self,
        params: &PolicyParams,
        obs: &Observation,
        hidden: &HiddenState,
        mode: ActMode,
        rng: &mut R,
    ) -> Result<ActOutput> {
        let key = self.encode(obs)?;
        let z = self.logits_for_key(&params.values, key, hidden);
        let logp = log_softmax(&z);
        let action = match mode {
            ActMode::Greedy => argmax(&z),
            ActMode::Sample => sample_log_probs(&logp, rng),
        };
        Ok(ActOutput { action, log_prob: logp[action], hidden: self.advance(hidden, key) })
    }

    /// Feed a demonstration segment through the state update. Parameters are
    /// not touched, and stateless policies return the initial state.
    pub fn warmup<'a>(&self, observations: impl IntoIterator<Item = &'a Observation>) -> Result<HiddenState> {
        let mut h = self.initial_hidden();
        for obs in observations {
            h = self.advance(&h, self.encode(obs)?);
        }
        Ok(h)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn sample_log_probs<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}
