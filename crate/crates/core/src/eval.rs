//! Episode playback under optional action perturbations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, Environment};
use crate::error::{Error, Result};
use crate::policy::{ActMode, Policy, PolicyParams};

/// How actions are chosen during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "p", rename_all = "snake_case")]
pub enum EvalMode {
    Greedy,
    Sample,
    /// Repeat the previous action with probability `p`, otherwise sample.
    Sticky(f64),
    /// Replace the greedy action with a uniform one with probability `p`.
    EpsilonRandom(f64),
}

impl EvalMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EvalMode::Sticky(p) | EvalMode::EpsilonRandom(p) if !(0.0..=1.0).contains(&p) => {
                Err(Error::validation(format!("perturbation probability {p} outside [0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    /// Parses `greedy`, `sample`, `sticky:<p>` or `epsilon:<p>`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, p) = match s.split_once(':') {
            Some((n, p)) => {
                let p: f64 = p.parse().map_err(|_| Error::validation(format!("bad probability in '{s}'")))?;
                (n, Some(p))
            }
            None => (s, None),
        };
        let mode = match (name, p) {
            ("greedy", None) => EvalMode::Greedy,
            ("sample", None) => EvalMode::Sample,
            ("sticky", Some(p)) => EvalMode::Sticky(p),
            ("epsilon" | "epsilon_random", Some(p)) => EvalMode::EpsilonRandom(p),
            _ => return Err(Error::validation(format!("unknown evaluation mode '{s}'"))),
        };
        mode.validate()?;
        Ok(mode)
    }
}

/// Play one episode from the environment's initial state and return the
/// total reward and step count. Stops after `max_steps` if the environment
/// has not ended by then.
pub fn play_episode<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    policy: &Policy,
    params: &PolicyParams,
    mode: EvalMode,
    max_steps: usize,
    rng: &mut R,
) -> Result<(f64, usize)> {
    let mut obs = env.reset();
    let mut hidden = policy.initial_hidden();
    let mut previous: Option<usize> = None;
    let mut total = 0.0;
    let mut steps = 0;
    while steps < max_steps {
        let action = match mode {
            EvalMode::Greedy | EvalMode::Sample => {
                let m = if mode == EvalMode::Greedy { ActMode::Greedy } else { ActMode::Sample };
                let out = policy.act(params, &obs, &hidden, m, rng)?;
                hidden = out.hidden;
                out.action
            }
            EvalMode::Sticky(p) => {
                let repeat = p > 0.0 && previous.is_some() && rng.gen::<f64>() < p;
                let out = policy.act(params, &obs, &hidden, ActMode::Sample, rng)?;
                hidden = out.hidden;
                if repeat {
                    previous.expect("checked above")
                } else {
                    out.action
                }
            }
            EvalMode::EpsilonRandom(p) => {
                let out = policy.act(params, &obs, &hidden, ActMode::Greedy, rng)?;
                hidden = out.hidden;
                if rng.gen::<f64>() < p {
                    rng.gen_range(0..policy.action_count)
                } else {
                    out.action
                }
            }
        };
        let r = env.step(Action(action as u32))?;
        previous = Some(action);
        total += r.reward;
        steps += 1;
        obs = r.observation;
        if r.done {
            break;
        }
    }
    Ok((total, steps))
}
