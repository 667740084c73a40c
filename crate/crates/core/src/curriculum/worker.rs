use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample_start;
use crate::demo::Demonstration;
use crate::env::{Action, EnvSpec, Environment, Observation};
use crate::error::{Error, Result};
use crate::learner::{TransitionBatch, TransitionRecord};
use crate::policy::{log_softmax, ActMode, HiddenState, Policy, PolicyParams};

/// Where episodes begin.
#[derive(Debug, Clone)]
pub enum StartSource {
    /// Restore demonstration states chosen by the curriculum.
    Demo(Arc<Demonstration>),
    /// Always reset to the environment's initial state.
    Reset,
}

/// A finished episode as seen by the worker that ran it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub tau_star: usize,
    pub warmup_steps: usize,
    pub live_actions: Vec<u32>,
    pub live_return: f64,
    /// Demonstration suffix return from `tau_star`, when starting from a demo.
    pub required_return: Option<f64>,
    pub success: bool,
}

/// What a worker sends to the optimizer after `L` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBatch {
    pub worker_id: usize,
    pub tau_used: usize,
    pub policy_version: u64,
    pub batch: TransitionBatch,
    /// W: finished episodes that tied or beat the demonstration.
    pub success_count: u64,
    pub episodes_finished: u64,
    pub episodes: Vec<EpisodeLog>,
    /// τ* of every episode that began during this batch.
    pub started: Vec<usize>,
}

impl RolloutBatch {
    pub fn live_steps(&self) -> usize {
        self.batch.live_count()
    }

    pub fn warmup_steps(&self) -> usize {
        self.batch.warmup_count()
    }
}

#[derive(Debug, Clone)]
struct Episode {
    tau_star: usize,
    counter: usize,
    warmup_steps: usize,
    hidden: HiddenState,
    live_actions: Vec<u32>,
    live_return: f64,
}

/// One rollout worker with a private environment.
pub struct Worker {
    pub id: usize,
    env: Box<dyn Environment>,
    source: StartSource,
    policy: Policy,
    window: usize,
    warmup: usize,
    batch_steps: usize,
    seed: u64,
    episode: Option<Episode>,
}

impl std::fmt::Debug for Worker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Worker").field("id", &self.id).field("env", &self.env.env_id()).finish()
    }
}

/// Deterministic per-(seed, worker, iteration) stream.
pub(crate) fn derive_rng(seed: u64, worker: usize, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((worker as u64) << 40) ^ iteration);
    rng
}

impl Worker {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: usize,
        spec: &EnvSpec,
        source: StartSource,
        policy: Policy,
        window: usize,
        warmup: usize,
        batch_steps: usize,
        seed: u64,
    ) -> Result<Self> {
        if let StartSource::Demo(demo) = &source {
            let demo_spec = demo.env_spec()?;
            if &demo_spec != spec {
                return Err(Error::Incompatible("demonstration was recorded in a different environment".into()));
            }
            if !demo.is_finalized() {
                return Err(Error::validation("demonstration is not finalized"));
            }
        }
        if batch_steps == 0 {
            return Err(Error::validation("batch_steps must be at least 1"));
        }
        let env = spec.build()?;
        if env.action_count() != policy.action_count || spec.observation_kind() != policy.encoder.kind() {
            return Err(Error::Incompatible("policy does not match the environment".into()));
        }
        Ok(Self { id, env, source, policy, window, warmup, batch_steps, seed, episode: None })
    }

    /// Warmup steps still owed by the episode in progress.
    pub fn pending_warmup(&self) -> usize {
        self.episode.as_ref().map_or(0, |e| e.tau_star - e.counter.min(e.tau_star))
    }

    fn begin(&mut self, tau: usize, rng: &mut ChaCha8Rng) -> Result<usize> {
        let (tau_star, counter) = match &self.source {
            StartSource::Reset => {
                self.env.reset();
                (0, 0)
            }
            StartSource::Demo(demo) => {
                let tau_star = sample_start(tau, self.window, rng).min(demo.last_start_index());
                let counter = tau_star.saturating_sub(self.warmup);
                let snap = demo.snapshot(counter).ok_or_else(|| Error::validation("demonstration index out of range"))?;
                self.env.restore(snap)?;
                (tau_star, counter)
            }
        };
        self.episode = Some(Episode {
            tau_star,
            counter,
            warmup_steps: tau_star - counter,
            hidden: self.policy.initial_hidden(),
            live_actions: Vec::new(),
            live_return: 0.0,
        });
        Ok(tau_star)
    }

    /// Run exactly `L` environment steps under `params`, starting new
    /// episodes around `tau` as old ones finish.
    pub fn run_iteration(&mut self, params: &PolicyParams, tau: usize, iteration: u64) -> Result<RolloutBatch> {
        let mut rng = derive_rng(self.seed, self.id, iteration);
        let mut out = RolloutBatch {
            worker_id: self.id,
            tau_used: tau,
            policy_version: params.version,
            batch: TransitionBatch::default(),
            success_count: 0,
            episodes_finished: 0,
            episodes: Vec::new(),
            started: Vec::new(),
        };
        for _ in 0..self.batch_steps {
            if self.episode.is_none() {
                let t = self.begin(tau, &mut rng)?;
                out.started.push(t);
            }
            let ep = self.episode.as_mut().expect("episode started above");
            let observation = self.env.observe();
            let key = self.policy.encode(&observation)?;
            if ep.counter < ep.tau_star {
                let StartSource::Demo(demo) = &self.source else { unreachable!("reset starts have no warmup") };
                let step = &demo.steps()[ep.counter];
                let logp = log_softmax(&self.policy.logits_for_key(&params.values, key, &ep.hidden));
                self.env.step(step.action)?;
                out.batch.transitions.push(TransitionRecord {
                    observation,
                    hidden: ep.hidden.clone(),
                    action: step.action.0,
                    reward: step.reward,
                    done: step.done,
                    mask: false,
                    log_prob: logp.get(step.action.index()).copied().unwrap_or(f64::NEG_INFINITY),
                    policy_version: params.version,
                    time_index: ep.counter,
                });
                ep.hidden = self.policy.advance(&ep.hidden, key);
                ep.counter += 1;
                continue;
            }
            let act = self.policy.act(params, &observation, &ep.hidden, ActMode::Sample, &mut rng)?;
            let result = self.env.step(Action(act.action as u32))?;
            out.batch.transitions.push(TransitionRecord {
                observation,
                hidden: std::mem::replace(&mut ep.hidden, act.hidden),
                action: act.action as u32,
                reward: result.reward,
                done: result.done,
                mask: true,
                log_prob: act.log_prob,
                policy_version: params.version,
                time_index: ep.counter,
            });
            ep.counter += 1;
            ep.live_actions.push(act.action as u32);
            ep.live_return += result.reward;
            if result.done {
                let ep = self.episode.take().expect("episode in progress");
                let required_return = match &self.source {
                    StartSource::Demo(demo) => Some(demo.suffix_return(ep.tau_star)?),
                    StartSource::Reset => None,
                };
                let success = required_return.is_some_and(|r| ep.live_return >= r);
                out.episodes_finished += 1;
                out.success_count += success as u64;
                out.episodes.push(EpisodeLog {
                    tau_star: ep.tau_star,
                    warmup_steps: ep.warmup_steps,
                    live_actions: ep.live_actions,
                    live_return: ep.live_return,
                    required_return,
                    success,
                });
            }
        }
        if let Some(ep) = &self.episode {
            if ep.counter >= ep.tau_star {
                out.batch.bootstrap = Some(self.env.observe());
            }
        }
        Ok(out)
    }

    /// Drop the episode in progress so the next iteration starts fresh.
    pub fn abandon_episode(&mut self) {
        self.episode = None;
    }

    pub fn current_observation(&self) -> Observation {
        self.env.observe()
    }
}
