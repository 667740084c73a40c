use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{optimizer_step, Checkpoint, CurriculumState, RolloutBatch, StartSource, Worker};
use crate::config::{Condition, RunConfig};
use crate::demo::{validate_replay, Demonstration};
use crate::error::{Error, Result};
use crate::eval::{play_episode, EvalMode};
use crate::learner::{Learner, LearnerConfig};
use crate::policy::{Policy, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// τ > 0: episodes start from demonstration states.
    Curriculum,
    /// τ = 0: training from the true start until greedy play succeeds.
    FromStart,
}

/// Progress report emitted after every optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStatus {
    pub iteration: u64,
    pub tau: usize,
    pub phase: Phase,
    /// Aggregated success ratio the τ decision was based on.
    pub success_ratio: Option<f64>,
    pub tau_moved: bool,
    /// Mean live return of episodes finished during this iteration.
    pub mean_return: Option<f64>,
    pub episodes: u64,
    pub live_steps: u64,
    pub warmup_steps: u64,
    pub policy_version: u64,
    /// Return of one greedy episode from the true start, measured once τ = 0.
    pub greedy_return: Option<f64>,
}

/// Observer verdict after each status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    BudgetExhausted,
    Stopped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingResult {
    pub reason: StopReason,
    pub converged: bool,
    pub tau: usize,
    pub iterations: u64,
    pub live_steps: u64,
    pub warmup_steps: u64,
    pub params: PolicyParams,
    pub final_greedy_return: Option<f64>,
    pub checkpoint: Checkpoint,
    pub last_status: Option<TrainingStatus>,
}

enum Command {
    Run { params: Arc<PolicyParams>, tau: usize, iteration: u64 },
}

/// Mix the run seed into a learner seed so the clipped learner's minibatch
/// order differs between runs.
fn learner_config(config: &RunConfig) -> LearnerConfig {
    LearnerConfig { seed: config.learner.seed ^ config.seed.rotate_left(17), ..config.learner.clone() }
}

/// Train until greedy play from the start reaches the target return, the
/// live-step budget runs out, or the observer asks to stop.
///
/// `demo` is required for the curriculum condition and must replay exactly.
/// `resume` continues from a checkpoint of the same configuration; episodes
/// in flight at checkpoint time are not restored.
pub fn run_training(
    config: &RunConfig,
    demo: Option<Arc<Demonstration>>,
    resume: Option<&Checkpoint>,
    observer: &mut dyn FnMut(&TrainingStatus, &PolicyParams) -> Control,
) -> Result<TrainingResult> {
    config.validate()?;
    let spec = &config.env;
    if let Some(d) = &demo {
        let report = validate_replay(d, spec)?;
        if let Some(div) = report.divergence {
            return Err(Error::validation(format!(
                "demonstration does not replay: {:?} divergence at step {}",
                div.kind, div.step
            )));
        }
        if !d.is_finalized() {
            return Err(Error::validation("demonstration is not finalized"));
        }
    }
    let (source, mut tau) = match config.condition {
        Condition::DemoCurriculum => {
            let d = demo.clone().ok_or_else(|| Error::validation("the curriculum condition needs a demonstration"))?;
            let tau = config.curriculum.tau_init.unwrap_or_else(|| d.last_start_index());
            if tau > d.len() {
                return Err(Error::validation(format!("tau_init {tau} is past the demonstration end {}", d.len())));
            }
            (StartSource::Demo(d), tau)
        }
        Condition::FromStart => (StartSource::Reset, 0),
    };
    let target = config.target_return.or_else(|| demo.as_ref().map(|d| d.total_return()));
    let policy = Policy::for_spec(config.policy.clone().into(), spec)?;
    let mut learner = Learner::new(learner_config(config), &policy)?;
    let mut params = policy.initial_params();
    let mut state = CurriculumState::new(&config.curriculum, tau);
    let mut iteration = 0u64;
    let mut live_steps = 0u64;
    let mut warmup_steps = 0u64;
    let digest = spec.digest();

    if let Some(c) = resume {
        if c.env_digest != digest {
            return Err(Error::Incompatible("checkpoint belongs to a different environment".into()));
        }
        if c.params.values.len() != policy.param_count() {
            return Err(Error::Incompatible("checkpoint parameters do not match the policy".into()));
        }
        learner.set_baseline_values(c.baseline.clone())?;
        params = c.params.clone();
        tau = c.tau.min(tau);
        state.tau = tau;
        state.success_count = c.success_count;
        state.episode_count = c.episode_count;
        iteration = c.iteration;
        live_steps = c.live_steps;
        warmup_steps = c.warmup_steps;
    }

    let cc = &config.curriculum;
    let workers = (0..cc.workers)
        .map(|id| Worker::new(id, spec, source.clone(), policy.clone(), cc.window, cc.warmup, cc.batch_steps, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let mut eval_env = spec.build()?;
    let eval_limit = match spec {
        crate::env::EnvSpec::BlindCliffWalk(c) => c.n_states,
        crate::env::EnvSpec::KeyDoorGrid(c) => c.max_episode_steps as usize,
    };
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut last_status = None;
    let mut final_greedy = None;
    let reason = thread::scope(|scope| -> Result<StopReason> {
        let (result_tx, result_rx) = mpsc::channel::<Result<RolloutBatch>>();
        let mut command_txs = Vec::with_capacity(workers.len());
        for mut worker in workers {
            let (tx, rx) = mpsc::channel::<Command>();
            command_txs.push(tx);
            let result_tx = result_tx.clone();
            scope.spawn(move || {
                while let Ok(Command::Run { params, tau, iteration }) = rx.recv() {
                    let out = worker.run_iteration(&params, tau, iteration);
                    let failed = out.is_err();
                    if result_tx.send(out).is_err() || failed {
                        break;
                    }
                }
            });
        }
        drop(result_tx);

        loop {
            let shared = Arc::new(params.clone());
            for tx in &command_txs {
                tx.send(Command::Run { params: shared.clone(), tau: state.tau, iteration })
                    .map_err(|_| Error::ContractViolation("rollout worker exited early".into()))?;
            }
            let mut batches = Vec::with_capacity(command_txs.len());
            for _ in 0..command_txs.len() {
                let batch = result_rx
                    .recv()
                    .map_err(|_| Error::ContractViolation("rollout worker exited early".into()))??;
                batches.push(batch);
            }
            batches.sort_by_key(|b| b.worker_id);

            let live: u64 = batches.iter().map(|b| b.live_steps() as u64).sum();
            let warm: u64 = batches.iter().map(|b| b.warmup_steps() as u64).sum();
            live_steps += live;
            warmup_steps += warm;
            let returns: Vec<f64> = batches.iter().flat_map(|b| b.episodes.iter().map(|e| e.live_return)).collect();

            let outcome = optimizer_step(&state, &batches, &mut learner, &policy, &params)?;
            if let Some(w) = &outcome.warning {
                log::debug!("iteration {iteration}: {w}");
            }
            state = outcome.state;
            params = outcome.params;
            iteration += 1;

            let greedy_return = if state.tau == 0 {
                let (r, _) = play_episode(eval_env.as_mut(), &policy, &params, EvalMode::Greedy, eval_limit, &mut eval_rng)?;
                final_greedy = Some(r);
                Some(r)
            } else {
                None
            };
            let status = TrainingStatus {
                iteration,
                tau: state.tau,
                phase: if state.tau == 0 { Phase::FromStart } else { Phase::Curriculum },
                success_ratio: outcome.decision.ratio,
                tau_moved: outcome.decision.moved,
                mean_return: (!returns.is_empty()).then(|| returns.iter().sum::<f64>() / returns.len() as f64),
                episodes: returns.len() as u64,
                live_steps,
                warmup_steps,
                policy_version: params.version,
                greedy_return,
            };
            let control = observer(&status, &params);
            last_status = Some(status);
            if control == Control::Stop {
                return Ok(StopReason::Stopped);
            }
            if config.stop_on_success {
                if let (Some(r), Some(t)) = (greedy_return, target) {
                    if r >= t {
                        return Ok(StopReason::Converged);
                    }
                }
            }
            if live_steps >= config.budget {
                return Ok(StopReason::BudgetExhausted);
            }
        }
    })?;

    let checkpoint = Checkpoint {
        env_digest: digest,
        iteration,
        live_steps,
        warmup_steps,
        tau: state.tau,
        success_count: state.success_count,
        episode_count: state.episode_count,
        params: params.clone(),
        baseline: learner.baseline_values().to_vec(),
    };
    Ok(TrainingResult {
        reason,
        converged: reason == StopReason::Converged,
        tau: state.tau,
        iterations: iteration,
        live_steps,
        warmup_steps,
        params,
        final_greedy_return: final_greedy,
        checkpoint,
        last_status,
    })
}
