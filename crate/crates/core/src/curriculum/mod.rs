//! Reverse curriculum over demonstration reset points. Rollout workers start
//! episodes from demonstration states near the central reset point τ; the
//! optimizer moves τ toward the start of the demonstration whenever enough
//! of those episodes tie or beat the demonstrator.

mod checkpoint;
mod training;
mod worker;

pub use checkpoint::Checkpoint;
pub use training::{run_training, Control, Phase, StopReason, TrainingResult, TrainingStatus};
pub use worker::{EpisodeLog, RolloutBatch, StartSource, Worker};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learner::{Learner, TransitionBatch};
use crate::policy::{Policy, PolicyParams};

/// Curriculum and worker-pool knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    /// Δ: how far τ moves on each successful decision.
    pub delta: usize,
    /// D: width of the start window below τ.
    pub window: usize,
    /// K: demonstration steps replayed before each live start.
    pub warmup: usize,
    /// L: environment steps per worker batch, warmup included.
    pub batch_steps: usize,
    /// M: number of rollout workers.
    pub workers: usize,
    /// ρ: success ratio that triggers a move.
    pub rho: f64,
    /// Initial τ; defaults to the last pre-terminal demonstration index.
    pub tau_init: Option<usize>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self { delta: 4, window: 8, warmup: 0, batch_steps: 128, workers: 8, rho: 0.2, tau_init: None }
    }
}

impl CurriculumConfig {
    pub fn cliff_walk() -> Self {
        Self { delta: 1, window: 2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.delta == 0 {
            return Err(Error::validation("delta must be at least 1"));
        }
        if self.batch_steps == 0 || self.workers == 0 {
            return Err(Error::validation("batch_steps and workers must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::validation("rho must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub tau: usize,
    pub delta: usize,
    pub window: usize,
    pub rho: f64,
    /// ΣW since the last move.
    pub success_count: u64,
    /// Finished episodes since the last move.
    pub episode_count: u64,
}

impl CurriculumState {
    pub fn new(config: &CurriculumConfig, tau: usize) -> Self {
        Self {
            tau,
            delta: config.delta,
            window: config.window,
            rho: config.rho,
            success_count: 0,
            episode_count: 0,
        }
    }

    pub fn ratio(&self) -> Option<f64> {
        (self.episode_count > 0).then(|| self.success_count as f64 / self.episode_count as f64)
    }

    /// Fold in one gather of counters and decide whether τ moves. A zero ρ
    /// moves every time, even with no finished episode.
    pub fn record(&mut self, successes: u64, episodes: u64) -> Decision {
        debug_assert!(successes <= episodes);
        self.success_count += successes;
        self.episode_count += episodes;
        let ratio = self.ratio();
        let move_now = self.rho == 0.0 || ratio.is_some_and(|r| r >= self.rho);
        let tau_before = self.tau;
        if move_now {
            self.tau = self.tau.saturating_sub(self.delta);
            self.success_count = 0;
            self.episode_count = 0;
        }
        Decision { ratio, moved: move_now && self.tau != tau_before, tau_before, tau_after: self.tau }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub ratio: Option<f64>,
    pub moved: bool,
    pub tau_before: usize,
    pub tau_after: usize,
}

/// Uniform draw from `{max(0, τ−D), …, τ}`.
pub fn sample_start<R: Rng + ?Sized>(tau: usize, window: usize, rng: &mut R) -> usize {
    rng.gen_range(tau.saturating_sub(window)..=tau)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerOutcome {
    pub state: CurriculumState,
    pub params: PolicyParams,
    pub decision: Decision,
    pub warning: Option<String>,
}

/// One optimizer step: aggregate counters, maybe move τ, then update θ on
/// the live transitions of every batch.
pub fn optimizer_step(
    state: &CurriculumState,
    batches: &[RolloutBatch],
    learner: &mut Learner,
    policy: &Policy,
    params: &PolicyParams,
) -> Result<OptimizerOutcome> {
    let mut state = state.clone();
    let successes = batches.iter().map(|b| b.success_count).sum();
    let episodes = batches.iter().map(|b| b.episodes_finished).sum();
    let decision = state.record(successes, episodes);
    let refs: Vec<&TransitionBatch> = batches.iter().map(|b| &b.batch).collect();
    let update = learner.update(policy, params, &refs)?;
    Ok(OptimizerOutcome { state, params: update.params, decision, warning: update.warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(tau: usize, delta: usize, rho: f64) -> CurriculumState {
        CurriculumState::new(&CurriculumConfig { delta, rho, ..CurriculumConfig::default() }, tau)
    }

    #[test]
    fn threshold_boundaries() {
        let mut s = state(10, 1, 0.2);
        assert!(s.record(2, 10).moved);
        assert_eq!((s.tau, s.success_count, s.episode_count), (9, 0, 0));
        let mut s = state(10, 1, 0.2);
        let d = s.record(1, 10);
        assert!(!d.moved);
        assert_eq!((s.tau, s.success_count, s.episode_count), (10, 1, 10));
    }

    #[test]
    fn counters_accumulate_until_a_move() {
        let mut s = state(10, 2, 0.2);
        assert!(!s.record(1, 10).moved);
        assert!(!s.record(0, 0).moved);
        assert!(s.record(3, 5).moved);
        assert_eq!(s.tau, 8);
    }

    #[test]
    fn clamps_at_zero() {
        let mut s = state(1, 4, 0.2);
        s.record(5, 5);
        assert_eq!(s.tau, 0);
        let d = s.record(5, 5);
        assert_eq!(s.tau, 0);
        assert!(!d.moved);
    }

    #[test]
    fn zero_episodes_never_move() {
        let mut s = state(5, 1, 0.2);
        assert!(!s.record(0, 0).moved);
        assert_eq!(s.ratio(), None);
    }

    #[test]
    fn zero_rho_always_moves() {
        let mut s = state(5, 2, 0.0);
        assert!(s.record(0, 0).moved);
        assert!(s.record(0, 7).moved);
        assert_eq!(s.tau, 1);
    }

    #[test]
    fn sample_start_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(sample_start(0, 5, &mut rng), 0);
            assert_eq!(sample_start(10, 0, &mut rng), 10);
            let t = sample_start(3, 5, &mut rng);
            assert!(t <= 3);
        }
    }
}
