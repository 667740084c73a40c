//! Policy-gradient learners: REINFORCE with a baseline and a clipped-ratio
//! surrogate. Both train only on transitions whose mask is set; warmup
//! copies from the demonstration never reach the gradient or the baseline.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::policy::{log_softmax, HiddenState, Policy, PolicyParams};

/// One step of experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub observation: Observation,
    /// Policy hidden state the action was chosen under.
    pub hidden: HiddenState,
    pub action: u32,
    pub reward: f64,
    pub done: bool,
    /// `false` for warmup steps copied from the demonstration.
    pub mask: bool,
    pub log_prob: f64,
    pub policy_version: u64,
    /// Demonstration time index of the state this step starts from.
    pub time_index: usize,
}

/// Consecutive transitions from one worker. `bootstrap` is the state the
/// worker was in when the batch ended mid-episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TransitionBatch {
    pub transitions: Vec<TransitionRecord>,
    pub bootstrap: Option<Observation>,
}

impl TransitionBatch {
    pub fn live_count(&self) -> usize {
        self.transitions.iter().filter(|t| t.mask).count()
    }

    pub fn warmup_count(&self) -> usize {
        self.transitions.len() - self.live_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Reinforce,
    Clipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    PerState,
    RunningMean,
    None,
}

/// How per-transition terms are combined into the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub algorithm: Algorithm,
    pub gamma: f64,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub clip_epsilon: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub baseline: BaselineKind,
    pub baseline_rate: f64,
    pub reduction: Reduction,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self::reinforce()
    }
}

impl LearnerConfig {
    pub fn reinforce() -> Self {
        Self {
            algorithm: Algorithm::Reinforce,
            gamma: 0.99,
            learning_rate: 0.05,
            entropy_coef: 0.01,
            clip_epsilon: 0.2,
            epochs: 1,
            minibatches: 1,
            baseline: BaselineKind::PerState,
            baseline_rate: 0.1,
            reduction: Reduction::Sum,
            seed: 0,
        }
    }

    pub fn clipped() -> Self {
        Self { algorithm: Algorithm::Clipped, epochs: 4, minibatches: 4, ..Self::reinforce() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::validation(m.to_owned()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning rate must be positive");
        }
        if !self.entropy_coef.is_finite() || self.entropy_coef < 0.0 {
            return bad("entropy coefficient must be non-negative");
        }
        if !self.clip_epsilon.is_finite() || self.clip_epsilon <= 0.0 {
            return bad("clip epsilon must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return bad("epochs and minibatches must be positive");
        }
        if !(self.baseline_rate > 0.0 && self.baseline_rate <= 1.0) {
            return bad("baseline rate must lie in (0, 1]");
        }
        Ok(())
    }
}

/// A masked transition reduced to what the objective needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub key: usize,
    pub hidden: HiddenState,
    pub action: usize,
    pub advantage: f64,
    pub old_log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub params: PolicyParams,
    /// Number of mask=true transitions trained on.
    pub effective: usize,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub config: LearnerConfig,
    baseline: Vec<f64>,
}

impl Learner {
    pub fn new(config: LearnerConfig, policy: &Policy) -> Result<Self> {
        config.validate()?;
        let n = match config.baseline {
            BaselineKind::PerState => policy.state_count(),
            BaselineKind::RunningMean => 1,
            BaselineKind::None => 0,
        };
        Ok(Self { config, baseline: vec![0.0; n] })
    }

    pub fn baseline_values(&self) -> &[f64] {
        &self.baseline
    }

    pub(crate) fn set_baseline_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.baseline.len() {
            return Err(Error::Incompatible("baseline size does not match the learner".into()));
        }
        self.baseline = values;
        Ok(())
    }

    fn value(&self, key: usize) -> f64 {
        match self.config.baseline {
            BaselineKind::PerState => self.baseline[key],
            BaselineKind::RunningMean => self.baseline[0],
            BaselineKind::None => 0.0,
        }
    }

    fn fit_baseline(&mut self, key: usize, target: f64) {
        let rate = self.config.baseline_rate;
        let slot = match self.config.baseline {
            BaselineKind::PerState => key,
            BaselineKind::RunningMean => 0,
            BaselineKind::None => return,
        };
        self.baseline[slot] += rate * (target - self.baseline[slot]);
    }

    /// Discounted returns, restarting at every done flag. A batch that ends
    /// mid-episode is bootstrapped from the baseline value of its final state.
    /// Masked transitions are transparent: they neither add reward nor end
    /// an episode for the returns of the live steps around them.
    pub fn returns(&self, policy: &Policy, batch: &TransitionBatch) -> Result<Vec<f64>> {
        let gamma = self.config.gamma;
        let mut g = match &batch.bootstrap {
            Some(obs) => self.value(policy.encode(obs)?),
            None => 0.0,
        };
        let mut out = vec![0.0; batch.transitions.len()];
        for (i, t) in batch.transitions.iter().enumerate().rev() {
            if !t.mask {
                out[i] = g;
                continue;
            }
            g = if t.done { t.reward } else { t.reward + gamma * g };
            out[i] = g;
        }
        Ok(out)
    }

    /// Turn batches into training samples (mask=true only) and fit the
    /// baseline to their returns.
    pub fn prepare(&mut self, policy: &Policy, batches: &[&TransitionBatch]) -> Result<Vec<Sample>> {
        let mut samples = Vec::new();
        let mut targets = Vec::new();
        for batch in batches {
            let returns = self.returns(policy, batch)?;
            for (t, g) in batch.transitions.iter().zip(returns) {
                if !t.mask {
                    continue;
                }
                let key = policy.encode(&t.observation)?;
                if t.action as usize >= policy.action_count {
                    return Err(Error::validation(format!("action {} out of range", t.action)));
                }
                samples.push(Sample {
                    key,
                    hidden: t.hidden.clone(),
                    action: t.action as usize,
                    advantage: g - self.value(key),
                    old_log_prob: t.log_prob,
                });
                targets.push((key, g));
            }
        }
        for (key, g) in targets {
            self.fit_baseline(key, g);
        }
        Ok(samples)
    }

    /// Apply one update. Version always increments; an update without any
    /// mask=true transition leaves the values untouched and returns a warning.
    pub fn update(&mut self, policy: &Policy, params: &PolicyParams, batches: &[&TransitionBatch]) -> Result<UpdateOutcome> {
        if params.values.len() != policy.param_count() {
            return Err(Error::Incompatible("parameter vector does not match the policy".into()));
        }
        let samples = self.prepare(policy, batches)?;
        let mut values = params.values.clone();
        let warning = if samples.is_empty() {
            Some("no trainable (mask=true) transitions; parameters unchanged".to_owned())
        } else {
            match self.config.algorithm {
                Algorithm::Reinforce => {
                    let g = reinforce_gradient(policy, &values, &samples, self.config.entropy_coef, self.config.reduction);
                    ascend(&mut values, &g, self.config.learning_rate);
                }
                Algorithm::Clipped => self.clipped_epochs(policy, &mut values, &samples, params.version),
            }
            None
        };
        Ok(UpdateOutcome {
            params: PolicyParams { version: params.version + 1, values },
            effective: samples.len(),
            warning,
        })
    }

    fn clipped_epochs(&self, policy: &Policy, values: &mut [f64], samples: &[Sample], version: u64) {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ version.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let per = samples.len().div_ceil(c.minibatches).max(1);
        for _ in 0..c.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(per) {
                let mb: Vec<Sample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                let g = clipped_gradient(policy, values, &mb, c.clip_epsilon, c.entropy_coef, c.reduction);
                ascend(values, &g, c.learning_rate);
            }
        }
    }
}

fn ascend(values: &mut [f64], grad: &[(usize, f64)], lr: f64) {
    for &(i, g) in grad {
        values[i] += lr * g;
    }
}

fn scale(reduction: Reduction, n: usize) -> f64 {
    match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / n.max(1) as f64,
    }
}

fn entropy(logp: &[f64]) -> f64 {
    -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>()
}

/// Σ over samples of `log π(a|s)·A + β·H(π(·|s))`, scaled by the reduction.
pub fn reinforce_objective(policy: &Policy, values: &[f64], samples: &[Sample], beta: f64, reduction: Reduction) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let logp = log_softmax(&policy.logits_for_key(values, s.key, &s.hidden));
            logp[s.action] * s.advantage + beta * entropy(&logp)
        })
        .sum();
    total * scale(reduction, samples.len())
}

/// Clipped surrogate `min(ρA, clip(ρ, 1-ε, 1+ε)A) + β·H` with
/// `ρ = π(a|s) / π_old(a|s)`.
pub fn clipped_objective(
    policy: &Policy,
    values: &[f64],
    samples: &[Sample],
    epsilon: f64,
    beta: f64,
    reduction: Reduction,
) -> f64 {
    let total: f64 = samples
        .iter()
        .map(|s| {
            let logp = log_softmax(&policy.logits_for_key(values, s.key, &s.hidden));
            let ratio = (logp[s.action] - s.old_log_prob).exp();
            let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
            (ratio * s.advantage).min(clipped * s.advantage) + beta * entropy(&logp)
        })
        .sum();
    total * scale(reduction, samples.len())
}

/// Accumulate `coef_b` into every row the logits are built from.
fn scatter(policy: &Policy, s: &Sample, dz: &[f64], out: &mut Vec<(usize, f64)>) {
    let (rows, n) = policy.rows(s.key, &s.hidden);
    for &r in &rows[..n] {
        out.extend(dz.iter().enumerate().map(|(b, &d)| (r + b, d)));
    }
}

/// d/dz of log p_a and of H, for logits z with log-probs `logp`.
fn logit_terms(logp: &[f64], action: usize) -> (Vec<f64>, Vec<f64>) {
    let h = entropy(logp);
    let dlog: Vec<f64> = logp
        .iter()
        .enumerate()
        .map(|(b, lp)| if b == action { 1.0 } else { 0.0 } - lp.exp())
        .collect();
    let dent: Vec<f64> = logp.iter().map(|lp| -lp.exp() * (lp + h)).collect();
    (dlog, dent)
}

/// Sparse gradient of [`reinforce_objective`] as (parameter index, value)
/// pairs; indices may repeat.
pub fn reinforce_gradient(
    policy: &Policy,
    values: &[f64],
    samples: &[Sample],
    beta: f64,
    reduction: Reduction,
) -> Vec<(usize, f64)> {
    let k = scale(reduction, samples.len());
    let mut out = Vec::with_capacity(samples.len() * policy.action_count * 2);
    for s in samples {
        let logp = log_softmax(&policy.logits_for_key(values, s.key, &s.hidden));
        let (dlog, dent) = logit_terms(&logp, s.action);
        let dz: Vec<f64> = dlog.iter().zip(&dent).map(|(l, e)| k * (s.advantage * l + beta * e)).collect();
        scatter(policy, s, &dz, &mut out);
    }
    out
}

/// Sparse gradient of [`clipped_objective`]. The ratio term contributes
/// only where the unclipped branch is the active minimum.
pub fn clipped_gradient(
    policy: &Policy,
    values: &[f64],
    samples: &[Sample],
    epsilon: f64,
    beta: f64,
    reduction: Reduction,
) -> Vec<(usize, f64)> {
    let k = scale(reduction, samples.len());
    let mut out = Vec::with_capacity(samples.len() * policy.action_count * 2);
    for s in samples {
        let logp = log_softmax(&policy.logits_for_key(values, s.key, &s.hidden));
        let (dlog, dent) = logit_terms(&logp, s.action);
        let ratio = (logp[s.action] - s.old_log_prob).exp();
        let active = if s.advantage >= 0.0 { ratio < 1.0 + epsilon } else { ratio > 1.0 - epsilon };
        let w = if active { ratio * s.advantage } else { 0.0 };
        let dz: Vec<f64> = dlog.iter().zip(&dent).map(|(l, e)| k * (w * l + beta * e)).collect();
        scatter(policy, s, &dz, &mut out);
    }
    out
}

/// Dense form of a sparse gradient.
pub fn densify(n: usize, sparse: &[(usize, f64)]) -> Vec<f64> {
    let mut g = vec![0.0; n];
    for &(i, v) in sparse {
        g[i] += v;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{softmax, ObservationEncoder, PolicyKind};

    fn obs(i: usize, n: usize) -> Observation {
        Observation::Index { index: i, count: n }
    }

    fn tr(i: usize, n: usize, action: u32, reward: f64, done: bool, mask: bool) -> TransitionRecord {
        TransitionRecord {
            observation: obs(i, n),
            hidden: HiddenState::default(),
            action,
            reward,
            done,
            mask,
            log_prob: 0.5f64.ln(),
            policy_version: 0,
            time_index: i,
        }
    }

    #[test]
    fn returns_reset_at_done() {
        let p = Policy::tabular(ObservationEncoder::Index { count: 4 }, 2);
        let l = Learner::new(LearnerConfig { gamma: 0.5, baseline: BaselineKind::None, ..LearnerConfig::reinforce() }, &p).unwrap();
        let b = TransitionBatch {
            transitions: vec![tr(0, 4, 0, 0.0, false, true), tr(1, 4, 0, 1.0, true, true), tr(0, 4, 0, 2.0, false, true)],
            bootstrap: None,
        };
        assert_eq!(l.returns(&p, &b).unwrap(), vec![0.5, 1.0, 2.0]);
    }

    #[test]
    fn all_masked_batch_is_a_noop() {
        let p = Policy::tabular(ObservationEncoder::Index { count: 4 }, 2);
        let mut l = Learner::new(LearnerConfig::reinforce(), &p).unwrap();
        let params = PolicyParams { version: 7, values: vec![0.3; 8] };
        let b = TransitionBatch { transitions: vec![tr(0, 4, 1, 1.0, false, false), tr(1, 4, 0, 0.0, true, false)], bootstrap: None };
        let out = l.update(&p, &params, &[&b]).unwrap();
        assert_eq!(out.params.values, params.values);
        assert_eq!(out.params.version, 8);
        assert!(out.warning.is_some());
        assert_eq!(out.effective, 0);
    }

    #[test]
    fn bandit_converges_to_rewarded_action() {
        use rand::{Rng, SeedableRng};
        let p = Policy::tabular(ObservationEncoder::Index { count: 1 }, 2);
        for algo in [LearnerConfig::reinforce(), LearnerConfig::clipped()] {
            let mut l = Learner::new(LearnerConfig { entropy_coef: 0.0, ..algo }, &p).unwrap();
            let mut params = p.initial_params();
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut last = 0.5;
            for _ in 0..200 {
                let pr = softmax(&params.values);
                let transitions = (0..8)
                    .map(|_| {
                        let a = if rng.gen::<f64>() < pr[0] { 0 } else { 1 };
                        let mut t = tr(0, 1, a, if a == 0 { 1.0 } else { 0.0 }, true, true);
                        t.log_prob = pr[a as usize].ln();
                        t
                    })
                    .collect();
                let b = TransitionBatch { transitions, bootstrap: None };
                params = l.update(&p, &params, &[&b]).unwrap().params;
                last = softmax(&params.values)[0];
            }
            assert!(last > 0.99, "{:?}: {last}", l.config.algorithm);
        }
    }

    #[test]
    fn clipped_ratio_is_one_at_collection_params() {
        let p = Policy::tabular(ObservationEncoder::Index { count: 3 }, 2);
        let values = vec![0.2, -0.4, 1.0, 0.1, -0.3, 0.0];
        let samples: Vec<Sample> = (0..3)
            .map(|k| {
                let lp = log_softmax(&p.logits_for_key(&values, k, &HiddenState::default()));
                Sample { key: k, hidden: HiddenState::default(), action: k % 2, advantage: k as f64 - 1.0, old_log_prob: lp[k % 2] }
            })
            .collect();
        let clipped = clipped_objective(&p, &values, &samples, 0.2, 0.0, Reduction::Sum);
        let unclipped: f64 = samples.iter().map(|s| s.advantage).sum();
        assert!((clipped - unclipped).abs() < 1e-12);
        // and at those params the clipped gradient is the importance-weighted REINFORCE gradient
        let g1 = densify(6, &clipped_gradient(&p, &values, &samples, 0.2, 0.01, Reduction::Sum));
        let g2 = densify(6, &reinforce_gradient(&p, &values, &samples, 0.01, Reduction::Sum));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn history_gradient_touches_both_rows() {
        let p = Policy::new(PolicyKind::HistoryWindow { window: 2 }, ObservationEncoder::Index { count: 3 }, 2);
        let values = vec![0.0; p.param_count()];
        let s = Sample { key: 1, hidden: HiddenState(vec![2]), action: 0, advantage: 1.0, old_log_prob: 0.5f64.ln() };
        let g = densify(values.len(), &reinforce_gradient(&p, &values, &[s], 0.0, Reduction::Sum));
        assert_eq!(g[2], 0.5);
        assert_eq!(g[3], -0.5);
        assert_eq!(g[6 + 4], 0.5);
        assert_eq!(g[6 + 5], -0.5);
    }

    #[test]
    fn invalid_config_rejected() {
        let p = Policy::tabular(ObservationEncoder::Index { count: 1 }, 2);
        for c in [
            LearnerConfig { gamma: 0.0, ..LearnerConfig::reinforce() },
            LearnerConfig { learning_rate: 0.0, ..LearnerConfig::reinforce() },
            LearnerConfig { entropy_coef: -1.0, ..LearnerConfig::reinforce() },
            LearnerConfig { clip_epsilon: 0.0, ..LearnerConfig::clipped() },
        ] {
            assert!(Learner::new(c, &p).is_err());
        }
    }
}
