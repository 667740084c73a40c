//! Run configuration, stored as TOML.
//!
//! ```toml
//! condition = "demo_curriculum"   # or "from_start"
//! seed = 7
//! budget = 5000000                # live environment steps
//!
//! [env]
//! env = "key_door_grid"
//! map = "default"                 # or the full map text
//!
//! [policy]
//! kind = "tabular"                # or "history_window" with `window = 4`
//!
//! [curriculum]
//! delta = 4
//! window = 8
//! warmup = 0
//! batch_steps = 128
//! workers = 8
//! rho = 0.2
//!
//! [learner]
//! algorithm = "clipped"
//! learning_rate = 0.05
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumConfig;
use crate::env::cliff::BlindCliffWalkConfig;
use crate::env::keydoor::KeyDoorGridConfig;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::learner::LearnerConfig;
use crate::policy::PolicyKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Start episodes from demonstration states chosen by the curriculum.
    DemoCurriculum,
    /// Every episode starts at the environment's initial state.
    FromStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyConfig {
    Tabular,
    HistoryWindow { window: usize },
}

impl From<PolicyConfig> for PolicyKind {
    fn from(p: PolicyConfig) -> Self {
        match p {
            PolicyConfig::Tabular => PolicyKind::Tabular,
            PolicyConfig::HistoryWindow { window } => PolicyKind::HistoryWindow { window },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    #[serde(default = "default_condition")]
    pub condition: Condition,
    #[serde(default = "default_policy")]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub curriculum: CurriculumConfig,
    #[serde(default)]
    pub learner: LearnerConfig,
    #[serde(default)]
    pub seed: u64,
    /// Live environment steps before the run gives up.
    #[serde(default = "default_budget")]
    pub budget: u64,
    /// Stop once greedy play from the start reaches `target_return`.
    #[serde(default = "default_true")]
    pub stop_on_success: bool,
    /// Return the from-start greedy policy must reach; defaults to the
    /// demonstration's total return.
    #[serde(default)]
    pub target_return: Option<f64>,
}

fn default_condition() -> Condition {
    Condition::DemoCurriculum
}

fn default_policy() -> PolicyConfig {
    PolicyConfig::Tabular
}

fn default_budget() -> u64 {
    5_000_000
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    /// Defaults for the blind cliff walk: REINFORCE, Δ=1, D=2.
    pub fn cliff_walk(n_states: usize) -> Self {
        Self {
            env: EnvSpec::BlindCliffWalk(BlindCliffWalkConfig::seeded(n_states, 0)),
            condition: Condition::DemoCurriculum,
            policy: PolicyConfig::Tabular,
            curriculum: CurriculumConfig::cliff_walk(),
            learner: LearnerConfig::reinforce(),
            seed: 0,
            budget: 10_000_000,
            stop_on_success: true,
            target_return: None,
        }
    }

    /// Defaults for the key-door grid on the shipped layout: clipped
    /// surrogate, Δ=4, D=8.
    pub fn key_door() -> Self {
        Self {
            env: EnvSpec::KeyDoorGrid(KeyDoorGridConfig::default_layout()),
            condition: Condition::DemoCurriculum,
            policy: PolicyConfig::Tabular,
            curriculum: CurriculumConfig::default(),
            learner: LearnerConfig::clipped(),
            seed: 0,
            budget: default_budget(),
            stop_on_success: true,
            target_return: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.curriculum.validate()?;
        self.learner.validate()?;
        if self.budget == 0 {
            return Err(Error::validation("budget must be positive"));
        }
        if let PolicyConfig::HistoryWindow { window: 0 } = self.policy {
            return Err(Error::validation("history window must be at least 1"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::validation(format!("invalid run config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::Algorithm;

    #[test]
    fn doc_example_parses() {
        let text = "condition = \"demo_curriculum\"\nseed = 7\nbudget = 5000000\n[env]\nenv = \"key_door_grid\"\nmap = \"default\"\n[policy]\nkind = \"tabular\"\n[curriculum]\ndelta = 4\nwindow = 8\nwarmup = 0\nbatch_steps = 128\nworkers = 8\nrho = 0.2\n[learner]\nalgorithm = \"clipped\"\nlearning_rate = 0.05\n";
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.env, RunConfig::key_door().env);
        assert_eq!(c.learner.algorithm, Algorithm::Clipped);
        assert_eq!(c.learner.gamma, 0.99);
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn round_trips_through_toml() {
        for c in [RunConfig::cliff_walk(9), RunConfig::key_door()] {
            assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = RunConfig::cliff_walk(4);
        c.curriculum.delta = 0;
        assert!(RunConfig::from_toml(&c.to_toml()).is_err());
        assert!(RunConfig::from_toml("[env]\nenv = \"blind_cliff_walk\"\nn_states = 4\nbogus = 1\n").is_err());
    }
}
