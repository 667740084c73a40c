//! Blind cliff walk scaling experiment: live steps until the greedy policy
//! solves the walk, as a function of the number of states, with and without
//! a demonstration curriculum.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Condition, PolicyConfig, RunConfig};
use crate::curriculum::{run_training, Control, CurriculumConfig};
use crate::demo::{record, Demonstration};
use crate::env::cliff::BlindCliffWalkConfig;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::eval::{play_episode, EvalMode};
use crate::learner::LearnerConfig;
use crate::policy::{softmax, Policy, PolicyParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: usize,
    pub condition: Condition,
    pub seed: u64,
    /// Live steps until the greedy success probability first reached the
    /// threshold, or the budget when capped.
    pub steps_to_threshold: u64,
    pub capped: bool,
    /// Success probability of the stochastic policy at that moment.
    pub stochastic_success: f64,
}

/// Training settings shared by every cell of a scaling experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingSettings {
    pub budget: u64,
    pub threshold: f64,
    pub curriculum: CurriculumConfig,
    pub learner: LearnerConfig,
}

impl Default for ScalingSettings {
    fn default() -> Self {
        Self {
            budget: 10_000_000,
            threshold: 0.95,
            curriculum: CurriculumConfig { batch_steps: 4, workers: 1, ..CurriculumConfig::cliff_walk() },
            learner: LearnerConfig { learning_rate: 1.0, baseline_rate: 0.5, ..LearnerConfig::reinforce() },
        }
    }
}

/// The shortest perfect demonstration of an `n`-state walk.
pub fn cliff_demo(config: &BlindCliffWalkConfig) -> Result<Demonstration> {
    record(&EnvSpec::BlindCliffWalk(config.clone()), config.correct_actions(), "perfect walk")
}

/// Probability that a tabular cliff-walk policy walks to the end, for the
/// greedy policy (ties broken uniformly) and for the sampling policy.
pub fn analytic_success(policy: &Policy, params: &PolicyParams, correct: &[crate::env::Action]) -> (f64, f64) {
    let hidden = policy.initial_hidden();
    let mut greedy = 1.0;
    let mut stochastic = 1.0;
    for (s, a) in correct.iter().enumerate() {
        let z = policy.logits_for_key(&params.values, s, &hidden);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties = z.iter().filter(|&&v| v == max).count();
        greedy *= if z[a.index()] == max { 1.0 / ties as f64 } else { 0.0 };
        stochastic *= softmax(&z)[a.index()];
    }
    (greedy, stochastic)
}

/// Train one (n, seed, condition) cell.
pub fn run_scaling_point(n: usize, seed: u64, condition: Condition, settings: &ScalingSettings) -> Result<ScalingPoint> {
    let cliff = BlindCliffWalkConfig::seeded(n, seed);
    let correct = cliff.correct_actions();
    let demo = match condition {
        Condition::DemoCurriculum => Some(Arc::new(cliff_demo(&cliff)?)),
        Condition::FromStart => None,
    };
    let config = RunConfig {
        env: EnvSpec::BlindCliffWalk(cliff),
        condition,
        policy: PolicyConfig::Tabular,
        curriculum: settings.curriculum.clone(),
        learner: settings.learner.clone(),
        seed,
        budget: settings.budget,
        stop_on_success: false,
        target_return: Some(1.0),
    };
    let policy = Policy::for_spec(config.policy.clone().into(), &config.env)?;
    let mut hit: Option<(u64, f64)> = None;
    let result = run_training(&config, demo, None, &mut |status, params| {
        let (greedy, stochastic) = analytic_success(&policy, params, &correct);
        if greedy >= settings.threshold {
            hit = Some((status.live_steps, stochastic));
            Control::Stop
        } else {
            Control::Continue
        }
    })?;
    Ok(match hit {
        Some((steps, stochastic)) => {
            ScalingPoint { n, condition, seed, steps_to_threshold: steps, capped: false, stochastic_success: stochastic }
        }
        None => {
            let (_, stochastic) = analytic_success(&policy, &result.params, &correct);
            ScalingPoint { n, condition, seed, steps_to_threshold: result.live_steps, capped: true, stochastic_success: stochastic }
        }
    })
}

/// Run every (n, seed) cell, in parallel, and return points ordered by
/// (n, seed).
pub fn run_scaling_experiment(
    n_values: &[usize],
    seeds: &[u64],
    condition: Condition,
    settings: &ScalingSettings,
) -> Result<Vec<ScalingPoint>> {
    if n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::validation("problem sizes must be strictly ascending"));
    }
    if seeds.len() < 2 {
        return Err(Error::validation("at least two seeds are required"));
    }
    let cells: Vec<(usize, u64)> = n_values.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(BTreeMap::new());
    let threads = thread::available_parallelism().map_or(4, |n| n.get()).min(cells.len());
    thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(n, seed)) = cells.get(i) else { break };
                let point = run_scaling_point(n, seed, condition, settings);
                results.lock().expect("no worker panicked").insert((n, seed), point);
            });
        }
    });
    results.into_inner().expect("no worker panicked").into_values().collect()
}

/// Least-squares line `y = slope·x + intercept` with its R².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<Fit> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Some(Fit { slope, intercept, r_squared })
}

pub fn geometric_mean(values: &[f64]) -> f64 {
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingLaw {
    Exponential,
    Power,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub n: usize,
    pub geometric_mean: f64,
    pub points: usize,
    pub capped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: Condition,
    pub sizes: Vec<SizeSummary>,
    /// `log2(steps) = slope·N + c`.
    pub exponential: Option<Fit>,
    /// `ln(steps) = k·ln(N) + c`; the slope is the exponent k.
    pub power: Option<Fit>,
    pub better_fit: Option<ScalingLaw>,
    pub inconclusive: Option<String>,
}

impl ConditionReport {
    pub fn geometric_mean_at(&self, n: usize) -> Option<f64> {
        self.sizes.iter().find(|s| s.n == n).map(|s| s.geometric_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub conditions: Vec<ConditionReport>,
}

impl ScalingReport {
    pub fn is_inconclusive(&self) -> bool {
        self.conditions.iter().any(|c| c.inconclusive.is_some())
    }

    pub fn condition(&self, c: Condition) -> Option<&ConditionReport> {
        self.conditions.iter().find(|r| r.condition == c)
    }

    /// Fixed-width summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for c in &self.conditions {
            out.push_str(&format!("condition {}\n", condition_name(c.condition)));
            out.push_str("  n    geomean_steps  capped/points\n");
            for s in &c.sizes {
                out.push_str(&format!("  {:<4} {:>13.1}  {}/{}\n", s.n, s.geometric_mean, s.capped, s.points));
            }
            if let Some(f) = c.exponential {
                out.push_str(&format!("  exponential fit: log2(steps) = {:.4}*N + {:.4}  R^2 = {:.4}\n", f.slope, f.intercept, f.r_squared));
            }
            if let Some(f) = c.power {
                out.push_str(&format!("  power fit: steps = {:.4} * N^{:.4}  R^2 = {:.4}\n", f.intercept.exp(), f.slope, f.r_squared));
            }
            if let Some(law) = c.better_fit {
                out.push_str(&format!("  better fit: {law:?}\n"));
            }
            if let Some(why) = &c.inconclusive {
                out.push_str(&format!("  INCONCLUSIVE: {why}\n"));
            }
        }
        out
    }
}

pub fn condition_name(c: Condition) -> &'static str {
    match c {
        Condition::FromStart => "from_start",
        Condition::DemoCurriculum => "demo_curriculum",
    }
}

/// Per-N geometric means and both scaling-law fits for every condition
/// present in `points`.
pub fn fit_and_report(points: &[ScalingPoint]) -> ScalingReport {
    let mut by_condition: BTreeMap<u8, Vec<&ScalingPoint>> = BTreeMap::new();
    for p in points {
        by_condition.entry(p.condition as u8).or_default().push(p);
    }
    let conditions = by_condition
        .into_values()
        .map(|pts| {
            let condition = pts[0].condition;
            let mut by_n: BTreeMap<usize, Vec<&ScalingPoint>> = BTreeMap::new();
            for p in &pts {
                by_n.entry(p.n).or_default().push(p);
            }
            let sizes: Vec<SizeSummary> = by_n
                .iter()
                .map(|(&n, ps)| {
                    let steps: Vec<f64> = ps.iter().map(|p| (p.steps_to_threshold.max(1)) as f64).collect();
                    SizeSummary {
                        n,
                        geometric_mean: geometric_mean(&steps),
                        points: ps.len(),
                        capped: ps.iter().filter(|p| p.capped).count(),
                    }
                })
                .collect();
            let ns: Vec<f64> = sizes.iter().map(|s| s.n as f64).collect();
            let log2: Vec<f64> = sizes.iter().map(|s| s.geometric_mean.log2()).collect();
            let ln_n: Vec<f64> = ns.iter().map(|n| n.ln()).collect();
            let ln: Vec<f64> = sizes.iter().map(|s| s.geometric_mean.ln()).collect();
            let exponential = linear_fit(&ns, &log2);
            let power = linear_fit(&ln_n, &ln);
            let better_fit = match (exponential, power) {
                (Some(e), Some(p)) => Some(if e.r_squared >= p.r_squared { ScalingLaw::Exponential } else { ScalingLaw::Power }),
                _ => None,
            };
            let capped = pts.iter().filter(|p| p.capped).count();
            let inconclusive = if sizes.len() < 3 {
                Some(format!("only {} distinct problem sizes", sizes.len()))
            } else if capped * 4 > pts.len() {
                Some(format!("{capped} of {} points hit the budget", pts.len()))
            } else {
                None
            };
            ConditionReport { condition, sizes, exponential, power, better_fit, inconclusive }
        })
        .collect();
    ScalingReport { conditions }
}

/// One CSV line per point, with a header.
pub fn points_to_csv(points: &[ScalingPoint]) -> String {
    let mut out = String::from("n,condition,seed,steps_to_threshold,capped,stochastic_success\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.n,
            condition_name(p.condition),
            p.seed,
            p.steps_to_threshold,
            p.capped,
            p.stochastic_success
        ));
    }
    out
}

/// Gnuplot script drawing geometric-mean steps against N on a log scale,
/// reading the CSV written next to it.
pub fn gnuplot_script(csv_file: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set logscale y\n\
         set xlabel 'number of states N'\n\
         set ylabel 'live steps to 95% greedy success'\n\
         set key left top\n\
         plot '{csv_file}' using 1:($2==0 ? $3 : 1/0) with linespoints title 'from start', \\\n\
         \x20    '{csv_file}' using 1:($2==1 ? $3 : 1/0) with linespoints title 'demo curriculum'\n"
    )
}

/// Geometric means in the layout the gnuplot script expects:
/// `n,condition_index,geomean`.
pub fn geomeans_csv(report: &ScalingReport) -> String {
    let mut out = String::new();
    for c in &report.conditions {
        let idx = match c.condition {
            Condition::FromStart => 0,
            Condition::DemoCurriculum => 1,
        };
        for s in &c.sizes {
            out.push_str(&format!("{},{},{}\n", s.n, idx, s.geometric_mean));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mode: EvalMode,
    pub episodes: usize,
    pub mean_return: f64,
    pub stddev_return: f64,
    pub mean_steps: f64,
}

/// Mean and standard deviation of the from-start return under `mode`.
pub fn evaluate_perturbed(
    policy: &Policy,
    params: &PolicyParams,
    spec: &EnvSpec,
    mode: EvalMode,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::validation("at least one episode is required"));
    }
    mode.validate()?;
    let mut env = spec.build()?;
    let limit = match spec {
        EnvSpec::BlindCliffWalk(c) => c.n_states,
        EnvSpec::KeyDoorGrid(c) => c.max_episode_steps as usize,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Vec::with_capacity(episodes);
    let mut steps = 0usize;
    for _ in 0..episodes {
        let (r, s) = play_episode(env.as_mut(), policy, params, mode, limit, &mut rng)?;
        returns.push(r);
        steps += s;
    }
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / episodes as f64;
    Ok(EvalSummary { mode, episodes, mean_return: mean, stddev_return: var.sqrt(), mean_steps: steps as f64 / episodes as f64 })
}
