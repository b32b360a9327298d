//! Seeded benchmark: sample lumens, train one agent per lumen, evaluate,
//! and aggregate success rates into a versioned report.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifacts::{read_json, write_json, ArtifactError};
use crate::env::{evaluate, train, Trajectory};
use crate::geometry::{generate_bifurcation_with_goal, sample_params, BifurcationParams, GeometryError, GoalPlacement, ParamRanges};
use crate::mechanics::RobotParams;
use crate::qlearning::{AgentParams, EpisodeResult, Outcome, RewardParams};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Master seed of the shipped preset.
pub const PRESET_MASTER_SEED: u64 = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub n_environments: usize,
    pub n_eval_episodes: usize,
    pub n_train_episodes: usize,
    pub master_seed: u64,
    pub param_ranges: ParamRanges,
    pub goal: GoalPlacement,
    pub robot: RobotParams,
    pub agent: AgentParams,
    pub reward: RewardParams,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            n_environments: 4,
            n_eval_episodes: 50,
            n_train_episodes: 5000,
            master_seed: PRESET_MASTER_SEED,
            param_ranges: ParamRanges::default(),
            goal: GoalPlacement::default(),
            robot: RobotParams::default(),
            agent: AgentParams::default(),
            reward: RewardParams::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("environment {index}: {source}")]
    Environment { index: usize, source: GeometryError },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ExperimentError {
    ExperimentError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

impl BenchmarkSpec {
    /// Field paths in errors are relative to the spec.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        for (field, n) in [
            ("n_environments", self.n_environments),
            ("n_eval_episodes", self.n_eval_episodes),
            ("n_train_episodes", self.n_train_episodes),
        ] {
            if n == 0 {
                return Err(invalid(field, "must be >= 1"));
            }
        }
        self.param_ranges.validate().map_err(|e| match e {
            GeometryError::InfeasibleRange { field, reason } => invalid(format!("param_ranges.{field}"), reason),
            other => invalid("param_ranges", other.to_string()),
        })?;
        self.goal.validate().map_err(|r| invalid("goal", r))?;
        self.robot.validate().map_err(|(f, r)| invalid(format!("robot.{f}"), r))?;
        self.agent.validate().map_err(|(f, r)| invalid(format!("agent.{f}"), r))?;
        self.reward.validate().map_err(|(f, r)| invalid(format!("reward.{f}"), r))?;
        Ok(())
    }
}

/// Independent rng streams per environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Params = 0,
    Train = 1,
    Eval = 2,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Pure function of its arguments.
pub fn child_seed(master_seed: u64, index: usize, stream: Stream) -> u64 {
    let a = splitmix64(master_seed);
    let b = splitmix64(a ^ index as u64);
    splitmix64(b ^ (stream as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentReport {
    pub index: usize,
    pub params_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub params: BifurcationParams,
    pub episodes: usize,
    pub successes: usize,
    pub failures: usize,
    pub timeouts: usize,
    pub success_rate: f64,
    /// Mean episode length over successful episodes.
    pub mean_steps_to_goal: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuccessReport {
    pub schema_version: u32,
    pub master_seed: u64,
    pub n_train_episodes: usize,
    pub n_eval_episodes: usize,
    pub environments: Vec<EnvironmentReport>,
    pub total_episodes: usize,
    pub total_successes: usize,
    pub aggregate_success_rate: f64,
}

impl SuccessReport {
    fn assemble(spec: &BenchmarkSpec, environments: Vec<EnvironmentReport>) -> Self {
        let total_episodes: usize = environments.iter().map(|e| e.episodes).sum();
        let total_successes: usize = environments.iter().map(|e| e.successes).sum();
        SuccessReport {
            schema_version: REPORT_SCHEMA_VERSION,
            master_seed: spec.master_seed,
            n_train_episodes: spec.n_train_episodes,
            n_eval_episodes: spec.n_eval_episodes,
            environments,
            total_episodes,
            total_successes,
            aggregate_success_rate: total_successes as f64 / total_episodes as f64,
        }
    }
}

/// A finished benchmark. Timing lives outside the report so that report
/// files stay byte-identical across reruns.
#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub report: SuccessReport,
    pub elapsed: Duration,
    pub per_environment: Vec<Duration>,
}

/// Counts outcomes of evaluation episodes.
pub fn summarize<T>(index: usize, params: BifurcationParams, seeds: [u64; 3], results: &[EpisodeResult<T>]) -> EnvironmentReport {
    let count = |o| results.iter().filter(|r| r.outcome == o).count();
    let successes = count(Outcome::Goal);
    let goal_steps: usize = results.iter().filter(|r| r.outcome == Outcome::Goal).map(|r| r.steps).sum();
    EnvironmentReport {
        index,
        params_seed: seeds[0],
        train_seed: seeds[1],
        eval_seed: seeds[2],
        params,
        episodes: results.len(),
        successes,
        failures: count(Outcome::Fail),
        timeouts: count(Outcome::Timeout),
        success_rate: if results.is_empty() { 0.0 } else { successes as f64 / results.len() as f64 },
        mean_steps_to_goal: (successes > 0).then(|| goal_steps as f64 / successes as f64),
    }
}

/// Runs environment `index` of `spec`. Returns the report and, when
/// `record` is set, the evaluation trajectories.
pub fn run_environment(
    spec: &BenchmarkSpec,
    index: usize,
    record: bool,
) -> Result<(EnvironmentReport, Vec<Trajectory>), ExperimentError> {
    let seeds = [
        child_seed(spec.master_seed, index, Stream::Params),
        child_seed(spec.master_seed, index, Stream::Train),
        child_seed(spec.master_seed, index, Stream::Eval),
    ];
    let env_err = |source| ExperimentError::Environment { index, source };
    let params = sample_params(&spec.param_ranges, &mut ChaCha8Rng::seed_from_u64(seeds[0])).map_err(env_err)?;
    let lumen = generate_bifurcation_with_goal(&params, &spec.goal).map_err(env_err)?;
    let (q, _) = train(
        &lumen,
        &spec.robot,
        &spec.agent,
        &spec.reward,
        spec.n_train_episodes,
        &mut ChaCha8Rng::seed_from_u64(seeds[1]),
    );
    let results = evaluate(
        &lumen,
        &spec.robot,
        &spec.agent,
        &spec.reward,
        &q,
        spec.n_eval_episodes,
        record,
        &mut ChaCha8Rng::seed_from_u64(seeds[2]),
    );
    let report = summarize(index, params, seeds, &results);
    let traces = results.into_iter().filter_map(|r| r.trajectory).collect();
    Ok((report, traces))
}

pub fn run_benchmark(spec: &BenchmarkSpec) -> Result<BenchmarkRun, ExperimentError> {
    run_benchmark_parallel(spec, 1)
}

/// Runs environments on up to `threads` worker threads. The report is
/// ordered by environment index regardless of completion order.
pub fn run_benchmark_parallel(spec: &BenchmarkSpec, threads: usize) -> Result<BenchmarkRun, ExperimentError> {
    spec.validate()?;
    let start = Instant::now();
    let threads = threads.clamp(1, spec.n_environments);
    let timed = |i: usize| {
        let t = Instant::now();
        run_environment(spec, i, false).map(|(r, _)| (r, t.elapsed()))
    };
    let mut slots: Vec<Option<Result<(EnvironmentReport, Duration), ExperimentError>>> =
        (0..spec.n_environments).map(|_| None).collect();
    if threads == 1 {
        for (i, slot) in slots.iter_mut().enumerate() {
            *slot = Some(timed(i));
        }
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|worker| {
                    let timed = &timed;
                    scope.spawn(move || {
                        (worker..spec.n_environments)
                            .step_by(threads)
                            .map(|i| (i, timed(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("benchmark worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
    }
    let mut environments = Vec::with_capacity(spec.n_environments);
    let mut per_environment = Vec::with_capacity(spec.n_environments);
    for slot in slots {
        let (r, t) = slot.expect("every environment ran")?;
        environments.push(r);
        per_environment.push(t);
    }
    Ok(BenchmarkRun {
        report: SuccessReport::assemble(spec, environments),
        elapsed: start.elapsed(),
        per_environment,
    })
}

pub fn persist_report(report: &SuccessReport, path: &Path) -> Result<(), ExperimentError> {
    Ok(write_json(path, report)?)
}

pub fn load_report(path: &Path) -> Result<SuccessReport, ExperimentError> {
    let value: serde_json::Value = read_json(path)?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == REPORT_SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(ArtifactError::format(path, format!("schema_version {v} (expected {REPORT_SCHEMA_VERSION})")).into())
        }
        None => return Err(ArtifactError::format(path, "missing schema_version").into()),
    }
    serde_json::from_value(value).map_err(|e| ArtifactError::format(path, e.to_string()).into())
}
