//! Command-line front end. Exit codes: 0 success, 1 IO or runtime failure,
//! 2 invalid arguments or configuration.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{self, ArtifactError};
use crate::config::{ConfigError, RunConfig};
use crate::env::{evaluate, train};
use crate::experiments::{persist_report, run_benchmark_parallel, ExperimentError};
use crate::geometry::{generate_bifurcation_with_goal, sample_params, GeometryError};
use crate::qlearning::Outcome;
use crate::render;

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "endonav", version, about = "Simulate and train a planar endoluminal robot")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample bifurcation parameters and write the lumen as JSON.
    GenerateEnv {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sampling seed; drawn from entropy and printed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Output lumen JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a Q-table on a lumen.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Lumen JSON written by generate-env.
        #[arg(long)]
        env: PathBuf,
        /// Training seed; drawn from entropy and printed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of training episodes; defaults to benchmark.n_train_episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Output Q-table JSON.
        #[arg(long)]
        out_qtable: PathBuf,
        /// Output learning curve CSV (episode, outcome, steps, return).
        #[arg(long)]
        out_curve: PathBuf,
    },
    /// Evaluate a trained Q-table and print the success rate.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env: PathBuf,
        /// Q-table JSON written by train.
        #[arg(long)]
        qtable: PathBuf,
        /// Number of evaluation episodes.
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        /// Evaluation seed; drawn from entropy and printed when omitted.
        #[arg(long)]
        seed: Option<u64>,
        /// Write one JSON-lines trace per episode into this directory.
        #[arg(long)]
        traces_dir: Option<PathBuf>,
    },
    /// Run the seeded multi-environment benchmark and write its report.
    Benchmark {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides benchmark.master_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides benchmark.threads.
        #[arg(long)]
        threads: Option<usize>,
        /// Output report JSON.
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Draw SVG snapshots of a recorded trace.
    Render {
        #[arg(long)]
        env: PathBuf,
        /// JSON-lines trace written by eval.
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Frame every N steps (the last step is always drawn);
        /// defaults to max(1, steps / 20).
        #[arg(long)]
        every: Option<usize>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn invalid(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_INVALID,
        message: message.into(),
    }
}

impl From<ArtifactError> for CliError {
    fn from(e: ArtifactError) -> Self {
        let code = match e {
            ArtifactError::Io { .. } => EXIT_IO,
            ArtifactError::Format { .. } => EXIT_INVALID,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        let code = match e {
            ConfigError::Io { .. } => EXIT_IO,
            _ => EXIT_INVALID,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Artifact(a) => a.into(),
            other => invalid(other.to_string()),
        }
    }
}

fn geometry_error(e: GeometryError) -> CliError {
    match e {
        GeometryError::InfeasibleRange { field, reason } => invalid(format!("config field param_ranges.{field}: {reason}")),
        other => invalid(other.to_string()),
    }
}

fn seed_or_entropy(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = rand::random();
        println!("seed: {s}");
        s
    })
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenerateEnv { config, seed, out } => generate_env(config.as_deref(), seed, &out),
        Command::Train {
            config,
            env,
            seed,
            episodes,
            out_qtable,
            out_curve,
        } => cmd_train(config.as_deref(), &env, seed, episodes, &out_qtable, &out_curve),
        Command::Eval {
            config,
            env,
            qtable,
            episodes,
            seed,
            traces_dir,
        } => cmd_eval(config.as_deref(), &env, &qtable, episodes, seed, traces_dir.as_deref()),
        Command::Benchmark {
            config,
            seed,
            threads,
            out_report,
        } => cmd_benchmark(config.as_deref(), seed, threads, &out_report),
        Command::Render {
            env,
            trace,
            out_dir,
            every,
        } => cmd_render(&env, &trace, &out_dir, every),
    }
}

fn generate_env(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let config = RunConfig::load_or_default(config)?;
    let seed = seed_or_entropy(seed);
    let params = sample_params(&config.param_ranges, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(geometry_error)?;
    let lumen = generate_bifurcation_with_goal(&params, &config.goal).map_err(geometry_error)?;
    artifacts::save_lumen(out, &lumen)?;
    println!("diameter: {}", params.diameter);
    println!("main_curvature: {}", params.main_curvature);
    println!("distance_to_bifurcation: {}", params.distance_to_bifurcation);
    println!("branch_curvature: {}", params.branch_curvature);
    println!("bifurcation_angle: {}", params.bifurcation_angle);
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    env: &Path,
    seed: Option<u64>,
    episodes: Option<usize>,
    out_qtable: &Path,
    out_curve: &Path,
) -> Result<(), CliError> {
    let config = RunConfig::load_or_default(config)?;
    let episodes = episodes.unwrap_or(config.benchmark.n_train_episodes);
    if episodes == 0 {
        return Err(invalid("--episodes must be >= 1"));
    }
    let lumen = artifacts::load_lumen(env)?;
    let seed = seed_or_entropy(seed);
    let (q, curve) = train(
        &lumen,
        &config.robot,
        &config.agent,
        &config.reward,
        episodes,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    artifacts::save_qtable(out_qtable, &q)?;
    artifacts::write_curve_csv(out_curve, &curve)?;
    let tail = &curve[curve.len().saturating_sub(100)..];
    let goals = tail.iter().filter(|r| r.outcome == Outcome::Goal).count();
    println!("trained {episodes} episodes, {} states; last {} episodes reached the goal {goals} times", q.len(), tail.len());
    Ok(())
}

fn cmd_eval(
    config: Option<&Path>,
    env: &Path,
    qtable: &Path,
    episodes: usize,
    seed: Option<u64>,
    traces_dir: Option<&Path>,
) -> Result<(), CliError> {
    if episodes == 0 {
        return Err(invalid("--episodes must be >= 1"));
    }
    let config = RunConfig::load_or_default(config)?;
    let lumen = artifacts::load_lumen(env)?;
    let q = artifacts::load_qtable(qtable)?;
    let seed = seed_or_entropy(seed);
    let results = evaluate(
        &lumen,
        &config.robot,
        &config.agent,
        &config.reward,
        &q,
        episodes,
        traces_dir.is_some(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    if let Some(dir) = traces_dir {
        std::fs::create_dir_all(dir).map_err(|e| ArtifactError::io(dir, e))?;
        let width = (episodes - 1).to_string().len();
        for (i, r) in results.iter().enumerate() {
            if let Some(t) = &r.trajectory {
                artifacts::export_trajectory(&dir.join(format!("episode_{i:0width$}.jsonl")), t)?;
            }
        }
    }
    let count = |o| results.iter().filter(|r| r.outcome == o).count();
    let successes = count(Outcome::Goal);
    println!(
        "episodes: {episodes}  goal: {successes}  fail: {}  timeout: {}",
        count(Outcome::Fail),
        count(Outcome::Timeout)
    );
    println!("success rate: {}", successes as f64 / episodes as f64);
    Ok(())
}

fn cmd_benchmark(config: Option<&Path>, seed: Option<u64>, threads: Option<usize>, out: &Path) -> Result<(), CliError> {
    let config = RunConfig::load_or_default(config)?;
    let mut spec = config.benchmark_spec();
    if let Some(s) = seed {
        spec.master_seed = s;
    }
    let threads = threads.unwrap_or(config.benchmark.threads);
    if threads == 0 {
        return Err(invalid("--threads must be >= 1"));
    }
    let run = run_benchmark_parallel(&spec, threads)?;
    persist_report(&run.report, out)?;
    for (e, t) in run.report.environments.iter().zip(&run.per_environment) {
        println!(
            "env {}: {}/{} goal, {} fail, {} timeout ({:.1} s)",
            e.index,
            e.successes,
            e.episodes,
            e.failures,
            e.timeouts,
            t.as_secs_f64()
        );
    }
    println!(
        "aggregate success rate: {} ({}/{}), wall clock {:.1} s",
        run.report.aggregate_success_rate,
        run.report.total_successes,
        run.report.total_episodes,
        run.elapsed.as_secs_f64()
    );
    Ok(())
}

fn cmd_render(env: &Path, trace: &Path, out_dir: &Path, every: Option<usize>) -> Result<(), CliError> {
    if every == Some(0) {
        return Err(invalid("--every must be >= 1"));
    }
    let lumen = artifacts::load_lumen(env)?;
    let trajectory = artifacts::load_trajectory(trace)?;
    let every = every.unwrap_or_else(|| render::default_every(trajectory.len()));
    let frames = render::render_trajectory(&lumen, &trajectory, out_dir, every)?;
    println!("wrote {} frames to {}", frames.len(), out_dir.display());
    Ok(())
}
