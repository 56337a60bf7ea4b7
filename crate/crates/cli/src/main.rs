//! `tscsim`: experiment runner for the traffic-signal-control toolkit.
//!
//! Every subcommand accepts `--config FILE` (JSON, flat keys named like the
//! flags) plus individual flags; flags override file values, file values
//! override defaults. Exit codes: 1 config, 2 IO, 3 backend, 4 divergence.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsc_core::critic::TrainCfg;
use tsc_core::simcore::episode::EpisodeError;

use config::{merged_sim_config, resolve_flow_source, resolve_net_source, FileConfig};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Backend(String),
    Divergence(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Io(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Divergence(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
            CliError::Divergence(m) => write!(f, "training diverged: {m}"),
        }
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> CliError {
        match e {
            EpisodeError::Io(err) => CliError::Io(err.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "tscsim", version, about = "Traffic-signal-control experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one episode with a controller and write log + metrics report.
    Run(RunArgs),
    /// Run an episode driven by an LLM backend, keeping every trajectory.
    Collect(CollectArgs),
    /// Fit the action-value critic on recorded episode logs.
    TrainCritic(TrainArgs),
    /// Keep only trajectories whose action the critic ranks best.
    Filter(FilterArgs),
    /// Convert trajectory records into an instruction-tuning JSONL dataset.
    ExportIft(ExportArgs),
    /// Evaluate the ranking loss (and gradients) over batch files.
    Rbc(RbcArgs),
    /// Compare metrics across recorded episode logs.
    Report(ReportArgs),
}

/// Options shared by episode-producing commands.
#[derive(Args, Clone)]
struct RunArgs {
    /// JSON config file; flags given here override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Roadnet JSON file (exclusive with --synthetic).
    #[arg(long)]
    roadnet: Option<PathBuf>,
    /// Synthetic grid spec like 2x3 or 2x3:400 (rows x cols [: road length m]).
    #[arg(long)]
    synthetic: Option<String>,
    /// Flow JSON file (exclusive with --rate).
    #[arg(long)]
    flow: Option<PathBuf>,
    /// Synthetic demand: per-second arrival probability per entry road.
    #[arg(long)]
    rate: Option<f64>,
    /// Synthetic demand duration in seconds (default: episode length).
    #[arg(long)]
    flow_duration: Option<u64>,
    /// Synthetic demand RNG seed.
    #[arg(long)]
    flow_seed: Option<u64>,
    /// random | fixedtime | maxpressure | greedy | critic | llm
    #[arg(long)]
    controller: Option<String>,
    /// Fixed-time phase order, e.g. ETWT,ELWL,NTST,NLSL.
    #[arg(long)]
    order: Option<String>,
    /// Critic weights file (with --controller critic).
    #[arg(long)]
    critic_weights: Option<PathBuf>,
    /// Backend spec JSON (with --controller llm / collect).
    #[arg(long)]
    backend: Option<PathBuf>,
    #[arg(long)]
    episode_len: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    green_s: Option<u64>,
    #[arg(long)]
    yellow_s: Option<u64>,
    #[arg(long)]
    all_red_s: Option<u64>,
    /// Phase every signal starts in.
    #[arg(long)]
    initial_phase: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add per-intersection waiting times to the report.
    #[arg(long)]
    per_intersection: bool,
}

#[derive(Args)]
struct CollectArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Completions sampled per switch (a ranking group shares one prompt).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Episode logs to learn from (repeatable or comma separated).
    #[arg(long, value_delimiter = ',')]
    episodes: Vec<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    capacity: Option<usize>,
    #[arg(long)]
    sample_size: Option<usize>,
    #[arg(long)]
    target_sync: Option<usize>,
    #[arg(long)]
    divergence_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trajectory records JSONL.
    #[arg(long)]
    records: Option<PathBuf>,
    /// Critic weights JSON.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RbcArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ranking batches JSONL: {"p": [...], "q": [...], "beta": B} per line.
    #[arg(long)]
    batches: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    episodes: Vec<PathBuf>,
    #[arg(long)]
    per_intersection: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_run(args: RunArgs) -> Result<commands::RunParams, CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let episode_len = args.episode_len.or(file.episode_len).unwrap_or(3600);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let sim = merged_sim_config(
        episode_len,
        seed,
        args.green_s.or(file.green_s),
        args.yellow_s.or(file.yellow_s),
        args.all_red_s.or(file.all_red_s),
        args.initial_phase.or(file.initial_phase).as_deref(),
    )?;
    let net_source = resolve_net_source(
        args.roadnet.or(file.roadnet),
        args.synthetic.or(file.synthetic),
    )?;
    let flow_source = resolve_flow_source(
        args.flow.or(file.flow),
        args.rate.or(file.rate),
        args.flow_duration.or(file.flow_duration),
        args.flow_seed.or(file.flow_seed),
        episode_len,
    )?;
    let controller = args
        .controller
        .or(file.controller)
        .ok_or_else(|| CliError::Config("--controller is required".into()))?;
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    Ok(commands::RunParams {
        net_source,
        flow_source,
        controller,
        order: args.order.or(file.order),
        critic_weights: args.critic_weights.or(file.critic_weights),
        backend: args.backend.or(file.backend),
        sim,
        out,
        per_intersection: args.per_intersection || file.per_intersection.unwrap_or(false),
    })
}

fn resolve_train(args: TrainArgs) -> Result<commands::TrainParams, CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let defaults = TrainCfg::default();
    let episodes = if args.episodes.is_empty() {
        file.episodes.unwrap_or_default()
    } else {
        args.episodes
    };
    let cfg = TrainCfg {
        lr: args.lr.or(file.lr).unwrap_or(defaults.lr),
        gamma: args.gamma.or(file.gamma).unwrap_or(defaults.gamma),
        capacity: args.capacity.or(file.capacity).unwrap_or(defaults.capacity),
        sample_size: args
            .sample_size
            .or(file.sample_size)
            .unwrap_or(defaults.sample_size),
        target_sync: args
            .target_sync
            .or(file.target_sync)
            .unwrap_or(defaults.target_sync),
        steps: args.steps.or(file.steps).unwrap_or(defaults.steps),
        divergence_threshold: args
            .divergence_threshold
            .or(file.divergence_threshold)
            .unwrap_or(defaults.divergence_threshold),
        seed: args.seed.or(file.seed).unwrap_or(defaults.seed),
    };
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    Ok(commands::TrainParams { episodes, cfg, out })
}

fn dispatch(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Run(args) => commands::cmd_run(resolve_run(args)?),
        Cmd::Collect(args) => {
            let file = FileConfig::load(args.run.config.as_deref())?;
            let k = args.k.or(file.k).unwrap_or(1);
            let run = resolve_run(args.run)?;
            commands::cmd_collect(commands::CollectParams { run, k })
        }
        Cmd::TrainCritic(args) => commands::cmd_train_critic(resolve_train(args)?),
        Cmd::Filter(args) => {
            let file = FileConfig::load(args.config.as_deref())?;
            let records = args
                .records
                .or(file.records)
                .ok_or_else(|| CliError::Config("--records is required".into()))?;
            let weights = args
                .weights
                .or(file.weights)
                .ok_or_else(|| CliError::Config("--weights is required".into()))?;
            let out = args
                .out
                .or(file.out)
                .ok_or_else(|| CliError::Config("--out is required".into()))?;
            commands::cmd_filter(&records, &weights, &out)
        }
        Cmd::ExportIft(args) => {
            let file = FileConfig::load(args.config.as_deref())?;
            let records = args
                .records
                .or(file.records)
                .ok_or_else(|| CliError::Config("--records is required".into()))?;
            let out = args
                .out
                .or(file.out)
                .ok_or_else(|| CliError::Config("--out is required".into()))?;
            commands::cmd_export_ift(&records, &out)
        }
        Cmd::Rbc(args) => {
            let file = FileConfig::load(args.config.as_deref())?;
            let batches = args
                .batches
                .or(file.batches)
                .ok_or_else(|| CliError::Config("--batches is required".into()))?;
            let out = args.out.or(file.out);
            commands::cmd_rbc(&batches, out.as_deref())
        }
        Cmd::Report(args) => {
            let file = FileConfig::load(args.config.as_deref())?;
            let episodes = if args.episodes.is_empty() {
                file.episodes.unwrap_or_default()
            } else {
                args.episodes
            };
            let per = args.per_intersection || file.per_intersection.unwrap_or(false);
            let out = args.out.or(file.out);
            commands::cmd_report(&episodes, per, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
