//! Command-line entry points for training, evaluation, benchmarks,
//! digital-twin sessions, demonstration recording and reports.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use twinmarl_core::randomization::Degree;
use twinmarl_core::replica::ParallelMode;
use twinmarl_core::vehicle::ScenarioKind;

use crate::config::{load_config, ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(name = "twinmarl", version, about = "Multi-agent driving: training, evaluation and digital-twin runs")]
pub struct Cli {
    /// Experiment configuration (JSON) or a run manifest.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Randomization degree: ndr, ldr or hdr.
    #[arg(long, global = true)]
    pub dr: Option<Degree>,
    /// coop (intersection) or race.
    #[arg(long, global = true)]
    pub scenario: Option<ScenarioKind>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct PolicyArgs {
    /// Checkpoint file, or a training output directory holding final
    /// checkpoints. Race needs one per slot.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Use the follow-the-gap baseline.
    #[arg(long, conflicts_with_all = ["checkpoint", "uniform"])]
    pub fgm: bool,
    /// Use uniformly random actions.
    #[arg(long, conflicts_with = "checkpoint")]
    pub uniform: bool,
    /// Policy label in KPI files (default: ndr/ldr/hdr, fgm or uniform).
    #[arg(long)]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Realms {
    Sim,
    Twin,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train policies; writes metrics CSVs, checkpoints and a manifest.
    Train {
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
        /// Agent-steps per policy (overrides train.max_steps).
        #[arg(long)]
        steps: Option<u64>,
        /// Demonstration file for imitation terms.
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        replicas: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        mode: Option<ParallelMode>,
    },
    /// Run evaluation episodes in simulation and/or through the twin loop.
    Evaluate {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, value_enum, default_value = "both")]
        realm: Realms,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value = "runs/eval")]
        out: PathBuf,
        /// Wait for an external plant emulator on this address instead of
        /// starting one locally.
        #[arg(long)]
        listen: Option<String>,
        /// Record the twin session's message trace.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Wall-clock scaling over replica counts.
    BenchmarkParallel {
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,15,20,25")]
        k: Vec<usize>,
        #[arg(long, default_value = "environments")]
        mode: ParallelMode,
        /// Agent-steps gathered at every k.
        #[arg(long, default_value_t = 20_000)]
        budget: usize,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "runs/bench")]
        out: PathBuf,
    },
    /// Host the virtual environment for one physical agent.
    TwinServe {
        #[command(flatten)]
        policy: PolicyArgs,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value = "runs/twin")]
        out: PathBuf,
    },
    /// Run the plant emulator against a twin server.
    TwinEmulate {
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        /// CSV of true versus estimated states.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "runs/plant")]
        out: PathBuf,
    },
    /// Record follow-the-gap laps on the race track as demonstrations.
    DemoRecord {
        #[arg(long)]
        laps: Option<usize>,
        #[arg(long, default_value = "demos.ndjson")]
        out: PathBuf,
    },
    /// Summaries, quartiles and the sim-to-twin gap from KPI files.
    Report {
        #[arg(required = true, num_args = 1..)]
        records: Vec<PathBuf>,
        #[arg(long, default_value = "runs/report")]
        out: PathBuf,
    },
    /// One replica of an out-of-process benchmark.
    #[command(hide = true)]
    BenchWorker {
        #[arg(long)]
        replica: usize,
        #[arg(long)]
        budget: usize,
    },
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        Overrides {
            scenario: self.scenario,
            randomization: self.dr,
            seed: self.seed,
        }
    }

    pub fn resolved_config(&self) -> anyhow::Result<ExperimentConfig> {
        load_config(self.config.as_deref())?.resolve(&self.overrides())
    }
}

/// Execute a parsed command line.
pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = cli.resolved_config()?;
    match &cli.command {
        Command::Train {
            out,
            steps,
            demos,
            replicas,
            workers,
            mode,
        } => commands::train(cfg, out, *steps, demos.as_deref(), *replicas, *workers, *mode).map(|_| ()),
        Command::Evaluate {
            policy,
            realm,
            episodes,
            out,
            listen,
            trace,
        } => commands::evaluate(&cfg, policy, *realm, *episodes, out, listen.as_deref(), trace.as_deref()).map(|_| ()),
        Command::BenchmarkParallel {
            k,
            mode,
            budget,
            workers,
            out,
        } => commands::benchmark(cli, &cfg, k, *mode, *budget, *workers, out).map(|_| ()),
        Command::TwinServe {
            policy,
            bind,
            port,
            episodes,
            trace,
            out,
        } => commands::twin_serve(&cfg, policy, &format!("{bind}:{port}"), *episodes, trace.as_deref(), out),
        Command::TwinEmulate { connect, log, out } => commands::twin_emulate(&cfg, connect, log.clone(), out),
        Command::DemoRecord { laps, out } => commands::demo_record(&cfg, *laps, out).map(|_| ()),
        Command::Report { records, out } => commands::report(&cfg, records, out).map(|_| ()),
        Command::BenchWorker { replica, budget } => commands::bench_worker(&cfg, *replica, *budget),
    }
}
