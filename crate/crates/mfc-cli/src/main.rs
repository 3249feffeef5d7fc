//! `mfc` — train, evaluate, and probe mean-field swarm controllers.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfc_cli::commands::{self, CliError, OpenLoopMode};
use mfc_cli::config::{parse_config, RunConfig};

#[derive(Parser)]
#[command(name = "mfc", version, about = "Decentralized mean-field swarm control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides ppo.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides run.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy, writing metrics.csv and checkpoint.bin.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides env.n_agents.
        #[arg(long)]
        agents: Option<usize>,
    },
    /// Evaluate a checkpoint greedily across population sizes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated population sizes (overrides run.eval_agents).
        #[arg(long)]
        agents: Option<String>,
        /// Overrides run.eval_episodes.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Compare closed-loop control against an open-loop replay.
    Openloop {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// replay_sequence | freeze_t0
        #[arg(long, default_value = "replay_sequence")]
        mode: String,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Propagation-of-chaos sweep on the bundled finite system.
    Chaos {
        #[command(flatten)]
        common: Common,
    },
    /// Feature-scaling benchmark: RBF per-axis vs joint histograms.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Export one greedy episode as per-agent frames for plotting.
    ExportFrames {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides env.n_agents.
        #[arg(long)]
        agents: Option<usize>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        None => RunConfig::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config `{}`: {e}", path.display()))
            })?;
            parse_config(&text)?
        }
    };
    if let Some(seed) = common.seed {
        cfg.ppo.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn parse_agent_list(s: &str) -> Result<Vec<usize>, CliError> {
    let agents: Result<Vec<usize>, _> = s.split(',').map(|a| a.trim().parse()).collect();
    match agents {
        Ok(a) if !a.is_empty() => Ok(a),
        _ => Err(CliError::Config(format!("--agents `{s}` is not a comma-separated list of counts"))),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { common, checkpoint, agents } => {
            let mut cfg = load(&common)?;
            if let Some(n) = agents {
                cfg.env.n_agents = n;
            }
            commands::cmd_train(&cfg, checkpoint.as_deref())
        }
        Command::Eval { common, checkpoint, agents, episodes } => {
            let mut cfg = load(&common)?;
            if let Some(list) = &agents {
                cfg.eval_agents = parse_agent_list(list)?;
            }
            if let Some(eps) = episodes {
                cfg.eval_episodes = eps;
            }
            commands::cmd_eval(&cfg, &checkpoint)
        }
        Command::Openloop { common, checkpoint, mode, episodes } => {
            let mut cfg = load(&common)?;
            if let Some(eps) = episodes {
                cfg.eval_episodes = eps;
            }
            commands::cmd_openloop(&cfg, &checkpoint, OpenLoopMode::parse(&mode)?)
        }
        Command::Chaos { common } => commands::cmd_chaos(&load(&common)?),
        Command::Bench { common } => commands::cmd_bench(&load(&common)?),
        Command::ExportFrames { common, checkpoint, agents } => {
            let mut cfg = load(&common)?;
            if let Some(n) = agents {
                cfg.env.n_agents = n;
            }
            commands::cmd_export_frames(&cfg, &checkpoint)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
