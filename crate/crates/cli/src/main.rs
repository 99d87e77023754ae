use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xlpolicy::commands::{self, EvalPolicy};
use xlpolicy::{CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "xlpolicy", version, about = "Transformer-XL policy learning from demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to paths.out_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Record scripted expert episodes.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Episode count; defaults to data.episodes.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Behaviour cloning from an episode file.
    TrainBc {
        #[command(flatten)]
        common: Common,
        /// Episode file; defaults to paths.dataset.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// PPO fine-tuning in the simulator.
    TrainPpo {
        #[command(flatten)]
        common: Common,
        /// Starting checkpoint.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Start from freshly initialised parameters instead of a checkpoint.
        #[arg(long)]
        cold_start: bool,
    },
    /// Greedy success rate and expert agreement per task.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to paths.checkpoint.
        #[arg(long = "in", conflicts_with = "expert")]
        input: Option<PathBuf>,
        /// Evaluate the scripted expert instead of a model.
        #[arg(long)]
        expert: bool,
        /// Episodes per task; defaults to eval.episodes.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Dense against windowed attention latency.
    Bench {
        #[command(flatten)]
        common: Common,
    },
}

fn setup(common: &Common) -> CliResult<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
    Ok((cfg, out))
}

fn print_trend(name: &str, trend: Option<(f64, f64)>) {
    if let Some((first, last)) = trend {
        println!("{name} loss (window {}): {first:.6} -> {last:.6}", commands::TREND_WINDOW);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData { common, n } => {
            let (cfg, out) = setup(&common)?;
            let s = commands::gen_data(&cfg, n.unwrap_or(cfg.data.episodes), &out)?;
            println!("wrote {} episodes to {} (mean length {:.2})", s.episodes, s.path.display(), s.mean_length);
        }
        Command::TrainBc { common, input } => {
            let (cfg, out) = setup(&common)?;
            let dataset = input.unwrap_or_else(|| cfg.paths.dataset.clone());
            let s = commands::train_bc_cmd(&cfg, &dataset, &out)?;
            println!("{} batches; checkpoint {}", s.rows, s.checkpoint.display());
            print_trend("actor", s.actor_trend);
            print_trend("critic", s.critic_trend);
        }
        Command::TrainPpo { common, input, cold_start } => {
            let (cfg, out) = setup(&common)?;
            let s = commands::train_ppo_cmd(&cfg, input.as_deref(), cold_start, &out)?;
            println!("{} batches; checkpoint {}", s.rows, s.checkpoint.display());
            print_trend("actor", s.actor_trend);
            print_trend("critic", s.critic_trend);
            if let (Some(first), Some(last)) = (s.iteration_returns.first(), s.iteration_returns.last()) {
                println!("rollout return: {first:.4} -> {last:.4}");
            }
        }
        Command::Eval { common, input, expert, n } => {
            let (cfg, out) = setup(&common)?;
            let ckpt = input.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let policy = if expert { EvalPolicy::Expert } else { EvalPolicy::Checkpoint(&ckpt) };
            let reports = commands::eval_cmd(&cfg, policy, n.unwrap_or(cfg.eval.episodes), &out)?;
            println!("task,episodes,success_rate,accuracy,mean_return,mean_length");
            for r in reports {
                println!("{},{},{:.4},{:.4},{:.4},{:.2}", r.task, r.episodes, r.success_rate, r.accuracy, r.mean_return, r.mean_length);
            }
        }
        Command::Bench { common } => {
            let (cfg, out) = setup(&common)?;
            let rows = commands::bench_cmd(&cfg, &out)?;
            print!("{}", commands::bench_to_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &CliError) -> u8 {
    e.exit_code() as u8
}
