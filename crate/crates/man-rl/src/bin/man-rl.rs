//! Command-line entry point for training, evaluation, oracles, comparison
//! sweeps, gradient checks and plot-data extraction.
//!
//! Output directory resolution: an explicit `--out` wins, then the
//! `MAN_RL_OUT` environment variable, then no artifacts are written.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use man_rl::harness::{
    compare, evaluate_policy, run_training, smooth, AgentKind, AnyAgent, EnvInstance,
    EnvKind, ExperimentConfig,
};
use man_rl::nn::finite_difference_suite;
use man_rl::rng::RngStream;
use man_rl::tabular::{value_iteration, ExplicitMdp};

#[derive(Parser)]
#[command(name = "man-rl", version, about = "Factored-action value learning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent with a config file and seed, writing CSV + checkpoint.
    Train {
        /// Flat key=value config file.
        #[arg(long)]
        config: PathBuf,
        /// Run seed; defaults to the first entry of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for CSV and checkpoints.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy evaluation of a saved checkpoint.
    Eval {
        /// Config file describing the agent architecture and environment.
        #[arg(long)]
        config: PathBuf,
        /// Agent checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of greedy episodes.
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        /// Seed for environment stochasticity during evaluation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact value iteration on an explicit-MDP text file.
    Oracle {
        /// MDP file: header `S A1 A2 gamma`, lines `s a1 a2 s' prob reward`.
        #[arg(long)]
        mdp: PathBuf,
        /// Discount override; defaults to the gamma in the file header.
        #[arg(long)]
        gamma: Option<f64>,
        /// Sup-norm convergence tolerance.
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Multi-agent multi-seed sweep with a joined learning-curve CSV.
    Compare {
        /// Comma-separated agent kinds, e.g. man,dqn,ddqn.
        #[arg(long, value_delimiter = ',')]
        agents: Vec<String>,
        /// Environment kind (blockstack or mdp).
        #[arg(long, default_value = "blockstack")]
        env: String,
        /// Number of seeds (runs seeds 0..N) or a comma list via --seed-list.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Explicit seed list overriding --seeds.
        #[arg(long, value_delimiter = ',')]
        seed_list: Vec<u64>,
        /// Optional base config file for shared hyperparameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Episode budget per run (overrides the config).
        #[arg(long)]
        episodes: Option<usize>,
        /// Output directory for compare.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check of the network substrate.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Smooth a training CSV into plot-ready (episode, trailing mean) rows.
    PlotData {
        /// Per-episode training CSV written by `train`.
        #[arg(long)]
        csv: PathBuf,
        /// Trailing window length.
        #[arg(long, default_value_t = 100)]
        window: usize,
    },
}

fn resolve_out(cli_out: Option<PathBuf>) -> Option<PathBuf> {
    cli_out.or_else(|| std::env::var_os("MAN_RL_OUT").map(PathBuf::from))
}

fn run(command: Command) -> man_rl::Result<()> {
    match command {
        Command::Train { config, seed, out } => {
            let config = ExperimentConfig::from_file(&config)?;
            let seed = seed.unwrap_or(config.seeds[0]);
            let out = resolve_out(out);
            let (_, result) = run_training(&config, seed, out.as_deref())?;
            let final_mean = man_rl::harness::final_window_mean(&result.records, 100);
            println!(
                "trained {} for {} episodes (seed {seed}); final-100 mean return {final_mean}",
                config.agent.name(),
                result.records.len()
            );
            if let Some(path) = &result.csv_path {
                println!("csv: {}", path.display());
            }
            if let Some(path) = &result.checkpoint_path {
                println!("checkpoint: {}", path.display());
            }
            Ok(())
        }
        Command::Eval { config, checkpoint, episodes, seed } => {
            let config = ExperimentConfig::from_file(&config)?;
            let mut env = EnvInstance::build(&config)?;
            let mut init_rng = RngStream::new(seed).fork(1);
            let mut agent = AnyAgent::build(&config, &env, &mut init_rng)?;
            match &mut agent {
                AnyAgent::Man(a) => a.load(&checkpoint)?,
                AnyAgent::Dqn(a) => a.load(&checkpoint)?,
                _ => {
                    return Err(man_rl::Error::Config(
                        "eval supports deep agent checkpoints only".into(),
                    ))
                }
            }
            let mut rng = RngStream::new(seed).fork(9);
            let (mean, returns) = evaluate_policy(&agent, &mut env, episodes, &mut rng)?;
            println!("mean return over {episodes} greedy episodes: {mean}");
            for (i, r) in returns.iter().enumerate() {
                println!("episode {i}: {r}");
            }
            Ok(())
        }
        Command::Oracle { mdp, gamma, tol } => {
            let text = fs::read_to_string(&mdp)?;
            let mdp = ExplicitMdp::parse(&text)?;
            let gamma = gamma.unwrap_or(mdp.gamma);
            let solution = value_iteration(&mdp, gamma, tol)?;
            println!("value iteration converged in {} sweeps (gamma {gamma})", solution.sweeps);
            for (s, v) in solution.v_star.iter().enumerate() {
                let joint = solution.greedy_policy[s];
                let (a1, a2) = mdp.space().split(joint)?;
                println!("V*({s}) = {v}  greedy action ({a1},{a2})");
            }
            Ok(())
        }
        Command::Compare { agents, env, seeds, seed_list, config, episodes, out } => {
            let agent_kinds: Vec<AgentKind> = agents
                .iter()
                .map(|s| AgentKind::parse(s))
                .collect::<man_rl::Result<_>>()?;
            let mut base = match config {
                Some(path) => ExperimentConfig::from_file(&path)?,
                None => ExperimentConfig::default(),
            };
            base.env = EnvKind::parse(&env)?;
            if let Some(episodes) = episodes {
                base.episodes = episodes;
            }
            let seeds: Vec<u64> = if seed_list.is_empty() {
                (0..seeds).collect()
            } else {
                seed_list
            };
            let out = resolve_out(out);
            let sweeps = compare(&base, &agent_kinds, &seeds, out.as_deref())?;
            println!("agent            median-final100    pooled-bumpiness");
            for sweep in &sweeps {
                let bump = sweep
                    .mean_terminal_bumpiness
                    .map(|b| b.to_string())
                    .unwrap_or_else(|| "-".into());
                println!(
                    "{:<16} {:<18} {}",
                    sweep.agent.name(),
                    sweep.median_final_mean(),
                    bump
                );
            }
            if let Some(dir) = out {
                println!("csv: {}", dir.join("compare.csv").display());
            }
            Ok(())
        }
        Command::Gradcheck { cases, seed } => {
            let report = finite_difference_suite(cases, seed)?;
            for case in &report.cases {
                println!(
                    "layers {:?} batch {}: max relative error {:.3e}",
                    case.layer_sizes, case.batch, case.max_rel_err
                );
            }
            println!("overall max relative error: {:.3e}", report.max_rel_err);
            if report.max_rel_err >= 1e-4 {
                return Err(man_rl::Error::Numeric(format!(
                    "gradient check failed: {} >= 1e-4",
                    report.max_rel_err
                )));
            }
            println!("gradient check passed at 1e-4");
            Ok(())
        }
        Command::PlotData { csv, window } => {
            let text = fs::read_to_string(&csv)?;
            let mut episodes = Vec::new();
            let mut returns = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if i == 0 || line.starts_with('#') {
                    continue;
                }
                let mut fields = line.split(',');
                let episode: usize = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or(man_rl::Error::Parse {
                        line: i + 1,
                        message: "bad episode field".into(),
                    })?;
                let ret: f64 = fields
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or(man_rl::Error::Parse {
                        line: i + 1,
                        message: "bad return field".into(),
                    })?;
                episodes.push(episode);
                returns.push(ret);
            }
            println!("episode,return_smoothed");
            for (episode, value) in episodes.iter().zip(smooth(&returns, window)) {
                println!("{episode},{value}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
