use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use augsched::env::{EnvConfig, EnvMode};
use augsched::harness::{self, parse_config, ExperimentConfig};
use augsched::nn::load_checkpoint;
use augsched::scheduler::Method;

#[derive(Parser)]
#[command(name = "augsched", version, about = "Scheduled augmentation distillation for PPO on a pixel gridworld")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured (method, seed) pair, then write the report and plots.
    Run {
        config: PathBuf,
        /// Run only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this method.
        #[arg(long)]
        method: Option<Method>,
        /// Output directory (overrides experiment.output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean return of a checkpoint on one mode.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        mode: EnvMode,
        /// Experiment config giving the env and network; defaults to
        /// `config.toml` beside the checkpoint, then to built-in defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rebuild report.csv, report.txt and the SVG curves of a run directory.
    Report { runs_dir: PathBuf },
    /// Write sample observations of every mode (and their augmentations) as PPM.
    DumpFrames {
        config: PathBuf,
        #[arg(long, default_value = "frames")]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

fn eval_config(checkpoint: &Path, explicit: Option<&Path>) -> anyhow::Result<(EnvConfig, harness::config::NetworkConfig)> {
    let beside = checkpoint.parent().map(|d| d.join("config.toml"));
    let path = explicit.map(Path::to_path_buf).or(beside.filter(|p| p.exists()));
    match path {
        Some(p) => {
            let c = parse_config(&p)?;
            Ok((c.env, c.network))
        }
        None => Ok((EnvConfig::default(), Default::default())),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            seed,
            method,
            out,
        } => {
            let mut cfg: ExperimentConfig = parse_config(&config)?;
            if let Some(s) = seed {
                cfg.experiment.seeds = vec![s];
            }
            if let Some(m) = method {
                cfg.experiment.methods = vec![m];
            }
            if let Some(o) = out {
                cfg.experiment.output_dir = o;
            }
            cfg.validate()?;
            let outcome = harness::run_suite(&cfg)?;
            for s in &outcome.completed {
                println!(
                    "{} seed {}: train {:.3} test-bg {:.3} test-lv {:.3} ({} env steps)",
                    s.method, s.seed, s.train_return, s.test_bg_return, s.test_lv_return, s.env_steps
                );
            }
            if !outcome.report.is_empty() {
                print!("{}", harness::report::render_table(&outcome.report));
            }
            println!("results in {}", outcome.dir.display());
            if !outcome.failures.is_empty() {
                for (name, e) in &outcome.failures {
                    eprintln!("run {name} failed: {e}");
                }
                bail!("{} of {} runs failed", outcome.failures.len(), outcome.failures.len() + outcome.completed.len());
            }
        }
        Command::Eval {
            checkpoint,
            mode,
            config,
            episodes,
            seed,
        } => {
            let (env, network) = eval_config(&checkpoint, config.as_deref())?;
            env.validate()?;
            let spec = network.spec_for(&env);
            let (params, _) = load_checkpoint(&checkpoint, &spec)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let mean = harness::evaluate(&params, &Arc::new(env), mode, episodes, seed)?;
            println!("{mode} mean return over {episodes} episodes: {mean:.4}");
        }
        Command::Report { runs_dir } => {
            let rows = harness::report_dir(&runs_dir)?;
            print!("{}", harness::report::render_table(&rows));
        }
        Command::DumpFrames { config, out, count } => {
            let cfg = parse_config(&config)?;
            let files = harness::dump_frames(&cfg, &out, count)?;
            println!("wrote {} frames to {}", files.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
