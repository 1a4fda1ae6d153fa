//! Runs every (method, seed) pair of an experiment and aggregates the results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::{evaluate, probe_observations};
use super::metrics::{read_metrics, write_metrics, MetricsRow, Stage};
use super::report::{build_report, emit_report, ReportRow, RunResult, MODES};
use super::svg::{line_chart, Series};
use crate::augment::Augmentation;
use crate::distill::policy_distance;
use crate::env::EnvMode;
use crate::error::{Error, Result};
use crate::nn::{save_checkpoint, ParameterSet};
use crate::rng::{self, tags};
use crate::scheduler::bandit::write_gain_log;
use crate::scheduler::{train, EpochMetrics, Method, TrainObserver};
use crate::tensor::Tensor;

pub const THREADS_ENV: &str = "AUGSCHED_THREADS";

pub fn run_name(method: Method, seed: u64) -> String {
    format!("{method}_seed{seed}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    /// Environment steps consumed by RL rollouts.
    pub env_steps: u64,
    /// Environment steps spent filling the post-training distillation buffer.
    pub distill_fill_steps: u64,
    pub da_phases: usize,
    pub train_return: f64,
    pub test_bg_return: f64,
    pub test_lv_return: f64,
}

struct Recorder<'a> {
    config: &'a ExperimentConfig,
    method: Method,
    seed: u64,
    probe: Tensor,
    phi: Option<Augmentation>,
    rows: Vec<MetricsRow>,
}

impl Recorder<'_> {
    fn measure(&self, params: &ParameterSet, epoch: usize, stage: Stage) -> Result<([f64; 3], Option<f64>)> {
        let env = std::sync::Arc::new(self.config.env.clone());
        let eval_seed = rng::derive_seed(rng::derive_seed(self.seed, tags::EVAL), epoch as u64);
        let episodes = self.config.experiment.eval_episodes;
        let mut returns = [0.0; 3];
        for (slot, mode) in returns.iter_mut().zip([EnvMode::EasyBg, EnvMode::TestBg, EnvMode::TestLv]) {
            *slot = evaluate(params, &env, mode, episodes, eval_seed)?;
        }
        let distance = match &self.phi {
            Some(phi) => {
                let mut r = rng::stream(eval_seed, tags::DIAGNOSTIC + stage as u64);
                Some(policy_distance(params, &self.probe, phi, &mut r)?)
            }
            None => None,
        };
        Ok((returns, distance))
    }
}

impl TrainObserver for Recorder<'_> {
    fn on_epoch(&mut self, m: &EpochMetrics, params: &ParameterSet) -> Result<()> {
        let every = self.config.experiment.eval_every.max(1);
        if m.epoch % every != 0 && m.epoch != self.config.schedule.epochs {
            return Ok(());
        }
        let (returns, policy_distance) = self.measure(params, m.epoch, Stage::Rl)?;
        let row = MetricsRow {
            env_steps: m.env_steps,
            epoch: m.epoch,
            stage: Stage::Rl,
            method: self.method.to_string(),
            seed: self.seed,
            train_return: returns[0],
            test_bg_return: returns[1],
            test_lv_return: returns[2],
            policy_loss: m.update.policy_loss,
            value_loss: m.update.value_loss,
            entropy: m.update.entropy,
            aux_loss: m.update.aux_loss,
            policy_distance,
            da_phase: m.da_phase,
        };
        row.check_finite()?;
        self.rows.push(row);
        Ok(())
    }
}

/// Trains one (method, seed) pair and writes its files into `dir`.
pub fn run_one(config: &ExperimentConfig, method: Method, seed: u64, dir: &Path) -> Result<RunSummary> {
    let setup = config.setup(method, seed);
    let probe = probe_observations(&setup.env, config.experiment.probe_observations.max(1), seed)?;
    let mut rec = Recorder {
        config,
        method,
        seed,
        probe,
        phi: config.experiment.augmentations.iter().copied().find(|a| !a.is_identity()),
        rows: Vec::new(),
    };
    let outcome = train(&setup, &mut rec)?;
    if outcome.before_exda.is_some() {
        let last = rec.rows.last().cloned().ok_or_else(|| Error::EmptyBuffer("no evaluation rows".into()))?;
        let epoch = config.schedule.epochs;
        let (returns, policy_distance) = rec.measure(&outcome.params, epoch, Stage::Distilled)?;
        let report = outcome.exda.as_ref();
        let row = MetricsRow {
            stage: Stage::Distilled,
            train_return: returns[0],
            test_bg_return: returns[1],
            test_lv_return: returns[2],
            aux_loss: report.and_then(|r| r.epoch_losses.last().copied()).unwrap_or(0.0),
            policy_distance,
            da_phase: false,
            ..last
        };
        rec.rows.push(row);
    }
    let name = run_name(method, seed);
    write_metrics(&dir.join(format!("{name}.csv")), &rec.rows)?;
    save_checkpoint(&outcome.params, Some(&outcome.adam), &dir.join(format!("{name}.ckpt")))?;
    if let Some(b) = &outcome.bandit {
        write_gain_log(&dir.join(format!("{name}_gains.csv")), &outcome.gains, b.num_arms())?;
    }
    let last = rec.rows.last().expect("final epoch is always evaluated");
    let summary = RunSummary {
        method: method.to_string(),
        seed,
        env_steps: outcome.epochs.last().map_or(0, |e| e.env_steps),
        distill_fill_steps: outcome.exda_fill_steps,
        da_phases: outcome.da_phases.len(),
        train_return: last.train_return,
        test_bg_return: last.test_bg_return,
        test_lv_return: last.test_lv_return,
    };
    let path = dir.join(format!("{name}.summary.toml"));
    let text = toml::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub dir: PathBuf,
    pub completed: Vec<RunSummary>,
    /// (run name, error message) of runs that failed.
    pub failures: Vec<(String, String)>,
    pub report: Vec<ReportRow>,
}

pub fn worker_limit() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// All runs of `config` into `<output_dir>/<name>/`, then the report and plots.
pub fn run_suite(config: &ExperimentConfig) -> Result<SuiteOutcome> {
    let dir = config.experiment.output_dir.join(&config.experiment.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, config.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;

    let jobs: Vec<(Method, u64)> = config
        .methods()
        .into_iter()
        .flat_map(|m| config.experiment.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_limit())
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<(String, Result<RunSummary>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, s)| (run_name(m, s), run_one(config, m, s, &dir)))
            .collect()
    });
    let mut completed = Vec::new();
    let mut failures = Vec::new();
    for (name, r) in results {
        match r {
            Ok(s) => completed.push(s),
            Err(e) => {
                let path = dir.join(format!("{name}.error"));
                std::fs::write(&path, format!("{e}\n")).map_err(|err| Error::io(&path, err))?;
                failures.push((name, e.to_string()));
            }
        }
    }
    let report = if completed.is_empty() { Vec::new() } else { report_dir(&dir)? };
    Ok(SuiteOutcome {
        dir,
        completed,
        failures,
        report,
    })
}

fn metrics_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_name().is_some_and(|n| {
                    let n = n.to_string_lossy();
                    !n.ends_with("_gains.csv") && n != "report.csv"
                })
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Rebuilds `report.csv`, `report.txt` and the SVG curves from the metrics
/// files found in `dir`.
pub fn report_dir(dir: &Path) -> Result<Vec<ReportRow>> {
    let mut runs = Vec::new();
    let mut curves: BTreeMap<String, Vec<Vec<MetricsRow>>> = BTreeMap::new();
    for path in metrics_files(dir)? {
        let rows = read_metrics(&path)?;
        let Some(last) = rows.last() else { continue };
        runs.push(RunResult {
            method: last.method.clone(),
            seed: last.seed,
            returns: [last.train_return, last.test_bg_return, last.test_lv_return],
        });
        curves.entry(last.method.clone()).or_default().push(rows);
    }
    let rows = build_report(&runs)?;
    emit_report(dir, &rows)?;
    for (m, mode) in MODES.iter().enumerate() {
        let series: Vec<Series> = curves
            .iter()
            .map(|(method, runs)| Series {
                label: method.clone(),
                points: mean_curve(runs, m),
            })
            .collect();
        let svg = line_chart(&format!("{mode} return"), "epoch", "mean return", &series);
        let path = dir.join(format!("curve_{mode}.svg"));
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

/// Seed-averaged (epoch, return) points; rows are aligned by position.
fn mean_curve(runs: &[Vec<MetricsRow>], mode: usize) -> Vec<(f64, f64)> {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let v: f64 = runs
                .iter()
                .map(|r| [r[i].train_return, r[i].test_bg_return, r[i].test_lv_return][mode])
                .sum::<f64>()
                / runs.len() as f64;
            (runs[0][i].epoch as f64, v)
        })
        .collect()
}
