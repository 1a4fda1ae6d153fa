//! Experiment plumbing: configuration, evaluation, metrics files, reports
//! and plots.

pub mod config;
pub mod eval;
pub mod metrics;
pub mod report;
pub mod suite;
pub mod svg;

use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use config::{parse_config, ExperimentConfig};
pub use eval::{evaluate, evaluate_policy, BfsPolicy, NetworkPolicy, Policy};
pub use metrics::{read_metrics, write_metrics, MetricsRow, Stage};
pub use report::{build_report, emit_report, ReportRow, RunResult};
pub use suite::{report_dir, run_one, run_suite, RunSummary, SuiteOutcome};

use crate::augment::apply;
use crate::env::{make_env, write_ppm, EnvMode};
use crate::error::{Error, Result};
use crate::rng;

/// Writes the first observation of `count` episodes per mode, plus one
/// augmented copy per configured augmentation, as PPM files.
pub fn dump_frames(config: &ExperimentConfig, out: &Path, count: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let env_cfg = Arc::new(config.env.clone());
    let seed = config.experiment.seeds[0];
    let mut written = Vec::new();
    for mode in [EnvMode::EasyBg, EnvMode::TestBg, EnvMode::TestLv] {
        let mut env = make_env(Arc::clone(&env_cfg), mode, rng::derive_seed(seed, mode as u64))?;
        for i in 0..count {
            let obs = env.reset();
            let path = out.join(format!("{mode}_{i}.ppm"));
            write_ppm(&path, &obs)?;
            written.push(path);
            for (k, aug) in config.experiment.augmentations.iter().enumerate() {
                let mut r = rng::stream(seed, (i * 64 + k) as u64);
                let img = apply(aug, &obs, &mut r)?;
                let path = out.join(format!("{mode}_{i}_{}.ppm", aug.kind()));
                write_ppm(&path, &img)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
