mod common;

use augsched::harness::metrics::{read_metrics, Stage};
use augsched::harness::run_suite;
use augsched::scheduler::Method;
use common::smoke_config;

fn run_into(dir: &std::path::Path) -> augsched::harness::SuiteOutcome {
    let mut cfg = smoke_config();
    cfg.experiment.output_dir = dir.to_path_buf();
    cfg.experiment.methods = vec![Method::Ppo, Method::Exda, Method::UcbInda];
    cfg.experiment.seeds = vec![0, 1];
    run_suite(&cfg).unwrap()
}

#[test]
fn suite_writes_artifacts_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = run_into(a.path());
    let out_b = run_into(b.path());
    assert!(out_a.failures.is_empty());
    assert_eq!(out_a.completed.len(), 6);

    let mut csvs: Vec<String> = std::fs::read_dir(&out_a.dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv") && !n.ends_with("_gains.csv") && n != "report.csv")
        .collect();
    csvs.sort();
    assert_eq!(csvs.len(), 6, "{csvs:?}");
    for name in &csvs {
        let x = std::fs::read(out_a.dir.join(name)).unwrap();
        let y = std::fs::read(out_b.dir.join(name)).unwrap();
        assert_eq!(x, y, "{name} differs between runs");
        let rows = read_metrics(&out_a.dir.join(name)).unwrap();
        assert!(!rows.is_empty());
        let distilled = rows.iter().filter(|r| r.stage == Stage::Distilled).count();
        assert_eq!(distilled, usize::from(name.starts_with("exda")));
    }
    for f in ["report.csv", "report.txt", "config.toml", "curve_easybg.svg", "curve_test-bg.svg", "curve_test-lv.svg"] {
        assert!(out_a.dir.join(f).exists(), "{f}");
    }
    assert!(out_a.dir.join("ucb_inda_seed0_gains.csv").exists());
    assert!(out_a.dir.join("ppo_seed1.ckpt").exists());
    let svg = std::fs::read_to_string(out_a.dir.join("curve_test-bg.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert_eq!(out_a.report.len(), 9);
}

#[test]
fn failed_run_leaves_error_file_and_others_complete() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config();
    cfg.experiment.output_dir = dir.path().to_path_buf();
    cfg.experiment.methods = vec![Method::Ppo, Method::UcbInda];
    cfg.experiment.seeds = vec![0];
    // The bandit refuses an arm set without the identity augmentation.
    cfg.experiment.augmentations.retain(|a| !a.is_identity());
    let out = run_suite(&cfg);
    match out {
        Ok(out) => {
            assert_eq!(out.completed.len(), 1);
            assert_eq!(out.failures.len(), 1);
            assert!(out.dir.join("ucb_inda_seed0.error").exists());
        }
        Err(e) => panic!("suite should survive one failed run: {e}"),
    }
}
