//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-6 are exact property checks and decide the exit code. Criteria
//! 7-12 are directional desk-scale reproductions on `configs/desk.toml`
//! (medians over its seeds); they print their verdict but never fail the
//! process, because their outcome depends on training scale.
//!
//! `AUGSCHED_ACCEPTANCE_SEEDS=n` uses only the first `n` desk seeds and
//! `AUGSCHED_ACCEPTANCE_ONLY=1,2,7` restricts the run to those criteria.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;
use std::time::Instant;

use augsched::augment::{batch_apply, Augmentation};
use augsched::distill::{exda_on_buffer, exdrac, fill_observations, policy_distance_paired, DistillBuffer};
use augsched::env::{EnvConfig, EnvMode};
use augsched::harness::eval::probe_observations;
use augsched::harness::{evaluate, parse_config, ExperimentConfig};
use augsched::nn::ParameterSet;
use augsched::ppo::VecEnv;
use augsched::rng::{self, tags};
use augsched::scheduler::{train, EpochMetrics, Method, TrainObserver, TrainSetup};

use common::checks;
use common::{config_path, Verdict};

fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn aug(kind: &str) -> Augmentation {
    Augmentation::from_kind(kind).unwrap()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

struct Desk {
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
}

impl Desk {
    fn load() -> Self {
        let cfg = parse_config(&config_path("desk.toml")).unwrap();
        let mut seeds = cfg.experiment.seeds.clone();
        if let Some(n) = std::env::var("AUGSCHED_ACCEPTANCE_SEEDS").ok().and_then(|v| v.parse::<usize>().ok()) {
            seeds.truncate(n.max(1));
        }
        Self { cfg, seeds }
    }

    fn setup(&self, method: Method, seed: u64, augs: &[&str]) -> TrainSetup {
        let mut s = self.cfg.setup(method, seed);
        s.augmentations = augs.iter().map(|k| aug(k)).collect();
        s
    }

    /// (train, test-bg) mean returns under a fixed evaluation seed.
    fn returns(&self, params: &ParameterSet, env: &Arc<EnvConfig>, seed: u64) -> (f64, f64) {
        let episodes = self.cfg.experiment.eval_episodes;
        let eval_seed = rng::derive_seed(seed, tags::EVAL);
        let train = evaluate(params, env, EnvMode::EasyBg, episodes, eval_seed).unwrap();
        let test = evaluate(params, env, EnvMode::TestBg, episodes, eval_seed).unwrap();
        (train, test)
    }
}

/// Everything the directional criteria compare, for one seed.
#[derive(Default)]
struct SeedRuns {
    ppo: (f64, f64),
    exda: (f64, f64),
    exdrac_train: f64,
    exda_black_train: f64,
    drac_black_train: f64,
}

/// PPO checkpoint plus the post-hoc distillations that share its buffer.
fn posthoc_runs(desk: &Desk, seed: u64) -> SeedRuns {
    let setup = desk.setup(Method::Ppo, seed, &[]);
    let env = setup.env.clone();
    let ppo = train(&setup, &mut ()).unwrap().params;

    let mut venv = VecEnv::new(env.clone(), EnvMode::EasyBg, setup.ppo.num_envs, rng::derive_seed(seed, tags::EXDA)).unwrap();
    let mut r = rng::stream(seed, tags::EXDA);
    let (obs, _) = fill_observations(&ppo, &mut venv, setup.da.exda_buffer_size, &mut r).unwrap();
    let buffer = DistillBuffer::build(&ppo, obs).unwrap();
    let epochs = setup.schedule.exda_epochs;
    let rc = [aug("random_color")];

    let (exda, _) = exda_on_buffer(&ppo, &buffer, &rc, &setup.da, epochs, &mut r.clone()).unwrap();
    let (selfonly, _) = exdrac(&ppo, &buffer, &rc, &setup.da, epochs, &mut r.clone()).unwrap();
    let (black, _) = exda_on_buffer(&ppo, &buffer, &[Augmentation::Black], &setup.da, epochs, &mut r.clone()).unwrap();
    let drac = train(&desk.setup(Method::Drac, seed, &["black"]), &mut ()).unwrap().params;

    let runs = SeedRuns {
        ppo: desk.returns(&ppo, &env, seed),
        exda: desk.returns(&exda, &env, seed),
        exdrac_train: desk.returns(&selfonly, &env, seed).0,
        exda_black_train: desk.returns(&black, &env, seed).0,
        drac_black_train: desk.returns(&drac, &env, seed).0,
    };
    println!(
        "  seed {seed}: ppo {:.2}/{:.2}  exda {:.2}/{:.2}  exdrac {:.2}  exda(black) {:.2}  drac(black) {:.2}  (train/test-bg)",
        runs.ppo.0, runs.ppo.1, runs.exda.0, runs.exda.1, runs.exdrac_train, runs.exda_black_train, runs.drac_black_train
    );
    runs
}

fn criterion_7(runs: &[SeedRuns]) -> Verdict {
    let ppo_train = median(&runs.iter().map(|r| r.ppo.0).collect::<Vec<_>>());
    let ppo_bg = median(&runs.iter().map(|r| r.ppo.1).collect::<Vec<_>>());
    let exda_train = median(&runs.iter().map(|r| r.exda.0).collect::<Vec<_>>());
    let exda_bg = median(&runs.iter().map(|r| r.exda.1).collect::<Vec<_>>());
    let ratio = exda_bg / ppo_bg;
    let drift = (exda_train - ppo_train).abs() / ppo_train.abs();
    Verdict::new(
        ratio >= 1.5 && drift <= 0.10,
        format!(
            "test-bg ppo {ppo_bg:.2} -> exda {exda_bg:.2} ({ratio:.2}x, need >= 1.5x); train {ppo_train:.2} -> {exda_train:.2} ({:.1}% change, need <= 10%)",
            100.0 * drift
        ),
    )
}

fn criterion_8(runs: &[SeedRuns]) -> Verdict {
    let exda = median(&runs.iter().map(|r| r.exda.0).collect::<Vec<_>>());
    let selfonly = median(&runs.iter().map(|r| r.exdrac_train).collect::<Vec<_>>());
    Verdict::new(exda > selfonly, format!("median train return exda {exda:.2} vs exdrac {selfonly:.2}"))
}

fn criterion_10(runs: &[SeedRuns]) -> Verdict {
    let ppo = median(&runs.iter().map(|r| r.ppo.0).collect::<Vec<_>>());
    let exda = median(&runs.iter().map(|r| r.exda_black_train).collect::<Vec<_>>());
    let drac = median(&runs.iter().map(|r| r.drac_black_train).collect::<Vec<_>>());
    let drift = (exda - ppo).abs() / ppo.abs();
    let (exda_drop, drac_drop) = (ppo - exda, ppo - drac);
    Verdict::new(
        drift <= 0.15 && drac_drop > exda_drop,
        format!(
            "train ppo {ppo:.2}, exda(black) {exda:.2} ({:.1}% change, need <= 15%), drac(black) {drac:.2}; drop exda {exda_drop:.2} vs drac {drac_drop:.2}",
            100.0 * drift
        ),
    )
}

/// Policy distance on a fixed probe and a fixed augmented copy of it.
struct DistanceTrace {
    every: usize,
    obs: Vec<f64>,
    aug_obs: Vec<f64>,
    points: Vec<(usize, f64)>,
}

impl TrainObserver for DistanceTrace {
    fn on_epoch(&mut self, m: &EpochMetrics, params: &ParameterSet) -> augsched::Result<()> {
        if m.epoch % self.every == 0 {
            self.points.push((m.epoch, policy_distance_paired(params, &self.obs, &self.aug_obs)?));
        }
        Ok(())
    }
}

/// (distance at stop time, distance at the end) of an InDA[0, N/5] run.
fn forgetting_run(desk: &Desk, seed: u64) -> (f64, f64) {
    let mut s = desk.setup(Method::Inda, seed, &["random_color"]);
    let stop = s.schedule.epochs / 5;
    s.schedule.window = [0, stop];
    let probe = probe_observations(&s.env, desk.cfg.experiment.probe_observations, seed).unwrap();
    let mut r = rng::stream(seed, tags::DIAGNOSTIC);
    let aug_probe = batch_apply(&s.augmentations[0], &probe, &mut r).unwrap();
    let mut trace = DistanceTrace {
        every: 10,
        obs: probe.data().to_vec(),
        aug_obs: aug_probe.data().to_vec(),
        points: Vec::new(),
    };
    train(&s, &mut trace).unwrap();
    let at = |e: usize| trace.points.iter().find(|(ep, _)| *ep == e).map(|p| p.1).unwrap();
    let (before, after) = (at(stop), at(s.schedule.epochs));
    let curve: Vec<f64> = trace.points.iter().map(|p| p.1).collect();
    println!("  seed {seed}: js every 10 epochs [{}]", curve.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" "));
    (before, after)
}

fn criterion_9(desk: &Desk) -> Verdict {
    let pairs: Vec<(f64, f64)> = desk.seeds.iter().map(|&s| forgetting_run(desk, s)).collect();
    let stop = median(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let end = median(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let ratio = end / stop;
    Verdict::new(
        ratio >= 2.0,
        format!("median js at stop {stop:.4}, at end {end:.4} ({ratio:.2}x, need >= 2x)"),
    )
}

/// Train bg 4 is solid. A budget that ends while PPO is still learning, with
/// frequent heavy DA phases so that every augmentation slows it down.
fn identity_setup(desk: &Desk, seed: u64, arms: &[&str]) -> TrainSetup {
    let mut s = desk.setup(Method::UcbInda, seed, arms);
    let mut env = (*s.env).clone();
    env.train_background = 4;
    s.env = Arc::new(env);
    s.schedule.epochs = 60;
    s.schedule.interval = 2;
    s.schedule.window = [0, s.schedule.epochs];
    s.da.lr = 3e-3;
    s.da.epochs = 8;
    s.schedule.ucb.require_identity = false;
    s
}

fn criterion_11(desk: &Desk) -> Verdict {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for &seed in &desk.seeds {
        let a = identity_setup(desk, seed, &["identity", "black", "cutout_color"]);
        let b = identity_setup(desk, seed, &["black", "cutout_color"]);
        let pa = train(&a, &mut ()).unwrap().params;
        let pb = train(&b, &mut ()).unwrap().params;
        with.push(desk.returns(&pa, &a.env, seed).0);
        without.push(desk.returns(&pb, &b.env, seed).0);
    }
    let (w, wo) = (median(&with), median(&without));
    Verdict::new(
        w > wo,
        format!("median train return with identity {w:.2} [{}] vs without {wo:.2} [{}]", fmt_list(&with), fmt_list(&without)),
    )
}

fn criterion_12(desk: &Desk) -> Verdict {
    let mut inda = Vec::new();
    let mut exda = Vec::new();
    for &seed in &desk.seeds {
        let s = desk.setup(Method::UcbExda, seed, &["identity", "random_color", "random_crop"]);
        let out = train(&s, &mut ()).unwrap();
        // The RL phase of UCB-ExDA is the UCB-InDA run.
        let before = out.before_exda.expect("ucb_exda keeps its pre-distillation policy");
        inda.push(desk.returns(&before, &s.env, seed));
        exda.push(desk.returns(&out.params, &s.env, seed));
    }
    let m = |v: &[(f64, f64)], i: usize| median(&v.iter().map(|p| if i == 0 { p.0 } else { p.1 }).collect::<Vec<_>>());
    let (it, ib, et, eb) = (m(&inda, 0), m(&inda, 1), m(&exda, 0), m(&exda, 1));
    let drift = (et - it).abs() / it.abs();
    Verdict::new(
        eb >= ib && drift <= 0.05,
        format!(
            "test-bg ucb_inda {ib:.2} vs ucb_exda {eb:.2}; train {it:.2} vs {et:.2} ({:.1}% change, need <= 5%)",
            100.0 * drift
        ),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("AUGSCHED_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut exact_failures = 0;
    let mut lines = Vec::new();
    let mut report = |n: usize, v: Verdict, started: Instant| {
        let line = format!(
            "criterion {n:>2}: {} ({:.0}s) {}",
            if v.pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            v.detail
        );
        println!("{line}");
        lines.push(line);
        if !v.pass && n <= 6 {
            exact_failures += 1;
        }
    };

    let desk = Desk::load();
    let exact: [(usize, &dyn Fn() -> Verdict); 6] = [
        (1, &|| checks::gradient_check(5)),
        (2, &|| checks::gae_check(100, 50)),
        (3, &|| checks::pagrad_check(500)),
        (4, &|| {
            let vs: Vec<Verdict> = (0..3).map(|s| checks::bandit_check(200, s)).collect();
            Verdict::new(vs.iter().all(|v| v.pass), vs.iter().map(|v| v.detail.clone()).collect::<Vec<_>>().join("; "))
        }),
        (5, &|| {
            let mut s = desk.setup(Method::Ppo, desk.seeds[0], &[]);
            s.schedule.epochs = 30;
            s.schedule.window = [0, 0];
            checks::degenerate_check(&s)
        }),
        (6, &|| {
            let s = desk.setup(Method::Ppo, desk.seeds[0], &[]);
            checks::anchor_check(&s, 20, aug("random_color"))
        }),
    ];
    for (n, f) in exact {
        if wanted(n) {
            let t = Instant::now();
            report(n, f(), t);
        }
    }

    println!("directional criteria on desk.toml, seeds {:?}", desk.seeds);
    if [7, 8, 10].into_iter().any(wanted) {
        let t = Instant::now();
        let runs: Vec<SeedRuns> = desk.seeds.iter().map(|&s| posthoc_runs(&desk, s)).collect();
        for (n, f) in [(7, criterion_7 as fn(&[SeedRuns]) -> Verdict), (8, criterion_8), (10, criterion_10)] {
            if wanted(n) {
                report(n, f(&runs), t);
            }
        }
    }
    let rest: [(usize, fn(&Desk) -> Verdict); 3] = [(9, criterion_9), (11, criterion_11), (12, criterion_12)];
    for (n, f) in rest {
        if wanted(n) {
            let t = Instant::now();
            report(n, f(&desk), t);
        }
    }

    println!("\nsummary");
    for l in &lines {
        println!("{}", l.split(')').next().unwrap_or(l).to_string() + ")");
    }
    if exact_failures > 0 {
        eprintln!("{exact_failures} exact criteria failed");
        std::process::exit(1);
    }
}
