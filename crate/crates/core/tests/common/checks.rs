//! Criterion checks that are exact properties rather than learning outcomes.

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use augsched::augment::{batch_apply, Augmentation};
use augsched::distill::{l_da, l_dis_self, DistillBuffer};
use augsched::nn::{backward, forward, GradientSet, ParameterSet, Tape};
use augsched::ppo::{gae, ppo_loss, MinibatchRule, PpoConfig};
use augsched::rng::Rng;
use augsched::scheduler::bandit::{BanditState, UcbConfig};
use augsched::scheduler::rules::{Combine, Drac};
use augsched::scheduler::{train, Method, TrainSetup};
use augsched::surgery::{adjusted_aux, pagrad_combine};

use super::*;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

fn grad_error(params: &ParameterSet, analytic: &GradientSet, f: impl Fn(&ParameterSet) -> f64) -> f64 {
    let numeric = numeric_gradient(params, FD_STEP, f);
    max_rel_error(&analytic.flatten(), &numeric, FD_FLOOR)
}

pub fn ppo_gradient_error(seed: u64) -> f64 {
    let p = tiny_params(seed);
    let mb = random_minibatch(&p, 12, seed + 1);
    let cfg = PpoConfig::default();
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape);
    let loss = ppo_loss(&mut tape, &p, &vars, &mb, &cfg).unwrap();
    let g = backward(&tape, loss.total, &vars, &p).unwrap();
    drop(tape);
    grad_error(&p, &g, |q| ppo_loss_direct(q, &mb, &cfg))
}

pub fn da_gradient_error(seed: u64) -> f64 {
    let teacher = tiny_params(seed + 100);
    let student = tiny_params(seed);
    let obs = random_obs(10, seed + 2);
    let aug = random_obs(10, seed + 3);
    let buf = DistillBuffer::build(&teacher, obs.data().to_vec()).unwrap();
    let (tl, tv) = buf.teacher_batch(&(0..10).collect::<Vec<_>>());
    let mut tape = Tape::new();
    let vars = student.on_tape(&mut tape);
    let o = tape.constant(obs.clone());
    let a = tape.constant(aug.clone());
    let loss = l_da(&mut tape, &student, &vars, o, a, &tl, &tv, true).unwrap();
    let g = backward(&tape, loss, &vars, &student).unwrap();
    drop(tape);
    let t_out = forward(&teacher, &obs).unwrap();
    grad_error(&student, &g, |q| {
        let so = forward(q, &obs).unwrap();
        let sa = forward(q, &aug).unwrap();
        mean_kl(&t_out.logits, &so.logits)
            + mean_sq_gap(&t_out.values, &so.values)
            + mean_kl(&t_out.logits, &sa.logits)
            + mean_sq_gap(&t_out.values, &sa.values)
    })
}

/// PPO loss plus `alpha` times the regularizer whose original-branch outputs
/// are held fixed at the evaluation point.
pub fn drac_gradient_error(seed: u64) -> f64 {
    let p = tiny_params(seed);
    let mb = random_minibatch(&p, 12, seed + 4);
    let cfg = PpoConfig::default();
    let alpha = 0.7;
    let phi = Augmentation::RandomConv { kernel: 3 };
    let aug_rng = Rng::seed_from_u64(seed + 5);
    let aug = batch_apply(&phi, &mb.obs, &mut aug_rng.clone()).unwrap();
    let mut rule = Drac::new(phi, alpha, Combine::Sum, aug_rng);
    let (g, _) = rule.gradient(&p, &mb, &cfg).unwrap();
    let fixed = forward(&p, &mb.obs).unwrap();
    grad_error(&p, &g, |q| {
        let qa = forward(q, &aug).unwrap();
        ppo_loss_direct(q, &mb, &cfg) + alpha * (mean_kl(&fixed.logits, &qa.logits) + mean_sq_gap(&fixed.values, &qa.values))
    })
}

/// Self-consistency loss with gradients through both branches.
pub fn self_gradient_error(seed: u64) -> f64 {
    let p = tiny_params(seed);
    let obs = random_obs(10, seed + 6);
    let aug = random_obs(10, seed + 7);
    let mut tape = Tape::new();
    let vars = p.on_tape(&mut tape);
    let o = tape.constant(obs.clone());
    let a = tape.constant(aug.clone());
    let loss = l_dis_self(&mut tape, &p, &vars, o, a, true).unwrap();
    let g = backward(&tape, loss, &vars, &p).unwrap();
    drop(tape);
    grad_error(&p, &g, |q| {
        let so = forward(q, &obs).unwrap();
        let sa = forward(q, &aug).unwrap();
        mean_kl(&so.logits, &sa.logits) + mean_sq_gap(&so.values, &sa.values)
    })
}

/// Criterion 1 over `nets` randomized networks.
pub fn gradient_check(nets: u64) -> Verdict {
    let mut worst = [0.0f64; 4];
    for s in 0..nets {
        let seed = 1000 + 17 * s;
        let errs = [
            ppo_gradient_error(seed),
            da_gradient_error(seed),
            drac_gradient_error(seed),
            self_gradient_error(seed),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let pass = worst.iter().all(|&e| e < FD_TOLERANCE);
    Verdict::new(
        pass,
        format!(
            "max rel err over {nets} nets: ppo {:.1e}, da {:.1e}, drac {:.1e}, self {:.1e} (tol {FD_TOLERANCE:.0e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

/// Criterion 2.
pub fn gae_check(sequences: usize, len: usize) -> Verdict {
    let mut r = Rng::seed_from_u64(42);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..sequences {
        let rewards: Vec<f64> = (0..len).map(|_| normal.sample(&mut r)).collect();
        let values: Vec<f64> = (0..len).map(|_| normal.sample(&mut r)).collect();
        let dones: Vec<bool> = (0..len).map(|_| r.random_bool(0.1)).collect();
        let next = normal.sample(&mut r);
        let gamma = r.random_range(0.9..1.0);
        let lambda = r.random_range(0.8..1.0);
        let fast = gae(&rewards, &values, &dones, next, gamma, lambda);
        let slow = gae_double_sum(&rewards, &values, &dones, next, gamma, lambda);
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    Verdict::new(worst < 1e-10, format!("{sequences} sequences of {len} steps, max abs err {worst:.1e}"))
}

fn vector(v: &[f64]) -> GradientSet {
    GradientSet::from_vector(v.to_vec())
}

/// Criterion 3.
pub fn pagrad_check(trials: usize) -> Verdict {
    let mut r = Rng::seed_from_u64(7);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut pass_through = true;
    let mut worst_orth = 0.0f64;
    for _ in 0..trials {
        let n = r.random_range(2..40);
        let g: Vec<f64> = (0..n).map(|_| normal.sample(&mut r)).collect();
        let mut a: Vec<f64> = (0..n).map(|_| normal.sample(&mut r)).collect();
        let d: f64 = g.iter().zip(&a).map(|(x, y)| x * y).sum();
        let gg: f64 = g.iter().map(|x| x * x).sum();
        // Aligned: push a onto the positive side of g.
        let aligned: Vec<f64> = a.iter().zip(&g).map(|(x, y)| x + (d.abs() / gg + 0.5) * y).collect();
        let adj = adjusted_aux(&vector(&g), &vector(&aligned)).unwrap();
        pass_through &= adj.flatten() == aligned;
        // Conflicting: push a onto the negative side.
        for (x, y) in a.iter_mut().zip(&g) {
            *x -= (d.abs() / gg + 0.5) * y;
        }
        let adj = adjusted_aux(&vector(&g), &vector(&a)).unwrap().flatten();
        let dot: f64 = adj.iter().zip(&g).map(|(x, y)| x * y).sum();
        let scale = g.iter().map(|x| x * x).sum::<f64>().sqrt() * a.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst_orth = worst_orth.max((dot / scale).abs());
    }
    let example = pagrad_combine(&vector(&[1.0, 0.0]), &vector(&[-1.0, 1.0])).unwrap().flatten();
    let example_ok = example == vec![1.0, 1.0];
    Verdict::new(
        pass_through && worst_orth < 1e-12 && example_ok,
        format!(
            "{trials} trials: aligned pass-through exact {pass_through}, max |cos(adj, g_main)| {worst_orth:.1e}, (1,0)+(-1,1) -> {example:?}"
        ),
    )
}

/// Criterion 4: the library bandit against [`UcbOracle`] on a drifting
/// synthetic gain stream.
pub fn bandit_check(rounds: usize, seed: u64) -> Verdict {
    let arms = vec![
        Augmentation::Identity,
        Augmentation::from_kind("random_color").unwrap(),
        Augmentation::from_kind("random_crop").unwrap(),
    ];
    let cfg = UcbConfig::default();
    let mut lib = BanditState::new(arms, cfg.clone()).unwrap();
    let mut oracle = UcbOracle::new(3, cfg.window, cfg.min_exploration, cfg.epsilon);
    let mut r = Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut mismatches = 0;
    let mut first = None;
    for s in 0..rounds {
        let a = lib.select().arm;
        let b = oracle.choose(s);
        if a != b {
            mismatches += 1;
            first.get_or_insert(s);
        }
        // Arm means drift so the leader changes over time.
        let t = s as f64 / rounds as f64;
        let mean = [1.0 - t, 0.5 + 0.3 * (6.0 * t).sin(), t];
        let gain = mean[b] + noise.sample(&mut r);
        lib.record(a, gain);
        oracle.observe(b, gain);
    }
    Verdict::new(
        mismatches == 0,
        format!("{rounds} rounds, {mismatches} mismatched decisions{}", first.map_or(String::new(), |s| format!(", first at round {s}"))),
    )
}

/// Criterion 5 on `base` (a PPO setup): each degenerate method must leave
/// bit-identical parameters.
pub fn degenerate_check(base: &TrainSetup) -> Verdict {
    let mut ppo = base.clone();
    ppo.schedule.method = Method::Ppo;
    let reference = train(&ppo, &mut ()).unwrap().params;
    let phi = Augmentation::from_kind("random_color").unwrap();

    let mut inda = ppo.clone();
    inda.schedule.method = Method::Inda;
    inda.schedule.window = [0, 0];
    inda.augmentations = vec![phi];

    let mut drac = ppo.clone();
    drac.schedule.method = Method::Drac;
    drac.schedule.drac_alpha = 0.0;
    drac.augmentations = vec![phi];

    let mut rad = ppo.clone();
    rad.schedule.method = Method::Rad;
    rad.augmentations = vec![Augmentation::Identity];

    let mut exda = ppo.clone();
    exda.schedule.method = Method::Exda;
    exda.schedule.exda_epochs = 0;
    exda.augmentations = vec![phi];

    let mut results = Vec::new();
    for (name, setup) in [("inda[0,0]", &inda), ("drac(alpha=0)", &drac), ("rad(identity)", &rad)] {
        let out = train(setup, &mut ()).unwrap();
        results.push((name, same_params(&out.params, &reference)));
    }
    let out = train(&exda, &mut ()).unwrap();
    let before = out.before_exda.as_ref().is_some_and(|b| same_params(b, &reference));
    results.push(("exda(M=0)", before && same_params(&out.params, &reference)));
    let pass = results.iter().all(|(_, ok)| *ok);
    let detail = results
        .iter()
        .map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "DIFFERS" }))
        .collect::<Vec<_>>()
        .join(", ");
    Verdict::new(pass, format!("{} epochs: {detail}", base.schedule.epochs))
}

/// Criterion 6: an interleaved run with `phases` distillation phases.
pub fn anchor_check(base: &TrainSetup, phases: usize, phi: Augmentation) -> Verdict {
    let mut s = base.clone();
    s.schedule.method = Method::Inda;
    s.schedule.epochs = phases * s.schedule.interval;
    s.schedule.window = [0, s.schedule.epochs];
    s.augmentations = vec![phi];
    let out = train(&s, &mut ()).unwrap();
    let n = out.da_phases.len();
    let max_kl = out.da_phases.iter().map(|(_, r)| r.anchor_kl).fold(0.0, f64::max);
    let decreased = out
        .da_phases
        .iter()
        .filter(|(_, r)| r.self_inconsistency_after < r.self_inconsistency_before)
        .count();
    let teacher_fixed = out.da_phases.iter().all(|(_, r)| r.teacher_hash_before == r.teacher_hash_after);
    Verdict::new(
        n == phases && max_kl < 0.05 && decreased == n && teacher_fixed,
        format!(
            "{n} phases ({}): max anchor KL {max_kl:.4} (< 0.05), self-inconsistency decreased in {decreased}/{n}",
            phi.kind()
        ),
    )
}
