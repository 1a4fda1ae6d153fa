//! Independent oracles and checks shared by the integration tests and the
//! acceptance binary.
#![allow(dead_code)]

pub mod checks;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};

use augsched::nn::{forward, init_params, Layer, NetworkSpec, ParameterSet};
use augsched::ppo::{Minibatch, PpoConfig};
use augsched::rng::Rng;
use augsched::Tensor;

pub const OBS: [usize; 3] = [6, 6, 3];

/// Conv + dense net small enough for per-scalar finite differences.
pub fn tiny_params(seed: u64) -> ParameterSet {
    let spec = NetworkSpec {
        input: OBS,
        num_actions: 4,
        layers: vec![
            Layer::Conv { out_channels: 3, kernel: 2, stride: 2 },
            Layer::Relu,
            Layer::Flatten,
            Layer::Dense { out_dim: 8 },
            Layer::Relu,
        ],
    };
    // Random biases keep pre-activations off the ReLU kink at exactly zero.
    let p = init_params(&spec, seed, 0.5).unwrap();
    let mut r = Rng::seed_from_u64(seed ^ 0xb1a5);
    let values: Vec<f64> = flat(&p).iter().map(|v| v + r.random_range(-0.1..0.1)).collect();
    with_flat(&p, &values)
}

pub fn random_obs(n: usize, seed: u64) -> Tensor {
    let mut r = Rng::seed_from_u64(seed);
    let len = n * OBS.iter().product::<usize>();
    let mut shape = vec![n];
    shape.extend(OBS);
    Tensor::from_parts(shape, (0..len).map(|_| r.random::<f64>()).collect()).unwrap()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Mean over rows of `KL[softmax(p) || softmax(q)]`.
pub fn mean_kl(p: &Tensor, q: &Tensor) -> f64 {
    let n = p.shape()[0];
    let a = p.shape()[1];
    let mut total = 0.0;
    for i in 0..n {
        let lp = log_softmax(&p.data()[i * a..(i + 1) * a]);
        let lq = log_softmax(&q.data()[i * a..(i + 1) * a]);
        total += lp.iter().zip(&lq).map(|(x, y)| x.exp() * (x - y)).sum::<f64>();
    }
    total / n as f64
}

pub fn mean_sq_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Minibatch whose stored log-probs sit near the current policy so that both
/// clipped and unclipped ratios occur.
pub fn random_minibatch(params: &ParameterSet, n: usize, seed: u64) -> Minibatch {
    let mut r = Rng::seed_from_u64(seed ^ 0x5eed);
    let obs = random_obs(n, seed);
    let out = forward(params, &obs).unwrap();
    let noise = Normal::new(0.0, 0.3).unwrap();
    let actions: Vec<usize> = (0..n).map(|_| r.random_range(0..4)).collect();
    let old_log_probs = (0..n)
        .map(|i| log_softmax(out.logits_row(i))[actions[i]] + noise.sample(&mut r))
        .collect();
    Minibatch {
        indices: (0..n).collect(),
        obs,
        actions,
        advantages: (0..n).map(|_| noise.sample(&mut r) * 3.0).collect(),
        returns: (0..n).map(|_| noise.sample(&mut r) * 3.0).collect(),
        old_log_probs,
    }
}

/// Clipped-surrogate objective with value and entropy terms, written out
/// directly from network outputs.
pub fn ppo_loss_direct(params: &ParameterSet, mb: &Minibatch, cfg: &PpoConfig) -> f64 {
    let out = forward(params, &mb.obs).unwrap();
    let n = mb.actions.len();
    let adv: Vec<f64> = if cfg.normalize_advantages && n > 1 {
        let mean = mb.advantages.iter().sum::<f64>() / n as f64;
        let std = (mb.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        mb.advantages.iter().map(|a| (a - mean) / (std + 1e-8)).collect()
    } else {
        mb.advantages.clone()
    };
    let (mut surr, mut value, mut entropy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let lp = log_softmax(out.logits_row(i));
        let ratio = (lp[mb.actions[i]] - mb.old_log_probs[i]).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        surr += (ratio * adv[i]).min(clipped * adv[i]);
        value += (out.values[i] - mb.returns[i]).powi(2);
        entropy -= lp.iter().map(|l| l.exp() * l).sum::<f64>();
    }
    let n = n as f64;
    -surr / n + cfg.value_coef * value / n - cfg.entropy_coef * entropy / n
}

pub fn flat(params: &ParameterSet) -> Vec<f64> {
    params.tensors().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn with_flat(params: &ParameterSet, values: &[f64]) -> ParameterSet {
    let mut at = 0;
    let entries = params
        .entries()
        .iter()
        .map(|(name, t)| {
            let n = t.len();
            let out = Tensor::from_parts(t.shape().to_vec(), values[at..at + n].to_vec()).unwrap();
            at += n;
            (name.clone(), out)
        })
        .collect();
    ParameterSet::from_entries(params.spec_arc(), entries, params.init_seed, params.init_scale).unwrap()
}

/// Central differences of `f` at `params`, one scalar at a time.
pub fn numeric_gradient(params: &ParameterSet, h: f64, f: impl Fn(&ParameterSet) -> f64) -> Vec<f64> {
    let base = flat(params);
    (0..base.len())
        .map(|i| {
            let mut up = base.clone();
            up[i] += h;
            let mut down = base.clone();
            down[i] -= h;
            (f(&with_flat(params, &up)) - f(&with_flat(params, &down))) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all entries. The floor keeps
/// entries that are zero up to rounding from dominating.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Advantages from the definition: discounted sum of TD errors, truncated at
/// episode ends.
pub fn gae_double_sum(rewards: &[f64], values: &[f64], dones: &[bool], next_value: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v = |t: usize| if t < n { values[t] } else { next_value };
    let delta: Vec<f64> = (0..n)
        .map(|t| rewards[t] + gamma * v(t + 1) * if dones[t] { 0.0 } else { 1.0 } - values[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            for l in 0..n - t {
                let alive = (t..t + l).all(|j| !dones[j]);
                if !alive {
                    break;
                }
                sum += (gamma * lambda).powi(l as i32) * delta[t + l];
            }
            sum
        })
        .collect()
}

/// Straight-line UCB decision rule with its own bookkeeping.
pub struct UcbOracle {
    pub counts: Vec<f64>,
    pub recent: Vec<Vec<f64>>,
    pub window: usize,
    pub forced_rounds: usize,
    pub eps: f64,
}

impl UcbOracle {
    pub fn new(k: usize, window: usize, forced_rounds: usize, eps: f64) -> Self {
        Self {
            counts: vec![0.0; k],
            recent: vec![Vec::new(); k],
            window,
            forced_rounds,
            eps,
        }
    }

    pub fn choose(&mut self, s: usize) -> usize {
        let k = self.counts.len();
        let arm = if s < self.forced_rounds {
            s % k
        } else {
            let g: Vec<f64> = self
                .recent
                .iter()
                .map(|r| if r.is_empty() { 0.0 } else { r.iter().sum::<f64>() / r.len() as f64 })
                .collect();
            let gmax = g.iter().copied().fold(f64::MIN, f64::max);
            let gmin = g.iter().copied().fold(f64::MAX, f64::min);
            let nmin = self.counts.iter().copied().fold(f64::MAX, f64::min);
            let nmax = self.counts.iter().copied().fold(f64::MIN, f64::max);
            let w = self.window as f64;
            let a = 1.0 / nmin.sqrt() - 1.0 / nmax.sqrt();
            let b = 1.0 / (w - 1.0).sqrt() - 1.0 / w.sqrt();
            let ln_s = (s as f64).ln();
            let c = (gmax - gmin + self.eps) / (ln_s.sqrt() * if a > b { a } else { b });
            let mut best = 0;
            let mut best_score = f64::MIN;
            for i in 0..k {
                let score = g[i] + c * (ln_s / self.counts[i]).sqrt();
                if score > best_score {
                    best = i;
                    best_score = score;
                }
            }
            best
        };
        self.counts[arm] += 1.0;
        arm
    }

    pub fn observe(&mut self, arm: usize, gain: f64) {
        self.recent[arm].push(gain);
        if self.recent[arm].len() > self.window {
            self.recent[arm].remove(0);
        }
    }
}

pub fn same_params(a: &ParameterSet, b: &ParameterSet) -> bool {
    a.entries().len() == b.entries().len()
        && a.entries().iter().zip(b.entries()).all(|((na, ta), (nb, tb))| {
            na == nb && ta.shape() == tb.shape() && ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

/// Outcome of one acceptance criterion.
#[derive(Clone, Debug)]
pub struct Verdict {
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

pub fn config_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn smoke_config() -> augsched::harness::ExperimentConfig {
    augsched::harness::parse_config(&config_path("smoke.toml")).unwrap()
}
