//! Rollout collection, GAE, reward normalization and the clipped PPO update.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::env::{make_env, Env, EnvConfig, EnvMode};
use crate::error::{Error, Result};
use crate::nn::{self, adam_step, backward, forward_on_tape, AdamState, GradientSet, ParameterSet, Tape, Var};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr: f64,
    pub normalize_rewards: bool,
    pub normalize_advantages: bool,
    pub num_envs: usize,
    pub rollout_len: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.999,
            lambda: 0.95,
            clip: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            epochs: 3,
            minibatches: 8,
            lr: 5e-4,
            normalize_rewards: true,
            normalize_advantages: true,
            num_envs: 8,
            rollout_len: 128,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be > 0");
        }
        if !(self.lr > 0.0) || self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return bad("lr must be > 0 and loss coefficients >= 0");
        }
        if self.minibatches == 0 || self.num_envs == 0 || self.rollout_len == 0 {
            return bad("minibatches, num_envs and rollout_len must be >= 1");
        }
        if self.minibatches > self.num_envs * self.rollout_len {
            return bad("more minibatches than samples per rollout");
        }
        Ok(())
    }
}

/// Running mean/variance with the parallel (Chan) update.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMeanStd {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl RunningMeanStd {
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if self.count == 0.0 {
            (self.mean, self.var, self.count) = (mean, var, n);
            return;
        }
        let total = self.count + n;
        let delta = mean - self.mean;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }
}

/// Scales rewards by the running std of each stream's discounted return.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub gamma: f64,
    pub returns: Vec<f64>,
    pub stats: RunningMeanStd,
    pub eps: f64,
}

impl RewardNormalizer {
    pub fn new(num_envs: usize, gamma: f64) -> Self {
        Self {
            gamma,
            returns: vec![0.0; num_envs],
            stats: RunningMeanStd::default(),
            eps: 1e-8,
        }
    }

    /// Normalizes one reward per stream; `dones` resets the accumulators.
    pub fn normalize(&mut self, rewards: &[f64], dones: &[bool]) -> Vec<f64> {
        for (ret, r) in self.returns.iter_mut().zip(rewards) {
            *ret = *ret * self.gamma + r;
        }
        self.stats.update(&self.returns);
        let scale = (self.stats.var + self.eps).sqrt();
        for (ret, d) in self.returns.iter_mut().zip(dones) {
            if *d {
                *ret = 0.0;
            }
        }
        rewards.iter().map(|r| r / scale).collect()
    }
}

/// Parallel environment instances with auto-reset.
#[derive(Clone, Debug)]
pub struct VecEnv {
    envs: Vec<Env>,
    obs: Vec<Tensor>,
    episode_returns: Vec<f64>,
}

impl VecEnv {
    pub fn new(config: Arc<EnvConfig>, mode: EnvMode, num_envs: usize, seed: u64) -> Result<Self> {
        let mut envs = (0..num_envs)
            .map(|e| make_env(Arc::clone(&config), mode, rng::derive_seed(seed, e as u64)))
            .collect::<Result<Vec<_>>>()?;
        let obs = envs.iter_mut().map(Env::reset).collect();
        Ok(Self {
            envs,
            obs,
            episode_returns: vec![0.0; num_envs],
        })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[Env] {
        &self.envs
    }

    pub fn obs_batch(&self) -> Result<Tensor> {
        Tensor::stack(&self.obs.iter().collect::<Vec<_>>())
    }

    pub fn total_steps(&self) -> u64 {
        self.envs.iter().map(Env::total_steps).sum()
    }

    /// Steps every env; finished episodes reset immediately. Returns
    /// (rewards, dones, returns of episodes that just finished).
    pub fn step(&mut self, actions: &[usize]) -> Result<(Vec<f64>, Vec<bool>, Vec<f64>)> {
        let mut rewards = Vec::with_capacity(self.len());
        let mut dones = Vec::with_capacity(self.len());
        let mut finished = Vec::new();
        for (e, env) in self.envs.iter_mut().enumerate() {
            let r = env.step(actions[e])?;
            self.episode_returns[e] += r.reward;
            if r.done {
                finished.push(self.episode_returns[e]);
                self.episode_returns[e] = 0.0;
                self.obs[e] = env.reset();
            } else {
                self.obs[e] = r.obs;
            }
            rewards.push(r.reward);
            dones.push(r.done);
        }
        Ok((rewards, dones, finished))
    }
}

/// Samples an action index from `softmax(logits)`; returns (action, log-prob).
pub fn sample_action(logits: &[f64], r: &mut Rng) -> (usize, f64) {
    let logp = nn::log_softmax(logits);
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (a, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return (a, *lp);
        }
    }
    let last = logp.len() - 1;
    (last, logp[last])
}

/// Transitions of `num_envs` streams over `len` steps, stored time-major
/// (index `t * num_envs + e`).
#[derive(Clone, Debug, Default)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub len: usize,
    pub obs_shape: [usize; 3],
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub raw_rewards: Vec<f64>,
    /// Rewards used for GAE (normalized when enabled).
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub bootstrap_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub finished_episode_returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn size(&self) -> usize {
        self.actions.len()
    }

    pub fn obs_len(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        let n = self.obs_len();
        &self.obs[i * n..(i + 1) * n]
    }

    pub fn gather_obs(&self, idx: &[usize]) -> Tensor {
        let n = self.obs_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.observation(i));
        }
        let [h, w, c] = self.obs_shape;
        Tensor::from_parts(vec![idx.len(), h, w, c], data).expect("obs layout")
    }

    pub fn is_processed(&self) -> bool {
        self.advantages.len() == self.size() && self.returns.len() == self.size()
    }
}

pub fn collect_rollout(
    params: &ParameterSet,
    venv: &mut VecEnv,
    len: usize,
    mut normalizer: Option<&mut RewardNormalizer>,
    r: &mut Rng,
) -> Result<RolloutBuffer> {
    let e = venv.len();
    let obs_shape = params.spec().input;
    let mut buf = RolloutBuffer {
        num_envs: e,
        len,
        obs_shape,
        ..Default::default()
    };
    let total = e * len;
    buf.obs.reserve(total * params.spec().obs_len());
    for _ in 0..len {
        let obs = venv.obs_batch()?;
        let out = nn::forward(params, &obs)?;
        let mut actions = Vec::with_capacity(e);
        for i in 0..e {
            let (a, lp) = sample_action(out.logits_row(i), r);
            actions.push(a);
            buf.log_probs.push(lp);
        }
        buf.obs.extend_from_slice(obs.data());
        buf.values.extend_from_slice(&out.values);
        let (rewards, dones, finished) = venv.step(&actions)?;
        let scaled = match normalizer.as_deref_mut() {
            Some(n) => n.normalize(&rewards, &dones),
            None => rewards.clone(),
        };
        buf.actions.extend(actions);
        buf.raw_rewards.extend(rewards);
        buf.rewards.extend(scaled);
        buf.dones.extend(dones);
        buf.finished_episode_returns.extend(finished);
    }
    buf.bootstrap_values = nn::forward(params, &venv.obs_batch()?)?.values;
    Ok(buf)
}

/// GAE for one stream. `next_value` bootstraps the step after the last one.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], next_value: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { values[t + 1] } else { next_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_v * live - values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    adv
}

/// Fills advantages and value targets (`A + V_old`) on the buffer.
pub fn compute_gae(buf: &mut RolloutBuffer, gamma: f64, lambda: f64) {
    let (e, len) = (buf.num_envs, buf.len);
    buf.advantages = vec![0.0; e * len];
    buf.returns = vec![0.0; e * len];
    for env in 0..e {
        let pick = |v: &Vec<f64>| (0..len).map(|t| v[t * e + env]).collect::<Vec<_>>();
        let rewards = pick(&buf.rewards);
        let values = pick(&buf.values);
        let dones: Vec<bool> = (0..len).map(|t| buf.dones[t * e + env]).collect();
        let adv = gae(&rewards, &values, &dones, buf.bootstrap_values[env], gamma, lambda);
        for t in 0..len {
            buf.advantages[t * e + env] = adv[t];
            buf.returns[t * e + env] = adv[t] + values[t];
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    pub obs: Tensor,
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub old_log_probs: Vec<f64>,
}

impl Minibatch {
    pub fn from_buffer(buf: &RolloutBuffer, idx: &[usize]) -> Self {
        Self {
            indices: idx.to_vec(),
            obs: buf.gather_obs(idx),
            actions: idx.iter().map(|&i| buf.actions[i]).collect(),
            advantages: idx.iter().map(|&i| buf.advantages[i]).collect(),
            returns: idx.iter().map(|&i| buf.returns[i]).collect(),
            old_log_probs: idx.iter().map(|&i| buf.log_probs[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Scalar clipped surrogate `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

pub fn normalized(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

/// Loss nodes of one PPO minibatch.
#[derive(Clone, Copy, Debug)]
pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
}

/// `-E[min(rho A, clip(rho) A)] + c_v E[(V - V_targ)^2] - c_e E[H(pi)]`,
/// recorded on `tape` against the parameter leaves `vars`.
pub fn ppo_loss(tape: &mut Tape<'_>, params: &ParameterSet, vars: &[Var], mb: &Minibatch, cfg: &PpoConfig) -> Result<PpoLoss> {
    let b = mb.len();
    let obs = tape.constant(mb.obs.clone());
    ppo_loss_on(tape, params, vars, obs, mb, cfg, b)
}

/// As [`ppo_loss`] but with the observation batch already on the tape.
pub fn ppo_loss_on(
    tape: &mut Tape<'_>,
    params: &ParameterSet,
    vars: &[Var],
    obs: Var,
    mb: &Minibatch,
    cfg: &PpoConfig,
    b: usize,
) -> Result<PpoLoss> {
    let (logits, values) = forward_on_tape(tape, params.spec(), vars, obs)?;
    ppo_loss_from_outputs(tape, logits, values, mb, cfg, b)
}

/// As [`ppo_loss`] given the network outputs already on the tape.
pub fn ppo_loss_from_outputs(
    tape: &mut Tape<'_>,
    logits: Var,
    values: Var,
    mb: &Minibatch,
    cfg: &PpoConfig,
    b: usize,
) -> Result<PpoLoss> {
    let logp_all = tape.log_softmax(logits);
    let logp = tape.gather(logp_all, &mb.actions);
    let old = tape.constant(Tensor::vector(mb.old_log_probs.clone()));
    let diff = tape.sub(logp, old);
    let ratio = tape.exp(diff);
    let adv_values = if cfg.normalize_advantages && b > 1 {
        normalized(&mb.advantages)
    } else {
        mb.advantages.clone()
    };
    let adv = tape.constant(Tensor::vector(adv_values));
    let s1 = tape.mul(ratio, adv);
    let clipped = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip);
    let s2 = tape.mul(clipped, adv);
    let surr = tape.min(s1, s2);
    let surr_mean = tape.mean(surr);
    let policy = tape.scale(surr_mean, -1.0);

    let targets = tape.constant(Tensor::vector(mb.returns.clone()));
    let verr = tape.sub(values, targets);
    let vsq = tape.square(verr);
    let value = tape.mean(vsq);

    let probs = tape.exp(logp_all);
    let plogp = tape.mul(probs, logp_all);
    let neg_h = tape.row_sum(plogp);
    let neg_h_mean = tape.mean(neg_h);
    let entropy = tape.scale(neg_h_mean, -1.0);

    let vterm = tape.scale(value, cfg.value_coef);
    let eterm = tape.scale(neg_h_mean, cfg.entropy_coef);
    let pv = tape.add(policy, vterm);
    let total = tape.add(pv, eterm);
    let v = tape.value(total).item();
    if !v.is_finite() {
        return Err(Error::NonFinite("ppo loss".into()));
    }
    Ok(PpoLoss { total, policy, value, entropy })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub aux_loss: f64,
}

/// Produces the gradient for one minibatch. Plain PPO and the augmentation
/// baselines differ only here.
pub trait MinibatchRule {
    fn gradient(&mut self, params: &ParameterSet, mb: &Minibatch, cfg: &PpoConfig) -> Result<(GradientSet, LossStats)>;
}

pub struct PlainPpo;

impl MinibatchRule for PlainPpo {
    fn gradient(&mut self, params: &ParameterSet, mb: &Minibatch, cfg: &PpoConfig) -> Result<(GradientSet, LossStats)> {
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape);
        let loss = ppo_loss(&mut tape, params, &vars, mb, cfg)?;
        let grads = backward(&tape, loss.total, &vars, params)?;
        Ok((grads, stats_of(&tape, &loss)))
    }
}

pub fn stats_of(tape: &Tape<'_>, loss: &PpoLoss) -> LossStats {
    LossStats {
        policy_loss: tape.value(loss.policy).item(),
        value_loss: tape.value(loss.value).item(),
        entropy: tape.value(loss.entropy).item(),
        aux_loss: 0.0,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub updates: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub aux_loss: f64,
}

/// Splits `n` items into `parts` contiguous chunk sizes differing by at most one.
pub fn chunk_sizes(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + usize::from(i < n % parts)).collect()
}

/// `epochs` shuffled passes of `minibatches` Adam steps each.
pub fn ppo_update_with(
    params: &mut ParameterSet,
    adam: &mut AdamState,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    r: &mut Rng,
    rule: &mut dyn MinibatchRule,
) -> Result<UpdateStats> {
    if !buf.is_processed() {
        return Err(Error::Config("rollout buffer has no advantages; run compute_gae first".into()));
    }
    let n = buf.size();
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(r);
        let mut start = 0;
        for size in chunk_sizes(n, cfg.minibatches) {
            let idx = &order[start..start + size];
            start += size;
            let mb = Minibatch::from_buffer(buf, idx);
            let (grads, ls) = rule.gradient(params, &mb, cfg)?;
            adam_step(params, &grads, adam, cfg.lr)?;
            stats.updates += 1;
            stats.policy_loss += ls.policy_loss;
            stats.value_loss += ls.value_loss;
            stats.entropy += ls.entropy;
            stats.aux_loss += ls.aux_loss;
        }
    }
    if stats.updates > 0 {
        let k = stats.updates as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.aux_loss /= k;
    }
    Ok(stats)
}

pub fn ppo_update(
    params: &mut ParameterSet,
    adam: &mut AdamState,
    buf: &RolloutBuffer,
    cfg: &PpoConfig,
    r: &mut Rng,
) -> Result<UpdateStats> {
    ppo_update_with(params, adam, buf, cfg, r, &mut PlainPpo)
}
