//! Episode-return evaluation on the three environment modes.

use std::sync::Arc;

use crate::env::{make_env, Action, Env, EnvConfig, EnvMode};
use crate::error::Result;
use crate::nn::{self, ParameterSet};
use crate::ppo::sample_action;
use crate::rng::{self, tags, Rng};
use crate::tensor::Tensor;

/// Chooses actions for a batch of live environments.
pub trait Policy {
    fn act(&mut self, envs: &[&Env], obs: &Tensor, r: &mut Rng) -> Result<Vec<usize>>;
}

/// Samples from the network's policy.
pub struct NetworkPolicy<'a>(pub &'a ParameterSet);

impl Policy for NetworkPolicy<'_> {
    fn act(&mut self, _envs: &[&Env], obs: &Tensor, r: &mut Rng) -> Result<Vec<usize>> {
        let out = nn::forward(self.0, obs)?;
        Ok((0..out.len()).map(|i| sample_action(out.logits_row(i), r).0).collect())
    }
}

/// Follows a breadth-first shortest path from the agent's current cell.
pub struct BfsPolicy;

impl Policy for BfsPolicy {
    fn act(&mut self, envs: &[&Env], _obs: &Tensor, _r: &mut Rng) -> Result<Vec<usize>> {
        Ok(envs
            .iter()
            .map(|env| {
                let state = env.state().expect("evaluated envs are reset");
                state
                    .level
                    .path_from(state.agent)
                    .and_then(|p| p.first().copied())
                    .unwrap_or(Action::Up)
                    .index()
            })
            .collect())
    }
}

/// Mean undiscounted return of `episodes` episodes, one per environment
/// instance, run in lockstep. Deterministic in `seed`.
pub fn evaluate_policy(
    config: &Arc<EnvConfig>,
    mode: EnvMode,
    episodes: usize,
    seed: u64,
    policy: &mut dyn Policy,
) -> Result<Vec<f64>> {
    let base = rng::derive_seed(seed, mode as u64 + 101);
    let mut envs = (0..episodes)
        .map(|i| make_env(Arc::clone(config), mode, rng::derive_seed(base, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut obs: Vec<Tensor> = envs.iter_mut().map(Env::reset).collect();
    let mut returns = vec![0.0; episodes];
    let mut live: Vec<usize> = (0..episodes).collect();
    let mut r = rng::stream(seed, tags::EVAL);
    while !live.is_empty() {
        let batch = Tensor::stack(&live.iter().map(|&i| &obs[i]).collect::<Vec<_>>())?;
        let actions = {
            let refs: Vec<&Env> = live.iter().map(|&i| &envs[i]).collect();
            policy.act(&refs, &batch, &mut r)?
        };
        let mut still = Vec::with_capacity(live.len());
        for (&i, &a) in live.iter().zip(&actions) {
            let step = envs[i].step(a)?;
            returns[i] += step.reward;
            if !step.done {
                obs[i] = step.obs;
                still.push(i);
            }
        }
        live = still;
    }
    Ok(returns)
}

/// Mean stochastic-policy return of `params` on `mode`.
pub fn evaluate(params: &ParameterSet, config: &Arc<EnvConfig>, mode: EnvMode, episodes: usize, seed: u64) -> Result<f64> {
    let returns = evaluate_policy(config, mode, episodes, seed, &mut NetworkPolicy(params))?;
    Ok(returns.iter().sum::<f64>() / returns.len() as f64)
}

/// `count` training-mode observations gathered with uniform random actions.
pub fn probe_observations(config: &Arc<EnvConfig>, count: usize, seed: u64) -> Result<Tensor> {
    use rand::Rng as _;
    let mut r = rng::stream(seed, tags::DIAGNOSTIC);
    let mut env = make_env(Arc::clone(config), EnvMode::EasyBg, rng::derive_seed(seed, tags::DIAGNOSTIC))?;
    let mut obs = env.reset();
    let mut images = Vec::with_capacity(count);
    while images.len() < count {
        images.push(obs.clone());
        let step = env.step(r.random_range(0..Action::COUNT))?;
        obs = if step.done { env.reset() } else { step.obs };
    }
    Tensor::stack(&images.iter().collect::<Vec<_>>())
}
