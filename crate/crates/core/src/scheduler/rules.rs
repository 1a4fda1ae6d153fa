//! Per-minibatch gradient rules of the augmentation baselines.

use rand::{Rng as _, RngCore, SeedableRng};

use crate::augment::{apply, batch_apply, Augmentation};
use crate::error::Result;
use crate::nn::{backward, forward_on_tape, GradientSet, ParameterSet, Tape, Var};
use crate::ppo::{ppo_loss_from_outputs, stats_of, LossStats, Minibatch, MinibatchRule, PpoConfig};
use crate::rng::Rng;
use crate::surgery::{pagrad_combine, pagrad_combine_per_layer};
use crate::tensor::Tensor;

/// Replaces each minibatch observation by `phi(o)` with probability one half.
pub struct Rad {
    pub phi: Augmentation,
    pub rng: Rng,
}

impl Rad {
    pub fn augment(&mut self, obs: &Tensor) -> Result<Tensor> {
        let n = obs.shape()[0];
        let per = obs.len() / n;
        let [h, w, c] = [obs.shape()[1], obs.shape()[2], obs.shape()[3]];
        let mut data = obs.data().to_vec();
        for i in 0..n {
            let pick = self.rng.random_bool(0.5);
            let mut child = Rng::seed_from_u64(self.rng.next_u64());
            if pick && !self.phi.is_identity() {
                let img = Tensor::from_parts(vec![h, w, c], data[i * per..(i + 1) * per].to_vec())?;
                let out = apply(&self.phi, &img, &mut child)?;
                data[i * per..(i + 1) * per].copy_from_slice(out.data());
            }
        }
        Tensor::from_parts(obs.shape().to_vec(), data)
    }
}

impl MinibatchRule for Rad {
    fn gradient(&mut self, params: &ParameterSet, mb: &Minibatch, cfg: &PpoConfig) -> Result<(GradientSet, LossStats)> {
        let obs = self.augment(&mb.obs)?;
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape);
        let x = tape.constant(obs);
        let (logits, values) = forward_on_tape(&mut tape, params.spec(), &vars, x)?;
        let loss = ppo_loss_from_outputs(&mut tape, logits, values, mb, cfg, mb.len())?;
        let grads = backward(&tape, loss.total, &vars, params)?;
        Ok((grads, stats_of(&tape, &loss)))
    }
}

/// `KL[pi(o) || pi(phi(o))] + (V(o) - V(phi(o)))^2` with the original-branch
/// outputs detached.
pub fn drac_regularizer(
    tape: &mut Tape<'_>,
    params: &ParameterSet,
    vars: &[Var],
    logits: Var,
    values: Var,
    aug_obs: Var,
) -> Result<Var> {
    let target_logp = {
        let d = tape.detach(logits);
        tape.log_softmax(d)
    };
    let target_v = tape.detach(values);
    let (la, va) = forward_on_tape(tape, params.spec(), vars, aug_obs)?;
    let logp_a = tape.log_softmax(la);
    let p = tape.exp(target_logp);
    let gap = tape.sub(target_logp, logp_a);
    let weighted = tape.mul(p, gap);
    let rows = tape.row_sum(weighted);
    let kl = tape.mean(rows);
    let dv = tape.sub(target_v, va);
    let sq = tape.square(dv);
    let v = tape.mean(sq);
    Ok(tape.add(kl, v))
}

/// How the PPO gradient and the regularizer gradient are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    /// One backward pass through `L_PPO + alpha * L_dis`.
    Sum,
    /// Separate gradients merged by conflict projection.
    Project { per_layer: bool },
}

pub struct Drac {
    pub phi: Augmentation,
    pub alpha: f64,
    pub combine: Combine,
    pub rng: Rng,
    /// Smallest `<applied - g_main, g_main>` seen, for projected steps.
    pub min_alignment: f64,
    pub steps: usize,
}

impl Drac {
    pub fn new(phi: Augmentation, alpha: f64, combine: Combine, rng: Rng) -> Self {
        Self {
            phi,
            alpha,
            combine,
            rng,
            min_alignment: f64::INFINITY,
            steps: 0,
        }
    }

    /// Gradients of the PPO loss and of the (unscaled) regularizer.
    pub fn split_gradients(
        &mut self,
        params: &ParameterSet,
        mb: &Minibatch,
        cfg: &PpoConfig,
    ) -> Result<(GradientSet, GradientSet, LossStats)> {
        let aug = batch_apply(&self.phi, &mb.obs, &mut self.rng)?;
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape);
        let x = tape.constant(mb.obs.clone());
        let xa = tape.constant(aug);
        let (logits, values) = forward_on_tape(&mut tape, params.spec(), &vars, x)?;
        let loss = ppo_loss_from_outputs(&mut tape, logits, values, mb, cfg, mb.len())?;
        let reg = drac_regularizer(&mut tape, params, &vars, logits, values, xa)?;
        let g_main = backward(&tape, loss.total, &vars, params)?;
        let g_reg = backward(&tape, reg, &vars, params)?;
        let mut stats = stats_of(&tape, &loss);
        stats.aux_loss = tape.value(reg).item();
        Ok((g_main, g_reg, stats))
    }
}

impl MinibatchRule for Drac {
    fn gradient(&mut self, params: &ParameterSet, mb: &Minibatch, cfg: &PpoConfig) -> Result<(GradientSet, LossStats)> {
        self.steps += 1;
        if self.alpha == 0.0 {
            let mut tape = Tape::new();
            let vars = params.on_tape(&mut tape);
            let x = tape.constant(mb.obs.clone());
            let (logits, values) = forward_on_tape(&mut tape, params.spec(), &vars, x)?;
            let loss = ppo_loss_from_outputs(&mut tape, logits, values, mb, cfg, mb.len())?;
            return Ok((backward(&tape, loss.total, &vars, params)?, stats_of(&tape, &loss)));
        }
        match self.combine {
            Combine::Sum => {
                let aug = batch_apply(&self.phi, &mb.obs, &mut self.rng)?;
                let mut tape = Tape::new();
                let vars = params.on_tape(&mut tape);
                let x = tape.constant(mb.obs.clone());
                let xa = tape.constant(aug);
                let (logits, values) = forward_on_tape(&mut tape, params.spec(), &vars, x)?;
                let loss = ppo_loss_from_outputs(&mut tape, logits, values, mb, cfg, mb.len())?;
                let reg = drac_regularizer(&mut tape, params, &vars, logits, values, xa)?;
                let scaled = tape.scale(reg, self.alpha);
                let total = tape.add(loss.total, scaled);
                let grads = backward(&tape, total, &vars, params)?;
                let mut stats = stats_of(&tape, &loss);
                stats.aux_loss = tape.value(reg).item();
                Ok((grads, stats))
            }
            Combine::Project { per_layer } => {
                let (g_main, g_reg, stats) = self.split_gradients(params, mb, cfg)?;
                let g_aux = g_reg.scaled(self.alpha);
                let out = if per_layer {
                    pagrad_combine_per_layer(&g_main, &g_aux)?
                } else {
                    pagrad_combine(&g_main, &g_aux)?
                };
                let alignment = out.axpy(-1.0, &g_main).dot(&g_main);
                self.min_alignment = self.min_alignment.min(alignment);
                Ok((out, stats))
            }
        }
    }
}
