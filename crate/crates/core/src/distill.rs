//! Distillation with augmented observations.
//!
//! A frozen teacher snapshot `theta_old` labels a buffer of observations once.
//! The student then matches the teacher on the original observations (the
//! anchor) and on augmented copies (the consistency prior). The anchor keeps
//! the student's response on real inputs where RL left it, which is what
//! makes the procedure safe to run after training has ended.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{batch_apply, Augmentation};
use crate::error::{Error, Result};
use crate::nn::{
    self, adam_step, backward, forward_on_tape, init_params, js_distance, kl_categorical, AdamState, ParameterSet,
    Tape, Var,
};
use crate::ppo::{chunk_sizes, sample_action, VecEnv};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DaConfig {
    /// Adam learning rate of an interleaved DA phase.
    pub lr: f64,
    /// Passes over the buffer per DA phase.
    pub epochs: usize,
    pub minibatches: usize,
    /// Keep the value-matching terms in interleaved DA phases.
    pub include_value_term: bool,
    pub exda_buffer_size: usize,
    pub exda_minibatch_size: usize,
    pub exda_lr: f64,
    pub exda_include_value_term: bool,
    /// Epochs between refreshes of the augmented buffer during ExDA.
    pub exda_refresh_every: usize,
    /// Re-initialize the student before ExDA.
    pub exda_reinit: bool,
    /// Upper bound asserted on the post-phase anchor KL.
    pub anchor_kl_threshold: f64,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 3,
            minibatches: 8,
            include_value_term: true,
            exda_buffer_size: 20_000,
            exda_minibatch_size: 256,
            exda_lr: 1e-3,
            exda_include_value_term: false,
            exda_refresh_every: 3,
            exda_reinit: false,
            anchor_kl_threshold: 0.05,
        }
    }
}

impl DaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("da: {m}")));
        if !(self.lr > 0.0) || !(self.exda_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.minibatches == 0 || self.exda_minibatch_size == 0 || self.exda_refresh_every == 0 {
            return bad("minibatch settings and refresh interval must be >= 1");
        }
        if self.exda_buffer_size == 0 {
            return bad("exda_buffer_size must be >= 1");
        }
        Ok(())
    }
}

/// Observations plus the frozen teacher's cached responses.
#[derive(Clone, Debug)]
pub struct DistillBuffer {
    pub obs_shape: [usize; 3],
    pub obs: Vec<f64>,
    pub teacher_logits: Vec<f64>,
    pub teacher_values: Vec<f64>,
    pub num_actions: usize,
}

const FORWARD_CHUNK: usize = 512;

/// Tape-free forward over a flat observation array, in chunks.
pub fn forward_flat(params: &ParameterSet, obs: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let [h, w, c] = params.spec().input;
    let per = h * w * c;
    let mut logits = Vec::with_capacity(obs.len() / per * params.spec().num_actions);
    let mut values = Vec::with_capacity(obs.len() / per);
    for chunk in obs.chunks(FORWARD_CHUNK * per) {
        let t = Tensor::from_parts(vec![chunk.len() / per, h, w, c], chunk.to_vec())?;
        let out = nn::forward(params, &t)?;
        logits.extend_from_slice(out.logits.data());
        values.extend(out.values);
    }
    Ok((logits, values))
}

impl DistillBuffer {
    pub fn build(teacher: &ParameterSet, obs: Vec<f64>) -> Result<Self> {
        let obs_shape = teacher.spec().input;
        let per: usize = obs_shape.iter().product();
        if obs.is_empty() {
            return Err(Error::EmptyBuffer("distillation buffer has no observations".into()));
        }
        if obs.len() % per != 0 {
            return Err(Error::Shape("observation buffer is not a whole number of images".into()));
        }
        let (teacher_logits, teacher_values) = forward_flat(teacher, &obs)?;
        Ok(Self {
            obs_shape,
            obs,
            teacher_logits,
            teacher_values,
            num_actions: teacher.spec().num_actions,
        })
    }

    pub fn len(&self) -> usize {
        self.teacher_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teacher_values.is_empty()
    }

    fn per(&self) -> usize {
        self.obs_shape.iter().product()
    }

    pub fn obs_tensor(&self) -> Tensor {
        let [h, w, c] = self.obs_shape;
        Tensor::from_parts(vec![self.len(), h, w, c], self.obs.clone()).expect("buffer layout")
    }

    pub fn gather(&self, source: &[f64], idx: &[usize]) -> Tensor {
        let per = self.per();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(&source[i * per..(i + 1) * per]);
        }
        let [h, w, c] = self.obs_shape;
        Tensor::from_parts(vec![idx.len(), h, w, c], data).expect("buffer layout")
    }

    pub fn teacher_batch(&self, idx: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let a = self.num_actions;
        let mut logits = Vec::with_capacity(idx.len() * a);
        for &i in idx {
            logits.extend_from_slice(&self.teacher_logits[i * a..(i + 1) * a]);
        }
        (logits, idx.iter().map(|&i| self.teacher_values[i]).collect())
    }

    /// Digest of the cached teacher responses.
    pub fn teacher_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in self.teacher_logits.iter().chain(&self.teacher_values) {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    /// `phi` applied to every buffered observation with per-image rng streams.
    pub fn augmented(&self, phi: &Augmentation, r: &mut Rng) -> Result<Vec<f64>> {
        Ok(batch_apply(phi, &self.obs_tensor(), r)?.into_data())
    }
}

/// `L_dis(theta, phi; theta_old)` on one minibatch: KL from the cached teacher
/// policy to the student's policy on `aug_obs`, plus the squared value gap
/// when `include_value`.
pub fn l_dis(
    tape: &mut Tape<'_>,
    params: &ParameterSet,
    vars: &[Var],
    aug_obs: Var,
    teacher_logits: &[f64],
    teacher_values: &[f64],
    include_value: bool,
) -> Result<Var> {
    let a = params.spec().num_actions;
    let (logits, values) = forward_on_tape(tape, params.spec(), vars, aug_obs)?;
    let student_logp = tape.log_softmax(logits);
    let b = teacher_values.len();
    let t_logp = nn::kernels::log_softmax_rows(teacher_logits, a);
    let t_p: Vec<f64> = t_logp.iter().map(|v| v.exp()).collect();
    let t_logp = tape.constant(Tensor::from_parts(vec![b, a], t_logp)?);
    let t_p = tape.constant(Tensor::from_parts(vec![b, a], t_p)?);
    let gap = tape.sub(t_logp, student_logp);
    let weighted = tape.mul(t_p, gap);
    let kl_rows = tape.row_sum(weighted);
    let kl = tape.mean(kl_rows);
    if !include_value {
        return Ok(kl);
    }
    let tv = tape.constant(Tensor::vector(teacher_values.to_vec()));
    let d = tape.sub(tv, values);
    let sq = tape.square(d);
    let v = tape.mean(sq);
    Ok(tape.add(kl, v))
}

/// `L_DA = L_dis(theta, I; theta_old) + L_dis(theta, phi; theta_old)`.
#[allow(clippy::too_many_arguments)]
pub fn l_da(
    tape: &mut Tape<'_>,
    params: &ParameterSet,
    vars: &[Var],
    obs: Var,
    aug_obs: Var,
    teacher_logits: &[f64],
    teacher_values: &[f64],
    include_value: bool,
) -> Result<Var> {
    let anchor = l_dis(tape, params, vars, obs, teacher_logits, teacher_values, include_value)?;
    let prior = l_dis(tape, params, vars, aug_obs, teacher_logits, teacher_values, include_value)?;
    Ok(tape.add(anchor, prior))
}

/// Self-inconsistency `L_dis(theta, phi; theta)` with gradients through both
/// branches (no teacher).
pub fn l_dis_self(
    tape: &mut Tape<'_>,
    params: &ParameterSet,
    vars: &[Var],
    obs: Var,
    aug_obs: Var,
    include_value: bool,
) -> Result<Var> {
    let (lo, vo) = forward_on_tape(tape, params.spec(), vars, obs)?;
    let (la, va) = forward_on_tape(tape, params.spec(), vars, aug_obs)?;
    let logp_o = tape.log_softmax(lo);
    let logp_a = tape.log_softmax(la);
    let p_o = tape.exp(logp_o);
    let gap = tape.sub(logp_o, logp_a);
    let weighted = tape.mul(p_o, gap);
    let rows = tape.row_sum(weighted);
    let kl = tape.mean(rows);
    if !include_value {
        return Ok(kl);
    }
    let d = tape.sub(vo, va);
    let sq = tape.square(d);
    let v = tape.mean(sq);
    Ok(tape.add(kl, v))
}

/// Mean of `KL[pi(.|o) || pi(.|phi(o))] (+ (V(o) - V(phi(o)))^2)` for one
/// network on paired observation arrays.
pub fn self_inconsistency(params: &ParameterSet, obs: &[f64], aug_obs: &[f64], include_value: bool) -> Result<f64> {
    let (lo, vo) = forward_flat(params, obs)?;
    let (la, va) = forward_flat(params, aug_obs)?;
    let a = params.spec().num_actions;
    let n = vo.len();
    let mut total = 0.0;
    for i in 0..n {
        total += kl_categorical(&lo[i * a..(i + 1) * a], &la[i * a..(i + 1) * a]);
        if include_value {
            total += (vo[i] - va[i]).powi(2);
        }
    }
    Ok(total / n as f64)
}

/// Mean `KL[pi_teacher || pi_student]` over the buffer's original observations.
pub fn anchor_kl(student: &ParameterSet, buffer: &DistillBuffer) -> Result<f64> {
    let (logits, _) = forward_flat(student, &buffer.obs)?;
    let a = buffer.num_actions;
    let n = buffer.len();
    let total: f64 = (0..n)
        .map(|i| kl_categorical(&buffer.teacher_logits[i * a..(i + 1) * a], &logits[i * a..(i + 1) * a]))
        .sum();
    Ok(total / n as f64)
}

/// Mean JS divergence between the policy on `o` and on one fresh `phi(o)`.
pub fn policy_distance(params: &ParameterSet, obs: &Tensor, phi: &Augmentation, r: &mut Rng) -> Result<f64> {
    if obs.is_empty() || obs.shape().first() == Some(&0) {
        return Err(Error::EmptyBuffer("policy distance needs observations".into()));
    }
    let aug = batch_apply(phi, obs, r)?;
    policy_distance_paired(params, obs.data(), aug.data())
}

pub fn policy_distance_paired(params: &ParameterSet, obs: &[f64], aug_obs: &[f64]) -> Result<f64> {
    let (lo, _) = forward_flat(params, obs)?;
    let (la, _) = forward_flat(params, aug_obs)?;
    let a = params.spec().num_actions;
    let n = lo.len() / a;
    let total: f64 = (0..n).map(|i| js_distance(&lo[i * a..(i + 1) * a], &la[i * a..(i + 1) * a])).sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DaPhaseReport {
    pub augmentation: String,
    pub updates: usize,
    pub final_loss: f64,
    /// Mean KL(teacher || student) on the original observations after the phase.
    pub anchor_kl: f64,
    /// Self-inconsistency averaged over the augmented copies the phase trained on.
    pub self_inconsistency_before: f64,
    pub self_inconsistency_after: f64,
    pub policy_distance_before: f64,
    pub policy_distance_after: f64,
    pub teacher_hash_before: [u8; 32],
    pub teacher_hash_after: [u8; 32],
}

/// Settings of one optimization pass family over a [`DistillBuffer`].
#[derive(Clone, Copy, Debug)]
struct Plan {
    lr: f64,
    epochs: usize,
    batches: Batches,
    include_value: bool,
    refresh_every: usize,
}

#[derive(Clone, Copy, Debug)]
enum Batches {
    Count(usize),
    Size(usize),
}

impl Batches {
    fn sizes(self, n: usize) -> Vec<usize> {
        match self {
            Batches::Count(k) => chunk_sizes(n, k.min(n)),
            Batches::Size(s) => chunk_sizes(n, n.div_ceil(s.min(n))),
        }
    }
}

/// Where the augmented copy of the buffer comes from in each epoch.
#[derive(Clone, Copy, Debug)]
enum Views<'a> {
    /// Redrawn from the cycled augmentations every `refresh_every` epochs.
    Fresh(&'a [Augmentation]),
    /// Precomputed, one per epoch.
    Fixed(&'a [Vec<f64>]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Objective {
    /// `L_DA` against the cached teacher.
    Anchored,
    /// `L_dis(theta, phi; theta)`, no teacher.
    SelfConsistency,
}

/// Runs `plan.epochs` shuffled passes; returns (update count, per-epoch mean loss).
fn optimize(
    student: &mut ParameterSet,
    buffer: &DistillBuffer,
    views: Views<'_>,
    plan: Plan,
    objective: Objective,
    r: &mut Rng,
) -> Result<(usize, Vec<f64>)> {
    let mut adam = AdamState::new(student);
    let n = buffer.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut fresh: Vec<f64> = Vec::new();
    let mut updates = 0;
    let mut epoch_losses = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        let aug: &[f64] = match views {
            Views::Fixed(v) => &v[epoch % v.len()],
            Views::Fresh(phis) => {
                if epoch % plan.refresh_every == 0 {
                    let phi = &phis[(epoch / plan.refresh_every) % phis.len()];
                    fresh = buffer.augmented(phi, r)?;
                }
                &fresh
            }
        };
        order.shuffle(r);
        let mut start = 0;
        let mut loss_sum = 0.0;
        let sizes = plan.batches.sizes(n);
        for size in &sizes {
            let idx = &order[start..start + size];
            start += size;
            let obs_t = buffer.gather(&buffer.obs, idx);
            let aug_t = buffer.gather(aug, idx);
            let mut tape = Tape::new();
            let vars = student.on_tape(&mut tape);
            let obs = tape.constant(obs_t);
            let aug_v = tape.constant(aug_t);
            let loss = match objective {
                Objective::Anchored => {
                    let (tl, tv) = buffer.teacher_batch(idx);
                    l_da(&mut tape, student, &vars, obs, aug_v, &tl, &tv, plan.include_value)?
                }
                Objective::SelfConsistency => l_dis_self(&mut tape, student, &vars, obs, aug_v, plan.include_value)?,
            };
            loss_sum += tape.value(loss).item();
            let grads = backward(&tape, loss, &vars, student)?;
            drop(tape);
            adam_step(student, &grads, &mut adam, plan.lr)?;
            updates += 1;
        }
        epoch_losses.push(loss_sum / sizes.len() as f64);
    }
    Ok((updates, epoch_losses))
}

/// One interleaved DA phase: snapshot the teacher, cache its responses on
/// `obs`, then minimize `L_DA` for `config.epochs` passes, re-augmenting the
/// buffer every pass.
pub fn da_phase(
    params: &mut ParameterSet,
    obs: Vec<f64>,
    phi: &Augmentation,
    config: &DaConfig,
    r: &mut Rng,
) -> Result<DaPhaseReport> {
    let buffer = DistillBuffer::build(params, obs)?;
    let hash_before = buffer.teacher_hash();

    // The augmented copies this phase trains on, one per pass; the before and
    // after measurements average over them.
    let views = (0..config.epochs.max(1))
        .map(|_| buffer.augmented(phi, r))
        .collect::<Result<Vec<_>>>()?;
    let measure = |p: &ParameterSet| -> Result<(f64, f64)> {
        let (mut si, mut pd) = (0.0, 0.0);
        for v in &views {
            si += self_inconsistency(p, &buffer.obs, v, config.include_value_term)?;
            pd += policy_distance_paired(p, &buffer.obs, v)?;
        }
        let k = views.len() as f64;
        Ok((si / k, pd / k))
    };
    let (si_before, pd_before) = measure(params)?;

    let plan = Plan {
        lr: config.lr,
        epochs: config.epochs,
        batches: Batches::Count(config.minibatches),
        include_value: config.include_value_term,
        refresh_every: 1,
    };
    let (updates, losses) = optimize(params, &buffer, Views::Fixed(&views), plan, Objective::Anchored, r)?;
    let (si_after, pd_after) = measure(params)?;

    let report = DaPhaseReport {
        augmentation: phi.kind().to_string(),
        updates,
        final_loss: losses.last().copied().unwrap_or(0.0),
        anchor_kl: anchor_kl(params, &buffer)?,
        self_inconsistency_before: si_before,
        self_inconsistency_after: si_after,
        policy_distance_before: pd_before,
        policy_distance_after: pd_after,
        teacher_hash_before: hash_before,
        teacher_hash_after: buffer.teacher_hash(),
    };
    Ok(report)
}

/// Collects `size` observations by running `params`' stochastic policy.
/// Returns the observations and the number of environment steps consumed.
pub fn fill_observations(params: &ParameterSet, venv: &mut VecEnv, size: usize, r: &mut Rng) -> Result<(Vec<f64>, u64)> {
    let per = params.spec().obs_len();
    let before = venv.total_steps();
    let mut obs = Vec::with_capacity(size * per);
    while obs.len() < size * per {
        let batch = venv.obs_batch()?;
        let out = nn::forward(params, &batch)?;
        let take = (size - obs.len() / per).min(venv.len());
        obs.extend_from_slice(&batch.data()[..take * per]);
        if obs.len() >= size * per {
            break;
        }
        let actions: Vec<usize> = (0..venv.len()).map(|i| sample_action(out.logits_row(i), r).0).collect();
        venv.step(&actions)?;
    }
    Ok((obs, venv.total_steps() - before))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DistillReport {
    pub updates: usize,
    pub epoch_losses: Vec<f64>,
    pub anchor_kl: f64,
}

/// Distillation after RL: minimize `L_DA` against the frozen pretrained policy
/// for `epochs` passes, cycling through `phis` every `exda_refresh_every` epochs.
pub fn exda_on_buffer(
    params: &ParameterSet,
    buffer: &DistillBuffer,
    phis: &[Augmentation],
    config: &DaConfig,
    epochs: usize,
    r: &mut Rng,
) -> Result<(ParameterSet, DistillReport)> {
    if phis.is_empty() {
        return Err(Error::Config("exda needs at least one augmentation".into()));
    }
    let mut student = if config.exda_reinit {
        init_params(params.spec(), rand::RngCore::next_u64(r), params.init_scale)?
    } else {
        params.clone()
    };
    let plan = Plan {
        lr: config.exda_lr,
        epochs,
        batches: Batches::Size(config.exda_minibatch_size),
        include_value: config.exda_include_value_term,
        refresh_every: config.exda_refresh_every,
    };
    let (updates, epoch_losses) = optimize(&mut student, buffer, Views::Fresh(phis), plan, Objective::Anchored, r)?;
    let anchor_kl = anchor_kl(&student, buffer)?;
    Ok((student, DistillReport { updates, epoch_losses, anchor_kl }))
}

#[derive(Clone, Debug)]
pub struct ExdaOutcome {
    pub params: ParameterSet,
    pub report: DistillReport,
    /// Environment steps spent filling the buffer.
    pub fill_steps: u64,
}

/// Fills a buffer along the pretrained policy's own trajectories, then runs
/// [`exda_on_buffer`].
pub fn exda(
    params: &ParameterSet,
    venv: &mut VecEnv,
    phis: &[Augmentation],
    config: &DaConfig,
    epochs: usize,
    r: &mut Rng,
) -> Result<ExdaOutcome> {
    if phis.is_empty() {
        return Err(Error::Config("exda needs at least one augmentation".into()));
    }
    let (obs, fill_steps) = fill_observations(params, venv, config.exda_buffer_size, r)?;
    let buffer = DistillBuffer::build(params, obs)?;
    let (params, report) = exda_on_buffer(params, &buffer, phis, config, epochs, r)?;
    Ok(ExdaOutcome { params, report, fill_steps })
}

/// Ablation: minimize only the self-inconsistency with no teacher anchor,
/// under the same buffer and budget as [`exda_on_buffer`].
pub fn exdrac(
    params: &ParameterSet,
    buffer: &DistillBuffer,
    phis: &[Augmentation],
    config: &DaConfig,
    epochs: usize,
    r: &mut Rng,
) -> Result<(ParameterSet, DistillReport)> {
    if phis.is_empty() {
        return Err(Error::Config("exdrac needs at least one augmentation".into()));
    }
    let mut student = params.clone();
    let plan = Plan {
        lr: config.exda_lr,
        epochs,
        batches: Batches::Size(config.exda_minibatch_size),
        include_value: config.exda_include_value_term,
        refresh_every: config.exda_refresh_every,
    };
    let (updates, epoch_losses) = optimize(&mut student, buffer, Views::Fresh(phis), plan, Objective::SelfConsistency, r)?;
    let anchor_kl = anchor_kl(&student, buffer)?;
    Ok((student, DistillReport { updates, epoch_losses, anchor_kl }))
}
