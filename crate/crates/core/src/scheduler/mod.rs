//! Training-loop orchestration: plain PPO, the augmentation baselines,
//! interleaved and post-hoc distillation, and bandit-selected augmentation.

pub mod bandit;
pub mod rules;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use bandit::{compute_gain, rollout_return, BanditState, GainRecord, Selection, UcbConfig};
pub use rules::{Combine, Drac, Rad};

use crate::augment::Augmentation;
use crate::distill::{da_phase, exda, DaConfig, DaPhaseReport, DistillReport};
use crate::env::{EnvConfig, EnvMode};
use crate::error::{Error, Result};
use crate::nn::{init_params, AdamState, NetworkSpec, ParameterSet};
use crate::ppo::{
    collect_rollout, compute_gae, ppo_update_with, MinibatchRule, PlainPpo, PpoConfig, RewardNormalizer, UpdateStats,
    VecEnv,
};
use crate::rng::{self, tags};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ppo,
    Rad,
    Drac,
    DracPagrad,
    Inda,
    Exda,
    UcbInda,
    UcbExda,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Ppo,
        Method::Rad,
        Method::Drac,
        Method::DracPagrad,
        Method::Inda,
        Method::Exda,
        Method::UcbInda,
        Method::UcbExda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ppo => "ppo",
            Method::Rad => "rad",
            Method::Drac => "drac",
            Method::DracPagrad => "drac_pagrad",
            Method::Inda => "inda",
            Method::Exda => "exda",
            Method::UcbInda => "ucb_inda",
            Method::UcbExda => "ucb_exda",
        }
    }

    fn uses_bandit(self) -> bool {
        matches!(self, Method::UcbInda | Method::UcbExda)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub method: Method,
    /// RL epochs; one rollout and one PPO update each.
    pub epochs: usize,
    /// Epochs between DA phases.
    pub interval: usize,
    /// First and last epoch (1-based) at which a DA phase may start.
    pub window: [usize; 2],
    /// Distillation epochs after RL for the post-hoc methods.
    pub exda_epochs: usize,
    pub drac_alpha: f64,
    /// Project gradients tensor by tensor in `drac_pagrad`.
    pub pagrad_per_layer: bool,
    pub ucb: UcbConfig,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            method: Method::Ppo,
            epochs: 100,
            interval: 5,
            window: [0, 0],
            exda_epochs: 30,
            drac_alpha: 0.1,
            pagrad_per_layer: false,
            ucb: UcbConfig::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let [s, t] = self.window;
        if s > t || t > self.epochs.max(s) {
            return Err(Error::Config(format!(
                "schedule window [{s}, {t}] must satisfy 0 <= S <= T <= N = {}",
                self.epochs
            )));
        }
        if self.interval == 0 {
            return Err(Error::Config("schedule interval must be >= 1".into()));
        }
        if !(self.drac_alpha >= 0.0) {
            return Err(Error::Config("drac_alpha must be >= 0".into()));
        }
        Ok(())
    }

    /// Whether a DA phase starts after the PPO update of epoch `n` (1-based).
    pub fn is_da_epoch(&self, n: usize) -> bool {
        let [s, t] = self.window;
        n >= 1 && n >= s && n <= t && (n - 1) % self.interval == 0
    }

    pub fn da_epochs(&self) -> Vec<usize> {
        (1..=self.epochs).filter(|&n| self.is_da_epoch(n)).collect()
    }
}

/// Everything one training run needs.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub env: Arc<EnvConfig>,
    pub network: NetworkSpec,
    pub init_scale: f64,
    pub ppo: PpoConfig,
    pub da: DaConfig,
    pub schedule: ScheduleConfig,
    /// `phi` for single-augmentation methods (first non-identity entry), the
    /// arm set for the bandit methods, the distillation set (identity dropped)
    /// for the post-hoc methods.
    pub augmentations: Vec<Augmentation>,
    pub seed: u64,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.da.validate()?;
        self.schedule.validate()?;
        for a in &self.augmentations {
            a.validate()?;
        }
        let needs_aug = !matches!(self.schedule.method, Method::Ppo);
        if needs_aug && self.augmentations.is_empty() {
            return Err(Error::Config(format!(
                "method {} needs at least one augmentation",
                self.schedule.method
            )));
        }
        if self.network.input != self.env.obs_shape() {
            return Err(Error::Config(format!(
                "network input {:?} does not match observation shape {:?}",
                self.network.input,
                self.env.obs_shape()
            )));
        }
        Ok(())
    }

    fn phi(&self) -> Augmentation {
        self.augmentations
            .iter()
            .copied()
            .find(|a| !a.is_identity())
            .unwrap_or(Augmentation::Identity)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub env_steps: u64,
    /// Mean raw return of episodes that ended during this rollout (NaN if none).
    pub train_return: f64,
    pub episodes: usize,
    /// Mean of `advantage + value` over the rollout.
    pub rollout_value: f64,
    pub update: UpdateStats,
    pub da_phase: bool,
    pub arm: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub adam: AdamState,
    pub epochs: Vec<EpochMetrics>,
    pub da_phases: Vec<(usize, DaPhaseReport)>,
    pub gains: Vec<GainRecord>,
    pub bandit: Option<BanditState>,
    /// Network before the post-hoc distillation stage.
    pub before_exda: Option<ParameterSet>,
    pub exda: Option<DistillReport>,
    pub exda_fill_steps: u64,
    /// Smallest projected-aux alignment over all PAGrad steps.
    pub pagrad_min_alignment: Option<f64>,
}

/// Receives per-epoch metrics during training.
pub trait TrainObserver {
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _params: &ParameterSet) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Runs one configured method end to end.
pub fn train(setup: &TrainSetup, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    setup.validate()?;
    let seed = setup.seed;
    let sched = &setup.schedule;
    let mut params = init_params(&setup.network, rng::derive_seed(seed, tags::INIT), setup.init_scale)?;
    let mut adam = AdamState::new(&params);
    let mut venv = VecEnv::new(setup.env.clone(), EnvMode::EasyBg, setup.ppo.num_envs, rng::derive_seed(seed, tags::ENV))?;
    let mut normalizer = setup
        .ppo
        .normalize_rewards
        .then(|| RewardNormalizer::new(setup.ppo.num_envs, setup.ppo.gamma));
    let mut action_rng = rng::stream(seed, tags::ACTION);
    let mut shuffle_rng = rng::stream(seed, tags::SHUFFLE);
    let mut distill_rng = rng::stream(seed, tags::DISTILL);
    let aug_rng = rng::stream(seed, tags::AUGMENT);

    let phi = setup.phi();
    let mut drac: Option<Drac> = None;
    let mut rad: Option<Rad> = None;
    match sched.method {
        Method::Rad => rad = Some(Rad { phi, rng: aug_rng }),
        Method::Drac => drac = Some(Drac::new(phi, sched.drac_alpha, Combine::Sum, aug_rng)),
        Method::DracPagrad => {
            let combine = Combine::Project {
                per_layer: sched.pagrad_per_layer,
            };
            drac = Some(Drac::new(phi, sched.drac_alpha, combine, aug_rng))
        }
        _ => {}
    }
    let mut bandit = if sched.method.uses_bandit() {
        Some(BanditState::new(setup.augmentations.clone(), sched.ucb.clone())?)
    } else {
        None
    };

    let interleaved = matches!(sched.method, Method::Inda | Method::UcbInda | Method::UcbExda);
    let keep = sched.interval;
    let mut recent_obs: VecDeque<Vec<f64>> = VecDeque::with_capacity(keep);
    let mut gains = Vec::new();
    // (selection, per-rollout values since that selection)
    let mut pending: Option<(Selection, Vec<f64>)> = None;
    let mut epochs = Vec::with_capacity(sched.epochs);
    let mut da_phases = Vec::new();

    for n in 1..=sched.epochs {
        let mut buf = collect_rollout(&params, &mut venv, setup.ppo.rollout_len, normalizer.as_mut(), &mut action_rng)?;
        compute_gae(&mut buf, setup.ppo.gamma, setup.ppo.lambda);
        let r_value = rollout_return(&buf.advantages, &buf.values);
        if let Some((_, rs)) = pending.as_mut() {
            rs.push(r_value);
        }
        if interleaved {
            if recent_obs.len() == keep {
                recent_obs.pop_front();
            }
            recent_obs.push_back(buf.obs.clone());
        }
        let rule: &mut dyn MinibatchRule = match (&mut rad, &mut drac) {
            (Some(r), _) => r,
            (_, Some(d)) => d,
            _ => &mut PlainPpo,
        };
        let update = ppo_update_with(&mut params, &mut adam, &buf, &setup.ppo, &mut shuffle_rng, rule)?;

        let mut ran_da = false;
        let mut arm = None;
        if interleaved && sched.is_da_epoch(n) {
            let choice = match bandit.as_mut() {
                Some(b) => {
                    if let Some((sel, rs)) = pending.take() {
                        let gain = compute_gain(&rs);
                        b.record(sel.arm, gain);
                        gains.push(GainRecord {
                            round: sel.round,
                            arm: sel.arm,
                            gain,
                            scores: sel.scores,
                            forced: sel.forced,
                        });
                    }
                    let sel = b.select();
                    arm = Some(sel.arm);
                    let a = b.arms[sel.arm];
                    pending = Some((sel, Vec::new()));
                    (!a.is_identity()).then_some(a)
                }
                None => Some(phi),
            };
            if let Some(a) = choice {
                let obs: Vec<f64> = recent_obs.iter().flatten().copied().collect();
                let report = da_phase(&mut params, obs, &a, &setup.da, &mut distill_rng)?;
                da_phases.push((n, report));
                ran_da = true;
            }
        }

        let finished = &buf.finished_episode_returns;
        let metrics = EpochMetrics {
            epoch: n,
            env_steps: venv.total_steps(),
            train_return: if finished.is_empty() {
                f64::NAN
            } else {
                finished.iter().sum::<f64>() / finished.len() as f64
            },
            episodes: finished.len(),
            rollout_value: r_value,
            update,
            da_phase: ran_da,
            arm,
        };
        observer.on_epoch(&metrics, &params)?;
        epochs.push(metrics);
    }
    if let (Some(b), Some((sel, rs))) = (bandit.as_mut(), pending.take()) {
        if !rs.is_empty() {
            let gain = compute_gain(&rs);
            b.record(sel.arm, gain);
            gains.push(GainRecord {
                round: sel.round,
                arm: sel.arm,
                gain,
                scores: sel.scores,
                forced: sel.forced,
            });
        }
    }

    let mut outcome = TrainOutcome {
        params,
        adam,
        epochs,
        da_phases,
        gains,
        bandit,
        before_exda: None,
        exda: None,
        exda_fill_steps: 0,
        pagrad_min_alignment: drac
            .as_ref()
            .filter(|d| matches!(d.combine, Combine::Project { .. }))
            .map(|d| d.min_alignment),
    };

    let post_set: Option<Vec<Augmentation>> = match sched.method {
        Method::Exda | Method::UcbExda => {
            let set: Vec<Augmentation> = setup.augmentations.iter().copied().filter(|a| !a.is_identity()).collect();
            Some(if set.is_empty() { vec![Augmentation::Identity] } else { set })
        }
        _ => None,
    };
    if let Some(set) = post_set {
        if sched.exda_epochs > 0 {
            let mut exda_rng = rng::stream(seed, tags::EXDA);
            let mut fill_env = VecEnv::new(
                setup.env.clone(),
                EnvMode::EasyBg,
                setup.ppo.num_envs,
                rng::derive_seed(seed, tags::EXDA),
            )?;
            let out = exda(&outcome.params, &mut fill_env, &set, &setup.da, sched.exda_epochs, &mut exda_rng)?;
            outcome.before_exda = Some(std::mem::replace(&mut outcome.params, out.params));
            outcome.exda = Some(out.report);
            outcome.exda_fill_steps = out.fill_steps;
        } else {
            outcome.before_exda = Some(outcome.params.clone());
        }
    }
    Ok(outcome)
}
