//! Windowed UCB over augmentation arms with a forced round-robin start.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::augment::Augmentation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UcbConfig {
    /// Gains kept per arm.
    pub window: usize,
    /// Rounds served round-robin before the UCB rule takes over.
    pub min_exploration: usize,
    /// Added to the gain spread in the exploration coefficient.
    pub epsilon: f64,
    /// Reject arm sets without the identity.
    pub require_identity: bool,
}

impl Default for UcbConfig {
    fn default() -> Self {
        Self {
            window: 3,
            min_exploration: 15,
            epsilon: 1e-3,
            require_identity: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub round: usize,
    pub arm: usize,
    /// UCB score per arm; NaN during the forced phase.
    pub scores: Vec<f64>,
    pub forced: bool,
}

/// One bandit round as logged.
#[derive(Clone, Debug, PartialEq)]
pub struct GainRecord {
    pub round: usize,
    pub arm: usize,
    pub gain: f64,
    pub scores: Vec<f64>,
    pub forced: bool,
}

#[derive(Clone, Debug)]
pub struct BanditState {
    pub arms: Vec<Augmentation>,
    pub counts: Vec<usize>,
    pub gains: Vec<VecDeque<f64>>,
    /// Selections made so far; equals the sum of `counts`.
    pub round: usize,
    pub config: UcbConfig,
}

impl BanditState {
    pub fn new(arms: Vec<Augmentation>, config: UcbConfig) -> Result<Self> {
        if arms.is_empty() {
            return Err(Error::Bandit("arm set is empty".into()));
        }
        if config.require_identity && !arms.iter().any(Augmentation::is_identity) {
            return Err(Error::Bandit("arm set must contain the identity augmentation".into()));
        }
        if config.window < 2 {
            return Err(Error::Bandit("gain window must be >= 2".into()));
        }
        if !(config.epsilon >= 0.0) {
            return Err(Error::Bandit("epsilon must be >= 0".into()));
        }
        let k = arms.len();
        Ok(Self {
            arms,
            counts: vec![0; k],
            gains: vec![VecDeque::with_capacity(config.window); k],
            round: 0,
            config,
        })
    }

    pub fn num_arms(&self) -> usize {
        self.arms.len()
    }

    /// Mean of the arm's retained gains, 0 when it has none.
    pub fn mean_gain(&self, k: usize) -> f64 {
        let g = &self.gains[k];
        if g.is_empty() {
            0.0
        } else {
            g.iter().sum::<f64>() / g.len() as f64
        }
    }

    /// Exploration coefficient at round `s` over the arms pulled so far.
    pub fn exploration_coef(&self, s: usize) -> f64 {
        let pulled: Vec<usize> = (0..self.num_arms()).filter(|&k| self.counts[k] > 0).collect();
        if pulled.is_empty() || s < 2 {
            return 0.0;
        }
        let means: Vec<f64> = pulled.iter().map(|&k| self.mean_gain(k)).collect();
        let gmax = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let gmin = means.iter().copied().fold(f64::INFINITY, f64::min);
        let nmin = pulled.iter().map(|&k| self.counts[k]).min().unwrap() as f64;
        let nmax = pulled.iter().map(|&k| self.counts[k]).max().unwrap() as f64;
        let w = self.config.window as f64;
        let spread = (1.0 / nmin.sqrt() - 1.0 / nmax.sqrt()).max(1.0 / (w - 1.0).sqrt() - 1.0 / w.sqrt());
        (gmax - gmin + self.config.epsilon) / ((s as f64).ln().sqrt() * spread)
    }

    /// UCB scores at round `s`; unpulled arms score +inf.
    pub fn scores(&self, s: usize) -> Vec<f64> {
        let c = self.exploration_coef(s);
        let log_s = (s.max(1) as f64).ln();
        (0..self.num_arms())
            .map(|k| match self.counts[k] {
                0 => f64::INFINITY,
                n => self.mean_gain(k) + c * (log_s / n as f64).sqrt(),
            })
            .collect()
    }

    /// Picks the arm for the current round and counts the pull.
    pub fn select(&mut self) -> Selection {
        let s = self.round;
        let (arm, scores, forced) = if s < self.config.min_exploration {
            (s % self.num_arms(), vec![f64::NAN; self.num_arms()], true)
        } else {
            let scores = self.scores(s);
            (argmax_first(&scores), scores, false)
        };
        self.counts[arm] += 1;
        self.round += 1;
        Selection { round: s, arm, scores, forced }
    }

    pub fn record(&mut self, arm: usize, gain: f64) {
        let buf = &mut self.gains[arm];
        if buf.len() == self.config.window {
            buf.pop_front();
        }
        buf.push_back(gain);
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean over the interval's rollouts of each rollout's mean `A + V`.
pub fn compute_gain(rollout_returns: &[f64]) -> f64 {
    rollout_returns.iter().sum::<f64>() / rollout_returns.len() as f64
}

/// Mean of `advantage + value` over one rollout.
pub fn rollout_return(advantages: &[f64], values: &[f64]) -> f64 {
    advantages.iter().zip(values).map(|(a, v)| a + v).sum::<f64>() / advantages.len() as f64
}

pub fn write_gain_log(path: &std::path::Path, records: &[GainRecord], num_arms: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    let mut header = vec!["round".to_string(), "arm".into(), "gain".into()];
    header.extend((0..num_arms).map(|k| format!("ucb_{k}")));
    header.push("forced".into());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.round.to_string(), r.arm.to_string(), r.gain.to_string()];
        row.extend(r.scores.iter().map(|v| v.to_string()));
        row.push(r.forced.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arms(k: usize) -> Vec<Augmentation> {
        let mut a = vec![Augmentation::Identity];
        a.extend(std::iter::repeat_n(Augmentation::Grayscale, k - 1));
        a
    }

    #[test]
    fn identity_required() {
        assert!(BanditState::new(vec![Augmentation::Grayscale, Augmentation::Black], UcbConfig::default()).is_err());
        let relaxed = UcbConfig {
            require_identity: false,
            ..UcbConfig::default()
        };
        assert!(BanditState::new(vec![Augmentation::Grayscale, Augmentation::Black], relaxed).is_ok());
    }

    #[test]
    fn forced_phase_is_round_robin() {
        let mut b = BanditState::new(arms(3), UcbConfig::default()).unwrap();
        let picks: Vec<usize> = (0..15).map(|_| b.select().arm).collect();
        assert_eq!(picks, (0..15).map(|s| s % 3).collect::<Vec<_>>());
        assert_eq!(b.counts, vec![5, 5, 5]);
    }

    #[test]
    fn equal_gains_favor_least_pulled() {
        let mut b = BanditState::new(arms(3), UcbConfig::default()).unwrap();
        b.counts = vec![10, 2, 10];
        b.round = 22;
        for k in 0..3 {
            b.record(k, 0.5);
        }
        assert_eq!(b.select().arm, 1);
    }

    #[test]
    fn zero_coefficient_is_greedy() {
        let cfg = UcbConfig {
            epsilon: 0.0,
            ..UcbConfig::default()
        };
        let mut b = BanditState::new(arms(3), cfg).unwrap();
        b.counts = vec![1, 20, 5];
        b.round = 26;
        for k in 0..3 {
            b.record(k, 1.0);
        }
        assert_eq!(b.exploration_coef(26), 0.0);
        assert_eq!(b.select().arm, 0);
    }

    #[test]
    fn ring_buffer_keeps_last_window() {
        let mut b = BanditState::new(arms(2), UcbConfig::default()).unwrap();
        for g in [1.0, 2.0, 3.0, 4.0] {
            b.record(1, g);
        }
        assert_eq!(b.gains[1].len(), 3);
        assert_eq!(b.mean_gain(1), 3.0);
    }

    #[test]
    fn gain_examples() {
        assert_eq!(rollout_return(&[0.0; 4], &[2.5; 4]), 2.5);
        assert_eq!(compute_gain(&[1.25]), 1.25);
        let r = rollout_return(&[1.0, -2.0, 0.5, 0.0], &[0.5, 1.0, 1.5, 3.0]);
        assert_eq!(r, (1.5 - 1.0 + 2.0 + 3.0) / 4.0);
    }
}
