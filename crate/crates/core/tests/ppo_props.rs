mod common;

use proptest::prelude::*;

use augsched::nn::{forward, ParameterSet};
use augsched::ppo::{Minibatch, MinibatchRule, PlainPpo, PpoConfig, RewardNormalizer};
use common::{flat, random_minibatch, tiny_params, with_flat};

fn stepped(p: &ParameterSet, mb: &Minibatch, cfg: &PpoConfig, lr: f64) -> ParameterSet {
    let (g, _) = PlainPpo.gradient(p, mb, cfg).unwrap();
    let next: Vec<f64> = flat(p).iter().zip(g.flatten()).map(|(w, d)| w - lr * d).collect();
    with_flat(p, &next)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn larger_advantage_never_lowers_the_action_logit(seed in 0u64..10_000, a in -3.0f64..3.0, bump in 0.0f64..3.0) {
        let p = tiny_params(seed);
        let mut mb = random_minibatch(&p, 1, seed + 1);
        let cfg = PpoConfig::default();
        mb.advantages = vec![a];
        let low = stepped(&p, &mb, &cfg, 1e-3);
        mb.advantages = vec![a + bump];
        let high = stepped(&p, &mb, &cfg, 1e-3);
        let act = mb.actions[0];
        let lo = forward(&low, &mb.obs).unwrap().logits_row(0)[act];
        let hi = forward(&high, &mb.obs).unwrap().logits_row(0)[act];
        prop_assert!(hi >= lo - 1e-12, "{hi} < {lo}");
    }

    #[test]
    fn reward_normalizer_is_scale_invariant(seed in 0u64..1000, c in 0.01f64..100.0) {
        use rand::{Rng, SeedableRng};
        let mut r = augsched::rng::Rng::seed_from_u64(seed);
        let mut plain = RewardNormalizer::new(4, 0.99);
        let mut scaled = RewardNormalizer::new(4, 0.99);
        let mut worst = 0.0f64;
        for step in 0..1500 {
            let rewards: Vec<f64> = (0..4).map(|_| if r.random_bool(0.1) { 10.0 } else { r.random_range(-0.1..0.1) }).collect();
            let dones: Vec<bool> = (0..4).map(|_| r.random_bool(0.05)).collect();
            let big: Vec<f64> = rewards.iter().map(|x| x * c).collect();
            let a = plain.normalize(&rewards, &dones);
            let b = scaled.normalize(&big, &dones);
            if step >= 1000 {
                for (x, y) in a.iter().zip(&b) {
                    worst = worst.max((x - y).abs() / x.abs().max(1e-3));
                }
            }
        }
        prop_assert!(worst < 1e-6, "{worst}");
    }
}
