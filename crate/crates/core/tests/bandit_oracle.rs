mod common;

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use augsched::augment::Augmentation;
use augsched::rng::Rng;
use augsched::scheduler::bandit::{BanditState, UcbConfig};
use common::checks::bandit_check;

#[test]
fn decisions_match_straight_line_evaluation() {
    for seed in 0..3 {
        let v = bandit_check(200, seed);
        assert!(v.pass, "seed {seed}: {}", v.detail);
    }
}

#[test]
fn dominant_arm_takes_most_post_forced_pulls() {
    let arms = vec![
        Augmentation::Identity,
        Augmentation::from_kind("random_color").unwrap(),
        Augmentation::from_kind("random_crop").unwrap(),
    ];
    for seed in 0..5 {
        let mut b = BanditState::new(arms.clone(), UcbConfig::default()).unwrap();
        let mut r = Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.2).unwrap();
        let mut late = [0usize; 3];
        for _ in 0..200 {
            let sel = b.select();
            if !sel.forced {
                late[sel.arm] += 1;
            }
            let mean = [0.0, 1.0, 0.2][sel.arm];
            b.record(sel.arm, mean + noise.sample(&mut r));
        }
        let total: usize = late.iter().sum();
        assert!(late[1] as f64 >= 0.6 * total as f64, "seed {seed}: {late:?}");
    }
}

#[test]
fn equal_means_pick_least_pulled() {
    let arms = vec![Augmentation::Identity, Augmentation::Grayscale, Augmentation::Black];
    let mut b = BanditState::new(arms, UcbConfig::default()).unwrap();
    b.counts = vec![10, 2, 10];
    for k in 0..3 {
        b.record(k, 1.0);
    }
    b.round = 22;
    assert_eq!(b.select().arm, 1);
}
