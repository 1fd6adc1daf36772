//! Occupancy oracle against Monte-Carlo rollouts of the goal-reaching return.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crl_core::testbed::{occupancy_oracle, Mdp, Policy};
use crl_core::GoalId;

fn step(mdp: &Mdp, s: usize, a: usize, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let row = mdp.transitions(s, a);
    for &(n, p) in row {
        acc += p;
        if u < acc {
            return n;
        }
    }
    row.last().unwrap().0
}

/// Return `(1 - gamma) * sum_t gamma^t 1{s_{t+1} = g}` of one episode that
/// ends on entering the goal. Truncated once `gamma^t` drops below 1e-18.
fn rollout(mdp: &Mdp, policy: &Policy, s: usize, a: usize, goal: GoalId, gamma: f64, rng: &mut ChaCha8Rng) -> f64 {
    let g = mdp.goal_state(goal).unwrap();
    let (mut s, mut a, mut disc) = (s, a, 1.0);
    while disc > 1e-18 {
        let next = step(mdp, s, a, rng);
        if next == g {
            return (1.0 - gamma) * disc;
        }
        s = next;
        a = policy.action(s, goal).unwrap();
        disc *= gamma;
    }
    0.0
}

fn mc_estimate(mdp: &Mdp, policy: &Policy, s: usize, a: usize, goal: GoalId, gamma: f64, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..n {
        let r = rollout(mdp, policy, s, a, goal, gamma, &mut rng);
        sum += r;
        sq += r * r;
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}

#[test]
fn coin_flip_occupancy_is_one_third() {
    // heads lands in the goal, tails stays put
    let rows = vec![vec![(0, 0.5), (1, 0.5)], vec![(1, 1.0)]];
    let goal = GoalId(0);
    let mdp = Mdp::new(2, 1, rows, BTreeMap::from([(goal, 1)])).unwrap();
    let policy = Policy::new(2, BTreeMap::from([(goal, vec![0, 0])]));
    let oracle = occupancy_oracle(&mdp, &policy, 0.5).unwrap();
    let q = oracle.q(0, 0, goal).unwrap();
    assert!((q - 1.0 / 3.0).abs() < 1e-12, "oracle {q}");

    let (mean, se) = mc_estimate(&mdp, &policy, 0, 0, goal, 0.5, 1_000_000, 11);
    assert!((mean - q).abs() < 3.0 * se, "mc {mean} +- {se} vs {q}");
}

#[test]
fn slippery_mdp_matches_rollouts() {
    // four states, two actions; action 1 drifts right and sometimes slips back
    let rows = vec![
        vec![(0, 0.7), (1, 0.3)],
        vec![(1, 0.2), (2, 0.8)],
        vec![(0, 0.5), (1, 0.5)],
        vec![(2, 0.6), (3, 0.4)],
        vec![(1, 0.3), (2, 0.4), (3, 0.3)],
        vec![(3, 0.9), (0, 0.1)],
        vec![(3, 1.0)],
        vec![(3, 1.0)],
    ];
    let goal = GoalId(2);
    let mdp = Mdp::new(4, 2, rows, BTreeMap::from([(goal, 3)])).unwrap();
    let policy = Policy::new(4, BTreeMap::from([(goal, vec![0, 1, 1, 0])]));
    let gamma = 0.8;
    let oracle = occupancy_oracle(&mdp, &policy, gamma).unwrap();
    assert!(oracle.bellman_residual(&mdp, &policy) < 1e-12);

    for (i, (s, a)) in [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)].into_iter().enumerate() {
        let q = oracle.q(s, a, goal).unwrap();
        let (mean, se) = mc_estimate(&mdp, &policy, s, a, goal, gamma, 200_000, 100 + i as u64);
        assert!((mean - q).abs() < 4.0 * se, "({s},{a}): mc {mean} +- {se} vs {q}");
    }
}
