//! Solvers and regret checked against independent computations.

use concurrent_rlsvi::mdp::{rollout, sample_random_mdp, TabularMdp};
use concurrent_rlsvi::regret::infinite_run_regret;
use concurrent_rlsvi::rlsvi::infinite::{InfiniteRunResult, PseudoEpisodeSchedule};
use concurrent_rlsvi::seeding::StreamRng;
use concurrent_rlsvi::solver::{
    backward_induction, discounted_value_iteration, evaluate_policy_discounted,
    evaluate_policy_finite, DEFAULT_VI_TOL,
};
use rand::SeedableRng;

/// Every deterministic nonstationary policy `[H][S]`, enumerated by counting
/// in base `A`.
fn all_policies(s: usize, a: usize, h: usize) -> Vec<Vec<Vec<usize>>> {
    let slots = s * h;
    let total = a.pow(slots as u32);
    (0..total)
        .map(|mut code| {
            let mut flat = Vec::with_capacity(slots);
            for _ in 0..slots {
                flat.push(code % a);
                code /= a;
            }
            flat.chunks(s).map(|c| c.to_vec()).collect()
        })
        .collect()
}

#[test]
fn backward_induction_matches_enumeration_on_larger_mdps() {
    for seed in 0..10 {
        let mdp = sample_random_mdp(500 + seed, 3, 2).unwrap();
        let h = 2;
        let opt = backward_induction(&mdp, h).unwrap();
        for s in 0..3 {
            let best = all_policies(3, 2, h)
                .iter()
                .map(|p| evaluate_policy_finite(&mdp, p, h).unwrap()[0][s])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((best - opt.v[0][s]).abs() <= 1e-12);
        }
    }
}

#[test]
fn finite_evaluation_matches_monte_carlo() {
    let mdp = sample_random_mdp(17, 3, 2).unwrap();
    let policy = vec![vec![1, 0, 1], vec![0, 0, 1], vec![1, 1, 0]];
    let exact = evaluate_policy_finite(&mdp, &policy, 3).unwrap()[0][0];
    let mut rng = StreamRng::seed_from_u64(3);
    let runs = 1_000_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..runs {
        let t = rollout(&mdp, 0, 3, 0, 0, &mut rng, |h, s, _| policy[h][s]).unwrap();
        let ret: f64 = t.steps.iter().map(|st| st.reward).sum();
        sum += ret;
        sum_sq += ret * ret;
    }
    let n = runs as f64;
    let mean = sum / n;
    let se = ((sum_sq / n - mean * mean) / n).sqrt();
    assert!(
        (mean - exact).abs() <= 3.0 * se,
        "mc {mean} exact {exact} se {se}"
    );
}

#[test]
fn discounted_optimum_is_best_stationary_policy() {
    for seed in 0..10 {
        let mdp = sample_random_mdp(900 + seed, 3, 2).unwrap();
        let eta = 0.9;
        let opt = discounted_value_iteration(&mdp, eta, DEFAULT_VI_TOL).unwrap();
        for s in 0..3 {
            let best = all_policies(3, 2, 1)
                .iter()
                .map(|p| evaluate_policy_discounted(&mdp, &p[0], eta).unwrap()[s])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((best - opt.v[s]).abs() <= DEFAULT_VI_TOL);
        }
    }
}

/// `(I - eta P) v = r` for two states by Cramer's rule.
fn solve_two_state(p: [[f64; 2]; 2], r: [f64; 2], eta: f64) -> [f64; 2] {
    let (a, b) = (1.0 - eta * p[0][0], -eta * p[0][1]);
    let (c, d) = (-eta * p[1][0], 1.0 - eta * p[1][1]);
    let det = a * d - b * c;
    [(r[0] * d - b * r[1]) / det, (a * r[1] - c * r[0]) / det]
}

#[test]
fn pseudo_episode_regret_matches_linear_solve() {
    let p = [[[0.7, 0.3], [0.2, 0.8]], [[0.4, 0.6], [0.9, 0.1]]];
    let r = [[0.1, 0.5], [0.9, 0.3]];
    let mdp = TabularMdp::from_nested(
        2,
        2,
        &[
            vec![p[0][0].to_vec(), p[0][1].to_vec()],
            vec![p[1][0].to_vec(), p[1][1].to_vec()],
        ],
        &[r[0].to_vec(), r[1].to_vec()],
        vec![0],
    )
    .unwrap();
    let eta = 0.8;
    let value = |pol: [usize; 2]| {
        solve_two_state(
            [p[0][pol[0]], p[1][pol[1]]],
            [r[0][pol[0]], r[1][pol[1]]],
            eta,
        )[0]
    };
    let best = [[0, 0], [0, 1], [1, 0], [1, 1]]
        .iter()
        .map(|&pol| value(pol))
        .fold(f64::NEG_INFINITY, f64::max);
    let run = InfiniteRunResult {
        seed: 0,
        steps: 4,
        agents: 1,
        eta,
        epsilon: 0.0,
        tau: 5.0,
        pre_round_length: 1,
        schedule: PseudoEpisodeSchedule::from_draws(eta, 4, [4]).unwrap(),
        policies: vec![vec![vec![0, 1]]],
        updates: Vec::new(),
    };
    let report = infinite_run_regret(&mdp, &run, eta, 1).unwrap();
    assert!((report.total_regret - (best - value([0, 1]))).abs() <= 2.0 * DEFAULT_VI_TOL);
}
