//! Exact dynamic-programming solvers used as ground truth.
//!
//! Periods are 0-based throughout: `v[0]` is the value at the first period and
//! `v[horizon]` is the all-zero terminal row.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;

/// Residual bound for the direct policy-evaluation solve.
pub const DIRECT_SOLVE_RESIDUAL: f64 = 1e-10;

/// Default stopping tolerance for discounted value iteration.
pub const DEFAULT_VI_TOL: f64 = 1e-10;

/// Optimal time-indexed values of a finite-horizon problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteSolution {
    /// `[H+1][S]`; the last row is zero.
    pub v: Vec<Vec<f64>>,
    /// `[H+1][S][A]`; the last layer is zero.
    pub q: Vec<Vec<Vec<f64>>>,
}

impl FiniteSolution {
    pub fn horizon(&self) -> usize {
        self.v.len() - 1
    }

    /// Greedy policy `[H][S]`, ties broken toward the lowest action index.
    pub fn greedy_policy(&self) -> Vec<Vec<usize>> {
        self.q[..self.horizon()]
            .iter()
            .map(|qh| qh.iter().map(|row| argmax(row)).collect())
            .collect()
    }
}

/// Optimal stationary values of a discounted problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscountedSolution {
    /// `[S]`
    pub v: Vec<f64>,
    /// `[S][A]`
    pub q: Vec<Vec<f64>>,
    pub discount: f64,
    pub sweeps: usize,
}

impl DiscountedSolution {
    /// Greedy stationary policy, ties broken toward the lowest action index.
    pub fn greedy_policy(&self) -> Vec<usize> {
        self.q.iter().map(|row| argmax(row)).collect()
    }
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate().skip(1) {
        if x > values[best] {
            best = i;
        }
    }
    best
}

fn bellman_q(mdp: &TabularMdp, v_next: &[f64], scale: f64) -> Vec<Vec<f64>> {
    (0..mdp.num_states())
        .map(|s| {
            (0..mdp.num_actions())
                .map(|a| mdp.reward(s, a) + scale * mdp.expected_next(s, a, v_next))
                .collect()
        })
        .collect()
}

fn row_max(q: &[Vec<f64>]) -> Vec<f64> {
    q.iter()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Finite-horizon backward induction.
pub fn backward_induction(mdp: &TabularMdp, horizon: usize) -> Result<FiniteSolution> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let (s_n, a_n) = (mdp.num_states(), mdp.num_actions());
    let mut v = vec![vec![0.0; s_n]; horizon + 1];
    let mut q = vec![vec![vec![0.0; a_n]; s_n]; horizon + 1];
    for h in (0..horizon).rev() {
        q[h] = bellman_q(mdp, &v[h + 1], 1.0);
        v[h] = row_max(&q[h]);
    }
    Ok(FiniteSolution { v, q })
}

/// Exact value `[H+1][S]` of a nonstationary deterministic policy `[H][S]`.
pub fn evaluate_policy_finite(
    mdp: &TabularMdp,
    policy: &[Vec<usize>],
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    check_finite_policy(mdp, policy, horizon)?;
    let s_n = mdp.num_states();
    let mut v = vec![vec![0.0; s_n]; horizon + 1];
    for h in (0..horizon).rev() {
        let (head, tail) = v.split_at_mut(h + 1);
        let next = &tail[0];
        for (s, out) in head[h].iter_mut().enumerate() {
            let a = policy[h][s];
            *out = mdp.reward(s, a) + mdp.expected_next(s, a, next);
        }
    }
    Ok(v)
}

/// Value of a nonstationary policy at period 0 only; skips allocating the
/// full table.
pub(crate) fn initial_value_finite(mdp: &TabularMdp, policy: &[Vec<usize>]) -> Vec<f64> {
    let s_n = mdp.num_states();
    let mut next = vec![0.0; s_n];
    let mut cur = vec![0.0; s_n];
    for pol_h in policy.iter().rev() {
        for (s, out) in cur.iter_mut().enumerate() {
            let a = pol_h[s];
            *out = mdp.reward(s, a) + mdp.expected_next(s, a, &next);
        }
        std::mem::swap(&mut cur, &mut next);
    }
    next
}

pub(crate) fn check_finite_policy(
    mdp: &TabularMdp,
    policy: &[Vec<usize>],
    horizon: usize,
) -> Result<()> {
    if policy.len() != horizon {
        return Err(Error::invalid(format!(
            "policy has {} periods, horizon is {horizon}",
            policy.len()
        )));
    }
    for row in policy {
        check_stationary_policy(mdp, row)?;
    }
    Ok(())
}

pub(crate) fn check_stationary_policy(mdp: &TabularMdp, policy: &[usize]) -> Result<()> {
    if policy.len() != mdp.num_states() {
        return Err(Error::invalid(format!(
            "policy covers {} states, MDP has {}",
            policy.len(),
            mdp.num_states()
        )));
    }
    if let Some(&a) = policy.iter().find(|&&a| a >= mdp.num_actions()) {
        return Err(Error::invalid(format!("policy action {a} out of range")));
    }
    Ok(())
}

fn check_discount(eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::invalid(format!("discount {eta} must lie in [0, 1)")));
    }
    Ok(())
}

/// Discounted value iteration.
///
/// Sweeps until successive iterates differ by at most `tol(1-eta)/(2 eta)`
/// in sup norm, then performs one final greedy sweep so that `v = max_a q`
/// holds exactly. The result is within `tol` of the optimum.
pub fn discounted_value_iteration(
    mdp: &TabularMdp,
    eta: f64,
    tol: f64,
) -> Result<DiscountedSolution> {
    check_discount(eta)?;
    if !(tol > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let threshold = if eta > 0.0 {
        tol * (1.0 - eta) / (2.0 * eta)
    } else {
        f64::INFINITY
    };
    let mut v = vec![0.0; mdp.num_states()];
    let mut sweeps = 0;
    loop {
        let next = row_max(&bellman_q(mdp, &v, eta));
        sweeps += 1;
        let diff = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        if diff <= threshold {
            break;
        }
    }
    let q = bellman_q(mdp, &v, eta);
    let v = row_max(&q);
    Ok(DiscountedSolution {
        v,
        q,
        discount: eta,
        sweeps: sweeps + 1,
    })
}

/// Solves `(I - eta P_pi) V = r_pi` by dense LU.
pub fn evaluate_policy_discounted(
    mdp: &TabularMdp,
    policy: &[usize],
    eta: f64,
) -> Result<Vec<f64>> {
    check_discount(eta)?;
    check_stationary_policy(mdp, policy)?;
    let s_n = mdp.num_states();
    let mut lhs = DMatrix::<f64>::identity(s_n, s_n);
    let mut rhs = DVector::<f64>::zeros(s_n);
    for (s, &a) in policy.iter().enumerate() {
        for (s2, p) in mdp.transition_row(s, a).iter().enumerate() {
            lhs[(s, s2)] -= eta * p;
        }
        rhs[s] = mdp.reward(s, a);
    }
    let sol = lhs
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("singular policy-evaluation system".into()))?;
    let residual = (&lhs * &sol - &rhs).amax();
    if !(residual <= DIRECT_SOLVE_RESIDUAL) {
        return Err(Error::Numerical(format!(
            "policy-evaluation residual {residual:e} exceeds {DIRECT_SOLVE_RESIDUAL:e}"
        )));
    }
    Ok(sol.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::sample_random_mdp;

    fn constant_mdp(r: f64) -> TabularMdp {
        TabularMdp::new(1, 1, vec![1.0], vec![r], vec![0]).unwrap()
    }

    #[test]
    fn one_step_max() {
        let m = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.2, 0.9], vec![0]).unwrap();
        let sol = backward_induction(&m, 1).unwrap();
        assert_eq!(sol.v[0][0], 0.9);
        assert_eq!(sol.v[1], vec![0.0]);
    }

    #[test]
    fn terminal_row_is_zero() {
        let m = sample_random_mdp(5, 4, 3).unwrap();
        let sol = backward_induction(&m, 6).unwrap();
        assert!(sol.v[6].iter().all(|&x| x == 0.0));
        assert!(sol.q[6].iter().flatten().all(|&x| x == 0.0));
        assert!(backward_induction(&m, 0).is_err());
    }

    #[test]
    fn bellman_recursion_holds_entrywise() {
        let m = sample_random_mdp(21, 5, 3).unwrap();
        let sol = backward_induction(&m, 8).unwrap();
        for h in 0..8 {
            for s in 0..5 {
                let best = (0..3)
                    .map(|a| m.reward(s, a) + m.expected_next(s, a, &sol.v[h + 1]))
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!((sol.v[h][s] - best).abs() <= 1e-12);
                assert!(sol.v[h][s] >= 0.0 && sol.v[h][s] <= (8 - h) as f64);
            }
        }
    }

    #[test]
    fn greedy_policy_attains_optimum() {
        let m = sample_random_mdp(8, 5, 4).unwrap();
        let sol = backward_induction(&m, 7).unwrap();
        let v = evaluate_policy_finite(&m, &sol.greedy_policy(), 7).unwrap();
        for (a, b) in v.iter().flatten().zip(sol.v.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12);
        }
        assert_eq!(initial_value_finite(&m, &sol.greedy_policy()), v[0]);
    }

    #[test]
    fn constant_reward_sum() {
        let v = evaluate_policy_finite(&constant_mdp(0.5), &vec![vec![0]; 3], 3).unwrap();
        assert!((v[0][0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn finite_policy_shape_checked() {
        let m = sample_random_mdp(8, 2, 2).unwrap();
        assert!(evaluate_policy_finite(&m, &[vec![0, 0]], 2).is_err());
        assert!(evaluate_policy_finite(&m, &[vec![0, 2], vec![0, 0]], 2).is_err());
    }

    #[test]
    fn geometric_series() {
        let sol = discounted_value_iteration(&constant_mdp(1.0), 0.99, 1e-10).unwrap();
        assert!((sol.v[0] - 100.0).abs() <= 1e-10);
        let v = evaluate_policy_discounted(&constant_mdp(1.0), &[0], 0.99).unwrap();
        assert!((v[0] - 100.0).abs() <= 1e-10);
    }

    #[test]
    fn zero_rewards_give_zero_values() {
        let m = TabularMdp::new(
            2,
            2,
            vec![0.3, 0.7, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0],
            vec![0.0; 4],
            vec![0],
        )
        .unwrap();
        let sol = discounted_value_iteration(&m, 0.9, 1e-10).unwrap();
        assert!(sol.v.iter().all(|&x| x == 0.0));
        let v = evaluate_policy_discounted(&m, &[1, 0], 0.9).unwrap();
        assert!(v.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn discount_out_of_range_rejected() {
        let m = constant_mdp(1.0);
        assert!(discounted_value_iteration(&m, 1.0, 1e-10).is_err());
        assert!(discounted_value_iteration(&m, 0.5, 0.0).is_err());
        assert!(evaluate_policy_discounted(&m, &[0], 1.2).is_err());
    }

    #[test]
    fn value_iteration_matches_linear_solve_of_greedy_policy() {
        let m = sample_random_mdp(31, 3, 2).unwrap();
        let tol = 1e-10;
        let sol = discounted_value_iteration(&m, 0.9, tol).unwrap();
        let exact = evaluate_policy_discounted(&m, &sol.greedy_policy(), 0.9).unwrap();
        for (a, b) in sol.v.iter().zip(&exact) {
            assert!((a - b).abs() <= 10.0 * tol, "{a} vs {b}");
        }
    }

    #[test]
    fn eta_zero_is_one_step_reward() {
        let m = sample_random_mdp(3, 3, 2).unwrap();
        let sol = discounted_value_iteration(&m, 0.0, 1e-10).unwrap();
        for s in 0..3 {
            assert_eq!(sol.v[s], m.reward(s, 0).max(m.reward(s, 1)));
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0]), 0);
    }
}
