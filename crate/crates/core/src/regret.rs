//! Exact regret of recorded policies against the optimal value.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::StateAggregation;
use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::rlsvi::finite::FiniteRunResult;
use crate::rlsvi::infinite::{run_infinite, InfiniteParams, InfiniteRunResult};
use crate::seeding::{derive_seed, Purpose};
use crate::solver::{
    backward_induction, check_finite_policy, check_stationary_policy, discounted_value_iteration,
    evaluate_policy_discounted, initial_value_finite, DEFAULT_VI_TOL,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub total_regret: f64,
    /// `total_regret / n_agents`.
    pub per_agent_regret: f64,
    /// Regret per (pseudo-)episode, summed over agents. For reports averaged
    /// over re-runs this holds each re-run's share `total_j / M` instead.
    pub per_episode: Vec<f64>,
    pub n_agents: usize,
    /// `K` for finite runs, `T` for infinite runs.
    pub length: usize,
    pub seed: u64,
}

impl RegretReport {
    fn from_parts(per_episode: Vec<f64>, n_agents: usize, length: usize, seed: u64) -> Self {
        let total_regret: f64 = per_episode.iter().sum();
        Self {
            total_regret,
            per_agent_regret: total_regret / n_agents as f64,
            per_episode,
            n_agents,
            length,
            seed,
        }
    }
}

/// `sum_k sum_p V*_1(s_1^p) - V^{pi_kp}_1(s_1^p)` by exact backward
/// induction. Repeated policies are evaluated once.
pub fn finite_regret(
    mdp: &TabularMdp,
    run: &FiniteRunResult,
    horizon: usize,
    n_agents: usize,
) -> Result<RegretReport> {
    if run.horizon != horizon || run.agents != n_agents {
        return Err(Error::invalid(format!(
            "run has H = {}, N = {}; asked for H = {horizon}, N = {n_agents}",
            run.horizon, run.agents
        )));
    }
    mdp.check_agents(n_agents)?;
    let opt = backward_induction(mdp, horizon)?;
    let v_star = &opt.v[0];
    let mut cache: HashMap<&[Vec<usize>], Vec<f64>> = HashMap::new();
    let mut per_episode = Vec::with_capacity(run.policies.len());
    for episode in &run.policies {
        if episode.len() != n_agents {
            return Err(Error::invalid("episode records the wrong number of agents"));
        }
        let mut delta = 0.0;
        for (p, pol) in episode.iter().enumerate() {
            let v = match cache.get(pol.as_slice()) {
                Some(v) => v,
                None => {
                    check_finite_policy(mdp, pol, horizon)?;
                    cache
                        .entry(pol.as_slice())
                        .or_insert(initial_value_finite(mdp, pol))
                }
            };
            let s1 = mdp.initial_state(p);
            delta += v_star[s1] - v[s1];
        }
        per_episode.push(delta);
    }
    Ok(RegretReport::from_parts(
        per_episode,
        n_agents,
        run.episodes,
        run.seed,
    ))
}

/// `Delta_k = sum_p V*^eta(s_1^p) - V^eta_{pi_kp}(s_1^p)` for every
/// pseudo-episode of one run.
pub fn infinite_run_regret(
    mdp: &TabularMdp,
    run: &InfiniteRunResult,
    eta: f64,
    n_agents: usize,
) -> Result<RegretReport> {
    if run.eta != eta {
        return Err(Error::invalid(format!(
            "run used eta = {}, asked for {eta}",
            run.eta
        )));
    }
    if run.agents != n_agents {
        return Err(Error::invalid(format!(
            "run has N = {}, asked for {n_agents}",
            run.agents
        )));
    }
    mdp.check_agents(n_agents)?;
    let opt = discounted_value_iteration(mdp, eta, DEFAULT_VI_TOL)?;
    let mut cache: HashMap<&[usize], Vec<f64>> = HashMap::new();
    let mut per_episode = Vec::with_capacity(run.policies.len());
    for episode in &run.policies {
        if episode.len() != n_agents {
            return Err(Error::invalid(
                "pseudo-episode records the wrong number of agents",
            ));
        }
        let mut delta = 0.0;
        for (p, pol) in episode.iter().enumerate() {
            let v = match cache.get(pol.as_slice()) {
                Some(v) => v,
                None => {
                    check_stationary_policy(mdp, pol)?;
                    let v = evaluate_policy_discounted(mdp, pol, eta)?;
                    cache.entry(pol.as_slice()).or_insert(v)
                }
            };
            let s1 = mdp.initial_state(p);
            delta += opt.v[s1] - v[s1];
        }
        per_episode.push(delta);
    }
    Ok(RegretReport::from_parts(
        per_episode,
        n_agents,
        run.steps,
        run.seed,
    ))
}

/// Seed of the `j`-th independent re-run used by [`infinite_regret`].
pub fn segmentation_seed(seed: u64, j: usize) -> u64 {
    derive_seed(seed, Purpose::Segmentation, &[j as u64])
}

/// Mean total regret over `num_segmentations` independent re-runs of the
/// infinite engine. Each re-run draws a fresh schedule and fresh learning
/// noise from [`segmentation_seed`].
pub fn infinite_regret(
    mdp: &TabularMdp,
    agg: &StateAggregation,
    params: &InfiniteParams,
    num_segmentations: usize,
) -> Result<RegretReport> {
    if num_segmentations == 0 {
        return Err(Error::invalid("need at least one segmentation"));
    }
    let totals: Vec<f64> = (0..num_segmentations)
        .into_par_iter()
        .map(|j| {
            let p = InfiniteParams {
                seed: segmentation_seed(params.seed, j),
                ..params.clone()
            };
            let run = run_infinite(mdp, agg, &p)?;
            Ok(infinite_run_regret(mdp, &run, params.eta, params.agents)?.total_regret)
        })
        .collect::<Result<_>>()?;
    let m = num_segmentations as f64;
    let shares = totals.iter().map(|t| t / m).collect();
    Ok(RegretReport::from_parts(
        shares,
        params.agents,
        params.steps,
        params.seed,
    ))
}

/// The report with the largest total; ties go to the first.
pub fn worst_case(reports: &[RegretReport]) -> Result<RegretReport> {
    let mut best = reports
        .first()
        .ok_or_else(|| Error::invalid("worst_case needs at least one report"))?;
    for r in &reports[1..] {
        if r.total_regret > best.total_regret {
            best = r;
        }
    }
    Ok(best.clone())
}
