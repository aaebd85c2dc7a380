//! Finite-horizon concurrent RLSVI.
//!
//! Each episode, `N` agents roll out `H` steps greedily with respect to their
//! own aggregated Q tables. The pooled data of the episode (or of the whole
//! history) is perturbed independently per agent, every agent runs a
//! backward pass of closed-form least-squares backups anchored on the shared
//! merged table, and the merged table is refreshed as the mean over the agents
//! that visited each block.
//!
//! A pre-round of uniformly random actions seeds the first update, so the
//! policies of episode `k` are always computed from the data of episode `k-1`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{check_epsilon, Objective, StateAggregation};
use crate::error::{Error, Result};
use crate::mdp::{rollout, TabularMdp, Trajectory};
use crate::seeding::{stream, Purpose};

use super::{
    greedy_row, merge_weighted, perturb_buffer, require_samples, state_values, BackupSample,
    BackupSums, BufferMode, EpisodeBuffer, QTable, UpdateMode, Visit,
};

/// Value of the blocks one step past the horizon during the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerminalValue {
    #[default]
    Zero,
    Horizon,
}

/// Tuning sequences of the finite-horizon engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteTuning {
    pub delta: f64,
    pub epsilon: f64,
    pub horizon: usize,
    pub episodes: usize,
    pub agents: usize,
    pub num_aggregates: usize,
    /// Multiplier on `beta`; 1 reproduces the stated schedule.
    pub beta_scale: f64,
    /// Multiplier on the confidence terms of `xi`; 1 reproduces the stated schedule.
    pub xi_scale: f64,
}

impl FiniteTuning {
    pub fn new(
        delta: f64,
        epsilon: f64,
        horizon: usize,
        episodes: usize,
        agents: usize,
        num_aggregates: usize,
    ) -> Self {
        Self {
            delta,
            epsilon,
            horizon,
            episodes,
            agents,
            num_aggregates,
            beta_scale: 1.0,
            xi_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!(
                "delta = {} must lie in (0, 1)",
                self.delta
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be nonnegative"));
        }
        if !(self.beta_scale >= 0.0 && self.xi_scale >= 0.0) {
            return Err(Error::invalid("tuning scales must be nonnegative"));
        }
        if self.horizon == 0 || self.episodes == 0 || self.agents == 0 || self.num_aggregates == 0 {
            return Err(Error::invalid("tuning dimensions must be positive"));
        }
        Ok(())
    }

    /// `1 / (1 + n)`
    pub fn alpha(&self, n: usize) -> f64 {
        1.0 / (1.0 + n as f64)
    }

    /// `1/2 H^3 log(2 H Gamma max(k, 1))`
    pub fn beta(&self, k: usize) -> f64 {
        let h = self.horizon as f64;
        let arg = 2.0 * h * self.num_aggregates as f64 * k.max(1) as f64;
        self.beta_scale * 0.5 * h.powi(3) * arg.ln()
    }

    fn log_term(&self) -> f64 {
        (2.0 * self.episodes as f64 * self.horizon as f64 * self.agents as f64 / self.delta).ln()
    }

    /// `eps + 2 a_n H sqrt(L)/sqrt(max(n,1)) + 2 a_n sqrt(beta_k L)/sqrt((n+1) max(n,1))`
    /// with `L = log(2 K H N / delta)`.
    pub fn xi(&self, n: usize, k: usize) -> f64 {
        let alpha = self.alpha(n);
        let log = self.log_term();
        let nm = n.max(1) as f64;
        let h = self.horizon as f64;
        let middle = 2.0 * alpha * h * log.sqrt() / nm.sqrt();
        let last = 2.0 * alpha * (self.beta(k) * log).sqrt() / ((n as f64 + 1.0) * nm).sqrt();
        self.epsilon + self.xi_scale * (middle + last)
    }
}

/// Closed-form block backup in the default (appendix) form:
/// `xi + (1 - alpha) prev + (alpha / n) sum_j (r_j + w_j + V_next,j + Qtilde_j)`.
pub fn ls_backup(prev_merged_q: f64, samples: &[BackupSample], xi: f64, alpha: f64) -> Result<f64> {
    ls_backup_with(UpdateMode::Appendix, prev_merged_q, samples, xi, alpha)
}

/// Block backup in either update mode.
pub fn ls_backup_with(
    mode: UpdateMode,
    prev_merged_q: f64,
    samples: &[BackupSample],
    xi: f64,
    alpha: f64,
) -> Result<f64> {
    require_samples(samples.len())?;
    Ok(mode.backup(prev_merged_q, &BackupSums::from_samples(samples), xi, alpha))
}

/// Merges agent tables: each block visited this episode takes the mean over
/// the visiting agents (an agent counts once per block and period); other
/// blocks keep `prev_merged`.
pub fn merge_agent_q(per_agent_q: &[QTable], visits: &[Visit], prev_merged: &QTable) -> QTable {
    let mut unique: Vec<Visit> = visits.to_vec();
    unique.sort_by_key(|v| (v.period, v.aggregate, v.agent));
    unique.dedup();
    merge_weighted(
        per_agent_q,
        unique.into_iter().map(|v| (v, 1.0)),
        prev_merged,
    )
}

/// Parameters of one finite-horizon run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteParams {
    pub episodes: usize,
    pub horizon: usize,
    pub agents: usize,
    pub buffer: BufferMode,
    pub update: UpdateMode,
    pub terminal: TerminalValue,
    pub delta: f64,
    /// Aggregation error fed to `xi`; measured from the MDP when absent.
    pub epsilon: Option<f64>,
    pub beta_scale: f64,
    pub xi_scale: f64,
    pub seed: u64,
}

impl FiniteParams {
    pub fn new(episodes: usize, horizon: usize, agents: usize, seed: u64) -> Self {
        Self {
            episodes,
            horizon,
            agents,
            buffer: BufferMode::OneEpisode,
            update: UpdateMode::Appendix,
            terminal: TerminalValue::Zero,
            delta: 0.05,
            epsilon: None,
            beta_scale: 1.0,
            xi_scale: 1.0,
            seed,
        }
    }
}

/// Bookkeeping of one update (index 0 is the pre-round update).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteUpdateRecord {
    /// Merged table after the update.
    pub merged: QTable,
    /// `[H][Gamma]` counts of the buffer the update consumed.
    pub visit_counts: Vec<Vec<usize>>,
    /// Tuples held by the buffer.
    pub buffer_len: usize,
    /// Smallest and largest entry over all agent tables after the update.
    pub agent_q_range: (f64, f64),
    pub beta: f64,
}

/// Everything a finite run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteRunResult {
    pub seed: u64,
    pub episodes: usize,
    pub horizon: usize,
    pub agents: usize,
    pub epsilon: f64,
    /// `[K][N][H][S]` greedy policy each agent followed in each episode.
    pub policies: Vec<Vec<Vec<Vec<usize>>>>,
    /// `[K][N]` realized trajectories.
    pub trajectories: Vec<Vec<Trajectory>>,
    /// `K + 1` entries: the pre-round update then one per episode.
    pub updates: Vec<FiniteUpdateRecord>,
}

struct FiniteEngine<'a> {
    mdp: &'a TabularMdp,
    agg: &'a StateAggregation,
    params: &'a FiniteParams,
    tuning: FiniteTuning,
}

/// Runs the finite-horizon engine end to end. The output is a pure function
/// of the inputs, independent of the rayon thread count.
pub fn run_finite(
    mdp: &TabularMdp,
    agg: &StateAggregation,
    params: &FiniteParams,
) -> Result<FiniteRunResult> {
    let (k_n, h_n, n_n) = (params.episodes, params.horizon, params.agents);
    if k_n == 0 || h_n == 0 || n_n == 0 {
        return Err(Error::invalid(
            "episodes, horizon and agents must be at least 1",
        ));
    }
    agg.check_compatible(mdp, Objective::Finite { horizon: h_n })?;
    mdp.check_agents(n_n)?;
    let epsilon = match params.epsilon {
        Some(e) => e,
        None => check_epsilon(agg, mdp, Objective::Finite { horizon: h_n })?,
    };
    let gamma = agg.num_aggregates();
    let tuning = FiniteTuning {
        beta_scale: params.beta_scale,
        xi_scale: params.xi_scale,
        ..FiniteTuning::new(params.delta, epsilon, h_n, k_n, n_n, gamma)
    };
    tuning.validate()?;
    let engine = FiniteEngine {
        mdp,
        agg,
        params,
        tuning,
    };

    let cap = h_n as f64;
    let mut agent_q = vec![QTable::filled(h_n, gamma, cap, cap); n_n];
    let mut merged = QTable::filled(h_n, gamma, cap, cap);
    let mut history = EpisodeBuffer::new(h_n, gamma);
    let mut updates = Vec::with_capacity(k_n + 1);
    let mut policies = Vec::with_capacity(k_n);
    let mut trajectories = Vec::with_capacity(k_n);

    let pre_round = engine.pre_round()?;
    let mut scratch = EpisodeBuffer::new(h_n, gamma);
    for t in &pre_round {
        scratch.push_by_period(t, agg);
    }
    let rec = engine.update(0, &scratch, &pre_round, &mut agent_q, &mut merged)?;
    updates.push(rec);

    for k in 1..=k_n {
        let pols: Vec<Vec<Vec<usize>>> = agent_q
            .iter()
            .map(|q| (0..h_n).map(|h| greedy_row(q, agg, h)).collect())
            .collect();
        let trajs = engine.rollouts(k, &pols)?;
        let buffer = match params.buffer {
            BufferMode::OneEpisode => {
                scratch.clear();
                &mut scratch
            }
            BufferMode::FullHistory => &mut history,
        };
        for t in &trajs {
            buffer.push_by_period(t, agg);
        }
        let rec = engine.update(k, buffer, &trajs, &mut agent_q, &mut merged)?;
        updates.push(rec);
        policies.push(pols);
        trajectories.push(trajs);
    }

    Ok(FiniteRunResult {
        seed: params.seed,
        episodes: k_n,
        horizon: h_n,
        agents: n_n,
        epsilon,
        policies,
        trajectories,
        updates,
    })
}

impl FiniteEngine<'_> {
    fn pre_round(&self) -> Result<Vec<Trajectory>> {
        let a_n = self.mdp.num_actions();
        (0..self.params.agents)
            .into_par_iter()
            .map(|p| {
                let mut rng = stream(self.params.seed, Purpose::Rollout, &[0, p as u64]);
                let start = self.mdp.initial_state(p);
                rollout(
                    self.mdp,
                    start,
                    self.params.horizon,
                    p,
                    0,
                    &mut rng,
                    |_, _, r| r.random_range(0..a_n),
                )
            })
            .collect()
    }

    fn rollouts(&self, k: usize, policies: &[Vec<Vec<usize>>]) -> Result<Vec<Trajectory>> {
        (0..self.params.agents)
            .into_par_iter()
            .map(|p| {
                let mut rng = stream(self.params.seed, Purpose::Rollout, &[k as u64, p as u64]);
                let start = self.mdp.initial_state(p);
                let pol = &policies[p];
                rollout(
                    self.mdp,
                    start,
                    self.params.horizon,
                    p,
                    k,
                    &mut rng,
                    |h, s, _| pol[h][s],
                )
            })
            .collect()
    }

    /// Perturbs the buffer per agent, runs every agent's backward pass and
    /// merges over the agents that visited each block in `episode`.
    fn update(
        &self,
        k: usize,
        buffer: &EpisodeBuffer,
        episode: &[Trajectory],
        agent_q: &mut [QTable],
        merged: &mut QTable,
    ) -> Result<FiniteUpdateRecord> {
        let beta = self.tuning.beta(k);
        let prev_merged: &QTable = merged;
        let fresh: Vec<QTable> = agent_q
            .par_iter()
            .enumerate()
            .map(|(p, old)| self.backward_pass(k, p, beta, buffer, old, prev_merged))
            .collect::<Result<_>>()?;

        let visits: Vec<Visit> = episode
            .iter()
            .flat_map(|t| {
                t.steps.iter().enumerate().map(move |(h, st)| Visit {
                    agent: t.agent_id,
                    period: h,
                    aggregate: self.agg.phi(h, st.state, st.action),
                })
            })
            .collect();
        *merged = merge_agent_q(&fresh, &visits, prev_merged);
        agent_q.clone_from_slice(&fresh);

        let agent_q_range = fresh
            .iter()
            .map(QTable::min_max)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
                (lo.min(a), hi.max(b))
            });
        Ok(FiniteUpdateRecord {
            merged: merged.clone(),
            visit_counts: buffer.visit_counts().to_vec(),
            buffer_len: buffer.len(),
            agent_q_range,
            beta,
        })
    }

    fn backward_pass(
        &self,
        k: usize,
        p: usize,
        beta: f64,
        buffer: &EpisodeBuffer,
        old: &QTable,
        prev_merged: &QTable,
    ) -> Result<QTable> {
        let h_n = self.params.horizon;
        let gamma = self.agg.num_aggregates();
        let mut rng = stream(self.params.seed, Purpose::Noise, &[k as u64, p as u64]);
        let perturbed = perturb_buffer(buffer, beta, &mut rng)?;
        let terminal = match self.params.terminal {
            TerminalValue::Zero => 0.0,
            TerminalValue::Horizon => h_n as f64,
        };

        let mut out = old.clone();
        let mut sums = vec![BackupSums::default(); gamma];
        for h in (0..h_n).rev() {
            let v_next = if h + 1 == h_n {
                vec![terminal; self.agg.num_states()]
            } else {
                state_values(out.period(h + 1), self.agg, h + 1)
            };
            sums.iter_mut().for_each(|s| *s = BackupSums::default());
            for (t, pert) in buffer.period(h).iter().zip(&perturbed.periods[h]) {
                let s = &mut sums[t.aggregate];
                s.n += 1;
                s.target += pert.reward + v_next[t.next_state];
                s.regularization += pert.regularization;
            }
            for (g, s) in sums.iter().enumerate() {
                if s.n == 0 {
                    // unvisited: keep this agent's previous value
                    continue;
                }
                let alpha = self.tuning.alpha(s.n);
                let xi = self.tuning.xi(s.n, k);
                let raw = self
                    .params
                    .update
                    .backup(prev_merged.get(h, g), s, xi, alpha);
                out.set(h, g, out.clip(raw));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::identity_aggregation;
    use crate::mdp::sample_random_mdp;

    fn sample(r: f64, v: f64, q: f64) -> BackupSample {
        BackupSample {
            perturbed_reward: r,
            next_value: v,
            regularization: q,
        }
    }

    #[test]
    fn ls_backup_hand_cases() {
        let x = ls_backup(2.0, &[sample(0.5, 1.0, 0.1)], 0.3, 0.5).unwrap();
        assert!((x - 2.1).abs() < 1e-12);
        let many = vec![sample(1.0, 0.0, 0.0); 999];
        let x = ls_backup(5.0, &many, 0.0, 1.0 / 1000.0).unwrap();
        assert!((x - 4.996).abs() < 1e-12);
        let zeros = vec![sample(0.0, 0.0, 0.0); 3];
        assert_eq!(ls_backup(0.0, &zeros, 0.0, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn ls_backup_without_samples_is_rejected() {
        assert!(ls_backup(1.0, &[], 0.0, 0.5).is_err());
    }

    #[test]
    fn minimizer_form_hand_case() {
        // 1/2 [0.3 + 0.5*2 + 0.5*1.5] + 0.5/2 * 0.1 = 1.025 + 0.025
        let x = ls_backup_with(
            UpdateMode::Minimizer,
            2.0,
            &[sample(0.5, 1.0, 0.1)],
            0.3,
            0.5,
        )
        .unwrap();
        assert!((x - 1.05).abs() < 1e-12);
    }

    #[test]
    fn tuning_formulas() {
        let t = FiniteTuning::new(0.05, 0.0, 30, 20, 5, 25);
        assert_eq!(t.alpha(0), 1.0);
        assert_eq!(t.alpha(3), 0.25);
        let beta1 = 0.5 * 27_000.0 * (1500.0f64).ln();
        assert!((t.beta(1) - beta1).abs() < 1e-9);
        assert_eq!(t.beta(0), t.beta(1));
        let log = (2.0 * 20.0 * 30.0 * 5.0 / 0.05f64).ln();
        let expect = 2.0 * 0.2 * 30.0 * log.sqrt() / 2.0
            + 2.0 * 0.2 * (t.beta(3) * log).sqrt() / (5.0f64 * 4.0).sqrt();
        assert!((t.xi(4, 3) - expect).abs() < 1e-9);
        // n = 0 uses max(n, 1) = 1 and alpha = 1
        let expect0 = 2.0 * 30.0 * log.sqrt() + 2.0 * (t.beta(1) * log).sqrt();
        assert!((t.xi(0, 1) - expect0).abs() < 1e-9);
    }

    #[test]
    fn merge_examples() {
        let prev = QTable::filled(1, 2, 7.5, 10.0);
        let a = QTable::from_values(1, 2, vec![4.0, 1.0], 10.0).unwrap();
        let b = QTable::from_values(1, 2, vec![6.0, 2.0], 10.0).unwrap();
        let v = |agent| Visit {
            agent,
            period: 0,
            aggregate: 0,
        };
        let m = merge_agent_q(&[a.clone(), b], &[v(0), v(1)], &prev);
        assert_eq!(m.get(0, 0), 5.0);
        assert_eq!(m.get(0, 1), 7.5);
        // one agent visiting twice counts once
        let c = QTable::from_values(1, 2, vec![9.0, 0.0], 10.0).unwrap();
        let m = merge_agent_q(&[a, c], &[v(0), v(0), v(1)], &prev);
        assert_eq!(m.get(0, 0), 6.5);
    }

    #[test]
    fn trivial_mdp_has_unique_policy() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![0.3], vec![0]).unwrap();
        let agg = identity_aggregation(1, 1, Some(4)).unwrap();
        let run = run_finite(&mdp, &agg, &FiniteParams::new(3, 4, 2, 1)).unwrap();
        assert!(run
            .policies
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .all(|&a| a == 0));
    }

    #[test]
    fn single_agent_single_episode_buffers_agree() {
        let mdp = sample_random_mdp(4, 4, 3).unwrap();
        let agg = identity_aggregation(4, 3, Some(5)).unwrap();
        let mut p = FiniteParams::new(1, 5, 1, 77);
        let one = run_finite(&mdp, &agg, &p).unwrap();
        p.buffer = BufferMode::FullHistory;
        let full = run_finite(&mdp, &agg, &p).unwrap();
        assert_eq!(one, full);
    }

    #[test]
    fn runs_are_deterministic() {
        let mdp = sample_random_mdp(9, 5, 5).unwrap();
        let agg = identity_aggregation(5, 5, Some(6)).unwrap();
        let p = FiniteParams::new(4, 6, 3, 12);
        assert_eq!(
            run_finite(&mdp, &agg, &p).unwrap(),
            run_finite(&mdp, &agg, &p).unwrap()
        );
    }

    #[test]
    fn buffer_sizes_follow_mode() {
        let mdp = sample_random_mdp(10, 4, 2).unwrap();
        let agg = identity_aggregation(4, 2, Some(5)).unwrap();
        let mut p = FiniteParams::new(4, 5, 3, 3);
        let run = run_finite(&mdp, &agg, &p).unwrap();
        assert!(run.updates.iter().all(|u| u.buffer_len == 3 * 5));
        p.buffer = BufferMode::FullHistory;
        let run = run_finite(&mdp, &agg, &p).unwrap();
        for (k, u) in run.updates.iter().enumerate().skip(1) {
            assert_eq!(u.buffer_len, k * 3 * 5);
        }
    }

    #[test]
    fn small_noise_learns_to_avoid_bad_action() {
        // state 0 only; action 1 pays 1, action 0 pays 0
        let mdp = TabularMdp::new(1, 2, vec![1.0, 1.0], vec![0.0, 1.0], vec![0]).unwrap();
        let agg = identity_aggregation(1, 2, Some(3)).unwrap();
        let mut p = FiniteParams::new(30, 3, 4, 5);
        p.beta_scale = 0.0;
        p.xi_scale = 0.0;
        let run = run_finite(&mdp, &agg, &p).unwrap();
        let last = run.policies.last().unwrap();
        assert!(last.iter().all(|pol| pol.iter().all(|row| row[0] == 1)));
    }

    #[test]
    fn invalid_inputs_rejected() {
        let mdp = sample_random_mdp(1, 2, 2).unwrap();
        let agg = identity_aggregation(2, 2, Some(3)).unwrap();
        assert!(run_finite(&mdp, &agg, &FiniteParams::new(0, 3, 1, 0)).is_err());
        assert!(run_finite(&mdp, &agg, &FiniteParams::new(2, 4, 1, 0)).is_err());
        let mut p = FiniteParams::new(2, 3, 1, 0);
        p.delta = 1.5;
        assert!(run_finite(&mdp, &agg, &p).is_err());
    }
}
