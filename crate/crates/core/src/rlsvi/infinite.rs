//! Infinite-horizon concurrent RLSVI with geometric pseudo-episodes.
//!
//! The interaction stream `[1, T]` is cut into pseudo-episodes whose lengths
//! are i.i.d. `Geometric(1 - eta)` (truncated at `T`). Agents restart from
//! their initial states at every boundary and act greedily on a stationary
//! per-agent table. After each pseudo-episode every agent perturbs the
//! buffered data, runs `H_k` discounted sweeps from a zero terminal value and
//! keeps the deepest sweep; the merged table is the visit-weighted mean.

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

/// Start times and lengths of the pseudo-episodes covering `[1, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoEpisodeSchedule {
    pub eta: f64,
    pub horizon: usize,
    /// 1-based start time of each pseudo-episode.
    pub starts: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl PseudoEpisodeSchedule {
    /// Lays raw (untruncated) length draws onto `[1, T]`, truncating each draw
    /// to `T + 1 - t`. Draws beyond the end are ignored.
    pub fn from_draws(
        eta: f64,
        horizon: usize,
        draws: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::invalid("T must be at least 1"));
        }
        let mut starts = Vec::new();
        let mut lengths = Vec::new();
        let mut t = 1;
        let mut draws = draws.into_iter();
        while t <= horizon {
            let raw = draws
                .next()
                .ok_or_else(|| Error::invalid("ran out of length draws before covering T"))?;
            if raw == 0 {
                return Err(Error::invalid("pseudo-episode lengths must be at least 1"));
            }
            let len = raw.min(horizon + 1 - t);
            starts.push(t);
            lengths.push(len);
            t += len;
        }
        Ok(Self {
            eta,
            horizon,
            starts,
            lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta = {eta} must lie in [0, 1)")));
    }
    Ok(())
}

/// One `Geometric(1 - eta)` draw on `{1, 2, ...}` by inverse CDF.
pub fn geometric_length<R: Rng + ?Sized>(eta: f64, rng: &mut R) -> usize {
    if eta <= 0.0 {
        return 1;
    }
    // u in (0, 1]
    let u = 1.0 - rng.random::<f64>();
    let extra = (u.ln() / eta.ln()).floor();
    if extra >= (usize::MAX / 2) as f64 {
        usize::MAX / 2
    } else {
        1 + extra as usize
    }
}

/// Samples pseudo-episode lengths until `[1, T]` is covered.
pub fn sample_pseudo_schedule<R: Rng + ?Sized>(
    eta: f64,
    horizon: usize,
    rng: &mut R,
) -> Result<PseudoEpisodeSchedule> {
    check_eta(eta)?;
    PseudoEpisodeSchedule::from_draws(
        eta,
        horizon,
        std::iter::repeat_with(|| geometric_length(eta, rng)),
    )
}

/// Tuning sequences of the infinite-horizon engine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfiniteTuning {
    pub delta: f64,
    pub epsilon: f64,
    /// Reward-averaging-time bound.
    pub tau: f64,
    pub eta: f64,
    pub steps: usize,
    pub agents: usize,
    pub num_aggregates: usize,
    pub beta_scale: f64,
    pub xi_scale: f64,
}

impl InfiniteTuning {
    pub fn validate(&self) -> Result<()> {
        check_eta(self.eta)?;
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
        if !(2.0 * self.tau * self.num_aggregates as f64 >= 1.0) {
            return Err(Error::invalid(format!(
                "tau = {} makes beta negative (need 2 tau Gamma >= 1)",
                self.tau
            )));
        }
        if self.steps == 0 || self.agents == 0 {
            return Err(Error::invalid("T and N must be positive"));
        }
        Ok(())
    }

    pub fn alpha(&self, n: usize) -> f64 {
        1.0 / (1.0 + n as f64)
    }

    /// `1/2 tau^3 log(2 tau Gamma max(k, 1))`
    pub fn beta(&self, k: usize) -> f64 {
        let arg = 2.0 * self.tau * self.num_aggregates as f64 * k.max(1) as f64;
        self.beta_scale * 0.5 * self.tau.powi(3) * arg.ln()
    }

    fn log_term(&self) -> f64 {
        (2.0 * self.steps as f64 * self.agents as f64 / self.delta).ln()
    }

    /// `eps + 2 a_n sqrt(L)/((1-eta) sqrt(max(n,1)))
    ///  + 2 a_n sqrt(beta_k L)/sqrt((n+1) max(n,1))` with `L = log(2 T N / delta)`.
    pub fn xi(&self, n: usize, k: usize) -> f64 {
        let alpha = self.alpha(n);
        let log = self.log_term();
        let nm = n.max(1) as f64;
        let middle = 2.0 * alpha * log.sqrt() / ((1.0 - self.eta) * nm.sqrt());
        let last = 2.0 * alpha * (self.beta(k) * log).sqrt() / ((n as f64 + 1.0) * nm).sqrt();
        self.epsilon + self.xi_scale * (middle + last)
    }
}

/// Discounted closed-form backup:
/// `eta [xi + (1 - alpha) prev + (alpha / n) sum_j (r_j + w_j + V_next,j + Qtilde_j)]`.
pub fn ls_backup_discounted(
    prev_merged_q: f64,
    samples: &[BackupSample],
    xi: f64,
    alpha: f64,
    eta: f64,
) -> Result<f64> {
    ls_backup_discounted_with(UpdateMode::Appendix, prev_merged_q, samples, xi, alpha, eta)
}

pub fn ls_backup_discounted_with(
    mode: UpdateMode,
    prev_merged_q: f64,
    samples: &[BackupSample],
    xi: f64,
    alpha: f64,
    eta: f64,
) -> Result<f64> {
    check_eta(eta)?;
    require_samples(samples.len())?;
    Ok(eta * mode.backup(prev_merged_q, &BackupSums::from_samples(samples), xi, alpha))
}

/// Visit-weighted merge: an agent visiting a block `m` times within the
/// pseudo-episode contributes its value `m` times.
pub fn merge_agent_q_weighted(per_agent_q: &[QTable], visits: &[Visit], prev: &QTable) -> QTable {
    merge_weighted(per_agent_q, visits.iter().map(|&v| (v, 1.0)), prev)
}

/// Parameters of one infinite-horizon run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfiniteParams {
    /// Total time steps `T`.
    pub steps: usize,
    pub agents: usize,
    pub eta: f64,
    pub buffer: BufferMode,
    pub update: UpdateMode,
    pub delta: f64,
    /// Aggregation error fed to `xi`; measured from the MDP when absent.
    pub epsilon: Option<f64>,
    /// Defaults to `1 / (1 - eta)`.
    pub tau: Option<f64>,
    pub beta_scale: f64,
    pub xi_scale: f64,
    pub seed: u64,
}

impl InfiniteParams {
    pub fn new(steps: usize, agents: usize, eta: f64, seed: u64) -> Self {
        Self {
            steps,
            agents,
            eta,
            buffer: BufferMode::OneEpisode,
            update: UpdateMode::Appendix,
            delta: 0.05,
            epsilon: None,
            tau: None,
            beta_scale: 1.0,
            xi_scale: 1.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfiniteUpdateRecord {
    pub merged: QTable,
    /// `[Gamma]` counts of the buffer the update consumed.
    pub visit_counts: Vec<usize>,
    pub buffer_len: usize,
    /// Number of backward sweeps (the pseudo-episode length).
    pub sweeps: usize,
    pub agent_q_range: (f64, f64),
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfiniteRunResult {
    pub seed: u64,
    pub steps: usize,
    pub agents: usize,
    pub eta: f64,
    pub epsilon: f64,
    pub tau: f64,
    pub pre_round_length: usize,
    pub schedule: PseudoEpisodeSchedule,
    /// `[K][N][S]` stationary greedy policy per pseudo-episode and agent.
    pub policies: Vec<Vec<Vec<usize>>>,
    /// `K + 1` entries: the pre-round update then one per pseudo-episode.
    pub updates: Vec<InfiniteUpdateRecord>,
}

struct InfiniteEngine<'a> {
    mdp: &'a TabularMdp,
    agg: &'a StateAggregation,
    params: &'a InfiniteParams,
    tuning: InfiniteTuning,
}

/// Runs the infinite-horizon engine end to end. Deterministic given the seed
/// and independent of the rayon thread count.
pub fn run_infinite(
    mdp: &TabularMdp,
    agg: &StateAggregation,
    params: &InfiniteParams,
) -> Result<InfiniteRunResult> {
    let (t_n, n_n, eta) = (params.steps, params.agents, params.eta);
    check_eta(eta)?;
    if t_n == 0 || n_n == 0 {
        return Err(Error::invalid("T and N must be at least 1"));
    }
    agg.check_compatible(mdp, Objective::Discounted { eta })?;
    mdp.check_agents(n_n)?;
    let epsilon = match params.epsilon {
        Some(e) => e,
        None => check_epsilon(agg, mdp, Objective::Discounted { eta })?,
    };
    let tau = params.tau.unwrap_or(1.0 / (1.0 - eta));
    let gamma = agg.num_aggregates();
    let tuning = InfiniteTuning {
        delta: params.delta,
        epsilon,
        tau,
        eta,
        steps: t_n,
        agents: n_n,
        num_aggregates: gamma,
        beta_scale: params.beta_scale,
        xi_scale: params.xi_scale,
    };
    tuning.validate()?;
    let engine = InfiniteEngine {
        mdp,
        agg,
        params,
        tuning,
    };

    let schedule =
        sample_pseudo_schedule(eta, t_n, &mut stream(params.seed, Purpose::Schedule, &[]))?;
    let pre_round_length =
        geometric_length(eta, &mut stream(params.seed, Purpose::PreRoundLength, &[])).min(t_n);

    let cap = 1.0 / (1.0 - eta);
    let mut agent_q = vec![QTable::filled(1, gamma, 0.0, cap); n_n];
    let mut merged = QTable::filled(1, gamma, 0.0, cap);
    let mut history = EpisodeBuffer::new(1, gamma);
    let mut scratch = EpisodeBuffer::new(1, gamma);
    let mut updates = Vec::with_capacity(schedule.len() + 1);
    let mut policies = Vec::with_capacity(schedule.len());

    let pre = engine.pre_round(pre_round_length)?;
    for t in &pre {
        scratch.push_pooled(t, agg);
    }
    updates.push(engine.update(
        0,
        &scratch,
        &pre,
        pre_round_length,
        &mut agent_q,
        &mut merged,
    )?);

    for (k, &len) in schedule.lengths.iter().enumerate() {
        let k = k + 1;
        let pols: Vec<Vec<usize>> = agent_q.iter().map(|q| greedy_row(q, agg, 0)).collect();
        let trajs = engine.rollouts(k, len, &pols)?;
        let buffer = match params.buffer {
            BufferMode::OneEpisode => {
                scratch.clear();
                &mut scratch
            }
            BufferMode::FullHistory => &mut history,
        };
        for t in &trajs {
            buffer.push_pooled(t, agg);
        }
        updates.push(engine.update(k, buffer, &trajs, len, &mut agent_q, &mut merged)?);
        policies.push(pols);
    }

    Ok(InfiniteRunResult {
        seed: params.seed,
        steps: t_n,
        agents: n_n,
        eta,
        epsilon,
        tau,
        pre_round_length,
        schedule,
        policies,
        updates,
    })
}

impl InfiniteEngine<'_> {
    fn pre_round(&self, len: usize) -> Result<Vec<Trajectory>> {
        let a_n = self.mdp.num_actions();
        (0..self.params.agents)
            .into_par_iter()
            .map(|p| {
                let mut rng = stream(self.params.seed, Purpose::Rollout, &[0, p as u64]);
                let start = self.mdp.initial_state(p);
                rollout(self.mdp, start, len, p, 0, &mut rng, |_, _, r| {
                    r.random_range(0..a_n)
                })
            })
            .collect()
    }

    fn rollouts(&self, k: usize, len: usize, policies: &[Vec<usize>]) -> Result<Vec<Trajectory>> {
        (0..self.params.agents)
            .into_par_iter()
            .map(|p| {
                let mut rng = stream(self.params.seed, Purpose::Rollout, &[k as u64, p as u64]);
                let start = self.mdp.initial_state(p);
                let pol = &policies[p];
                rollout(self.mdp, start, len, p, k, &mut rng, |_, s, _| pol[s])
            })
            .collect()
    }

    fn update(
        &self,
        k: usize,
        buffer: &EpisodeBuffer,
        episode: &[Trajectory],
        sweeps: usize,
        agent_q: &mut [QTable],
        merged: &mut QTable,
    ) -> Result<InfiniteUpdateRecord> {
        let gamma = self.agg.num_aggregates();
        let s_n = self.mdp.num_states();
        let beta = self.tuning.beta(k);

        // next-state histogram per block, shared by all agents
        let mut next_counts = vec![0usize; gamma * s_n];
        for t in buffer.period(0) {
            next_counts[t.aggregate * s_n + t.next_state] += 1;
        }
        let counts = &buffer.visit_counts()[0];
        let coeffs: Vec<(f64, f64)> = counts
            .iter()
            .map(|&n| (self.tuning.alpha(n), self.tuning.xi(n, k)))
            .collect();

        let prev_merged: &QTable = merged;
        let fresh: Vec<QTable> = agent_q
            .par_iter()
            .enumerate()
            .map(|(p, old)| {
                let mut rng = stream(self.params.seed, Purpose::Noise, &[k as u64, p as u64]);
                let perturbed = perturb_buffer(buffer, beta, &mut rng)?;
                let mut base = vec![0.0; gamma];
                let mut reg = vec![0.0; gamma];
                for (t, pert) in buffer.period(0).iter().zip(&perturbed.periods[0]) {
                    base[t.aggregate] += pert.reward;
                    reg[t.aggregate] += pert.regularization;
                }
                let mut cur = QTable::filled(1, gamma, 0.0, old.clip_at());
                for _ in 0..sweeps {
                    let v = state_values(cur.period(0), self.agg, 0);
                    let mut next = cur.clone();
                    for g in 0..gamma {
                        let n = counts[g];
                        if n == 0 {
                            next.set(0, g, old.get(0, g));
                            continue;
                        }
                        let hist = &next_counts[g * s_n..(g + 1) * s_n];
                        let v_sum: f64 = hist.iter().zip(&v).map(|(&c, x)| c as f64 * x).sum();
                        let sums = BackupSums {
                            n,
                            target: base[g] + v_sum,
                            regularization: reg[g],
                        };
                        let (alpha, xi) = coeffs[g];
                        let raw = self.tuning.eta
                            * self
                                .params
                                .update
                                .backup(prev_merged.get(0, g), &sums, xi, alpha);
                        next.set(0, g, next.clip(raw));
                    }
                    cur = next;
                }
                if sweeps == 0 {
                    cur = old.clone();
                }
                Ok(cur)
            })
            .collect::<Result<_>>()?;

        let visits: Vec<Visit> = episode
            .iter()
            .flat_map(|t| {
                t.steps.iter().map(move |st| Visit {
                    agent: t.agent_id,
                    period: 0,
                    aggregate: self.agg.phi(0, st.state, st.action),
                })
            })
            .collect();
        *merged = merge_agent_q_weighted(&fresh, &visits, prev_merged);
        agent_q.clone_from_slice(&fresh);

        let agent_q_range = fresh
            .iter()
            .map(QTable::min_max)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (a, b)| {
                (lo.min(a), hi.max(b))
            });
        Ok(InfiniteUpdateRecord {
            merged: merged.clone(),
            visit_counts: counts.clone(),
            buffer_len: buffer.len(),
            sweeps,
            agent_q_range,
            beta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::identity_aggregation;
    use crate::mdp::sample_random_mdp;
    use crate::rlsvi::finite::ls_backup;
    use crate::seeding::StreamRng;
    use rand::SeedableRng;

    fn sample(r: f64, v: f64, q: f64) -> BackupSample {
        BackupSample {
            perturbed_reward: r,
            next_value: v,
            regularization: q,
        }
    }

    #[test]
    fn eta_zero_schedule_is_unit_steps() {
        let mut rng = StreamRng::seed_from_u64(1);
        let s = sample_pseudo_schedule(0.0, 17, &mut rng).unwrap();
        assert_eq!(s.len(), 17);
        assert!(s.lengths.iter().all(|&l| l == 1));
        assert_eq!(s.starts, (1..=17).collect::<Vec<_>>());
    }

    #[test]
    fn truncation_rule() {
        let s = PseudoEpisodeSchedule::from_draws(0.9, 10, [50]).unwrap();
        assert_eq!(s.lengths, vec![10]);
        let s = PseudoEpisodeSchedule::from_draws(0.9, 10, [3, 4, 9, 2]).unwrap();
        assert_eq!(s.lengths, vec![3, 4, 3]);
        assert_eq!(s.starts, vec![1, 4, 8]);
    }

    #[test]
    fn schedule_covers_horizon_exactly() {
        let mut rng = StreamRng::seed_from_u64(5);
        for t in [1, 7, 300, 1000] {
            let s = sample_pseudo_schedule(0.99, t, &mut rng).unwrap();
            assert_eq!(s.lengths.iter().sum::<usize>(), t);
            assert!(s.lengths.iter().all(|&l| l >= 1));
        }
    }

    #[test]
    fn geometric_mean() {
        // mean 1/(1-eta) = 100, sd ~ 99.5; 1e5 draws give a standard error of 0.31
        let mut rng = StreamRng::seed_from_u64(42);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| geometric_length(0.99, &mut rng) as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 100.0).abs() <= 5.0, "mean = {mean}");
    }

    #[test]
    fn discounted_backup_cases() {
        let x = ls_backup_discounted(9.0, &[sample(1.0, 2.0, 3.0)], 0.4, 0.5, 0.0).unwrap();
        assert_eq!(x, 0.0);
        let x = ls_backup_discounted(4.0, &[sample(1.0, 2.0, 0.0)], 0.0, 0.5, 0.5).unwrap();
        assert!((x - 1.75).abs() < 1e-12);
        let x = ls_backup_discounted(0.0, &[sample(0.0, 0.0, 0.0)], 0.0, 0.5, 0.9).unwrap();
        assert_eq!(x, 0.0);
        assert!(ls_backup_discounted(1.0, &[], 0.0, 0.5, 0.9).is_err());
        assert!(ls_backup_discounted(1.0, &[sample(1.0, 1.0, 1.0)], 0.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn discounted_backup_approaches_finite_form() {
        let samples = [sample(0.7, 2.0, -0.3), sample(0.1, 1.5, 0.2)];
        let fin = ls_backup(3.0, &samples, 0.2, 1.0 / 3.0).unwrap();
        let disc = ls_backup_discounted(3.0, &samples, 0.2, 1.0 / 3.0, 0.999).unwrap();
        assert!((fin - disc).abs() <= 1e-2);
    }

    #[test]
    fn tuning_formulas() {
        let t = InfiniteTuning {
            delta: 0.05,
            epsilon: 0.1,
            tau: 100.0,
            eta: 0.99,
            steps: 300,
            agents: 5,
            num_aggregates: 25,
            beta_scale: 1.0,
            xi_scale: 1.0,
        };
        assert!((t.beta(2) - 0.5e6 * (10_000.0f64).ln()).abs() < 1e-6);
        let log = (2.0 * 300.0 * 5.0 / 0.05f64).ln();
        let expect = 0.1
            + 2.0 * 0.25 * log.sqrt() / (0.01 * 3.0f64.sqrt())
            + 2.0 * 0.25 * (t.beta(2) * log).sqrt() / (4.0f64 * 3.0).sqrt();
        assert!((t.xi(3, 2) - expect).abs() < 1e-9 * expect);
        assert!(t.validate().is_ok());
        assert!(InfiniteTuning { tau: 0.01, ..t }.validate().is_err());
    }

    #[test]
    fn weighted_merge_counts_multiplicity() {
        let prev = QTable::filled(1, 1, 0.0, 100.0);
        let a = QTable::filled(1, 1, 4.0, 100.0);
        let b = QTable::filled(1, 1, 10.0, 100.0);
        let v = |agent| Visit {
            agent,
            period: 0,
            aggregate: 0,
        };
        let m = merge_agent_q_weighted(&[a, b], &[v(0), v(0), v(1)], &prev);
        assert!((m.get(0, 0) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn trivial_mdp_runs() {
        let mdp = TabularMdp::new(1, 1, vec![1.0], vec![0.4], vec![0]).unwrap();
        let agg = identity_aggregation(1, 1, None).unwrap();
        let run = run_infinite(&mdp, &agg, &InfiniteParams::new(50, 3, 0.9, 2)).unwrap();
        assert!(run.policies.iter().flatten().flatten().all(|&a| a == 0));
    }

    #[test]
    fn eta_zero_runs_bandit_like() {
        let mdp = sample_random_mdp(2, 3, 2).unwrap();
        let agg = identity_aggregation(3, 2, None).unwrap();
        let run = run_infinite(&mdp, &agg, &InfiniteParams::new(40, 2, 0.0, 9)).unwrap();
        assert_eq!(run.schedule.len(), 40);
        assert_eq!(run.policies.len(), 40);
        for u in &run.updates {
            assert!(u.merged.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let mdp = sample_random_mdp(6, 4, 3).unwrap();
        let agg = identity_aggregation(4, 3, None).unwrap();
        let p = InfiniteParams::new(200, 3, 0.95, 4);
        let a = run_infinite(&mdp, &agg, &p).unwrap();
        assert_eq!(a, run_infinite(&mdp, &agg, &p).unwrap());
        for (k, u) in a.updates.iter().enumerate().skip(1) {
            let (lo, hi) = u.agent_q_range;
            assert!(lo >= 0.0 && hi <= 20.0);
            assert_eq!(
                u.visit_counts.iter().sum::<usize>(),
                3 * a.schedule.lengths[k - 1]
            );
        }
    }
}
