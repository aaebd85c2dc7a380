//! Concurrent randomized least-squares value iteration.
//!
//! [`finite`] runs the episodic variant and [`infinite`] the pseudo-episode
//! variant. Both share the buffer, perturbation and closed-form backup
//! machinery defined here.

pub mod finite;
pub mod infinite;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregation::StateAggregation;
use crate::error::{Error, Result};
use crate::mdp::Trajectory;
use crate::solver::argmax;

/// How much interaction data each update consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BufferMode {
    /// Only the most recent (pseudo-)episode.
    #[default]
    #[serde(rename = "one-episode")]
    OneEpisode,
    /// Every (pseudo-)episode so far.
    #[serde(rename = "full", alias = "full-history")]
    FullHistory,
}

impl std::str::FromStr for BufferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-episode" => Ok(BufferMode::OneEpisode),
            "full" | "full-history" => Ok(BufferMode::FullHistory),
            other => Err(Error::invalid(format!("unknown buffer mode {other:?}"))),
        }
    }
}

/// Which closed form turns buffered data into a block value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// `xi + (1-alpha) prev + (alpha/n) sum(r + w + V + Qtilde)`.
    #[default]
    Appendix,
    /// Exact minimizer of the squared temporal-difference loss plus the ridge
    /// term: `1/2 [xi + (1-alpha) prev + (alpha/n) sum(r + w + V)]
    /// + (alpha/2n) sum(Qtilde)`.
    Minimizer,
}

impl std::str::FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "appendix" => Ok(UpdateMode::Appendix),
            "minimizer" => Ok(UpdateMode::Minimizer),
            other => Err(Error::invalid(format!("unknown update mode {other:?}"))),
        }
    }
}

/// Sufficient statistics of the samples falling into one block.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BackupSums {
    pub n: usize,
    /// `sum_j (r_j + w_j + V_next,j)`
    pub target: f64,
    /// `sum_j Qtilde_j`
    pub regularization: f64,
}

/// One perturbed sample entering a block backup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackupSample {
    /// `r + w`
    pub perturbed_reward: f64,
    /// `max_a' Q_next(s', a')`
    pub next_value: f64,
    /// `Qtilde`
    pub regularization: f64,
}

impl BackupSums {
    pub fn from_samples(samples: &[BackupSample]) -> Self {
        samples
            .iter()
            .fold(BackupSums::default(), |acc, s| BackupSums {
                n: acc.n + 1,
                target: acc.target + s.perturbed_reward + s.next_value,
                regularization: acc.regularization + s.regularization,
            })
    }
}

impl UpdateMode {
    /// Undiscounted closed-form block value. `sums.n` must be positive.
    pub fn backup(self, prev: f64, sums: &BackupSums, xi: f64, alpha: f64) -> f64 {
        let n = sums.n as f64;
        match self {
            UpdateMode::Appendix => {
                xi + (1.0 - alpha) * prev + alpha / n * (sums.target + sums.regularization)
            }
            UpdateMode::Minimizer => {
                0.5 * (xi + (1.0 - alpha) * prev + alpha / n * sums.target)
                    + alpha / (2.0 * n) * sums.regularization
            }
        }
    }
}

pub(crate) fn require_samples(n: usize) -> Result<()> {
    if n == 0 {
        Err(Error::invalid(
            "a block backup needs at least one sample; unvisited blocks carry forward",
        ))
    } else {
        Ok(())
    }
}

/// Value estimates indexed by `(period, aggregate)`; one period for stationary
/// tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    periods: usize,
    num_aggregates: usize,
    values: Vec<f64>,
    clip_at: f64,
}

impl QTable {
    pub fn filled(periods: usize, num_aggregates: usize, value: f64, clip_at: f64) -> Self {
        Self {
            periods,
            num_aggregates,
            values: vec![value; periods * num_aggregates],
            clip_at,
        }
    }

    pub fn from_values(
        periods: usize,
        num_aggregates: usize,
        values: Vec<f64>,
        clip_at: f64,
    ) -> Result<Self> {
        if values.len() != periods * num_aggregates {
            return Err(Error::invalid(
                "Q table value count does not match its shape",
            ));
        }
        Ok(Self {
            periods,
            num_aggregates,
            values,
            clip_at,
        })
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn num_aggregates(&self) -> usize {
        self.num_aggregates
    }

    pub fn clip_at(&self) -> f64 {
        self.clip_at
    }

    #[inline]
    pub fn get(&self, h: usize, g: usize) -> f64 {
        self.values[h * self.num_aggregates + g]
    }

    #[inline]
    pub fn set(&mut self, h: usize, g: usize, x: f64) {
        self.values[h * self.num_aggregates + g] = x;
    }

    pub fn period(&self, h: usize) -> &[f64] {
        &self.values[h * self.num_aggregates..(h + 1) * self.num_aggregates]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Clamps into `[0, clip_at]`.
    #[inline]
    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(0.0, self.clip_at)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
                (lo.min(x), hi.max(x))
            })
    }
}

/// Greedy action at `(h, s)`: the lowest action index maximizing
/// `q[h][phi_h(s, a)]`.
pub fn act_greedy(q: &QTable, agg: &StateAggregation, h: usize, s: usize) -> usize {
    let qh = q.period(h.min(q.periods() - 1));
    let mut best = 0;
    let mut best_val = qh[agg.phi(h, s, 0)];
    for a in 1..agg.num_actions() {
        let x = qh[agg.phi(h, s, a)];
        if x > best_val {
            best = a;
            best_val = x;
        }
    }
    best
}

/// Greedy action for every state at period `h`.
pub fn greedy_row(q: &QTable, agg: &StateAggregation, h: usize) -> Vec<usize> {
    (0..agg.num_states())
        .map(|s| act_greedy(q, agg, h, s))
        .collect()
}

/// `max_a q[h][phi_h(s, a)]` for every state.
pub(crate) fn state_values(q_period: &[f64], agg: &StateAggregation, h: usize) -> Vec<f64> {
    (0..agg.num_states())
        .map(|s| {
            let vals: Vec<f64> = (0..agg.num_actions())
                .map(|a| q_period[agg.phi(h, s, a)])
                .collect();
            vals[argmax(&vals)]
        })
        .collect()
}

/// One buffered transition tagged with its owner and aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BufferedTuple {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
    pub agent: usize,
    pub aggregate: usize,
}

/// Transitions grouped by period with per-block visit counts.
///
/// The finite engine keeps one group per period; the infinite engine keeps a
/// single group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeBuffer {
    periods: Vec<Vec<BufferedTuple>>,
    visit_counts: Vec<Vec<usize>>,
}

impl EpisodeBuffer {
    pub fn new(periods: usize, num_aggregates: usize) -> Self {
        Self {
            periods: vec![Vec::new(); periods],
            visit_counts: vec![vec![0; num_aggregates]; periods],
        }
    }

    pub fn clear(&mut self) {
        self.periods.iter_mut().for_each(Vec::clear);
        self.visit_counts
            .iter_mut()
            .for_each(|c| c.iter_mut().for_each(|x| *x = 0));
    }

    pub fn push(&mut self, period: usize, tuple: BufferedTuple) {
        self.visit_counts[period][tuple.aggregate] += 1;
        self.periods[period].push(tuple);
    }

    /// Adds a finite-horizon trajectory: step `h` goes to period `h`.
    pub fn push_by_period(&mut self, traj: &Trajectory, agg: &StateAggregation) {
        for (h, st) in traj.steps.iter().enumerate() {
            self.push(
                h,
                tuple_of(traj.agent_id, st, agg.phi(h, st.state, st.action)),
            );
        }
    }

    /// Adds every step of a trajectory to the single group.
    pub fn push_pooled(&mut self, traj: &Trajectory, agg: &StateAggregation) {
        for st in &traj.steps {
            self.push(
                0,
                tuple_of(traj.agent_id, st, agg.phi(0, st.state, st.action)),
            );
        }
    }

    pub fn period(&self, h: usize) -> &[BufferedTuple] {
        &self.periods[h]
    }

    pub fn num_periods(&self) -> usize {
        self.periods.len()
    }

    /// `[period][aggregate]` counts of stored tuples.
    pub fn visit_counts(&self) -> &[Vec<usize>] {
        &self.visit_counts
    }

    pub fn len(&self) -> usize {
        self.periods.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn tuple_of(agent: usize, st: &crate::mdp::Step, aggregate: usize) -> BufferedTuple {
    BufferedTuple {
        state: st.state,
        action: st.action,
        reward: st.reward,
        next_state: st.next_state,
        agent,
        aggregate,
    }
}

/// Per-tuple perturbation drawn by one agent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    /// `r + w`
    pub reward: f64,
    /// `Qtilde`
    pub regularization: f64,
}

/// Perturbations aligned with an [`EpisodeBuffer`]'s period groups.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedBuffer {
    pub periods: Vec<Vec<Perturbation>>,
}

/// Draws, for every buffered tuple, a reward perturbation `w` and a
/// regularization draw `Qtilde`, both `N(0, beta / (1 + count))` where `count`
/// is the buffer's visit count of the tuple's aggregate.
pub fn perturb_buffer<R: Rng + ?Sized>(
    buffer: &EpisodeBuffer,
    beta: f64,
    rng: &mut R,
) -> Result<PerturbedBuffer> {
    if !(beta >= 0.0) {
        return Err(Error::invalid(format!(
            "noise scale beta = {beta} must be nonnegative"
        )));
    }
    let periods = buffer
        .periods
        .iter()
        .zip(&buffer.visit_counts)
        .map(|(tuples, counts)| {
            tuples
                .iter()
                .map(|t| {
                    let sd = (beta / (1.0 + counts[t.aggregate] as f64)).sqrt();
                    let w: f64 = rng.sample(StandardNormal);
                    let qt: f64 = rng.sample(StandardNormal);
                    Perturbation {
                        reward: t.reward + sd * w,
                        regularization: sd * qt,
                    }
                })
                .collect()
        })
        .collect();
    Ok(PerturbedBuffer { periods })
}

/// A single visit of an agent to a block, used by the merge step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub agent: usize,
    pub period: usize,
    pub aggregate: usize,
}

/// Weighted mean of agent tables over the blocks they visited; unvisited
/// blocks keep `prev`.
pub(crate) fn merge_weighted(
    per_agent: &[QTable],
    weights: impl Iterator<Item = (Visit, f64)>,
    prev: &QTable,
) -> QTable {
    let mut num = vec![0.0; prev.values.len()];
    let mut den = vec![0.0; prev.values.len()];
    for (v, w) in weights {
        let idx = v.period * prev.num_aggregates + v.aggregate;
        num[idx] += w * per_agent[v.agent].get(v.period, v.aggregate);
        den[idx] += w;
    }
    let mut out = prev.clone();
    let cap = out.clip_at;
    for (i, x) in out.values.iter_mut().enumerate() {
        if den[i] > 0.0 {
            // a mean of clipped values; clamp away rounding past the cap
            *x = (num[i] / den[i]).clamp(0.0, cap);
        }
    }
    out
}
