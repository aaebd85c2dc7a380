//! Aggregated-state representations.
//!
//! A [`StateAggregation`] maps state-action pairs (per period in finite mode)
//! onto `Gamma` blocks that share one value estimate. Its quality is measured by
//! the largest spread of optimal `Q*` values inside any block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::solver::{backward_induction, discounted_value_iteration, DEFAULT_VI_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    Finite,
    Infinite,
}

/// Which optimal `Q*` an aggregation is judged against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Finite { horizon: usize },
    Discounted { eta: f64 },
}

impl Objective {
    fn mode(self) -> AggregationMode {
        match self {
            Objective::Finite { .. } => AggregationMode::Finite,
            Objective::Discounted { .. } => AggregationMode::Infinite,
        }
    }

    /// Optimal `Q*` per period: `[periods][S][A]`.
    fn optimal_q(self, mdp: &TabularMdp) -> Result<Vec<Vec<Vec<f64>>>> {
        match self {
            Objective::Finite { horizon } => {
                let mut q = backward_induction(mdp, horizon)?.q;
                q.truncate(horizon);
                Ok(q)
            }
            Objective::Discounted { eta } => Ok(vec![
                discounted_value_iteration(mdp, eta, DEFAULT_VI_TOL)?.q,
            ]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AggregationWire", into = "AggregationWire")]
pub struct StateAggregation {
    num_aggregates: usize,
    mode: AggregationMode,
    num_states: usize,
    num_actions: usize,
    /// Row-major `[period][s][a]`; a single period in infinite mode.
    map: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct AggregationWire {
    gamma: usize,
    mode: AggregationMode,
    map: MapWire,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MapWire {
    Infinite(Vec<Vec<usize>>),
    Finite(Vec<Vec<Vec<usize>>>),
}

impl TryFrom<AggregationWire> for StateAggregation {
    type Error = Error;

    fn try_from(w: AggregationWire) -> Result<Self> {
        let periods = match (w.mode, w.map) {
            (AggregationMode::Finite, MapWire::Finite(m)) => m,
            (AggregationMode::Infinite, MapWire::Infinite(m)) => vec![m],
            (AggregationMode::Finite, MapWire::Infinite(m)) if m.is_empty() => Vec::new(),
            _ => {
                return Err(Error::invalid(
                    "aggregation map shape does not match its mode",
                ))
            }
        };
        StateAggregation::from_periods(w.mode, w.gamma, &periods)
    }
}

impl From<StateAggregation> for AggregationWire {
    fn from(agg: StateAggregation) -> Self {
        let nested: Vec<Vec<Vec<usize>>> = (0..agg.periods())
            .map(|h| {
                (0..agg.num_states)
                    .map(|s| (0..agg.num_actions).map(|a| agg.phi(h, s, a)).collect())
                    .collect()
            })
            .collect();
        let map = match agg.mode {
            AggregationMode::Finite => MapWire::Finite(nested),
            AggregationMode::Infinite => {
                MapWire::Infinite(nested.into_iter().next().unwrap_or_default())
            }
        };
        AggregationWire {
            gamma: agg.num_aggregates,
            mode: agg.mode,
            map,
        }
    }
}

impl StateAggregation {
    /// Builds an aggregation from a `[period][s][a]` table; infinite mode takes
    /// exactly one period.
    pub fn from_periods(
        mode: AggregationMode,
        num_aggregates: usize,
        periods: &[Vec<Vec<usize>>],
    ) -> Result<Self> {
        if periods.is_empty() {
            return Err(Error::invalid("aggregation needs at least one period"));
        }
        if mode == AggregationMode::Infinite && periods.len() != 1 {
            return Err(Error::invalid(
                "infinite-mode aggregation has exactly one map",
            ));
        }
        let num_states = periods[0].len();
        let num_actions = periods[0].first().map_or(0, Vec::len);
        if num_states == 0 || num_actions == 0 {
            return Err(Error::invalid("aggregation map is empty"));
        }
        let mut map = Vec::with_capacity(periods.len() * num_states * num_actions);
        for per in periods {
            if per.len() != num_states || per.iter().any(|row| row.len() != num_actions) {
                return Err(Error::invalid("aggregation map is ragged"));
            }
            map.extend(per.iter().flatten().copied());
        }
        Self::from_flat(mode, num_aggregates, num_states, num_actions, map)
    }

    fn from_flat(
        mode: AggregationMode,
        num_aggregates: usize,
        num_states: usize,
        num_actions: usize,
        map: Vec<usize>,
    ) -> Result<Self> {
        if num_aggregates == 0 {
            return Err(Error::invalid("aggregation must have at least one block"));
        }
        let mut hit = vec![false; num_aggregates];
        for &g in &map {
            if g >= num_aggregates {
                return Err(Error::invalid(format!(
                    "aggregate index {g} out of range for gamma = {num_aggregates}"
                )));
            }
            hit[g] = true;
        }
        if let Some(g) = hit.iter().position(|h| !h) {
            return Err(Error::invalid(format!(
                "aggregate {g} has no state-action pair"
            )));
        }
        Ok(Self {
            num_aggregates,
            mode,
            num_states,
            num_actions,
            map,
        })
    }

    pub fn num_aggregates(&self) -> usize {
        self.num_aggregates
    }

    pub fn mode(&self) -> AggregationMode {
        self.mode
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of per-period maps (1 in infinite mode).
    pub fn periods(&self) -> usize {
        self.map.len() / (self.num_states * self.num_actions)
    }

    /// Aggregate index of `(s, a)` at period `h`; `h` is ignored in infinite mode.
    #[inline]
    pub fn phi(&self, h: usize, s: usize, a: usize) -> usize {
        let h = match self.mode {
            AggregationMode::Finite => h,
            AggregationMode::Infinite => 0,
        };
        self.map[(h * self.num_states + s) * self.num_actions + a]
    }

    /// The `[S][A]` map for period `h`.
    pub fn period_map(&self, h: usize) -> &[usize] {
        let h = if self.mode == AggregationMode::Infinite {
            0
        } else {
            h
        };
        let w = self.num_states * self.num_actions;
        &self.map[h * w..(h + 1) * w]
    }

    /// Checks that this aggregation fits an MDP and an objective.
    pub fn check_compatible(&self, mdp: &TabularMdp, objective: Objective) -> Result<()> {
        if self.mode != objective.mode() {
            return Err(Error::invalid(format!(
                "aggregation mode {:?} does not match the objective",
                self.mode
            )));
        }
        if let Objective::Finite { horizon } = objective {
            if self.periods() != horizon {
                return Err(Error::invalid(format!(
                    "aggregation has {} periods, horizon is {horizon}",
                    self.periods()
                )));
            }
        }
        if self.num_states != mdp.num_states() || self.num_actions != mdp.num_actions() {
            return Err(Error::invalid(
                "aggregation dimensions do not match the MDP",
            ));
        }
        Ok(())
    }

    /// Merges block `b` into block `a` in every period and re-densifies indices.
    pub fn merge_blocks(&self, a: usize, b: usize) -> Result<Self> {
        if a >= self.num_aggregates || b >= self.num_aggregates {
            return Err(Error::invalid("block index out of range"));
        }
        let merged: Vec<usize> = self
            .map
            .iter()
            .map(|&g| if g == b { a } else { g })
            .collect();
        let (map, gamma) = compact(&merged);
        Self::from_flat(self.mode, gamma, self.num_states, self.num_actions, map)
    }
}

/// Renumbers indices densely in order of their value.
fn compact(map: &[usize]) -> (Vec<usize>, usize) {
    let mut used: Vec<usize> = map.to_vec();
    used.sort_unstable();
    used.dedup();
    let out = map
        .iter()
        .map(|g| used.binary_search(g).expect("index present"))
        .collect();
    (out, used.len())
}

/// The zero-error aggregation with one block per state-action pair:
/// `phi(s, a) = s * A + a` in every period.
pub fn identity_aggregation(
    num_states: usize,
    num_actions: usize,
    horizon: Option<usize>,
) -> Result<StateAggregation> {
    if num_states == 0 || num_actions == 0 {
        return Err(Error::invalid(
            "num_states and num_actions must be positive",
        ));
    }
    let (mode, periods) = match horizon {
        Some(0) => return Err(Error::invalid("horizon must be at least 1")),
        Some(h) => (AggregationMode::Finite, h),
        None => (AggregationMode::Infinite, 1),
    };
    let per: Vec<usize> = (0..num_states * num_actions).collect();
    let map = per.repeat(periods);
    StateAggregation::from_flat(mode, num_states * num_actions, num_states, num_actions, map)
}

/// Tightest `epsilon` for which `agg` is an epsilon-error aggregation: the
/// largest within-block spread of `Q*` over all blocks and periods.
pub fn check_epsilon(
    agg: &StateAggregation,
    mdp: &TabularMdp,
    objective: Objective,
) -> Result<f64> {
    agg.check_compatible(mdp, objective)?;
    let q = objective.optimal_q(mdp)?;
    let gamma = agg.num_aggregates();
    let mut eps: f64 = 0.0;
    for (h, qh) in q.iter().enumerate() {
        let mut lo = vec![f64::INFINITY; gamma];
        let mut hi = vec![f64::NEG_INFINITY; gamma];
        for (s, row) in qh.iter().enumerate() {
            for (a, &x) in row.iter().enumerate() {
                let g = agg.phi(h, s, a);
                lo[g] = lo[g].min(x);
                hi[g] = hi[g].max(x);
            }
        }
        for g in 0..gamma {
            if hi[g] >= lo[g] {
                eps = eps.max(hi[g] - lo[g]);
            }
        }
    }
    Ok(eps)
}

/// Groups state-action pairs with `Q*` values at most `epsilon` apart.
///
/// Within each period the pairs are sorted by `Q*`; a new block opens whenever
/// a value exceeds the current block's minimum by more than `epsilon`.
/// `epsilon = 0` yields the identity aggregation.
pub fn build_epsilon_aggregation(
    mdp: &TabularMdp,
    objective: Objective,
    epsilon: f64,
) -> Result<StateAggregation> {
    if !(epsilon >= 0.0) {
        return Err(Error::invalid("epsilon must be nonnegative"));
    }
    let horizon = match objective {
        Objective::Finite { horizon } => Some(horizon),
        Objective::Discounted { .. } => None,
    };
    if epsilon == 0.0 {
        return identity_aggregation(mdp.num_states(), mdp.num_actions(), horizon);
    }
    let a_n = mdp.num_actions();
    let q = objective.optimal_q(mdp)?;
    let mut map = Vec::with_capacity(q.len() * mdp.num_states() * a_n);
    let mut gamma = 0;
    for qh in &q {
        let values: Vec<f64> = qh.iter().flatten().copied().collect();
        let mut order: Vec<usize> = (0..values.len()).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]).then(i.cmp(&j)));
        let mut block = vec![0; values.len()];
        let mut current = 0;
        let mut start = values[order[0]];
        for &i in &order {
            if values[i] - start > epsilon {
                current += 1;
                start = values[i];
            }
            block[i] = current;
        }
        gamma = gamma.max(current + 1);
        map.extend(block);
    }
    let mode = objective.mode();
    StateAggregation::from_flat(mode, gamma, mdp.num_states(), a_n, map)
}
