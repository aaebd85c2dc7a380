//! Tabular MDPs: representation, random generation and simulation.
//!
//! Transitions are time-homogeneous and stored as a dense `S x A x S` tensor;
//! rewards are deterministic and live in `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::StreamRng;

/// Maximum allowed deviation of a transition row sum from one.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// A finite MDP with deterministic rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpWire", into = "MdpWire")]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    /// Row-major `[s][a][s']`.
    transitions: Vec<f64>,
    /// Row-major `[s][a]`.
    rewards: Vec<f64>,
    initial_states: Vec<usize>,
}

/// JSON layout: `{"s":S,"a":A,"p":[[[..]]],"r":[[..]],"s1":[..]}`.
#[derive(Serialize, Deserialize)]
struct MdpWire {
    s: usize,
    a: usize,
    p: Vec<Vec<Vec<f64>>>,
    r: Vec<Vec<f64>>,
    s1: Vec<usize>,
}

impl TryFrom<MdpWire> for TabularMdp {
    type Error = Error;

    fn try_from(w: MdpWire) -> Result<Self> {
        TabularMdp::from_nested(w.s, w.a, &w.p, &w.r, w.s1)
    }
}

impl From<TabularMdp> for MdpWire {
    fn from(m: TabularMdp) -> Self {
        let (s_n, a_n) = (m.num_states, m.num_actions);
        let p = (0..s_n)
            .map(|s| (0..a_n).map(|a| m.transition_row(s, a).to_vec()).collect())
            .collect();
        let r = (0..s_n)
            .map(|s| m.rewards[s * a_n..(s + 1) * a_n].to_vec())
            .collect();
        MdpWire {
            s: s_n,
            a: a_n,
            p,
            r,
            s1: m.initial_states,
        }
    }
}

impl TabularMdp {
    /// Builds an MDP from flat row-major arrays, validating every invariant.
    pub fn new(
        num_states: usize,
        num_actions: usize,
        transitions: Vec<f64>,
        rewards: Vec<f64>,
        initial_states: Vec<usize>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::invalid(
                "num_states and num_actions must be positive",
            ));
        }
        if transitions.len() != num_states * num_actions * num_states {
            return Err(Error::invalid(format!(
                "transition tensor has {} entries, expected {}",
                transitions.len(),
                num_states * num_actions * num_states
            )));
        }
        if rewards.len() != num_states * num_actions {
            return Err(Error::invalid(format!(
                "reward table has {} entries, expected {}",
                rewards.len(),
                num_states * num_actions
            )));
        }
        for (row_idx, row) in transitions.chunks(num_states).enumerate() {
            let (s, a) = (row_idx / num_actions, row_idx % num_actions);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::invalid(format!(
                    "transition row ({s},{a}) has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::invalid(format!(
                    "transition row ({s},{a}) sums to {sum}"
                )));
            }
        }
        if let Some(i) = rewards
            .iter()
            .position(|r| !r.is_finite() || !(0.0..=1.0).contains(r))
        {
            return Err(Error::invalid(format!(
                "reward ({},{}) = {} outside [0,1]",
                i / num_actions,
                i % num_actions,
                rewards[i]
            )));
        }
        if initial_states.is_empty() {
            return Err(Error::invalid("initial_states must be nonempty"));
        }
        if let Some(&s) = initial_states.iter().find(|&&s| s >= num_states) {
            return Err(Error::invalid(format!("initial state {s} out of range")));
        }
        Ok(Self {
            num_states,
            num_actions,
            transitions,
            rewards,
            initial_states,
        })
    }

    /// Builds an MDP from nested `[s][a][s']` / `[s][a]` arrays.
    pub fn from_nested(
        num_states: usize,
        num_actions: usize,
        transitions: &[Vec<Vec<f64>>],
        rewards: &[Vec<f64>],
        initial_states: Vec<usize>,
    ) -> Result<Self> {
        let shape_err = || Error::invalid("nested arrays do not match the declared dimensions");
        if transitions.len() != num_states || rewards.len() != num_states {
            return Err(shape_err());
        }
        let mut flat_p = Vec::with_capacity(num_states * num_actions * num_states);
        for per_state in transitions {
            if per_state.len() != num_actions {
                return Err(shape_err());
            }
            for row in per_state {
                if row.len() != num_states {
                    return Err(shape_err());
                }
                flat_p.extend_from_slice(row);
            }
        }
        let mut flat_r = Vec::with_capacity(num_states * num_actions);
        for row in rewards {
            if row.len() != num_actions {
                return Err(shape_err());
            }
            flat_r.extend_from_slice(row);
        }
        Self::new(num_states, num_actions, flat_p, flat_r, initial_states)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// `P(. | s, a)` as a slice of length `S`.
    #[inline]
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.num_actions + a) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    #[inline]
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.num_actions + a]
    }

    pub fn initial_states(&self) -> &[usize] {
        &self.initial_states
    }

    /// Start state of `agent`. A single-entry list is shared by every agent.
    pub fn initial_state(&self, agent: usize) -> usize {
        if self.initial_states.len() == 1 {
            self.initial_states[0]
        } else {
            self.initial_states[agent]
        }
    }

    /// Checks that the initial-state list covers `num_agents` agents.
    pub fn check_agents(&self, num_agents: usize) -> Result<()> {
        let n = self.initial_states.len();
        if n == 1 || n >= num_agents {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "MDP lists {n} initial states but {num_agents} agents were requested"
            )))
        }
    }

    /// Replaces the initial states.
    pub fn with_initial_states(mut self, initial_states: Vec<usize>) -> Result<Self> {
        if initial_states.is_empty() || initial_states.iter().any(|&s| s >= self.num_states) {
            return Err(Error::invalid(
                "initial states must be nonempty and in range",
            ));
        }
        self.initial_states = initial_states;
        Ok(self)
    }

    /// `sum_{s'} P(s'|s,a) v(s')`.
    #[inline]
    pub fn expected_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.transition_row(s, a)
            .iter()
            .zip(v)
            .map(|(p, x)| p * x)
            .sum()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("MDP serialization cannot fail")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()).map_err(|e| Error::io(path, e))
    }
}

/// Parameters of the random MDP class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpSampler {
    /// Symmetric Dirichlet concentration for every transition row.
    pub concentration: f64,
}

impl Default for MdpSampler {
    fn default() -> Self {
        Self { concentration: 1.0 }
    }
}

impl MdpSampler {
    /// Draws an MDP: Dirichlet transition rows (normalized Gamma draws) and
    /// `Uniform[0,1]` rewards, all agents starting in state 0.
    pub fn sample(&self, seed: u64, num_states: usize, num_actions: usize) -> Result<TabularMdp> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::invalid(
                "num_states and num_actions must be positive",
            ));
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return Err(Error::invalid("Dirichlet concentration must be positive"));
        }
        let gamma = Gamma::new(self.concentration, 1.0)
            .map_err(|e| Error::invalid(format!("gamma distribution: {e}")))?;
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut transitions = Vec::with_capacity(num_states * num_actions * num_states);
        let mut row = vec![0.0; num_states];
        for _ in 0..num_states * num_actions {
            loop {
                for x in row.iter_mut() {
                    *x = gamma.sample(&mut rng);
                }
                let sum: f64 = row.iter().sum();
                if sum > 0.0 && sum.is_finite() {
                    transitions.extend(row.iter().map(|x| x / sum));
                    break;
                }
            }
        }
        let rewards = (0..num_states * num_actions)
            .map(|_| rng.random::<f64>())
            .collect();
        TabularMdp::new(num_states, num_actions, transitions, rewards, vec![0])
    }
}

/// Draws a random MDP with all-ones Dirichlet rows and uniform rewards.
pub fn sample_random_mdp(seed: u64, num_states: usize, num_actions: usize) -> Result<TabularMdp> {
    MdpSampler::default().sample(seed, num_states, num_actions)
}

/// Simulates one transition. The next state is drawn by inverse CDF over
/// ascending state index.
pub fn step<R: Rng + ?Sized>(
    mdp: &TabularMdp,
    state: usize,
    action: usize,
    rng: &mut R,
) -> Result<(f64, usize)> {
    if state >= mdp.num_states || action >= mdp.num_actions {
        return Err(Error::invalid(format!(
            "state/action ({state},{action}) out of range for {}x{} MDP",
            mdp.num_states, mdp.num_actions
        )));
    }
    Ok((
        mdp.reward(state, action),
        sample_next(mdp.transition_row(state, action), rng),
    ))
}

#[inline]
fn sample_next<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, p) in row.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    // rounding left u above the final partial sum
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// One simulated transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// A chained sequence of transitions generated by one agent in one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub agent_id: usize,
    pub episode_index: usize,
    pub steps: Vec<Step>,
}

/// Rolls out `len` steps from `start`, asking `policy(t, state, rng)` for
/// each action.
pub fn rollout<R, F>(
    mdp: &TabularMdp,
    start: usize,
    len: usize,
    agent_id: usize,
    episode_index: usize,
    rng: &mut R,
    mut policy: F,
) -> Result<Trajectory>
where
    R: Rng + ?Sized,
    F: FnMut(usize, usize, &mut R) -> usize,
{
    let mut steps = Vec::with_capacity(len);
    let mut state = start;
    for t in 0..len {
        let action = policy(t, state, rng);
        let (reward, next_state) = step(mdp, state, action, rng)?;
        steps.push(Step {
            state,
            action,
            reward,
            next_state,
        });
        state = next_state;
    }
    Ok(Trajectory {
        agent_id,
        episode_index,
        steps,
    })
}
