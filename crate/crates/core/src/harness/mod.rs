//! Experiment driver: sweeps the number of agents over a family of sampled
//! MDPs, reduces each agent count to its worst-case regret and writes CSV,
//! JSON and SVG outputs.

mod fit;
mod plot;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::aggregation::{
    build_epsilon_aggregation, identity_aggregation, Objective, StateAggregation,
};
use crate::error::{Error, Result};
use crate::mdp::{MdpSampler, TabularMdp};
use crate::regret::{finite_regret, infinite_regret, worst_case, RegretReport};
use crate::rlsvi::finite::{run_finite, FiniteParams, FiniteRunResult, TerminalValue};
use crate::rlsvi::infinite::{InfiniteParams, InfiniteRunResult};
use crate::rlsvi::{BufferMode, UpdateMode};
use crate::seeding::{derive_seed, Purpose};

pub use fit::{fit_reference, ReferenceFit};
pub use plot::{emit_plot, render_svg};

pub const INSTANCES_HEADER: &str =
    "mode,setting,n_agents,instance,seed,total_regret,per_agent_regret";
pub const SUMMARY_HEADER: &str =
    "mode,setting,n_agents,worst_case_total,worst_case_per_agent,fit_c,loglog_slope";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Finite,
    Infinite,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Finite => "finite",
            Mode::Infinite => "infinite",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finite" => Ok(Mode::Finite),
            "infinite" => Ok(Mode::Infinite),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(n) => vec![n],
        OneOrMany::Many(v) => v,
    })
}

/// Every knob of a run or sweep. Keys follow the CLI flag names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Episodes (finite).
    pub k: usize,
    /// Horizon (finite).
    pub h: usize,
    /// Time steps (infinite).
    pub t: usize,
    pub s: usize,
    pub a: usize,
    /// Agent counts; a single integer is accepted.
    #[serde(deserialize_with = "one_or_many", alias = "n_list")]
    pub n: Vec<usize>,
    pub instances: usize,
    /// Independent re-runs averaged per instance (infinite).
    pub segmentations: usize,
    pub eta: f64,
    pub delta: f64,
    /// Aggregation tolerance; absent or 0 means the identity aggregation.
    pub epsilon: Option<f64>,
    /// Defaults to `1 / (1 - eta)`.
    pub tau: Option<f64>,
    pub buffer: BufferMode,
    pub update_mode: UpdateMode,
    pub terminal: TerminalValue,
    pub seed: u64,
    /// Use the same MDP for instance `i` at every agent count.
    pub paired: bool,
    pub beta_scale: f64,
    pub xi_scale: f64,
    /// Dirichlet concentration of sampled transition rows.
    pub concentration: f64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Finite,
            k: 20,
            h: 30,
            t: 300,
            s: 5,
            a: 5,
            n: vec![1, 3, 5, 10, 20],
            instances: 50,
            segmentations: 10,
            eta: 0.99,
            delta: 0.05,
            epsilon: None,
            tau: None,
            buffer: BufferMode::OneEpisode,
            update_mode: UpdateMode::Appendix,
            terminal: TerminalValue::Zero,
            seed: 0,
            paired: true,
            beta_scale: 1.0,
            xi_scale: 1.0,
            concentration: 1.0,
            out_dir: PathBuf::from("results"),
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Collects every offending key instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                bad.push(msg.to_string());
            }
        };
        check(self.s >= 1, "s: must be at least 1");
        check(self.a >= 1, "a: must be at least 1");
        match self.mode {
            Mode::Finite => {
                check(self.k >= 1, "k: must be at least 1");
                check(self.h >= 1, "h: must be at least 1");
            }
            Mode::Infinite => {
                check(self.t >= 1, "t: must be at least 1");
                check(self.segmentations >= 1, "segmentations: must be at least 1");
                check((0.0..1.0).contains(&self.eta), "eta: must lie in [0, 1)");
                if let Some(tau) = self.tau {
                    check(tau > 0.0 && tau.is_finite(), "tau: must be positive");
                }
            }
        }
        check(!self.n.is_empty(), "n: needs at least one agent count");
        check(
            self.n.iter().all(|&n| n >= 1),
            "n: agent counts must be positive",
        );
        check(
            self.n.windows(2).all(|w| w[0] < w[1]),
            "n: agent counts must be strictly increasing",
        );
        check(self.instances >= 1, "instances: must be at least 1");
        check(
            self.delta > 0.0 && self.delta < 1.0,
            "delta: must lie in (0, 1)",
        );
        if let Some(eps) = self.epsilon {
            check(
                eps >= 0.0 && eps.is_finite(),
                "epsilon: must be nonnegative",
            );
        }
        check(self.beta_scale >= 0.0, "beta_scale: must be nonnegative");
        check(self.xi_scale >= 0.0, "xi_scale: must be nonnegative");
        check(
            self.concentration > 0.0 && self.concentration.is_finite(),
            "concentration: must be positive",
        );
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }

    /// Short label of the MDP class, e.g. `K=20;H=30;S=5;A=5`.
    pub fn setting(&self) -> String {
        match self.mode {
            Mode::Finite => format!("K={};H={};S={};A={}", self.k, self.h, self.s, self.a),
            Mode::Infinite => format!("T={};S={};A={};eta={}", self.t, self.s, self.a, self.eta),
        }
    }

    pub fn objective(&self) -> Objective {
        match self.mode {
            Mode::Finite => Objective::Finite { horizon: self.h },
            Mode::Infinite => Objective::Discounted { eta: self.eta },
        }
    }

    /// Seed of the MDP used for instance `i` at agent count `n`.
    pub fn instance_seed(&self, n: usize, i: usize) -> u64 {
        if self.paired {
            derive_seed(self.seed, Purpose::Instance, &[i as u64])
        } else {
            derive_seed(self.seed, Purpose::Instance, &[i as u64, n as u64])
        }
    }

    /// Seed of the learner for instance `i` at agent count `n`.
    pub fn learning_seed(&self, n: usize, i: usize) -> u64 {
        derive_seed(self.seed, Purpose::Learning, &[n as u64, i as u64])
    }

    pub fn sample_instance(&self, n: usize, i: usize) -> Result<TabularMdp> {
        MdpSampler {
            concentration: self.concentration,
        }
        .sample(self.instance_seed(n, i), self.s, self.a)
    }

    /// Identity aggregation, or the greedy epsilon-aggregation of `mdp` when
    /// `epsilon > 0`.
    pub fn aggregation(&self, mdp: &TabularMdp) -> Result<StateAggregation> {
        match self.epsilon {
            Some(eps) if eps > 0.0 => build_epsilon_aggregation(mdp, self.objective(), eps),
            _ => {
                let horizon = match self.mode {
                    Mode::Finite => Some(self.h),
                    Mode::Infinite => None,
                };
                identity_aggregation(mdp.num_states(), mdp.num_actions(), horizon)
            }
        }
    }

    pub fn finite_params(&self, n: usize, seed: u64) -> FiniteParams {
        FiniteParams {
            buffer: self.buffer,
            update: self.update_mode,
            terminal: self.terminal,
            delta: self.delta,
            beta_scale: self.beta_scale,
            xi_scale: self.xi_scale,
            ..FiniteParams::new(self.k, self.h, n, seed)
        }
    }

    pub fn infinite_params(&self, n: usize, seed: u64) -> InfiniteParams {
        InfiniteParams {
            buffer: self.buffer,
            update: self.update_mode,
            delta: self.delta,
            tau: self.tau,
            beta_scale: self.beta_scale,
            xi_scale: self.xi_scale,
            ..InfiniteParams::new(self.t, n, self.eta, seed)
        }
    }
}

/// Regret of one instance at one agent count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub mode: Mode,
    pub setting: String,
    pub n_agents: usize,
    pub instance: usize,
    /// Seed of the sampled MDP.
    pub seed: u64,
    pub total_regret: f64,
    pub per_agent_regret: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n_agents: usize,
    pub worst_case_total: f64,
    pub worst_case_per_agent: f64,
    /// Instance attaining the worst case, and its MDP seed.
    pub worst_instance: usize,
    pub worst_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub mode: Mode,
    pub setting: String,
    pub rows: Vec<SummaryRow>,
    /// Absent when fewer than two agent counts or a nonpositive value.
    pub fit: Option<ReferenceFit>,
}

impl SweepSummary {
    pub fn from_instances(mode: Mode, setting: String, rows: &[InstanceRow]) -> Result<Self> {
        let mut counts: Vec<usize> = rows.iter().map(|r| r.n_agents).collect();
        counts.sort_unstable();
        counts.dedup();
        let mut out = Vec::with_capacity(counts.len());
        for n in counts {
            let group: Vec<&InstanceRow> = rows.iter().filter(|r| r.n_agents == n).collect();
            let reports: Vec<RegretReport> = group
                .iter()
                .map(|r| RegretReport {
                    total_regret: r.total_regret,
                    per_agent_regret: r.per_agent_regret,
                    per_episode: Vec::new(),
                    n_agents: n,
                    length: 0,
                    seed: r.instance as u64,
                })
                .collect();
            let w = worst_case(&reports)?;
            let idx = w.seed as usize;
            let row = group
                .iter()
                .find(|r| r.instance == idx)
                .expect("instance present");
            out.push(SummaryRow {
                n_agents: n,
                worst_case_total: w.total_regret,
                worst_case_per_agent: w.total_regret / n as f64,
                worst_instance: idx,
                worst_seed: row.seed,
            });
        }
        let points: Vec<(usize, f64)> = out
            .iter()
            .map(|r| (r.n_agents, r.worst_case_per_agent))
            .collect();
        let fit = fit_reference(&points).ok();
        Ok(Self {
            mode,
            setting,
            rows: out,
            fit,
        })
    }
}

/// Regret of one instance; used by the sweep and by single runs.
pub fn run_instance(config: &ExperimentConfig, n: usize, i: usize) -> Result<InstanceRow> {
    let mdp = config.sample_instance(n, i)?;
    let report = run_on_mdp(config, &mdp, n, config.learning_seed(n, i))?;
    Ok(InstanceRow {
        mode: config.mode,
        setting: config.setting(),
        n_agents: n,
        instance: i,
        seed: config.instance_seed(n, i),
        total_regret: report.total_regret,
        per_agent_regret: report.per_agent_regret,
    })
}

/// Runs the configured learner on a given MDP and returns its regret.
pub fn run_on_mdp(
    config: &ExperimentConfig,
    mdp: &TabularMdp,
    n: usize,
    seed: u64,
) -> Result<RegretReport> {
    let agg = config.aggregation(mdp)?;
    match config.mode {
        Mode::Finite => {
            let run = run_finite(mdp, &agg, &config.finite_params(n, seed))?;
            finite_regret(mdp, &run, config.h, n)
        }
        Mode::Infinite => infinite_regret(
            mdp,
            &agg,
            &config.infinite_params(n, seed),
            config.segmentations,
        ),
    }
}

/// Per-instance rows sorted by `(N, instance)` plus their reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub instances: Vec<InstanceRow>,
    pub summary: SweepSummary,
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

/// Runs every `(N, instance)` pair on a pool of `config.threads` workers.
/// Output does not depend on the thread count.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = config
        .n
        .iter()
        .flat_map(|&n| (0..config.instances).map(move |i| (n, i)))
        .collect();
    let pool = thread_pool(config.threads)?;
    let mut instances: Vec<InstanceRow> = pool.install(|| {
        jobs.par_iter()
            .map(|&(n, i)| run_instance(config, n, i))
            .collect::<Result<_>>()
    })?;
    instances.sort_by_key(|r| (r.n_agents, r.instance));
    let summary = SweepSummary::from_instances(config.mode, config.setting(), &instances)?;
    Ok(SweepResult { instances, summary })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `instances.csv` contents. Floats use the shortest round-trip form.
pub fn instances_csv(rows: &[InstanceRow]) -> String {
    let mut s = String::from(INSTANCES_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.mode, r.setting, r.n_agents, r.instance, r.seed, r.total_regret, r.per_agent_regret
        ));
    }
    s
}

/// `summary.csv` contents; the fit columns repeat on every row and are empty
/// when no fit exists.
pub fn summary_csv(summary: &SweepSummary) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    let (c, slope) = (summary.fit.map(|f| f.c), summary.fit.map(|f| f.slope));
    for r in &summary.rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            summary.mode,
            summary.setting,
            r.n_agents,
            r.worst_case_total,
            r.worst_case_per_agent,
            fmt_opt(c),
            fmt_opt(slope)
        ));
    }
    s
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `instances.csv`, `summary.csv`, `summary.json` and `regret.svg`
/// into `out_dir`, returning the written paths.
pub fn write_sweep(config: &ExperimentConfig, result: &SweepResult) -> Result<Vec<PathBuf>> {
    let dir = &config.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths: Vec<PathBuf> = ["instances.csv", "summary.csv", "summary.json", "regret.svg"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    write_file(&paths[0], &instances_csv(&result.instances))?;
    write_file(&paths[1], &summary_csv(&result.summary))?;
    let json = serde_json::to_string_pretty(&serde_json::json!({
        "config": config,
        "summary": result.summary,
    }))?;
    write_file(&paths[2], &json)?;
    emit_plot(&result.summary, &paths[3])?;
    Ok(paths)
}

#[derive(Serialize)]
struct FiniteTraceRecord<'a> {
    episode: usize,
    agent: usize,
    policy: &'a [Vec<usize>],
    states: Vec<usize>,
    actions: Vec<usize>,
    rewards: Vec<f64>,
    visit_counts: &'a [Vec<usize>],
    merged_q: &'a [f64],
}

#[derive(Serialize)]
struct InfiniteTraceRecord<'a> {
    episode: usize,
    agent: usize,
    start: usize,
    length: usize,
    policy: &'a [usize],
    visit_counts: &'a [usize],
    merged_q: &'a [f64],
}

/// One JSON line per `(episode, agent)`: the policy used, the trajectory it
/// produced and the merged table after the update that consumed it.
pub fn write_finite_trace(run: &FiniteRunResult, out: &mut impl Write) -> Result<()> {
    for (k, (pols, trajs)) in run.policies.iter().zip(&run.trajectories).enumerate() {
        let update = &run.updates[k + 1];
        for (p, (pol, traj)) in pols.iter().zip(trajs).enumerate() {
            let rec = FiniteTraceRecord {
                episode: k + 1,
                agent: p,
                policy: pol,
                states: traj.steps.iter().map(|s| s.state).collect(),
                actions: traj.steps.iter().map(|s| s.action).collect(),
                rewards: traj.steps.iter().map(|s| s.reward).collect(),
                visit_counts: &update.visit_counts,
                merged_q: update.merged.values(),
            };
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
    }
    Ok(())
}

pub fn write_infinite_trace(run: &InfiniteRunResult, out: &mut impl Write) -> Result<()> {
    for (k, pols) in run.policies.iter().enumerate() {
        let update = &run.updates[k + 1];
        for (p, pol) in pols.iter().enumerate() {
            let rec = InfiniteTraceRecord {
                episode: k + 1,
                agent: p,
                start: run.schedule.starts[k],
                length: run.schedule.lengths[k],
                policy: pol,
                visit_counts: &update.visit_counts,
                merged_q: update.merged.values(),
            };
            serde_json::to_writer(&mut *out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
    }
    Ok(())
}
