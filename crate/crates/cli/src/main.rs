//! `crlsvi`: run concurrent RLSVI experiments from the command line.
//!
//! Settings are resolved as flags > `RLSVI_*` environment variables >
//! `--config` file > built-in defaults.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use concurrent_rlsvi::aggregation::Objective;
use concurrent_rlsvi::harness::{
    emit_plot, run_sweep, summary_csv, write_finite_trace, write_infinite_trace, write_sweep,
    ExperimentConfig, Mode, SweepSummary,
};
use concurrent_rlsvi::mdp::{MdpSampler, TabularMdp};
use concurrent_rlsvi::regret::{finite_regret, infinite_regret, segmentation_seed};
use concurrent_rlsvi::rlsvi::finite::{run_finite, TerminalValue};
use concurrent_rlsvi::rlsvi::infinite::{run_infinite, InfiniteParams};
use concurrent_rlsvi::rlsvi::{BufferMode, UpdateMode};
use concurrent_rlsvi::solver::{backward_induction, discounted_value_iteration, DEFAULT_VI_TOL};
use concurrent_rlsvi::Error;

#[derive(Parser)]
#[command(
    name = "crlsvi",
    version,
    about = "Concurrent RLSVI experiments on tabular MDPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-horizon learner on one MDP, once per agent count.
    Finite(RunArgs),
    /// Pseudo-episode learner on one MDP, once per agent count.
    Infinite(RunArgs),
    /// Worst-case regret sweep over sampled MDPs and agent counts.
    Sweep(SweepArgs),
    /// Redraw the regret plot from a `summary.json`.
    Plot(PlotArgs),
    /// Print exact optimal values and policy of an MDP.
    Solve(SolveArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BufferArg {
    OneEpisode,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum UpdateArg {
    Appendix,
    Minimizer,
}

#[derive(Clone, Copy, ValueEnum)]
enum TerminalArg {
    Zero,
    Horizon,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Finite,
    Infinite,
}

#[derive(Args)]
struct Settings {
    /// JSON config file; flags and environment override its keys.
    #[arg(long, env = "RLSVI_CONFIG")]
    config: Option<PathBuf>,
    /// Episodes per run (finite).
    #[arg(long, env = "RLSVI_K")]
    k: Option<usize>,
    /// Horizon (finite).
    #[arg(long, env = "RLSVI_H")]
    h: Option<usize>,
    /// Time steps (infinite).
    #[arg(long, env = "RLSVI_T")]
    t: Option<usize>,
    #[arg(long, env = "RLSVI_S")]
    s: Option<usize>,
    #[arg(long, env = "RLSVI_A")]
    a: Option<usize>,
    /// Comma-separated agent counts, e.g. 1,3,5,10,20.
    #[arg(long, env = "RLSVI_N_LIST", value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    #[arg(long, env = "RLSVI_INSTANCES")]
    instances: Option<usize>,
    /// Independent re-runs averaged per instance (infinite).
    #[arg(long, env = "RLSVI_SEGMENTATIONS")]
    segmentations: Option<usize>,
    #[arg(long, env = "RLSVI_ETA")]
    eta: Option<f64>,
    #[arg(long, env = "RLSVI_DELTA")]
    delta: Option<f64>,
    /// Aggregation tolerance; 0 means the identity aggregation.
    #[arg(long, env = "RLSVI_EPSILON")]
    epsilon: Option<f64>,
    #[arg(long, env = "RLSVI_TAU")]
    tau: Option<f64>,
    #[arg(long, env = "RLSVI_BUFFER", value_enum)]
    buffer: Option<BufferArg>,
    #[arg(long, env = "RLSVI_UPDATE_MODE", value_enum)]
    update_mode: Option<UpdateArg>,
    /// Terminal value of the finite backward pass.
    #[arg(long, env = "RLSVI_TERMINAL", value_enum)]
    terminal: Option<TerminalArg>,
    #[arg(long, env = "RLSVI_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "RLSVI_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, env = "RLSVI_THREADS")]
    threads: Option<usize>,
    /// Multiplier on the noise scale beta.
    #[arg(long, env = "RLSVI_BETA_SCALE")]
    beta_scale: Option<f64>,
    /// Multiplier on the statistical part of the optimism bonus xi.
    #[arg(long, env = "RLSVI_XI_SCALE")]
    xi_scale: Option<f64>,
    /// Dirichlet concentration of sampled transition rows.
    #[arg(long, env = "RLSVI_CONCENTRATION")]
    concentration: Option<f64>,
    /// Sample a fresh MDP per agent count instead of sharing instances.
    #[arg(long, env = "RLSVI_UNPAIRED")]
    unpaired: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    settings: Settings,
    /// MDP JSON file; sampled from the seed when absent.
    #[arg(long)]
    mdp: Option<PathBuf>,
    /// Write a JSON-lines trace, one record per (episode, agent). Needs a
    /// single agent count.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    settings: Settings,
    #[arg(long, env = "RLSVI_MODE", value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct PlotArgs {
    /// `summary.json` written by `sweep`.
    #[arg(long)]
    summary: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args)]
struct SolveArgs {
    /// MDP JSON file.
    #[arg(long, conflicts_with = "sample")]
    mdp: Option<PathBuf>,
    /// Sample a random MDP with the given --s, --a and --seed.
    #[arg(long)]
    sample: bool,
    #[arg(long, default_value_t = 5)]
    s: usize,
    #[arg(long, default_value_t = 5)]
    a: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Finite horizon; mutually exclusive with --eta.
    #[arg(long, conflicts_with = "eta")]
    h: Option<usize>,
    /// Discount factor.
    #[arg(long)]
    eta: Option<f64>,
    /// Also save the (sampled) MDP here.
    #[arg(long)]
    save_mdp: Option<PathBuf>,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } => 3,
            Error::Numerical(_) => 1,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 3,
        message: format!("I/O error at {}: {e}", path.display()),
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

impl Settings {
    fn resolve(&self, mode: Option<Mode>) -> Result<ExperimentConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = mode {
            c.mode = m;
        }
        macro_rules! set {
            ($($field:ident => $key:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$key = v; })*
            };
        }
        set!(k => k, h => h, t => t, s => s, a => a, n_list => n, instances => instances,
            segmentations => segmentations, eta => eta, delta => delta, seed => seed,
            out_dir => out_dir, threads => threads, beta_scale => beta_scale,
            xi_scale => xi_scale, concentration => concentration);
        if self.epsilon.is_some() {
            c.epsilon = self.epsilon;
        }
        if self.tau.is_some() {
            c.tau = self.tau;
        }
        if let Some(b) = self.buffer {
            c.buffer = match b {
                BufferArg::OneEpisode => BufferMode::OneEpisode,
                BufferArg::Full => BufferMode::FullHistory,
            };
        }
        if let Some(u) = self.update_mode {
            c.update_mode = match u {
                UpdateArg::Appendix => UpdateMode::Appendix,
                UpdateArg::Minimizer => UpdateMode::Minimizer,
            };
        }
        if let Some(t) = self.terminal {
            c.terminal = match t {
                TerminalArg::Zero => TerminalValue::Zero,
                TerminalArg::Horizon => TerminalValue::Horizon,
            };
        }
        if self.unpaired {
            c.paired = false;
        }
        c.validate()?;
        Ok(c)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_failure(path, e))
}

fn single_runs(args: &RunArgs, mode: Mode) -> Result<(), Failure> {
    let config = args.settings.resolve(Some(mode))?;
    if args.trace.is_some() && config.n.len() != 1 {
        return Err(usage("--trace needs exactly one agent count in --n-list"));
    }
    let file_mdp = args.mdp.as_ref().map(TabularMdp::load).transpose()?;
    for &n in &config.n {
        let mdp = match &file_mdp {
            Some(m) => m.clone(),
            None => config.sample_instance(n, 0)?,
        };
        let agg = config.aggregation(&mdp)?;
        let seed = config.learning_seed(n, 0);
        let report = match mode {
            Mode::Finite => {
                let run = run_finite(&mdp, &agg, &config.finite_params(n, seed))?;
                if let Some(path) = &args.trace {
                    let mut out = create(path)?;
                    write_finite_trace(&run, &mut out)?;
                    out.flush().map_err(|e| io_failure(path, e))?;
                }
                finite_regret(&mdp, &run, config.h, n)?
            }
            Mode::Infinite => {
                let params = config.infinite_params(n, seed);
                if let Some(path) = &args.trace {
                    let first = InfiniteParams {
                        seed: segmentation_seed(seed, 0),
                        ..params.clone()
                    };
                    let run = run_infinite(&mdp, &agg, &first)?;
                    let mut out = create(path)?;
                    write_infinite_trace(&run, &mut out)?;
                    out.flush().map_err(|e| io_failure(path, e))?;
                }
                infinite_regret(&mdp, &agg, &params, config.segmentations)?
            }
        };
        let line = serde_json::json!({
            "mode": mode,
            "n_agents": n,
            "seed": seed,
            "total_regret": report.total_regret,
            "per_agent_regret": report.per_agent_regret,
            "per_episode": report.per_episode,
        });
        println!("{line}");
    }
    Ok(())
}

fn sweep(args: &SweepArgs) -> Result<(), Failure> {
    let mode = args.mode.map(|m| match m {
        ModeArg::Finite => Mode::Finite,
        ModeArg::Infinite => Mode::Infinite,
    });
    let config = args.settings.resolve(mode)?;
    let result = run_sweep(&config)?;
    let paths = write_sweep(&config, &result)?;
    print!("{}", summary_csv(&result.summary));
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.summary).map_err(|e| io_failure(&args.summary, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(Error::from)?;
    let summary_value = value.get("summary").cloned().unwrap_or(value);
    let summary: SweepSummary = serde_json::from_value(summary_value).map_err(Error::from)?;
    emit_plot(&summary, &args.output)?;
    Ok(())
}

fn solve(args: &SolveArgs) -> Result<(), Failure> {
    let mdp = match (&args.mdp, args.sample) {
        (Some(path), _) => TabularMdp::load(path)?,
        (None, true) => MdpSampler::default().sample(args.seed, args.s, args.a)?,
        (None, false) => return Err(usage("give --mdp <file> or --sample")),
    };
    if let Some(path) = &args.save_mdp {
        mdp.save(path)?;
    }
    let objective = match (args.h, args.eta) {
        (Some(h), None) => Objective::Finite { horizon: h },
        (None, Some(eta)) => Objective::Discounted { eta },
        _ => return Err(usage("give exactly one of --h or --eta")),
    };
    let out = match objective {
        Objective::Finite { horizon } => {
            let sol = backward_induction(&mdp, horizon)?;
            serde_json::json!({
                "h": horizon,
                "v": sol.v,
                "q": sol.q,
                "policy": sol.greedy_policy(),
            })
        }
        Objective::Discounted { eta } => {
            let sol = discounted_value_iteration(&mdp, eta, DEFAULT_VI_TOL)?;
            serde_json::json!({
                "eta": eta,
                "v": sol.v,
                "q": sol.q,
                "policy": sol.greedy_policy(),
                "sweeps": sol.sweeps,
            })
        }
    };
    println!("{out}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Finite(args) => single_runs(args, Mode::Finite),
        Command::Infinite(args) => single_runs(args, Mode::Infinite),
        Command::Sweep(args) => sweep(args),
        Command::Plot(args) => plot(args),
        Command::Solve(args) => solve(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
