//! `dcsa` command-line driver.
//!
//! Exit status: 0 on success, 1 on invalid input, 2 when a run aborts on a
//! non-finite iterate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcsa::algorithm::{
    admissible_step_check, lemma4_residual, MetricsRecord, RunOutput, Scenario,
    LEMMA4_MIN_REPLICATES,
};
use dcsa::config::{load_config, ScenarioConfig, ScenarioKind};
use dcsa::experiments::{
    attach_lemma4, average_trajectories, build_scenario, fit_rate, greedy_policy_rollout,
    load_mazes, plateau_level, run_ensemble, seed_ensemble, Metric, RateFit, Threads,
};
use dcsa::operators::{estimate_mean_field, fixed_point_oracle};
use dcsa::output::{emit_metrics, emit_summary, load_metrics, summary_json, RunAnalysis};
use dcsa::rng::{derive_agent_stream, Purpose};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "dcsa",
    version,
    about = "Decentralized stochastic approximation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.csv, summary.json and theta.json.
    Run(RunArgs),
    /// Report step-size admissibility and probed problem constants.
    Check(ScenarioArgs),
    /// Fit the log-log rate and plateau of an existing metrics CSV.
    Fit(FitArgs),
    /// Follow the greedy policy of a saved iterate on every maze.
    Rollout(RolloutArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the logging stride in the config.
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// `1` for a single worker, `auto` for one per core.
    #[arg(long, default_value = "1", value_parser = parse_threads)]
    threads: Threads,
    /// Number of consecutive seeds to average, starting at the config seed.
    #[arg(long, default_value_t = 1)]
    replicates: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    R,
    S,
    Td,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::R => Metric::R,
            MetricArg::S => Metric::S,
            MetricArg::Td => Metric::Td,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Metrics CSV written by `run`.
    csv: PathBuf,
    #[arg(long, value_enum, default_value = "r")]
    metric: MetricArg,
    /// First iteration of the fit window; defaults to a hundredth of the last.
    #[arg(long)]
    from: Option<usize>,
    #[arg(long)]
    to: Option<usize>,
    /// Trailing fraction of the horizon used for the plateau.
    #[arg(long, default_value_t = 0.5)]
    tail: f64,
}

#[derive(Args)]
struct RolloutArgs {
    #[arg(long)]
    config: PathBuf,
    /// `theta.json` written by `run`.
    #[arg(long)]
    theta: PathBuf,
    #[arg(long, default_value_t = 25)]
    max_steps: usize,
}

fn parse_threads(s: &str) -> Result<Threads, String> {
    match s {
        "1" => Ok(Threads::Single),
        "auto" => Ok(Threads::Auto),
        other => Err(format!("expected 1 or auto, got {other:?}")),
    }
}

enum Failure {
    Invalid(String),
    Aborted(String),
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Invalid(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(&a),
        Command::Check(a) => cmd_check(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Rollout(a) => cmd_rollout(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Aborted(msg)) => {
            eprintln!("aborted: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load(args: &ScenarioArgs) -> Result<(ScenarioConfig, Scenario), Failure> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(stride) = args.stride {
        cfg.stride = stride;
    }
    cfg.validate()?;
    let scenario = build_scenario(&cfg)?;
    Ok((cfg, scenario))
}

/// Rate window `[horizon/100, horizon]`, when it spans a decade.
fn default_window(last_k: usize) -> Option<(usize, usize)> {
    let lo = (last_k / 100).max(1);
    (last_k >= 10 * lo).then_some((lo, last_k))
}

fn primary_metric(cfg: &ScenarioConfig) -> Metric {
    match cfg.scenario {
        ScenarioKind::SystemId => Metric::R,
        ScenarioKind::Gridworld => Metric::Td,
    }
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let (cfg, scenario) = load(&args.scenario)?;
    if args.replicates == 0 {
        return Err(Failure::Invalid("replicates must be ≥ 1".into()));
    }
    let mut base = scenario;
    let ensemble_check =
        args.replicates as usize >= LEMMA4_MIN_REPLICATES && base.rate_constants()?.is_some();
    base.record_series = ensemble_check;
    let seeds = cfg.seed..cfg.seed + args.replicates;
    let outputs: Vec<RunOutput> = run_ensemble(&seed_ensemble(&base, seeds), args.threads)
        .into_iter()
        .collect::<Result<_, _>>()?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", args.out.display())))?;
    let aborted = outputs.iter().find_map(|o| o.summary.aborted.clone());
    let mut records = if aborted.is_some() || outputs.len() == 1 {
        // keep the diagnostic record of the failing run
        let idx = outputs
            .iter()
            .position(|o| o.summary.aborted.is_some())
            .unwrap_or(0);
        outputs[idx].records.clone()
    } else {
        average_trajectories(
            &outputs
                .iter()
                .map(|o| o.records.clone())
                .collect::<Vec<_>>(),
        )?
    };
    if ensemble_check && aborted.is_none() {
        let rc = base.rate_constants()?.expect("checked above");
        let series: Vec<_> = outputs.iter().filter_map(|o| o.series.clone()).collect();
        let ks: Vec<usize> = records.iter().map(|r| r.k).collect();
        let points = lemma4_residual(&series, &rc, &base.schedule, &base.mixing, &ks)?;
        attach_lemma4(&mut records, &points);
    }
    emit_metrics(&records, &args.out.join("metrics.csv"))?;
    write_theta(&outputs[0], &args.out.join("theta.json"))?;
    for w in outputs.iter().flat_map(|o| &o.summary.warnings) {
        eprintln!("warning: {w}");
    }

    let analysis = analyse(&cfg, &base, &records, &outputs[0])?;
    emit_summary(&analysis, &args.out.join("summary.json"))?;
    println!("{}", summary_json(&analysis));
    match aborted {
        Some(msg) => Err(Failure::Aborted(msg)),
        None => Ok(()),
    }
}

fn write_theta(out: &RunOutput, path: &Path) -> Result<(), Failure> {
    let value = json!({ "mean": out.final_state.mean(), "agents": out.final_state.rows() });
    std::fs::write(path, serde_json::to_string_pretty(&value)?)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn analyse(
    cfg: &ScenarioConfig,
    sc: &Scenario,
    records: &[MetricsRecord],
    first: &RunOutput,
) -> Result<RunAnalysis, Failure> {
    let metric = primary_metric(cfg);
    let last_k = records.last().map_or(0, |r| r.k);
    let fit: Option<RateFit> =
        default_window(last_k).and_then(|(lo, hi)| fit_rate(records, metric, lo..=hi).ok());
    let plateau = plateau_level(records, metric, 0.5).ok();
    let solved_mazes = match cfg.scenario {
        ScenarioKind::Gridworld => {
            let mean = first.final_state.mean();
            let mut solved = 0;
            for maze in load_mazes(cfg)? {
                if greedy_policy_rollout(&mean, &maze, maze.n_cells())?.reached {
                    solved += 1;
                }
            }
            Some(solved)
        }
        ScenarioKind::SystemId => None,
    };
    let admissibility = sc
        .rate_constants()?
        .map(|rc| admissible_step_check(&rc, &sc.schedule, &sc.mixing, sc.horizon));
    Ok(RunAnalysis {
        scenario: sc.name.clone(),
        seed: cfg.seed,
        slope: fit.map(|f| f.slope),
        r2: fit.map(|f| f.r2),
        plateau,
        solved_mazes,
        admissibility,
    })
}

fn cmd_check(args: &ScenarioArgs) -> Result<(), Failure> {
    let (_, sc) = load(args)?;
    let sigma2 = sc.topology.sigma2()?;
    let root = match &sc.problem.theta_star {
        Some(ts) => Some(ts.clone()),
        None => fixed_point_oracle(&sc.problem).ok().map(|fp| fp.theta),
    };
    let root_residual = match &root {
        Some(ts) => Some(root_check(&sc, ts.as_slice())?),
        None => None,
    };
    let rc = sc.rate_constants()?;
    let report = json!({
        "scenario": sc.name,
        "agents": sc.n_agents(),
        "dim": sc.problem.dim(),
        "sigma2": sigma2,
        "mixing": sc.mixing,
        "constants": sc.constants,
        "rate_constants": rc,
        "step_bound": rc.map(|r| r.step_bound()),
        "consensus_step_bound": rc.map(|r| r.consensus_step_bound()),
        "root_residual": root_residual,
        "admissibility": rc.map(|r| admissible_step_check(&r, &sc.schedule, &sc.mixing, sc.horizon)),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

/// `‖Σᵢ F̄ᵢ(θ*)‖`, exact for finite observation laws and otherwise a Monte
/// Carlo estimate with its standard error.
fn root_check(sc: &Scenario, root: &[f64]) -> Result<serde_json::Value, Failure> {
    if let Ok(exact) = sc.problem.root_residual(root) {
        return Ok(json!({ "method": "exact", "norm": exact }));
    }
    let d = sc.problem.dim();
    let mut total = vec![0.0; d];
    let mut var = vec![0.0; d];
    for (i, (op, src)) in sc
        .problem
        .operators
        .iter()
        .zip(&sc.problem.sources)
        .enumerate()
    {
        let mut src = src.clone();
        let mut rng = derive_agent_stream(sc.seed, i as u64, Purpose::Probe);
        let (mean, se) = estimate_mean_field(op.as_ref(), &mut src, root, ROOT_SAMPLES, &mut rng)?;
        for c in 0..d {
            total[c] += mean[c];
            var[c] += se[c] * se[c];
        }
    }
    let norm = total.iter().map(|v| v * v).sum::<f64>().sqrt();
    let std_err = var.iter().sum::<f64>().sqrt();
    Ok(
        json!({ "method": "monte_carlo", "samples": ROOT_SAMPLES, "norm": norm, "std_err": std_err }),
    )
}

const ROOT_SAMPLES: usize = 100_000;

fn cmd_fit(args: &FitArgs) -> Result<(), Failure> {
    let records = load_metrics(&args.csv)?;
    let last_k = records.last().map_or(0, |r| r.k);
    let (lo, hi) = match (args.from, args.to) {
        (Some(lo), Some(hi)) => (lo, hi),
        (lo, hi) => {
            let (dlo, dhi) = default_window(last_k).ok_or_else(|| {
                Failure::Invalid(format!(
                    "last iteration {last_k} is too short for a rate fit"
                ))
            })?;
            (lo.unwrap_or(dlo), hi.unwrap_or(dhi))
        }
    };
    let metric = Metric::from(args.metric);
    let fit = fit_rate(&records, metric, lo..=hi)?;
    let plateau = plateau_level(&records, metric, args.tail).ok();
    let report = json!({ "metric": metric, "from": lo, "to": hi, "slope": fit.slope, "r2": fit.r2, "plateau": plateau });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_rollout(args: &RolloutArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    if cfg.scenario != ScenarioKind::Gridworld {
        return Err(Failure::Invalid("rollout needs a gridworld config".into()));
    }
    let text = std::fs::read_to_string(&args.theta)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", args.theta.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let theta: Vec<f64> = serde_json::from_value(value.get("mean").cloned().unwrap_or(value))?;
    let mut reports = Vec::new();
    let mut solved = 0;
    for (i, maze) in load_mazes(&cfg)?.iter().enumerate() {
        let r = greedy_policy_rollout(&theta, maze, args.max_steps)?;
        solved += usize::from(r.reached);
        reports.push(json!({
            "maze": cfg.maze_path(i),
            "reached": r.reached,
            "steps": r.path.len() - 1,
            "path": r.path,
        }));
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({ "solved_mazes": solved, "rollouts": reports }))?
    );
    Ok(())
}
