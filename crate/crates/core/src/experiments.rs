//! Scenario builders and rate diagnostics.
//!
//! Two workloads: decentralized robust system identification on AR
//! sources, and multi-task Q-learning where every agent explores its own
//! maze and all agents agree on one Q-function.

use std::ops::RangeInclusive;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithm::{
    run, AlgorithmError, Lemma4Point, MetricsRecord, RunOutput, Scenario, Topology,
};
use crate::config::{ConfigError, ScenarioConfig, ScenarioKind};
use crate::graph::{lazy_metropolis, metropolis_frame, GraphError, GraphSchedule};
use crate::markov::{
    fit_mixing_profile, Action, ArSource, Cell, MarkovError, Maze, MdpSource, MixingProfile,
    Observation, Source, Transition,
};
use crate::operators::{
    ball_point, estimate_constants, fixed_point_oracle, quadratic_constants, FeatureMap,
    OperatorConstants, OperatorError, ProbeGrid, ProblemSpec, QLearningOperator,
    QuadraticGradientOperator, SharedOperator,
};
use crate::rng::{derive_agent_stream, Purpose};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Algorithm(#[from] AlgorithmError),
    #[error("maze {path}: {source}")]
    Maze { path: String, source: MarkovError },
    #[error("{0}")]
    Fit(String),
    #[error("mazes differ in size: {0}")]
    MazeShape(String),
}

/// Stream id for draws shared by all agents.
const SHARED_STREAM: u64 = (1 << 56) - 1;

/// Lower and upper end of the AR subdiagonal entries.
pub const AR_ENTRY_RANGE: (f64, f64) = (0.8, 0.99);

fn topology(cfg: &ScenarioConfig) -> Result<Topology, ExperimentError> {
    Ok(match &cfg.time_varying {
        Some(tv) => {
            let schedule = GraphSchedule::new(tv.build(cfg.n_agents)?, tv.period_b)?;
            let weights = schedule.frames().iter().map(metropolis_frame).collect();
            Topology::Varying { schedule, weights }
        }
        None => Topology::Fixed(lazy_metropolis(&cfg.topology.build(cfg.n_agents)?)?),
    })
}

/// Subdiagonal `d × d` matrix with entries uniform on [`AR_ENTRY_RANGE`].
pub fn random_subdiagonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(d, d);
    for m in 1..d {
        a[(m, m - 1)] = rng.random_range(AR_ENTRY_RANGE.0..=AR_ENTRY_RANGE.1);
    }
    a
}

/// System identification: agent `i` observes its own AR process
/// `X(1) ← Aᵢ X(1) + clip(ξ) e₁`, `X(2) = ⟨u, X(1)⟩ + clip(ζ)` and runs the
/// squared-loss gradient. All agents share `u`, so `θ* = u`.
pub fn build_system_id_scenario(cfg: &ScenarioConfig) -> Result<Scenario, ExperimentError> {
    cfg.validate()?;
    let (n, d) = (cfg.n_agents, cfg.d);
    let mut shared = derive_agent_stream(cfg.seed, SHARED_STREAM, Purpose::Scenario);
    let u = DVector::from_vec(ball_point(d, 1.0, &mut shared));
    let mut sources = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = derive_agent_stream(cfg.seed, i as u64, Purpose::Scenario);
        sources.push(ArSource::new(
            random_subdiagonal(d, &mut rng),
            u.clone(),
            cfg.noise_clip,
        )?);
    }
    system_id_from_sources(cfg, sources)
}

/// System-identification scenario over explicit AR sources.
pub fn system_id_from_sources(
    cfg: &ScenarioConfig,
    sources: Vec<ArSource>,
) -> Result<Scenario, ExperimentError> {
    let n = sources.len();
    let refs: Vec<&ArSource> = sources.iter().collect();
    let constants = quadratic_constants(&refs);
    let mut beta = 0.0_f64;
    let mut rho = 0.0_f64;
    for src in &sources {
        let prof = src.mixing_profile(&cfg.mixing_grid, 1.0)?;
        beta = beta.max(prof.beta);
        rho = rho.max(prof.rho);
    }
    let ops: Vec<SharedOperator> = sources
        .iter()
        .map(|s| Arc::new(QuadraticGradientOperator::for_source(s)) as SharedOperator)
        .collect();
    let mut problem = ProblemSpec::new(
        ops,
        sources.into_iter().map(Source::Ar).collect(),
        constants.alpha,
    )?;
    problem.theta_star = Some(fixed_point_oracle(&problem)?.theta);
    let mut topo_cfg = cfg.clone();
    topo_cfg.n_agents = n;
    Ok(Scenario {
        name: "system_id".into(),
        problem,
        topology: topology(&topo_cfg)?,
        schedule: cfg.step,
        horizon: cfg.horizon,
        stride: cfg.stride,
        seed: cfg.seed,
        stream_ids: (0..n as u64).collect(),
        init: None,
        mixing: MixingProfile { m: 1.0, rho, beta },
        constants: Some(constants),
        eval_batches: None,
        record_series: false,
    })
}

/// Reads and parses every maze listed in the config.
pub fn load_mazes(cfg: &ScenarioConfig) -> Result<Vec<Maze>, ExperimentError> {
    (0..cfg.mazes.len())
        .map(|i| {
            let path = cfg.maze_path(i);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                ExperimentError::Config(ConfigError::Io {
                    path: path.clone(),
                    source: e,
                })
            })?;
            Maze::parse(&text).map_err(|source| ExperimentError::Maze {
                path: path.display().to_string(),
                source,
            })
        })
        .collect()
}

/// Multi-task Q-learning: agent `i` follows the uniform behaviour policy on
/// maze `i`; features are one-hot over (cell, action).
pub fn build_gridworld_scenario(
    cfg: &ScenarioConfig,
    mazes: &[Maze],
) -> Result<Scenario, ExperimentError> {
    let mut cfg = cfg.clone();
    cfg.scenario = ScenarioKind::Gridworld;
    cfg.n_agents = mazes.len();
    if cfg.mazes.len() != mazes.len() {
        cfg.mazes = (0..mazes.len())
            .map(|i| format!("maze{i}").into())
            .collect();
    }
    cfg.validate()?;
    let first = mazes
        .first()
        .ok_or_else(|| ExperimentError::MazeShape("no mazes".into()))?;
    let (w, h) = (first.width(), first.height());
    if let Some(bad) = mazes.iter().position(|m| m.width() != w || m.height() != h) {
        return Err(ExperimentError::MazeShape(format!(
            "maze {bad} is {}x{}, maze 0 is {w}x{h}",
            mazes[bad].width(),
            mazes[bad].height()
        )));
    }
    let n_states = w * h;
    let features = FeatureMap::tabular(n_states, Action::ALL.len());
    let op = Arc::new(QLearningOperator::new(features, cfg.gamma)?);
    let mut sources = Vec::with_capacity(mazes.len());
    let mut batches = Vec::with_capacity(mazes.len());
    let mut per_agent = Vec::with_capacity(mazes.len());
    let mut beta = 0.0_f64;
    let mut rho = 0.0_f64;
    let mut probe_rng = derive_agent_stream(cfg.seed, SHARED_STREAM, Purpose::Probe);
    let grid = ProbeGrid::standard(op.features().dim(), &mut probe_rng);
    for (i, maze) in mazes.iter().enumerate() {
        let mdp = Arc::new(maze.to_mdp());
        let (chain, _) = mdp.effective_chain()?;
        let prof = fit_mixing_profile(&chain, &cfg.mixing_grid)?;
        beta = beta.max(prof.beta);
        rho = rho.max(prof.rho);
        let law = mdp.stationary_transitions()?;
        let mut rng = derive_agent_stream(cfg.seed, i as u64, Purpose::Evaluation);
        let batch = sample_law(&law, cfg.eval_batch, &mut rng)?;
        let obs: Vec<Observation> = batch.iter().map(|t| Observation::Transition(*t)).collect();
        per_agent.push(estimate_constants(op.as_ref(), &obs, &grid)?);
        batches.push(batch);
        sources.push(Source::Mdp(MdpSource::new(mdp)));
    }
    let constants = OperatorConstants::aggregate(&per_agent);
    let ops: Vec<SharedOperator> = (0..mazes.len())
        .map(|_| op.clone() as SharedOperator)
        .collect();
    let problem = ProblemSpec::new(ops, sources, constants.alpha)?;
    let n = mazes.len();
    Ok(Scenario {
        name: "gridworld".into(),
        problem,
        topology: topology(&cfg)?,
        schedule: cfg.step,
        horizon: cfg.horizon,
        stride: cfg.stride,
        seed: cfg.seed,
        stream_ids: (0..n as u64).collect(),
        init: None,
        mixing: MixingProfile { m: 1.0, rho, beta },
        constants: Some(constants),
        eval_batches: Some(batches),
        record_series: false,
    })
}

/// Builds whichever scenario the config names, loading mazes from disk.
pub fn build_scenario(cfg: &ScenarioConfig) -> Result<Scenario, ExperimentError> {
    match cfg.scenario {
        ScenarioKind::SystemId => build_system_id_scenario(cfg),
        ScenarioKind::Gridworld => {
            cfg.validate()?;
            build_gridworld_scenario(cfg, &load_mazes(cfg)?)
        }
    }
}

fn sample_law<R: Rng + ?Sized>(
    law: &[(f64, Transition)],
    count: usize,
    rng: &mut R,
) -> Result<Vec<Transition>, ExperimentError> {
    let dist = WeightedIndex::new(law.iter().map(|(p, _)| *p))
        .map_err(|e| ExperimentError::Fit(format!("stationary law: {e}")))?;
    Ok((0..count).map(|_| law[dist.sample(rng)].1).collect())
}

/// `Q*` of a single maze by value iteration on its deterministic moves.
pub fn value_iteration(maze: &Maze, gamma: f64) -> Vec<f64> {
    let n_actions = Action::ALL.len();
    let n = maze.n_cells();
    let mut q = vec![0.0; n * n_actions];
    loop {
        let mut change = 0.0_f64;
        let mut next = q.clone();
        for s in 0..n {
            if matches!(maze.cell(s), Cell::Obstacle | Cell::Goal) {
                continue;
            }
            for (a, &action) in Action::ALL.iter().enumerate() {
                let (s2, r) = maze.step(s, action);
                let boot = if maze.cell(s2) == Cell::Goal {
                    0.0
                } else {
                    gamma
                        * (0..n_actions)
                            .map(|b| q[s2 * n_actions + b])
                            .fold(f64::NEG_INFINITY, f64::max)
                };
                let v = r + boot;
                change = change.max((v - q[s * n_actions + a]).abs());
                next[s * n_actions + a] = v;
            }
        }
        q = next;
        if change < 1e-12 {
            return q;
        }
    }
}

/// Which logged quantity to analyse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    R,
    S,
    Td,
}

impl Metric {
    pub fn get(&self, rec: &MetricsRecord) -> f64 {
        match self {
            Metric::R => rec.r,
            Metric::S => rec.s,
            Metric::Td => rec.td_error.unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub r2: f64,
}

/// Least-squares slope of `log value` against `log k`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<RateFit, ExperimentError> {
    if points.len() < 2 {
        return Err(ExperimentError::Fit(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if let Some((k, v)) = points
        .iter()
        .find(|(k, v)| !(*v > 0.0 && v.is_finite() && *k > 0.0))
    {
        return Err(ExperimentError::Fit(format!(
            "value {v} at k = {k} is not positive"
        )));
    }
    let xs: Vec<f64> = points.iter().map(|(k, _)| k.ln()).collect();
    // relative to the first value so that a flat sequence is exactly flat
    let y0 = points[0].1.ln();
    let ys: Vec<f64> = points.iter().map(|(_, v)| v.ln() - y0).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(ExperimentError::Fit("all k are equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy) / (sxx * syy)
    };
    Ok(RateFit { slope, r2 })
}

/// Log-log slope of `metric` over records with `k` in `window`. The window
/// must span at least one decade.
pub fn fit_rate(
    records: &[MetricsRecord],
    metric: Metric,
    window: RangeInclusive<usize>,
) -> Result<RateFit, ExperimentError> {
    let (lo, hi) = (*window.start(), *window.end());
    if lo == 0 || (hi as f64) < 10.0 * lo as f64 {
        return Err(ExperimentError::Fit(format!(
            "window [{lo}, {hi}] must start above 0 and span a decade"
        )));
    }
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| window.contains(&r.k))
        .map(|r| (r.k as f64, metric.get(r)))
        .collect();
    fit_power_law(&pts)
}

/// Median of `metric` over the trailing `tail_fraction` of the horizon.
pub fn plateau_level(
    records: &[MetricsRecord],
    metric: Metric,
    tail_fraction: f64,
) -> Result<f64, ExperimentError> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(ExperimentError::Fit(format!(
            "tail fraction {tail_fraction} must lie in (0, 1]"
        )));
    }
    let horizon = records.last().map_or(0, |r| r.k);
    let start = (horizon as f64 * (1.0 - tail_fraction)).floor() as usize;
    let mut tail: Vec<f64> = records
        .iter()
        .filter(|r| r.k >= start)
        .map(|r| metric.get(r))
        .collect();
    if tail.len() < 3 {
        return Err(ExperimentError::Fit(format!(
            "only {} records in the tail; horizon too short",
            tail.len()
        )));
    }
    tail.sort_by(f64::total_cmp);
    let m = tail.len();
    Ok(if m % 2 == 1 {
        tail[m / 2]
    } else {
        0.5 * (tail[m / 2 - 1] + tail[m / 2])
    })
}

/// Field-wise mean of runs logged at the same iterations, in run order.
/// Optional fields stay present only when present in every run.
pub fn average_trajectories(
    runs: &[Vec<MetricsRecord>],
) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let first = runs
        .first()
        .ok_or_else(|| ExperimentError::Fit("no runs to average".into()))?;
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(ExperimentError::Fit("runs have different lengths".into()));
    }
    let m = runs.len() as f64;
    let mean = |f: &dyn Fn(&MetricsRecord) -> f64, idx: usize| {
        runs.iter().map(|r| f(&r[idx])).sum::<f64>() / m
    };
    let mean_opt = |f: &dyn Fn(&MetricsRecord) -> Option<f64>, idx: usize| {
        runs.iter()
            .map(|r| f(&r[idx]))
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / m)
    };
    let mut out = Vec::with_capacity(first.len());
    for (idx, base) in first.iter().enumerate() {
        if runs.iter().any(|r| r[idx].k != base.k) {
            return Err(ExperimentError::Fit(format!(
                "runs are logged at different k (index {idx})"
            )));
        }
        out.push(MetricsRecord {
            k: base.k,
            eps_k: base.eps_k,
            tau_k: base.tau_k,
            r: mean(&|r| r.r, idx),
            s: mean(&|r| r.s, idx),
            s_delayed: mean(&|r| r.s_delayed, idx),
            v: mean(&|r| r.v, idx),
            td_error: mean_opt(&|r| r.td_error, idx),
            lemma3_slack: mean_opt(&|r| r.lemma3_slack, idx),
            lemma4_slack: mean_opt(&|r| r.lemma4_slack, idx),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollout {
    pub reached: bool,
    /// Visited cells as `(row, col)`, start included.
    pub path: Vec<(usize, usize)>,
}

/// Follows the greedy policy of tabular `θ` from the start cell.
pub fn greedy_policy_rollout(
    theta: &[f64],
    maze: &Maze,
    max_steps: usize,
) -> Result<Rollout, ExperimentError> {
    let n_actions = Action::ALL.len();
    if theta.len() != maze.n_cells() * n_actions {
        return Err(ExperimentError::Operator(OperatorError::Dimension {
            expected: maze.n_cells() * n_actions,
            got: theta.len(),
        }));
    }
    let mut s = maze.start();
    let mut path = vec![maze.coords(s)];
    for _ in 0..max_steps {
        let mut best = 0;
        for a in 1..n_actions {
            if theta[s * n_actions + a] > theta[s * n_actions + best] {
                best = a;
            }
        }
        s = maze.step(s, Action::ALL[best]).0;
        path.push(maze.coords(s));
        if maze.cell(s) == Cell::Goal {
            return Ok(Rollout {
                reached: true,
                path,
            });
        }
    }
    Ok(Rollout {
        reached: false,
        path,
    })
}

/// How many runs may execute at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Threads {
    Single,
    Auto,
}

/// Runs independent scenarios, in parallel when allowed. Results keep the
/// input order.
pub fn run_ensemble(
    scenarios: &[Scenario],
    threads: Threads,
) -> Vec<Result<RunOutput, AlgorithmError>> {
    let workers = match threads {
        Threads::Single => 1,
        Threads::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
    .min(scenarios.len().max(1));
    if workers <= 1 {
        return scenarios.iter().map(run).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<RunOutput, AlgorithmError>>> =
        (0..scenarios.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if idx >= scenarios.len() {
                    break;
                }
                let out = run(&scenarios[idx]);
                results.lock().expect("result lock")[idx] = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|r| r.expect("every scenario ran"))
        .collect()
}

/// Writes ensemble slacks into the `lemma4_slack` column of matching `k`.
pub fn attach_lemma4(records: &mut [MetricsRecord], points: &[Lemma4Point]) {
    for p in points {
        if let Ok(idx) = records.binary_search_by_key(&p.k, |r| r.k) {
            records[idx].lemma4_slack = Some(p.slack);
        }
    }
}

/// Copies of `base`, one per seed.
pub fn seed_ensemble(base: &Scenario, seeds: impl IntoIterator<Item = u64>) -> Vec<Scenario> {
    seeds
        .into_iter()
        .map(|seed| {
            let mut sc = base.clone();
            sc.seed = seed;
            sc
        })
        .collect()
}
