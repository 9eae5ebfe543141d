//! The DCSA iteration, step-size schedules, rate constants and metrics.
//!
//! One iteration of agent `i`:
//!
//! ```text
//! θᵢᵏ⁺¹ = Σⱼ W_k(i, j) θⱼᵏ + ε_k Fᵢ(Xᵢᵏ, θᵢᵏ)
//! ```
//!
//! with `W_k = W` on a fixed graph. All agents read the pre-step iterates.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    second_singular_value, time_varying_eta, GraphError, GraphSchedule, WeightMatrix,
};
use crate::markov::{ratio_ceil, MixingProfile, Observation, Source, Transition};
use crate::operators::{OperatorConstants, OperatorError, ProblemSpec};
use crate::rng::{derive_agent_stream, Purpose, Stream};

#[derive(Debug, Error)]
pub enum AlgorithmError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("the ensemble optimality check needs at least {needed} replicates, got {got}")]
    InsufficientReplicates { needed: usize, got: usize },
    #[error("evaluation batch is empty")]
    EmptyBatch,
    #[error("TD error needs Q-learning operators")]
    NotQLearning,
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Iterates `Θᵏ` (row `i` is `θᵢᵏ`) with a window of past snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    n: usize,
    d: usize,
    k: usize,
    theta: Vec<f64>,
    history: VecDeque<(usize, Vec<f64>)>,
    history_cap: usize,
}

impl SimState {
    /// `rows` are the initial iterates; the history keeps the last
    /// `history_cap` snapshots (at least one).
    pub fn new(rows: &[Vec<f64>], history_cap: usize) -> Result<Self, AlgorithmError> {
        let n = rows.len();
        if n == 0 {
            return Err(AlgorithmError::Dimension("no agents".into()));
        }
        let d = rows[0].len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(AlgorithmError::Dimension(format!(
                "row {i} has length {}, expected {d}",
                r.len()
            )));
        }
        let theta: Vec<f64> = rows.iter().flatten().copied().collect();
        let history_cap = history_cap.max(1);
        let mut history = VecDeque::with_capacity(history_cap);
        history.push_back((0, theta.clone()));
        Ok(Self {
            n,
            d,
            k: 0,
            theta,
            history,
            history_cap,
        })
    }

    pub fn zeros(n: usize, d: usize, history_cap: usize) -> Result<Self, AlgorithmError> {
        Self::new(&vec![vec![0.0; d]; n], history_cap)
    }

    pub fn n_agents(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.theta[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// `θ̄ᵏ`, summed in agent order.
    pub fn mean(&self) -> Vec<f64> {
        mean_of(&self.theta, self.n, self.d)
    }

    /// Snapshot `Θ^{k′}` if still in the window.
    pub fn snapshot(&self, k_prime: usize) -> Option<&[f64]> {
        let front = self.history.front()?.0;
        let idx = k_prime.checked_sub(front)?;
        self.history.get(idx).map(|(_, t)| t.as_slice())
    }

    fn push(&mut self, theta: Vec<f64>) {
        self.k += 1;
        self.theta = theta;
        if self.history.len() == self.history_cap {
            self.history.pop_front();
        }
        self.history.push_back((self.k, self.theta.clone()));
    }
}

/// Average as `θ₀ + Σᵢ (θᵢ − θ₀)/N`, exact when all rows agree.
fn mean_of(theta: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut shift = vec![0.0; d];
    for i in 1..n {
        for c in 0..d {
            shift[c] += theta[i * d + c] - theta[c];
        }
    }
    (0..d).map(|c| theta[c] + shift[c] / n as f64).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn consensus_of(theta: &[f64], n: usize, d: usize) -> f64 {
    let m = mean_of(theta, n, d);
    (0..n)
        .map(|i| sq_dist(&theta[i * d..(i + 1) * d], &m))
        .sum()
}

/// Nonzero row supports of a weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusRows {
    rows: Vec<Vec<(usize, f64)>>,
}

impl From<&WeightMatrix> for ConsensusRows {
    fn from(w: &WeightMatrix) -> Self {
        Self {
            rows: (0..w.n_agents()).map(|i| w.row_support(i)).collect(),
        }
    }
}

impl ConsensusRows {
    pub fn n_agents(&self) -> usize {
        self.rows.len()
    }
}

/// One synchronous DCSA iteration.
///
/// The neighbour sum `Σⱼ W(i,j) θⱼ` adds its terms in ascending order of
/// value, so relabelling agents relabels the result bit for bit.
pub fn dcsa_step(
    state: &mut SimState,
    w: &ConsensusRows,
    samples: &[Observation],
    eps_k: f64,
    ops: &ProblemSpec,
) -> Result<(), AlgorithmError> {
    let (n, d) = (state.n, state.d);
    if w.n_agents() != n || samples.len() != n || ops.operators.len() != n {
        return Err(AlgorithmError::Dimension(format!(
            "{n} agents but W has {} rows, {} samples and {} operators",
            w.n_agents(),
            samples.len(),
            ops.operators.len()
        )));
    }
    if ops.dim() != d {
        return Err(AlgorithmError::Dimension(format!(
            "iterates have d = {d}, operators {}",
            ops.dim()
        )));
    }
    if !(eps_k >= 0.0) {
        return Err(AlgorithmError::InvalidScenario(format!(
            "step size {eps_k} must be non-negative"
        )));
    }
    let mut next = vec![0.0; n * d];
    let mut f = vec![0.0; d];
    let mut terms: Vec<f64> = Vec::new();
    for i in 0..n {
        let row = &w.rows[i];
        for c in 0..d {
            terms.clear();
            terms.extend(row.iter().map(|&(j, wij)| wij * state.theta[j * d + c]));
            terms.sort_unstable_by(f64::total_cmp);
            next[i * d + c] = terms.iter().sum();
        }
        ops.operators[i].eval_into(&samples[i], state.row(i), &mut f)?;
        for c in 0..d {
            next[i * d + c] += eps_k * f[c];
        }
    }
    state.push(next);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Constant,
    Diminishing,
}

/// `ε_k = ε` or `ε / (k + 1 + shift)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub kind: StepKind,
    pub eps: f64,
    /// Delays the harmonic decay of the diminishing schedule; 0 is the
    /// plain `ε/(k+1)`.
    #[serde(default)]
    pub shift: f64,
}

impl StepSchedule {
    pub fn constant(eps: f64) -> Self {
        Self {
            kind: StepKind::Constant,
            eps,
            shift: 0.0,
        }
    }

    pub fn diminishing(eps: f64) -> Self {
        Self {
            kind: StepKind::Diminishing,
            eps,
            shift: 0.0,
        }
    }

    pub fn with_shift(mut self, shift: f64) -> Self {
        self.shift = shift;
        self
    }
}

pub fn step_size(s: &StepSchedule, k: usize) -> f64 {
    match s.kind {
        StepKind::Constant => s.eps,
        StepKind::Diminishing => s.eps / (k as f64 + 1.0 + s.shift),
    }
}

/// `τ_k = max{⌈ρ/(1−ρ)⌉, ⌈β log(1/ε_k)⌉}`; for `ε_k ≥ 1` only the first
/// term remains (see [`tau_warning`]).
pub fn tau_k(beta: f64, eps_k: f64, rho: f64) -> usize {
    let ratio = ratio_ceil(rho);
    if eps_k >= 1.0 || !(eps_k > 0.0) {
        return ratio;
    }
    let log_term = beta * (1.0 / eps_k).ln();
    let log_tau = if log_term.is_finite() {
        (log_term - 1e-9).ceil().max(0.0) as usize
    } else {
        usize::MAX
    };
    ratio.max(log_tau)
}

/// Message for step sizes outside `(0, 1)`, where `τ_k` falls back to the
/// ratio term.
pub fn tau_warning(eps_k: f64) -> Option<String> {
    (eps_k >= 1.0).then(|| format!("step size {eps_k} ≥ 1: τ_k uses only ⌈ρ/(1−ρ)⌉"))
}

/// Largest `c_τ` with `τ_k + 1 ≤ (1 − c_τ)(k + 1)` for all `k ∈ (τ_k, horizon]`.
pub fn c_tau(s: &StepSchedule, mixing: &MixingProfile, horizon: usize) -> f64 {
    let mut best = f64::INFINITY;
    for k in 0..=horizon {
        let tau = tau_k(mixing.beta, step_size(s, k), mixing.rho);
        if k > tau {
            best = best.min(1.0 - (tau as f64 + 1.0) / (k as f64 + 1.0));
        }
    }
    if best.is_finite() {
        best
    } else {
        let tau = tau_k(mixing.beta, step_size(s, 0), mixing.rho) as f64;
        1.0 / (tau + 2.0)
    }
}

/// Constants of the finite-time bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConstants {
    pub b: f64,
    pub l: f64,
    pub alpha: f64,
    pub sigma2: f64,
    pub n: usize,
    pub theta_star_norm: f64,
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub c_eps1: f64,
    pub c_eps2: f64,
    pub c_tau: f64,
}

impl RateConstants {
    pub fn compute(
        oc: &OperatorConstants,
        sigma2: f64,
        n: usize,
        theta_star_norm: f64,
        c_tau: f64,
    ) -> Self {
        let (b, l, alpha) = (oc.b, oc.l, oc.alpha);
        let ts = theta_star_norm * theta_star_norm + 1.0;
        let c1 = (60.0 * b * b + 22.5 + 90.0 * b * l + 6.0 * b * b) * ts;
        let c2 = 10.5 * b + 5.0 / 6.0 + 8.0 * l * l / alpha + 10.0 * l;
        let c_eps1 = (6.0 * b).max((45.0 * b + 132.0 * b * b + 192.0 * b * l) / alpha);
        let gap = 1.0 - sigma2 * sigma2;
        let c_eps2 = (16.0 * b)
            .max(768.0 * b * b / (c_tau * alpha))
            .max(alpha / 4.0 + 128.0 * b * b / (c_tau * gap) + 2.0 * c2)
            .max(32.0 * b * b / c2);
        Self {
            b,
            l,
            alpha,
            sigma2,
            n,
            theta_star_norm,
            c0: 16.0 * b * b * ts,
            c1,
            c2,
            c_eps1,
            c_eps2,
            c_tau,
        }
    }

    /// `min{1/(N C_{ε,1}), (1−σ₂²)/(N C_{ε,2})}`.
    pub fn step_bound(&self) -> f64 {
        let n = self.n as f64;
        (1.0 / (n * self.c_eps1)).min((1.0 - self.sigma2 * self.sigma2) / (n * self.c_eps2))
    }

    /// Step size below which the pathwise consensus recursion holds:
    /// `(1−σ₂²)/(8√2 B N)`.
    pub fn consensus_step_bound(&self) -> f64 {
        (1.0 - self.sigma2 * self.sigma2)
            / (8.0 * std::f64::consts::SQRT_2 * self.b * self.n as f64)
    }
}

/// Signed margins of the step-size conditions; positive means satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub pass: bool,
    pub margins: BTreeMap<String, f64>,
}

/// Checks the theoretical step-size conditions. Advisory only.
///
/// Constant: `ε τ(ε) ≤ bound`. Diminishing: `ε ≥ 8/α` and
/// `ε_{k−τ_k} τ_k ≤ bound` for `τ_k ≤ k ≤ horizon`.
pub fn admissible_step_check(
    rc: &RateConstants,
    s: &StepSchedule,
    mixing: &MixingProfile,
    horizon: usize,
) -> AdmissibilityReport {
    let bound = rc.step_bound();
    let mut margins = BTreeMap::new();
    match s.kind {
        StepKind::Constant => {
            let tau = tau_k(mixing.beta, s.eps, mixing.rho) as f64;
            margins.insert("step_tau".to_string(), bound - s.eps * tau);
        }
        StepKind::Diminishing => {
            margins.insert("eps_vs_8_over_alpha".to_string(), s.eps - 8.0 / rc.alpha);
            let mut worst = f64::INFINITY;
            for k in 0..=horizon {
                let tau = tau_k(mixing.beta, step_size(s, k), mixing.rho);
                if k >= tau {
                    worst = worst.min(bound - step_size(s, k - tau) * tau as f64);
                }
            }
            if worst.is_finite() {
                margins.insert("step_tau".to_string(), worst);
            }
        }
    }
    margins.insert(
        "consensus_step".to_string(),
        rc.consensus_step_bound() - step_size(s, 0),
    );
    let pass = margins.values().all(|&m| m >= 0.0);
    AdmissibilityReport { pass, margins }
}

/// `Sᵏ = Σᵢ ‖θᵢᵏ − θ̄ᵏ‖²`.
pub fn consensus_error(state: &SimState) -> f64 {
    consensus_of(&state.theta, state.n, state.d)
}

/// `Rᵏ = ‖θ̄ᵏ − θ*‖²`, NaN when `θ*` is unknown.
pub fn optimality_error(state: &SimState, theta_star: Option<&[f64]>) -> f64 {
    theta_star.map_or(f64::NAN, |ts| sq_dist(&state.mean(), ts))
}

/// `Vᵏ = Rᵏ + Sᵏ + S^{k−τ_k}`.
pub fn lyapunov(r: f64, s_k: f64, s_delayed: f64) -> f64 {
    r + s_k + s_delayed
}

/// Slack of the one-step consensus bound:
///
/// ```text
/// (1+σ₂²)/2 · S^{k−1} + 32 ε² B² N/(1−σ₂²) · R^{k−1} + N C₀ ε²/(1−σ₂²) − Sᵏ
/// ```
///
/// with `ε = ε_{k−1}`.
pub fn lemma3_residual(
    s_k: f64,
    s_prev: f64,
    r_prev: f64,
    eps_prev: f64,
    rc: &RateConstants,
) -> f64 {
    let s2 = rc.sigma2 * rc.sigma2;
    let gap = 1.0 - s2;
    let n = rc.n as f64;
    let e2 = eps_prev * eps_prev;
    (1.0 + s2) / 2.0 * s_prev + 32.0 * e2 * rc.b * rc.b * n / gap * r_prev + n * rc.c0 * e2 / gap
        - s_k
}

/// Per-iteration `R` and `S` of one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    pub r: Vec<f64>,
    pub s: Vec<f64>,
}

/// Ensemble slack of the expected optimality recursion at one `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma4Point {
    pub k: usize,
    pub tau_k: usize,
    pub slack: f64,
    /// Standard error of the per-seed slacks.
    pub std_err: f64,
}

pub const LEMMA4_MIN_REPLICATES: usize = 30;

/// Slack of
///
/// ```text
/// (1 − αε_k/2) Ê[Rᵏ] + N C₁ ε_k ε_{k−τ_k} τ_k + N C₂ ε_k (Ê[Sᵏ] + Ê[S^{k−τ_k}]) − Ê[Rᵏ⁺¹]
/// ```
///
/// at each requested `k ≥ τ_k`, with `Ê` the average over `series`.
pub fn lemma4_residual(
    series: &[Series],
    rc: &RateConstants,
    s: &StepSchedule,
    mixing: &MixingProfile,
    ks: &[usize],
) -> Result<Vec<Lemma4Point>, AlgorithmError> {
    if series.len() < LEMMA4_MIN_REPLICATES {
        return Err(AlgorithmError::InsufficientReplicates {
            needed: LEMMA4_MIN_REPLICATES,
            got: series.len(),
        });
    }
    let n = rc.n as f64;
    let len = series
        .iter()
        .map(|x| x.r.len().min(x.s.len()))
        .min()
        .unwrap_or(0);
    let mut out = Vec::new();
    for &k in ks {
        let eps_k = step_size(s, k);
        let tau = tau_k(mixing.beta, eps_k, mixing.rho);
        if k < tau || k + 1 >= len {
            continue;
        }
        let eps_d = step_size(s, k - tau);
        let slacks: Vec<f64> = series
            .iter()
            .map(|x| {
                (1.0 - rc.alpha * eps_k / 2.0) * x.r[k]
                    + n * rc.c1 * eps_k * eps_d * tau as f64
                    + n * rc.c2 * eps_k * (x.s[k] + x.s[k - tau])
                    - x.r[k + 1]
            })
            .collect();
        let m = slacks.len() as f64;
        let mean = slacks[0] + slacks.iter().map(|v| v - slacks[0]).sum::<f64>() / m;
        let var = slacks.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
        out.push(Lemma4Point {
            k,
            tau_k: tau,
            slack: mean,
            std_err: (var / m).sqrt(),
        });
    }
    Ok(out)
}

/// Mean over agents of the mean absolute TD error of `θᵢ` on agent `i`'s
/// batch. A single batch is shared by all agents.
pub fn td_error(
    state: &SimState,
    batches: &[Vec<Transition>],
    ops: &ProblemSpec,
) -> Result<f64, AlgorithmError> {
    if batches.is_empty() || batches.iter().any(|b| b.is_empty()) {
        return Err(AlgorithmError::EmptyBatch);
    }
    if batches.len() != 1 && batches.len() != state.n {
        return Err(AlgorithmError::Dimension(format!(
            "{} batches for {} agents",
            batches.len(),
            state.n
        )));
    }
    let mut total = 0.0;
    for i in 0..state.n {
        let q = ops.operators[i]
            .as_qlearning()
            .ok_or(AlgorithmError::NotQLearning)?;
        let batch = &batches[if batches.len() == 1 { 0 } else { i }];
        let theta = state.row(i);
        total += batch.iter().map(|t| q.td(t, theta).abs()).sum::<f64>() / batch.len() as f64;
    }
    Ok(total / state.n as f64)
}

/// Communication pattern.
#[derive(Debug, Clone, PartialEq)]
pub enum Topology {
    Fixed(WeightMatrix),
    /// Frame `k mod F` is active at iteration `k`.
    Varying {
        schedule: GraphSchedule,
        weights: Vec<WeightMatrix>,
    },
}

impl Topology {
    pub fn n_agents(&self) -> usize {
        match self {
            Topology::Fixed(w) => w.n_agents(),
            Topology::Varying { schedule, .. } => schedule.n_agents(),
        }
    }

    /// `σ₂(W)` on a fixed graph, `η` on a schedule.
    pub fn sigma2(&self) -> Result<f64, AlgorithmError> {
        Ok(match self {
            Topology::Fixed(w) => second_singular_value(w),
            Topology::Varying { schedule, weights } => time_varying_eta(schedule, weights)?,
        })
    }

    fn rows(&self) -> Vec<ConsensusRows> {
        match self {
            Topology::Fixed(w) => vec![ConsensusRows::from(w)],
            Topology::Varying { weights, .. } => weights.iter().map(ConsensusRows::from).collect(),
        }
    }

    pub fn permuted(&self, perm: &[usize]) -> Result<Topology, AlgorithmError> {
        Ok(match self {
            Topology::Fixed(w) => Topology::Fixed(w.permuted(perm)),
            Topology::Varying { schedule, weights } => Topology::Varying {
                schedule: GraphSchedule::new(
                    schedule.frames().iter().map(|g| g.permuted(perm)).collect(),
                    schedule.period(),
                )?,
                weights: weights.iter().map(|w| w.permuted(perm)).collect(),
            },
        })
    }
}

/// Everything a run needs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub problem: ProblemSpec,
    pub topology: Topology,
    pub schedule: StepSchedule,
    pub horizon: usize,
    pub stride: usize,
    pub seed: u64,
    /// Sampling stream id of each agent.
    pub stream_ids: Vec<u64>,
    /// Initial iterates; zeros when absent.
    pub init: Option<Vec<Vec<f64>>>,
    /// Global mixing profile used for `τ_k`.
    pub mixing: MixingProfile,
    /// `(B, L, α)` for the residual checks.
    pub constants: Option<OperatorConstants>,
    /// Held-out transitions for the TD error, one batch per agent.
    pub eval_batches: Option<Vec<Vec<Transition>>>,
    /// Keep `Rᵏ` and `Sᵏ` at every iteration.
    pub record_series: bool,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.problem.operators.len()
    }

    pub fn validate(&self) -> Result<(), AlgorithmError> {
        let n = self.n_agents();
        let bad = |msg: String| Err(AlgorithmError::InvalidScenario(msg));
        if n == 0 {
            return bad("no agents".into());
        }
        if self.topology.n_agents() != n {
            return bad(format!(
                "topology has {} agents, problem has {n}",
                self.topology.n_agents()
            ));
        }
        if self.stream_ids.len() != n {
            return bad(format!(
                "{} stream ids for {n} agents",
                self.stream_ids.len()
            ));
        }
        if self.stride == 0 {
            return bad("stride must be ≥ 1".into());
        }
        if !(self.schedule.eps > 0.0 && self.schedule.eps.is_finite()) {
            return bad(format!("step size {} must be positive", self.schedule.eps));
        }
        if !(self.schedule.shift >= 0.0) {
            return bad(format!(
                "step shift {} must be non-negative",
                self.schedule.shift
            ));
        }
        if let Some(init) = &self.init {
            if init.len() != n || init.iter().any(|r| r.len() != self.problem.dim()) {
                return bad("initial iterates do not match N × d".into());
            }
        }
        if let Some(ts) = &self.problem.theta_star {
            if ts.len() != self.problem.dim() {
                return bad("θ* has the wrong dimension".into());
            }
        }
        Ok(())
    }

    /// Relabels agent `i` as `perm[i]`: weights, operators, sources, stream
    /// ids, initial rows and evaluation batches move together.
    pub fn permuted(&self, perm: &[usize]) -> Result<Scenario, AlgorithmError> {
        let n = self.n_agents();
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(AlgorithmError::InvalidScenario("not a permutation".into()));
        }
        fn scatter<T: Clone>(items: &[T], perm: &[usize]) -> Vec<T> {
            let mut out: Vec<Option<T>> = vec![None; items.len()];
            for (i, item) in items.iter().enumerate() {
                out[perm[i]] = Some(item.clone());
            }
            out.into_iter().map(|x| x.expect("permutation")).collect()
        }
        let mut out = self.clone();
        out.topology = self.topology.permuted(perm)?;
        out.problem.operators = scatter(&self.problem.operators, perm);
        out.problem.sources = scatter(&self.problem.sources, perm);
        out.stream_ids = scatter(&self.stream_ids, perm);
        out.init = self.init.as_ref().map(|r| scatter(r, perm));
        out.eval_batches = self.eval_batches.as_ref().map(|b| {
            if b.len() == n {
                scatter(b, perm)
            } else {
                b.clone()
            }
        });
        Ok(out)
    }

    /// `τ_k` for `k = 0..=horizon`.
    pub fn taus(&self) -> Vec<usize> {
        (0..=self.horizon)
            .map(|k| {
                tau_k(
                    self.mixing.beta,
                    step_size(&self.schedule, k),
                    self.mixing.rho,
                )
            })
            .collect()
    }

    /// Rate constants, when `(B, L, α)` and `θ*` are known.
    pub fn rate_constants(&self) -> Result<Option<RateConstants>, AlgorithmError> {
        let (Some(oc), Some(ts)) = (&self.constants, &self.problem.theta_star) else {
            return Ok(None);
        };
        let ct = c_tau(&self.schedule, &self.mixing, self.horizon);
        Ok(Some(RateConstants::compute(
            oc,
            self.topology.sigma2()?,
            self.n_agents(),
            ts.norm(),
            ct,
        )))
    }
}

/// One logged row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub k: usize,
    pub eps_k: f64,
    pub tau_k: usize,
    pub r: f64,
    pub s: f64,
    pub s_delayed: f64,
    pub v: f64,
    pub td_error: Option<f64>,
    pub lemma3_slack: Option<f64>,
    pub lemma4_slack: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    /// Smallest consensus-recursion slack over all iterations.
    pub min_lemma3_slack: Option<f64>,
    /// Largest ratio of `‖θ̄ᵏ − θ̄^{k−τ_k}‖` to its drift bound at logged `k`.
    pub lemma2_max_ratio: Option<f64>,
    pub aborted: Option<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub final_state: SimState,
    pub series: Option<Series>,
}

/// Runs `horizon` iterations, one fresh sample per agent per iteration,
/// logging every `stride` iterations and at the end.
///
/// A record at `k` describes `Θᵏ`; its `eps_k` and `tau_k` are those of
/// the step leaving `k`. Before `τ_k` steps have elapsed, `S^{k−τ_k}` reads
/// `S⁰`.
pub fn run(scenario: &Scenario) -> Result<RunOutput, AlgorithmError> {
    scenario.validate()?;
    let n = scenario.n_agents();
    let d = scenario.problem.dim();
    let taus = scenario.taus();
    let cap = taus.iter().copied().max().unwrap_or(0).saturating_add(1);
    let mut state = match &scenario.init {
        Some(rows) => SimState::new(rows, cap)?,
        None => SimState::zeros(n, d, cap)?,
    };
    let mixers = scenario.topology.rows();
    let mut sources: Vec<Source> = scenario.problem.sources.clone();
    let mut rngs: Vec<Stream> = scenario
        .stream_ids
        .iter()
        .map(|&id| derive_agent_stream(scenario.seed, id, Purpose::Sampling))
        .collect();
    let theta_star: Option<Vec<f64>> = scenario
        .problem
        .theta_star
        .as_ref()
        .map(|t| t.as_slice().to_vec());
    let ts = theta_star.as_deref();
    let fixed = matches!(scenario.topology, Topology::Fixed(_));
    let rc = scenario.rate_constants()?;
    let lemma3_rc = if fixed { rc } else { None };
    let q_batches = scenario.eval_batches.as_ref().filter(|_| {
        scenario
            .problem
            .operators
            .iter()
            .all(|o| o.as_qlearning().is_some())
    });

    let mut summary = RunSummary::default();
    let mut warned_tau = false;
    let mut records = Vec::new();
    let mut series = scenario.record_series.then(Series::default);
    let s0 = consensus_error(&state);
    let mut prev = (s0, optimality_error(&state, ts));
    if let Some(sr) = series.as_mut() {
        sr.r.push(prev.1);
        sr.s.push(prev.0);
    }
    let mut last_lemma3: Option<f64> = None;
    let mut samples: Vec<Observation> = Vec::with_capacity(n);

    for k in 0..=scenario.horizon {
        let eps_k = step_size(&scenario.schedule, k);
        let tau = taus[k];
        if !warned_tau {
            if let Some(w) = tau_warning(eps_k) {
                summary.warnings.push(w);
                warned_tau = true;
            }
        }
        let (s_k, r_k) = prev;
        if !state.theta.iter().all(|v| v.is_finite()) {
            let bad = state.theta.iter().position(|v| !v.is_finite()).unwrap_or(0) / d;
            summary.aborted = Some(format!("non-finite iterate at k = {k}, agent {bad}"));
            records.push(MetricsRecord {
                k,
                eps_k,
                tau_k: tau,
                r: r_k,
                s: s_k,
                s_delayed: f64::NAN,
                v: f64::NAN,
                td_error: None,
                lemma3_slack: None,
                lemma4_slack: None,
            });
            break;
        }
        if k % scenario.stride == 0 || k == scenario.horizon {
            let delayed_k = k.saturating_sub(tau);
            let delayed = state.snapshot(delayed_k).expect("history covers τ_k");
            let s_delayed = consensus_of(delayed, n, d);
            let td = match q_batches {
                Some(b) => Some(td_error(&state, b, &scenario.problem)?),
                None => None,
            };
            if let (Some(rc), true) = (&rc, k >= tau && tau > 0) {
                let mean_now = state.mean();
                let mean_then = mean_of(delayed, n, d);
                let lhs = sq_dist(&mean_now, &mean_then).sqrt();
                let norm_now = mean_now.iter().map(|v| v * v).sum::<f64>().sqrt();
                let rhs = 3.0
                    * step_size(&scenario.schedule, delayed_k)
                    * rc.b
                    * tau as f64
                    * (norm_now + s_delayed.sqrt() / n as f64 + 1.0);
                let ratio = lhs / rhs;
                summary.lemma2_max_ratio = Some(
                    summary
                        .lemma2_max_ratio
                        .map_or(ratio, |m: f64| m.max(ratio)),
                );
            }
            records.push(MetricsRecord {
                k,
                eps_k,
                tau_k: tau,
                r: r_k,
                s: s_k,
                s_delayed,
                v: lyapunov(r_k, s_k, s_delayed),
                td_error: td,
                lemma3_slack: last_lemma3,
                lemma4_slack: None,
            });
        }
        if k == scenario.horizon {
            break;
        }
        samples.clear();
        for (src, rng) in sources.iter_mut().zip(rngs.iter_mut()) {
            samples.push(src.sample_step(rng));
        }
        let mixer = &mixers[k % mixers.len()];
        dcsa_step(&mut state, mixer, &samples, eps_k, &scenario.problem)?;
        let s_next = consensus_error(&state);
        let r_next = optimality_error(&state, ts);
        if let Some(rc) = &lemma3_rc {
            let slack = lemma3_residual(s_next, s_k, r_k, eps_k, rc);
            last_lemma3 = Some(slack);
            summary.min_lemma3_slack = Some(
                summary
                    .min_lemma3_slack
                    .map_or(slack, |m: f64| m.min(slack)),
            );
        }
        if let Some(sr) = series.as_mut() {
            sr.r.push(r_next);
            sr.s.push(s_next);
        }
        prev = (s_next, r_next);
    }
    Ok(RunOutput {
        records,
        summary,
        final_state: state,
        series,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{lazy_metropolis, Graph};
    use crate::markov::{FiniteChain, FiniteChainSource};
    use crate::operators::{FnOperator, SharedOperator};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn neg_identity(d: usize) -> SharedOperator {
        Arc::new(FnOperator::new(d, |_, th, out| {
            out.iter_mut().zip(th).for_each(|(o, t)| *o = -t)
        }))
    }

    fn zero_op(d: usize) -> SharedOperator {
        Arc::new(FnOperator::new(d, |_, _, out| out.fill(0.0)))
    }

    fn dummy_source() -> Source {
        Source::Finite(FiniteChainSource {
            chain: FiniteChain::two_state(0.5, 0.5).unwrap(),
            state: 0,
        })
    }

    fn scenario(ops: Vec<SharedOperator>, w: WeightMatrix, eps: f64, horizon: usize) -> Scenario {
        let n = ops.len();
        let problem = ProblemSpec::new(ops, vec![dummy_source(); n], 1.0).unwrap();
        Scenario {
            name: "test".into(),
            problem,
            topology: Topology::Fixed(w),
            schedule: StepSchedule::constant(eps),
            horizon,
            stride: 1,
            seed: 0,
            stream_ids: (0..n as u64).collect(),
            init: None,
            mixing: MixingProfile {
                m: 1.0,
                rho: 0.5,
                beta: 1.0,
            },
            constants: None,
            eval_batches: None,
            record_series: false,
        }
    }

    fn one() -> WeightMatrix {
        WeightMatrix::from_matrix(nalgebra::DMatrix::from_element(1, 1, 1.0), None).unwrap()
    }

    #[test]
    fn step_examples() {
        let w = lazy_metropolis(&Graph::line(3).unwrap()).unwrap();
        let rows = ConsensusRows::from(&w);
        let spec = ProblemSpec::new(vec![zero_op(2); 3], vec![dummy_source(); 3], 0.0).unwrap();
        let obs = vec![Observation::State(0); 3];
        let mut st = SimState::new(&vec![vec![1.5, -2.0]; 3], 2).unwrap();
        dcsa_step(&mut st, &rows, &obs, 0.3, &spec).unwrap();
        assert_eq!(st.rows(), vec![vec![1.5, -2.0]; 3]);
        assert_eq!(st.k(), 1);

        let init = vec![vec![1.0], vec![0.0], vec![-4.0]];
        let mut st = SimState::new(&init, 2).unwrap();
        let spec =
            ProblemSpec::new(vec![neg_identity(1); 3], vec![dummy_source(); 3], 0.0).unwrap();
        dcsa_step(&mut st, &rows, &obs, 0.0, &spec).unwrap();
        let expect = w.matrix() * nalgebra::DVector::from_vec(vec![1.0, 0.0, -4.0]);
        for i in 0..3 {
            assert_abs_diff_eq!(st.row(i)[0], expect[i], epsilon = 1e-15);
        }

        let mut st = SimState::new(&[vec![1.0]], 1).unwrap();
        let spec = ProblemSpec::new(vec![neg_identity(1)], vec![dummy_source()], 1.0).unwrap();
        dcsa_step(&mut st, &ConsensusRows::from(&one()), &obs[..1], 0.5, &spec).unwrap();
        assert_eq!(st.row(0), &[0.5]);
    }

    #[test]
    fn step_rejects_mismatch() {
        let spec = ProblemSpec::new(vec![zero_op(1)], vec![dummy_source()], 0.0).unwrap();
        let mut st = SimState::zeros(2, 1, 1).unwrap();
        let rows = ConsensusRows::from(&one());
        assert!(matches!(
            dcsa_step(&mut st, &rows, &[Observation::State(0)], 0.1, &spec),
            Err(AlgorithmError::Dimension(_))
        ));
    }

    #[test]
    fn step_size_examples() {
        let dim = StepSchedule::diminishing(3e-2);
        assert_eq!(step_size(&dim, 0), 0.03);
        assert_abs_diff_eq!(step_size(&dim, 2), 0.01, epsilon = 1e-18);
        assert_eq!(step_size(&StepSchedule::constant(5e-4), 12345), 5e-4);
        assert_abs_diff_eq!(step_size(&dim.with_shift(9.0), 0), 0.003, epsilon = 1e-18);
    }

    #[test]
    fn tau_examples() {
        assert_eq!(tau_k(1.0, (-3.0_f64).exp(), 0.1), 3);
        assert_eq!(tau_k(1.0, (-1.0_f64).exp(), 0.9), 9);
        assert_eq!(tau_k(1.0, 1.0 - 1e-12, 0.5), 1);
        assert_eq!(tau_k(1.0, 2.0, 0.5), 1);
        assert!(tau_warning(2.0).is_some());
        assert!(tau_warning(0.5).is_none());
    }

    #[test]
    fn c_tau_for_constant_steps() {
        let mix = MixingProfile {
            m: 1.0,
            rho: 0.5,
            beta: 1.0,
        };
        let s = StepSchedule::constant((-3.0_f64).exp());
        // τ = 3 throughout: the binding k is 4
        assert_abs_diff_eq!(c_tau(&s, &mix, 1000), 1.0 / 5.0, epsilon = 1e-15);
        let ct = c_tau(&StepSchedule::diminishing(0.5), &mix, 10_000);
        assert!(ct > 0.0 && ct < 1.0);
    }

    fn constants() -> RateConstants {
        RateConstants::compute(
            &OperatorConstants {
                b: 2.0,
                l: 1.0,
                alpha: 0.5,
            },
            0.75,
            3,
            1.0,
            0.2,
        )
    }

    #[test]
    fn rate_constants_formulas() {
        let rc = constants();
        // B = 2, L = 1, α = 0.5, ‖θ*‖² + 1 = 2
        assert_abs_diff_eq!(rc.c0, 16.0 * 4.0 * 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rc.c1, (240.0 + 22.5 + 180.0 + 24.0) * 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rc.c2, 21.0 + 5.0 / 6.0 + 16.0 + 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rc.c_eps1, (90.0 + 528.0 + 384.0) / 0.5, epsilon = 1e-12);
        let gap = 1.0 - 0.5625;
        let expect2 = (32.0_f64)
            .max(768.0 * 4.0 / 0.1)
            .max(0.125 + 512.0 / (0.2 * gap) + 2.0 * rc.c2)
            .max(128.0 / rc.c2);
        assert_abs_diff_eq!(rc.c_eps2, expect2, epsilon = 1e-9);
    }

    #[test]
    fn admissibility_examples() {
        let rc = constants();
        let mix = MixingProfile {
            m: 1.0,
            rho: 0.5,
            beta: 1.0,
        };
        let big = admissible_step_check(&rc, &StepSchedule::constant(1.0), &mix, 100);
        assert!(!big.pass);
        assert!(big.margins["step_tau"] < 0.0);
        let tiny = admissible_step_check(&rc, &StepSchedule::constant(1e-12), &mix, 100);
        assert!(tiny.pass, "{tiny:?}");
        let edge =
            admissible_step_check(&rc, &StepSchedule::diminishing(8.0 / rc.alpha), &mix, 100);
        assert_eq!(edge.margins["eps_vs_8_over_alpha"], 0.0);
    }

    #[test]
    fn metric_examples() {
        let st = SimState::new(&[vec![1.0], vec![-1.0]], 1).unwrap();
        assert_eq!(consensus_error(&st), 2.0);
        let st = SimState::new(&vec![vec![3.7, -1.0]; 3], 1).unwrap();
        assert_eq!(consensus_error(&st), 0.0);
        let st = SimState::new(&[vec![3.0]], 1).unwrap();
        assert_eq!(optimality_error(&st, Some(&[1.0])), 4.0);
        assert_eq!(optimality_error(&st, Some(&[3.0])), 0.0);
        assert!(optimality_error(&st, None).is_nan());
        assert_eq!(lyapunov(0.0, 0.0, 0.0), 0.0);
        assert_eq!(lyapunov(4.0, 2.0, 2.0), 8.0);
        assert!(lyapunov(f64::NAN, 1.0, 1.0).is_nan());
    }

    #[test]
    fn lemma3_examples() {
        let rc = RateConstants {
            sigma2: 0.75,
            ..constants()
        };
        // ε = 0: bound is the contraction term only
        assert_abs_diff_eq!(
            lemma3_residual(0.0, 2.0, 0.0, 0.0, &rc),
            1.5625,
            epsilon = 1e-15
        );
        // at consensus with F = 0: slack is the noise term
        let eps: f64 = 0.01;
        let expect = 3.0 * rc.c0 * eps * eps / (1.0 - 0.5625);
        assert_abs_diff_eq!(
            lemma3_residual(0.0, 0.0, 0.0, eps, &rc),
            expect,
            epsilon = 1e-15
        );
    }

    #[test]
    fn lemma4_needs_replicates() {
        let rc = constants();
        let mix = MixingProfile {
            m: 1.0,
            rho: 0.5,
            beta: 1.0,
        };
        let few = vec![Series::default(); 5];
        assert!(matches!(
            lemma4_residual(&few, &rc, &StepSchedule::constant(0.01), &mix, &[10]),
            Err(AlgorithmError::InsufficientReplicates { .. })
        ));
        // all errors zero: slack is the C₁ term
        let zero = vec![
            Series {
                r: vec![0.0; 50],
                s: vec![0.0; 50]
            };
            30
        ];
        let s = StepSchedule::constant(0.01);
        let pts = lemma4_residual(&zero, &rc, &s, &mix, &[20]).unwrap();
        let tau = tau_k(1.0, 0.01, 0.5) as f64;
        assert_abs_diff_eq!(pts[0].slack, 3.0 * rc.c1 * 1e-4 * tau, epsilon = 1e-12);
        assert_eq!(pts[0].std_err, 0.0);
    }

    #[test]
    fn run_examples() {
        let sc = scenario(vec![neg_identity(1)], one(), 0.5, 0);
        let out = run(&sc).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].k, 0);

        let mut sc = scenario(vec![neg_identity(1)], one(), 0.5, 20);
        sc.init = Some(vec![vec![1.0]]);
        sc.problem.theta_star = Some(nalgebra::DVector::zeros(1));
        let out = run(&sc).unwrap();
        for rec in &out.records {
            assert_eq!(rec.r, 0.25_f64.powi(rec.k as i32));
            assert_eq!(rec.s, 0.0);
        }
    }

    #[test]
    fn run_aborts_on_divergence() {
        let grow: SharedOperator =
            Arc::new(FnOperator::new(1, |_, th, out| out[0] = th[0] * 1e200));
        let mut sc = scenario(vec![grow], one(), 1.0, 10);
        sc.init = Some(vec![vec![1e200]]);
        let out = run(&sc).unwrap();
        assert!(out.summary.aborted.is_some());
        assert!(out.records.len() < 11);
    }

    #[test]
    fn history_window() {
        let spec = ProblemSpec::new(vec![neg_identity(1)], vec![dummy_source()], 1.0).unwrap();
        let mut st = SimState::new(&[vec![1.0]], 3).unwrap();
        let rows = ConsensusRows::from(&one());
        for _ in 0..5 {
            dcsa_step(&mut st, &rows, &[Observation::State(0)], 0.5, &spec).unwrap();
        }
        assert!(st.snapshot(2).is_none());
        assert_eq!(st.snapshot(3).unwrap(), &[0.125]);
        assert_eq!(st.snapshot(5).unwrap(), &[0.03125]);
    }

    #[test]
    fn td_error_examples() {
        use crate::markov::{MdpSource, TabularMdp};
        use crate::operators::{FeatureMap, QLearningOperator};
        let op: SharedOperator =
            Arc::new(QLearningOperator::new(FeatureMap::tabular(1, 1), 0.5).unwrap());
        let src = Source::Mdp(MdpSource::new(Arc::new(TabularMdp::single_state(1.0))));
        let spec = ProblemSpec::new(vec![op], vec![src], 0.5).unwrap();
        let t = Transition {
            state: 0,
            action: 0,
            reward: 1.0,
            next: 0,
            terminal: false,
        };
        let st = SimState::new(&[vec![0.0]], 1).unwrap();
        assert_eq!(td_error(&st, &[vec![t]], &spec).unwrap(), 1.0);
        let st = SimState::new(&[vec![2.0]], 1).unwrap();
        assert_eq!(td_error(&st, &[vec![t]], &spec).unwrap(), 0.0);
        assert!(matches!(
            td_error(&st, &[vec![]], &spec),
            Err(AlgorithmError::EmptyBatch)
        ));
        let other = ProblemSpec::new(vec![zero_op(1)], vec![dummy_source()], 0.0).unwrap();
        assert!(matches!(
            td_error(&st, &[vec![t]], &other),
            Err(AlgorithmError::NotQLearning)
        ));
    }
}
