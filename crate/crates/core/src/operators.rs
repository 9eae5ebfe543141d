//! Local operators `Fᵢ(x, θ)`, their mean fields and problem constants.
//!
//! Two concrete operators are provided: the negative gradient of the
//! squared regression loss `(⟨θ, X(1)⟩ − X(2))²` and the linear-features
//! Q-learning semi-gradient. Anything else plugs in through
//! [`FnOperator`] or by implementing [`LocalOperator`].
//!
//! Constants follow the usual conventions: `L` is the uniform Lipschitz
//! constant of `Fᵢ(x, ·)`, `B = max{L, max ‖Fᵢ(x, 0)‖}` and `α` is the
//! 1-point strong monotonicity constant of `−Σᵢ F̄ᵢ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::markov::{ArSource, MarkovError, Observation, Source, Transition};

#[derive(Debug, Error, PartialEq)]
pub enum OperatorError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("{operator} operator cannot evaluate a {observation} observation")]
    WrongObservation {
        operator: &'static str,
        observation: &'static str,
    },
    #[error("source has a continuous observation space; use the Monte Carlo mean-field estimate")]
    ContinuousSource,
    #[error("degenerate probe grid: {0}")]
    DegenerateProbe(String),
    #[error("discount factor {0} must lie in (0, 1)")]
    Gamma(f64),
    #[error("feature table has {got} entries, expected {expected}")]
    FeatureShape { expected: usize, got: usize },
    #[error("no fixed-point method applies: {0}")]
    NoOracle(String),
    #[error("operator and source counts differ ({operators} vs {sources})")]
    AgentCount { operators: usize, sources: usize },
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    QuadraticGradient,
    Qlearning,
    Custom,
}

/// `Fᵢ : 𝒳ᵢ × ℝᵈ → ℝᵈ`.
pub trait LocalOperator: fmt::Debug + Send + Sync {
    fn dim(&self) -> usize;

    fn kind(&self) -> OperatorKind;

    /// Writes `F(x, θ)` into `out`. `theta` and `out` have length `dim()`.
    fn eval_into(
        &self,
        x: &Observation,
        theta: &[f64],
        out: &mut [f64],
    ) -> Result<(), OperatorError>;

    fn as_qlearning(&self) -> Option<&QLearningOperator> {
        None
    }

    fn as_quadratic(&self) -> Option<&QuadraticGradientOperator> {
        None
    }
}

pub type SharedOperator = Arc<dyn LocalOperator>;

/// `F(x, θ)` with dimension checks.
pub fn eval_local(
    op: &dyn LocalOperator,
    x: &Observation,
    theta: &[f64],
) -> Result<Vec<f64>, OperatorError> {
    if theta.len() != op.dim() {
        return Err(OperatorError::Dimension {
            expected: op.dim(),
            got: theta.len(),
        });
    }
    let mut out = vec![0.0; op.dim()];
    op.eval_into(x, theta, &mut out)?;
    Ok(out)
}

fn observation_name(x: &Observation) -> &'static str {
    match x {
        Observation::State(_) => "finite-state",
        Observation::Regression { .. } => "regression",
        Observation::Transition(_) => "transition",
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `F(x, θ) = −∇_θ (⟨θ, x(1)⟩ − x(2))² = −2(⟨θ, x(1)⟩ − x(2)) x(1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticGradientOperator {
    dim: usize,
}

impl QuadraticGradientOperator {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn for_source(src: &ArSource) -> Self {
        Self::new(src.dim())
    }

    /// `f(x, θ) = (⟨θ, x(1)⟩ − x(2))²`.
    pub fn loss(&self, x1: &[f64], x2: f64, theta: &[f64]) -> f64 {
        let r = dot(theta, x1) - x2;
        r * r
    }
}

impl LocalOperator for QuadraticGradientOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::QuadraticGradient
    }

    fn eval_into(
        &self,
        x: &Observation,
        theta: &[f64],
        out: &mut [f64],
    ) -> Result<(), OperatorError> {
        let Observation::Regression { x1, x2 } = x else {
            return Err(OperatorError::WrongObservation {
                operator: "quadratic-gradient",
                observation: observation_name(x),
            });
        };
        if x1.len() != self.dim {
            return Err(OperatorError::Dimension {
                expected: self.dim,
                got: x1.len(),
            });
        }
        let x1 = x1.as_slice();
        let scale = -2.0 * (dot(theta, x1) - x2);
        for (o, xi) in out.iter_mut().zip(x1) {
            *o = scale * xi;
        }
        Ok(())
    }

    fn as_quadratic(&self) -> Option<&QuadraticGradientOperator> {
        Some(self)
    }
}

/// Linear features `φ(s, a) ∈ ℝᵈ` over a finite state-action space.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    /// row `s·n_actions + a` holds `φ(s, a)`
    table: Vec<f64>,
    tabular: bool,
}

impl FeatureMap {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        dim: usize,
        table: Vec<f64>,
    ) -> Result<Self, OperatorError> {
        let expected = n_states * n_actions * dim;
        if table.len() != expected {
            return Err(OperatorError::FeatureShape {
                expected,
                got: table.len(),
            });
        }
        let tabular = dim == n_states * n_actions
            && (0..dim).all(|row| {
                (0..dim).all(|c| table[row * dim + c] == if c == row { 1.0 } else { 0.0 })
            });
        Ok(Self {
            n_states,
            n_actions,
            dim,
            table,
            tabular,
        })
    }

    /// One-hot over state-action pairs; `d = n_states · n_actions`.
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        let dim = n_states * n_actions;
        let mut table = vec![0.0; dim * dim];
        for row in 0..dim {
            table[row * dim + row] = 1.0;
        }
        Self {
            n_states,
            n_actions,
            dim,
            table,
            tabular: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn is_tabular(&self) -> bool {
        self.tabular
    }

    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        let row = s * self.n_actions + a;
        &self.table[row * self.dim..(row + 1) * self.dim]
    }
}

/// Q-learning with linear function approximation:
///
/// ```text
/// F((s, a, r, s′), θ) = φ(s, a) · (r + γ max_{a′} φ(s′, a′)ᵀθ − φ(s, a)ᵀθ)
/// ```
///
/// The bootstrap term is dropped when `s′` is terminal. Greedy ties go to
/// the smallest action index.
#[derive(Debug, Clone, PartialEq)]
pub struct QLearningOperator {
    features: FeatureMap,
    gamma: f64,
}

impl QLearningOperator {
    pub fn new(features: FeatureMap, gamma: f64) -> Result<Self, OperatorError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(OperatorError::Gamma(gamma));
        }
        Ok(Self { features, gamma })
    }

    pub fn features(&self) -> &FeatureMap {
        &self.features
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn q_value(&self, s: usize, a: usize, theta: &[f64]) -> f64 {
        dot(self.features.phi(s, a), theta)
    }

    /// `(argmax, max)` over actions, smallest index on ties.
    pub fn greedy(&self, s: usize, theta: &[f64]) -> (usize, f64) {
        let mut best = (0, self.q_value(s, 0, theta));
        for a in 1..self.features.n_actions {
            let q = self.q_value(s, a, theta);
            if q > best.1 {
                best = (a, q);
            }
        }
        best
    }

    /// `r + γ max_{a′} Q(s′, a′) − Q(s, a)`.
    pub fn td(&self, t: &Transition, theta: &[f64]) -> f64 {
        let bootstrap = if t.terminal {
            0.0
        } else {
            self.gamma * self.greedy(t.next, theta).1
        };
        t.reward + bootstrap - self.q_value(t.state, t.action, theta)
    }
}

impl LocalOperator for QLearningOperator {
    fn dim(&self) -> usize {
        self.features.dim
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::Qlearning
    }

    fn eval_into(
        &self,
        x: &Observation,
        theta: &[f64],
        out: &mut [f64],
    ) -> Result<(), OperatorError> {
        let Observation::Transition(t) = x else {
            return Err(OperatorError::WrongObservation {
                operator: "q-learning",
                observation: observation_name(x),
            });
        };
        if t.state >= self.features.n_states
            || t.next >= self.features.n_states
            || t.action >= self.features.n_actions
        {
            return Err(OperatorError::Dimension {
                expected: self.features.n_states,
                got: t.state.max(t.next),
            });
        }
        let delta = self.td(t, theta);
        for (o, p) in out.iter_mut().zip(self.features.phi(t.state, t.action)) {
            *o = delta * p;
        }
        Ok(())
    }

    fn as_qlearning(&self) -> Option<&QLearningOperator> {
        Some(self)
    }
}

type OperatorFn = dyn Fn(&Observation, &[f64], &mut [f64]) + Send + Sync;

/// User-supplied operator.
#[derive(Clone)]
pub struct FnOperator {
    dim: usize,
    f: Arc<OperatorFn>,
}

impl FnOperator {
    pub fn new(
        dim: usize,
        f: impl Fn(&Observation, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            f: Arc::new(f),
        }
    }
}

impl fmt::Debug for FnOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnOperator")
            .field("dim", &self.dim)
            .finish_non_exhaustive()
    }
}

impl LocalOperator for FnOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::Custom
    }

    fn eval_into(
        &self,
        x: &Observation,
        theta: &[f64],
        out: &mut [f64],
    ) -> Result<(), OperatorError> {
        (self.f)(x, theta, out);
        Ok(())
    }
}

/// Exact `F̄(θ) = Σₓ μ(x) F(x, θ)` for sources with a finite observation law.
pub fn eval_mean_field(
    op: &dyn LocalOperator,
    src: &Source,
    theta: &[f64],
) -> Result<Vec<f64>, OperatorError> {
    let law = src
        .stationary_observations()
        .ok_or(OperatorError::ContinuousSource)??;
    mean_over(op, &law, theta)
}

fn mean_over(
    op: &dyn LocalOperator,
    law: &[(f64, Observation)],
    theta: &[f64],
) -> Result<Vec<f64>, OperatorError> {
    let mut acc = vec![0.0; op.dim()];
    let mut buf = vec![0.0; op.dim()];
    for (p, x) in law {
        op.eval_into(x, theta, &mut buf)?;
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += p * b;
        }
    }
    Ok(acc)
}

/// Monte Carlo mean-field estimate from `n` consecutive chain samples,
/// returned with per-coordinate naive standard errors.
pub fn estimate_mean_field(
    op: &dyn LocalOperator,
    src: &mut Source,
    theta: &[f64],
    n: usize,
    rng: &mut crate::rng::Stream,
) -> Result<(Vec<f64>, Vec<f64>), OperatorError> {
    let d = op.dim();
    let mut sum = vec![0.0; d];
    let mut sumsq = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for _ in 0..n {
        let x = src.sample_step(rng);
        op.eval_into(&x, theta, &mut buf)?;
        for c in 0..d {
            sum[c] += buf[c];
            sumsq[c] += buf[c] * buf[c];
        }
    }
    let nf = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let se = (0..d)
        .map(|c| ((sumsq[c] / nf - mean[c] * mean[c]).max(0.0) / nf).sqrt())
        .collect();
    Ok((mean, se))
}

/// Problem constants `(B, L, α)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorConstants {
    pub b: f64,
    pub l: f64,
    pub alpha: f64,
}

impl OperatorConstants {
    /// Combines per-agent constants: `B` and `L` take the max, `α` adds up
    /// (each agent's 1-point constant contributes to the aggregate).
    pub fn aggregate(per_agent: &[OperatorConstants]) -> OperatorConstants {
        OperatorConstants {
            b: per_agent.iter().map(|c| c.b).fold(0.0, f64::max),
            l: per_agent.iter().map(|c| c.l).fold(0.0, f64::max),
            alpha: per_agent.iter().map(|c| c.alpha).sum(),
        }
    }
}

/// Pairs of parameter vectors at which Lipschitz and monotonicity ratios are
/// probed.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrid {
    pub pairs: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ProbeGrid {
    pub const RADIUS: f64 = 10.0;
    pub const RANDOM_PAIRS: usize = 64;

    /// 64 random pairs in the ball of radius 10 plus `(0, 10 eⱼ)` for each axis.
    pub fn standard<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let mut pairs = Vec::with_capacity(Self::RANDOM_PAIRS + dim);
        for _ in 0..Self::RANDOM_PAIRS {
            pairs.push((
                ball_point(dim, Self::RADIUS, rng),
                ball_point(dim, Self::RADIUS, rng),
            ));
        }
        for j in 0..dim {
            let mut axis = vec![0.0; dim];
            axis[j] = Self::RADIUS;
            pairs.push((vec![0.0; dim], axis));
        }
        Self { pairs }
    }
}

/// Uniform point in the `d`-ball of the given radius.
pub fn ball_point<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let n = norm(&v);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x *= r / n);
    }
    v
}

/// Probe-based constants for one operator.
///
/// `L̂` is the largest ratio `‖F(x,θ) − F(x,θ̃)‖ / ‖θ − θ̃‖` over the probe
/// pairs and observations, `B̂` the smallest constant with
/// `‖F(x,θ)‖ ≤ B̂(‖θ‖ + 1)` at every probed `(x, θ)` and no smaller than
/// `max{L̂, maxₓ ‖F(x, 0)‖}`, and `α̂` is the
/// smallest ratio `−⟨F̂(θ) − F̂(θ̃), θ − θ̃⟩ / ‖θ − θ̃‖²` with `F̂` the
/// empirical mean over `observations`. Probes only ever see finitely many
/// points, so `L̂` and `B̂` are lower estimates of the true suprema and `α̂`
/// is an upper estimate of the true infimum.
pub fn estimate_constants(
    op: &dyn LocalOperator,
    observations: &[Observation],
    grid: &ProbeGrid,
) -> Result<OperatorConstants, OperatorError> {
    let d = op.dim();
    if observations.is_empty() {
        return Err(OperatorError::DegenerateProbe("no observations".into()));
    }
    let pairs: Vec<_> = grid
        .pairs
        .iter()
        .filter(|(a, b)| a.len() == d && b.len() == d && a != b)
        .collect();
    if pairs.is_empty() {
        return Err(OperatorError::DegenerateProbe(
            "no distinct probe pairs of matching dimension".into(),
        ));
    }
    let zero = vec![0.0; d];
    let mut fa = vec![0.0; d];
    let mut fb = vec![0.0; d];
    let mut l_hat = 0.0_f64;
    let mut f0_max = 0.0_f64;
    let mut affine = 0.0_f64;
    let mut mean_a = vec![0.0; d];
    let mut mean_b = vec![0.0; d];
    let mut alpha_hat = f64::INFINITY;
    for x in observations {
        op.eval_into(x, &zero, &mut fa)?;
        f0_max = f0_max.max(norm(&fa));
    }
    for (ta, tb) in pairs {
        mean_a.iter_mut().for_each(|v| *v = 0.0);
        mean_b.iter_mut().for_each(|v| *v = 0.0);
        let diff: Vec<f64> = ta.iter().zip(tb.iter()).map(|(a, b)| a - b).collect();
        let dn = norm(&diff);
        for x in observations {
            op.eval_into(x, ta, &mut fa)?;
            op.eval_into(x, tb, &mut fb)?;
            affine = affine
                .max(norm(&fa) / (norm(ta) + 1.0))
                .max(norm(&fb) / (norm(tb) + 1.0));
            let fd: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| a - b).collect();
            l_hat = l_hat.max(norm(&fd) / dn);
            for c in 0..d {
                mean_a[c] += fa[c];
                mean_b[c] += fb[c];
            }
        }
        let m = observations.len() as f64;
        let inner: f64 = (0..d).map(|c| (mean_a[c] - mean_b[c]) / m * diff[c]).sum();
        alpha_hat = alpha_hat.min(-inner / (dn * dn));
    }
    Ok(OperatorConstants {
        b: l_hat.max(f0_max).max(affine),
        l: l_hat,
        alpha: alpha_hat,
    })
}

/// `2 λ_min(Σᵢ E[X(1) X(1)ᵀ])` under the stationary laws of the AR sources.
pub fn quadratic_alpha(sources: &[&ArSource]) -> f64 {
    let Some(first) = sources.first() else {
        return 0.0;
    };
    let d = first.dim();
    let mut total = DMatrix::zeros(d, d);
    for src in sources {
        total += src.stationary_covariance();
    }
    let lambda_min = SymmetricEigen::new(total)
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    2.0 * lambda_min
}

/// Constants of the quadratic-gradient operators over the whole compact
/// observation space of the AR sources (not just sampled points):
/// `L = 2 sup ‖x(1)‖²`, `B = max{L, 2 sup |x(2)| sup ‖x(1)‖}`.
pub fn quadratic_constants(sources: &[&ArSource]) -> OperatorConstants {
    let mut l = 0.0_f64;
    let mut f0 = 0.0_f64;
    for src in sources {
        let sx = src.state_norm_bound();
        l = l.max(2.0 * sx * sx);
        f0 = f0.max(2.0 * src.response_bound() * sx);
    }
    OperatorConstants {
        b: l.max(f0),
        l,
        alpha: quadratic_alpha(sources),
    }
}

/// Agents' operators together with their data sources.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub operators: Vec<SharedOperator>,
    pub sources: Vec<Source>,
    pub alpha: f64,
    pub theta_star: Option<DVector<f64>>,
}

impl ProblemSpec {
    pub fn new(
        operators: Vec<SharedOperator>,
        sources: Vec<Source>,
        alpha: f64,
    ) -> Result<Self, OperatorError> {
        if operators.len() != sources.len() {
            return Err(OperatorError::AgentCount {
                operators: operators.len(),
                sources: sources.len(),
            });
        }
        if let Some(first) = operators.first() {
            let d = first.dim();
            if let Some(bad) = operators.iter().find(|o| o.dim() != d) {
                return Err(OperatorError::Dimension {
                    expected: d,
                    got: bad.dim(),
                });
            }
        }
        Ok(Self {
            operators,
            sources,
            alpha,
            theta_star: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.operators.first().map_or(0, |o| o.dim())
    }

    /// `‖Σᵢ F̄ᵢ(θ)‖` with exact mean fields.
    pub fn root_residual(&self, theta: &[f64]) -> Result<f64, OperatorError> {
        let mut total = vec![0.0; self.dim()];
        for (op, src) in self.operators.iter().zip(&self.sources) {
            let f = eval_mean_field(op.as_ref(), src, theta)?;
            total.iter_mut().zip(&f).for_each(|(t, v)| *t += v);
        }
        Ok(norm(&total))
    }
}

/// Root of the aggregate mean field.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub theta: DVector<f64>,
    /// False when the aggregate operator vanishes identically.
    pub unique: bool,
}

const VALUE_ITERATION_TOL: f64 = 1e-10;
const MEAN_FIELD_TOL: f64 = 1e-12;
const MEAN_FIELD_BUDGET: usize = 1_000_000;

/// Computes `θ*` from problem structure.
///
/// - quadratic-gradient operators on AR sources sharing `u`: `θ* = u`
///   (the response noise is zero-mean and independent of the regressor);
/// - tabular Q-learning on MDP sources: value iteration on the
///   visitation-weighted Bellman operator to `1e-10`;
/// - operators that vanish on every probe: the zero vector, flagged
///   non-unique;
/// - otherwise, for finite observation laws: deterministic mean-field
///   iteration `θ ← θ + η Σᵢ F̄ᵢ(θ)` with a small step.
pub fn fixed_point_oracle(spec: &ProblemSpec) -> Result<FixedPoint, OperatorError> {
    let d = spec.dim();
    if spec.operators.is_empty() {
        return Err(OperatorError::NoOracle("no agents".into()));
    }
    if let Some(theta) = quadratic_root(spec) {
        return Ok(FixedPoint {
            theta,
            unique: true,
        });
    }
    if let Some(fp) = tabular_q_root(spec)? {
        return Ok(fp);
    }
    if vanishes(spec)? {
        return Ok(FixedPoint {
            theta: DVector::zeros(d),
            unique: false,
        });
    }
    mean_field_root(spec)
}

fn quadratic_root(spec: &ProblemSpec) -> Option<DVector<f64>> {
    let mut u: Option<&DVector<f64>> = None;
    for (op, src) in spec.operators.iter().zip(&spec.sources) {
        op.as_quadratic()?;
        let Source::Ar(ar) = src else { return None };
        match u {
            None => u = Some(ar.u()),
            Some(prev) if prev != ar.u() => return None,
            _ => {}
        }
    }
    u.cloned()
}

fn tabular_q_root(spec: &ProblemSpec) -> Result<Option<FixedPoint>, OperatorError> {
    let mut laws = Vec::new();
    let mut ops = Vec::new();
    for (op, src) in spec.operators.iter().zip(&spec.sources) {
        let (Some(q), Source::Mdp(mdp)) = (op.as_qlearning(), src) else {
            return Ok(None);
        };
        if !q.features().is_tabular() {
            return Ok(None);
        }
        laws.push(mdp.mdp().stationary_transitions()?);
        ops.push(q);
    }
    let d = spec.dim();
    // Per-coordinate weight and the transitions feeding it.
    let mut weight = vec![0.0; d];
    let mut terms: Vec<Vec<(f64, &QLearningOperator, Transition)>> = vec![Vec::new(); d];
    for (law, op) in laws.iter().zip(&ops) {
        let n_actions = op.features().n_actions();
        for (p, t) in law {
            let idx = t.state * n_actions + t.action;
            weight[idx] += p;
            terms[idx].push((*p, op, *t));
        }
    }
    let mut q = vec![0.0; d];
    for _ in 0..MEAN_FIELD_BUDGET {
        let mut next = vec![0.0; d];
        let mut change = 0.0_f64;
        for idx in 0..d {
            if weight[idx] == 0.0 {
                continue;
            }
            let target: f64 = terms[idx]
                .iter()
                .map(|(p, op, t)| {
                    let boot = if t.terminal {
                        0.0
                    } else {
                        op.gamma() * op.greedy(t.next, &q).1
                    };
                    p * (t.reward + boot)
                })
                .sum::<f64>()
                / weight[idx];
            change = change.max((target - q[idx]).abs());
            next[idx] = target;
        }
        q = next;
        if change <= VALUE_ITERATION_TOL * 1e-2 {
            let unique = weight.iter().all(|&w| w > 0.0);
            return Ok(Some(FixedPoint {
                theta: DVector::from_vec(q),
                unique,
            }));
        }
    }
    Err(OperatorError::NoOracle(
        "value iteration did not converge".into(),
    ))
}

fn vanishes(spec: &ProblemSpec) -> Result<bool, OperatorError> {
    let d = spec.dim();
    let mut rng = crate::rng::derive_agent_stream(0, 0, crate::rng::Purpose::Probe);
    let probes: Vec<Vec<f64>> = (0..8)
        .map(|_| ball_point(d, ProbeGrid::RADIUS, &mut rng))
        .collect();
    let mut buf = vec![0.0; d];
    for (op, src) in spec.operators.iter().zip(&spec.sources) {
        let mut src = src.clone();
        let mut srng = crate::rng::derive_agent_stream(0, 1, crate::rng::Purpose::Probe);
        for theta in &probes {
            for _ in 0..8 {
                let x = src.sample_step(&mut srng);
                op.eval_into(&x, theta, &mut buf)?;
                if buf.iter().any(|&v| v != 0.0) {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn mean_field_root(spec: &ProblemSpec) -> Result<FixedPoint, OperatorError> {
    let d = spec.dim();
    let mut laws = Vec::new();
    for src in &spec.sources {
        match src.stationary_observations() {
            Some(law) => laws.push(law?),
            None => {
                return Err(OperatorError::NoOracle(
                    "custom operator on a continuous source has no analytic root".into(),
                ))
            }
        }
    }
    let aggregate = |theta: &[f64]| -> Result<Vec<f64>, OperatorError> {
        let mut total = vec![0.0; d];
        for (op, law) in spec.operators.iter().zip(&laws) {
            let f = mean_over(op.as_ref(), law, theta)?;
            total.iter_mut().zip(&f).for_each(|(t, v)| *t += v);
        }
        Ok(total)
    };
    // step from a probed Lipschitz bound of the aggregate
    let mut rng = crate::rng::derive_agent_stream(0, 2, crate::rng::Purpose::Probe);
    let grid = ProbeGrid::standard(d, &mut rng);
    let mut lip = 0.0_f64;
    for (a, b) in &grid.pairs {
        let (fa, fb) = (aggregate(a)?, aggregate(b)?);
        let num: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| x - y).collect();
        let den: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        lip = lip.max(norm(&num) / norm(&den));
    }
    let step = if lip > 0.0 { 0.5 / lip } else { 1.0 };
    let mut theta = vec![0.0; d];
    for _ in 0..MEAN_FIELD_BUDGET {
        let f = aggregate(&theta)?;
        if norm(&f) <= MEAN_FIELD_TOL {
            return Ok(FixedPoint {
                theta: DVector::from_vec(theta),
                unique: true,
            });
        }
        theta.iter_mut().zip(&f).for_each(|(t, v)| *t += step * v);
    }
    Err(OperatorError::NoOracle(
        "mean-field iteration did not converge".into(),
    ))
}
