//! Markovian data sources and mixing-time machinery.
//!
//! Each agent observes its own ergodic chain. Three kinds are provided:
//! finite chains given by a transition matrix, the linear auto-regressive
//! process used for system identification ([`ArSource`]) and tabular MDPs
//! sampled under a fixed behavior policy ([`MdpSource`]).
//!
//! For finite chains the mixing quantities are computed exactly from
//! matrix powers: `τ(ε)` is the first `k` at which the worst-case total
//! variation to the stationary law drops below `ε`, and a
//! [`MixingProfile`] records the geometric envelope `m ρᵏ` together with the
//! constant `β` in `τ(ε) ≤ β log(1/ε)`.

mod ar;
mod mdp;

pub use ar::{clipped_normal, clipped_normal_variance, ArSource};
pub use mdp::{Action, Cell, Maze, MdpSource, Outcome, TabularMdp, Transition};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::rng::Stream;

/// Row-sum tolerance for transition matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// TV values at or below this are treated as exact mixing when fitting
/// the geometric envelope.
const TV_ZERO: f64 = 1e-14;

/// Matrix-power budget for [`mixing_time`].
const MAX_MIXING_STEPS: usize = 1_000_000;

#[derive(Debug, Error, PartialEq)]
pub enum MarkovError {
    #[error("transition matrix must be square and nonempty, got {rows}x{cols}")]
    Shape { rows: usize, cols: usize },
    #[error("row {row} sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f64 },
    #[error("entry ({row}, {col}) = {value} is negative or not finite")]
    BadEntry { row: usize, col: usize, value: f64 },
    #[error("chain is not ergodic: not irreducible (state {unreachable} is not mutually reachable with state 0)")]
    NotIrreducible { unreachable: usize },
    #[error("chain is not ergodic: periodic with period {period}")]
    Periodic { period: usize },
    #[error("distributions have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("tolerance {0} must lie strictly between 0 and 1")]
    EpsOutOfRange(f64),
    #[error("empty epsilon grid")]
    EmptyGrid,
    #[error("chain did not mix within {0} steps")]
    NoMixing(usize),
    #[error("spectral radius {0} of the AR matrix must be < 1")]
    Unstable(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("noise clip must be non-negative and finite, got {0}")]
    NoiseClip(f64),
    #[error("mdp invalid: {0}")]
    InvalidMdp(String),
    #[error("maze line {line}: {msg}")]
    MazeParse { line: usize, msg: String },
    #[error("maze invalid: {0}")]
    InvalidMaze(String),
}

/// Row-stochastic transition matrix on states `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChain {
    transition: DMatrix<f64>,
}

impl FiniteChain {
    pub fn new(transition: DMatrix<f64>) -> Result<Self, MarkovError> {
        let (rows, cols) = transition.shape();
        if rows == 0 || rows != cols {
            return Err(MarkovError::Shape { rows, cols });
        }
        for row in 0..rows {
            for col in 0..cols {
                let value = transition[(row, col)];
                if !value.is_finite() || value < 0.0 {
                    return Err(MarkovError::BadEntry { row, col, value });
                }
            }
            let sum: f64 = transition.row(row).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MarkovError::RowSum { row, sum });
            }
        }
        Ok(Self { transition })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, MarkovError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(MarkovError::Shape {
                rows: n,
                cols: rows.first().map_or(0, |r| r.len()),
            });
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(DMatrix::from_row_slice(n, n, &flat))
    }

    /// Two-state chain with `P(0→1) = p`, `P(1→0) = q`.
    pub fn two_state(p: f64, q: f64) -> Result<Self, MarkovError> {
        Self::from_rows(&[&[1.0 - p, p], &[q, 1.0 - q]])
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    /// Irreducible and aperiodic, or the first failing property.
    pub fn check_ergodic(&self) -> Result<(), MarkovError> {
        let n = self.n_states();
        let forward = self.bfs_levels(false);
        let backward = self.bfs_levels(true);
        if let Some(s) = (0..n).find(|&s| forward[s].is_none() || backward[s].is_none()) {
            return Err(MarkovError::NotIrreducible { unreachable: s });
        }
        let mut period = 0usize;
        for u in 0..n {
            for v in 0..n {
                if self.transition[(u, v)] > 0.0 {
                    let (lu, lv) = (forward[u].unwrap(), forward[v].unwrap());
                    period = gcd(period, (lu + 1).abs_diff(lv));
                }
            }
        }
        if period > 1 {
            return Err(MarkovError::Periodic { period });
        }
        Ok(())
    }

    fn bfs_levels(&self, reverse: bool) -> Vec<Option<usize>> {
        let n = self.n_states();
        let mut level = vec![None; n];
        level[0] = Some(0);
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                let p = if reverse {
                    self.transition[(v, u)]
                } else {
                    self.transition[(u, v)]
                };
                if p > 0.0 && level[v].is_none() {
                    level[v] = Some(level[u].unwrap() + 1);
                    queue.push_back(v);
                }
            }
        }
        level
    }

    /// Next state drawn from row `state`.
    pub fn step<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let n = self.n_states();
        for next in 0..n {
            acc += self.transition[(state, next)];
            if u < acc {
                return next;
            }
        }
        // u landed in the rounding gap above the last partial sum
        (0..n)
            .rev()
            .find(|&j| self.transition[(state, j)] > 0.0)
            .unwrap_or(n - 1)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Stationary law `μ` with `μP = μ`, `Σμ = 1`.
pub fn stationary_distribution(c: &FiniteChain) -> Result<Vec<f64>, MarkovError> {
    c.check_ergodic()?;
    let n = c.n_states();
    // (Pᵀ − I)μ = 0 with the last equation replaced by the normalization.
    let mut a = c.transition.transpose() - DMatrix::identity(n, n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let lu = a.clone().lu();
    let mut mu = lu
        .solve(&b)
        .ok_or_else(|| MarkovError::Dimension("singular stationary system".into()))?;
    // two rounds of iterative refinement
    for _ in 0..2 {
        let r = &b - &a * &mu;
        if let Some(delta) = lu.solve(&r) {
            mu += delta;
        }
    }
    Ok(mu.iter().copied().collect())
}

/// `½ Σ |pᵢ − qᵢ|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64, MarkovError> {
    if p.len() != q.len() {
        return Err(MarkovError::LengthMismatch(p.len(), q.len()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Worst-case TV distance `d(k) = maxₓ d_TV(Pᵏ(x,·), μ)` for `k = 0..=k_max`.
pub fn tv_profile(c: &FiniteChain, k_max: usize) -> Result<Vec<f64>, MarkovError> {
    let mu = stationary_distribution(c)?;
    let mut out = Vec::with_capacity(k_max + 1);
    let mut power = DMatrix::identity(c.n_states(), c.n_states());
    for k in 0..=k_max {
        out.push(worst_tv(&power, &mu));
        if k < k_max {
            power = &power * &c.transition;
        }
    }
    Ok(out)
}

fn worst_tv(power: &DMatrix<f64>, mu: &[f64]) -> f64 {
    (0..power.nrows())
        .map(|x| {
            0.5 * power
                .row(x)
                .iter()
                .zip(mu)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// Smallest `k` with `maxₓ d_TV(Pᵏ(x,·), μ) ≤ eps`, by explicit matrix powers.
///
/// The worst-case distance is nonincreasing in `k`, so the first hit holds
/// for every later `k` as well.
pub fn mixing_time(c: &FiniteChain, eps: f64) -> Result<usize, MarkovError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(MarkovError::EpsOutOfRange(eps));
    }
    let mu = stationary_distribution(c)?;
    let mut power = DMatrix::identity(c.n_states(), c.n_states());
    for k in 0..=MAX_MIXING_STEPS {
        if worst_tv(&power, &mu) <= eps {
            return Ok(k);
        }
        power = &power * &c.transition;
    }
    Err(MarkovError::NoMixing(MAX_MIXING_STEPS))
}

/// Geometric mixing envelope: `d(k) ≤ m ρᵏ` and `τ(ε) ≤ β log(1/ε)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixingProfile {
    pub m: f64,
    pub rho: f64,
    pub beta: f64,
}

impl MixingProfile {
    /// Step count at which the envelope `m ρᵏ` first drops to `eps`.
    pub fn envelope_time(&self, eps: f64) -> usize {
        if self.m <= eps {
            return 0;
        }
        if self.rho <= 0.0 {
            return 1;
        }
        let mut k = ((eps / self.m).ln() / self.rho.ln()).ceil().max(0.0) as usize;
        // guard the ceil against rounding on either side
        while k > 0 && self.m * self.rho.powi(k as i32 - 1) <= eps {
            k -= 1;
        }
        while self.m * self.rho.powi(k as i32) > eps {
            k += 1;
        }
        k
    }
}

/// Second largest eigenvalue modulus of the transition matrix.
pub fn second_eigenvalue_modulus(c: &FiniteChain) -> f64 {
    if c.n_states() < 2 {
        return 0.0;
    }
    let mut moduli: Vec<f64> = c
        .transition
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    let rho = moduli[1];
    if rho < 1e-12 {
        0.0
    } else {
        rho.min(1.0)
    }
}

/// Fits `(m, ρ, β)` for an ergodic finite chain.
///
/// `ρ` is the second largest eigenvalue modulus; `m` is the smallest constant
/// with `d(k) ≤ m ρᵏ` for `k ∈ [0, τ(min eps_grid)]`; `β` is the smallest
/// constant with `τ(ε) ≤ β log(1/ε)` over the grid. When `ρ = 0` and the chain
/// is not exactly mixed after one step no finite `m` exists and `m = ∞`.
pub fn fit_mixing_profile(c: &FiniteChain, eps_grid: &[f64]) -> Result<MixingProfile, MarkovError> {
    c.check_ergodic()?;
    if eps_grid.is_empty() {
        return Err(MarkovError::EmptyGrid);
    }
    let mut beta = 0.0_f64;
    let mut tau_max = 0;
    for &eps in eps_grid {
        let tau = mixing_time(c, eps)?;
        tau_max = tau_max.max(tau);
        beta = beta.max(tau as f64 / (1.0 / eps).ln());
    }
    let rho = second_eigenvalue_modulus(c);
    let profile = tv_profile(c, tau_max)?;
    let mut m = 0.0_f64;
    for (k, &d) in profile.iter().enumerate() {
        if k > 0 && d <= TV_ZERO {
            continue;
        }
        if rho == 0.0 {
            if k == 0 {
                m = m.max(d);
            } else {
                m = f64::INFINITY;
            }
        } else {
            m = m.max(d / rho.powi(k as i32));
        }
    }
    Ok(MixingProfile { m, rho, beta })
}

/// `τ(ε) = max{⌈ρ/(1−ρ)⌉, maxᵢ τ(i, ε)}` with `ρ = maxᵢ ρᵢ`.
pub fn global_tau(profiles: &[MixingProfile], per_agent_tau: &[usize]) -> usize {
    let rho = profiles.iter().map(|p| p.rho).fold(0.0_f64, f64::max);
    let floor = ratio_ceil(rho);
    per_agent_tau.iter().copied().fold(floor, usize::max)
}

/// `⌈ρ/(1−ρ)⌉`, saturating for `ρ → 1`.
pub(crate) fn ratio_ceil(rho: f64) -> usize {
    if rho <= 0.0 {
        return 0;
    }
    if rho >= 1.0 {
        return usize::MAX;
    }
    // absorb round-off such as 0.9/0.1 = 9.000000000000002
    let r = (rho / (1.0 - rho) - 1e-9).ceil();
    if r >= usize::MAX as f64 {
        usize::MAX
    } else {
        r as usize
    }
}

/// One observation `Xᵢᵏ`.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// State of a finite chain.
    State(usize),
    /// Regressor/response pair `(X(1), X(2))` of the AR process.
    Regression { x1: DVector<f64>, x2: f64 },
    /// Transition `(s, a, r, s′)` of an MDP.
    Transition(Transition),
}

/// Finite chain with a current state.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteChainSource {
    pub chain: FiniteChain,
    pub state: usize,
}

/// Any per-agent data generator.
#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Finite(FiniteChainSource),
    Ar(ArSource),
    Mdp(MdpSource),
}

impl Source {
    /// Advances the chain one step and returns the new observation.
    pub fn sample_step(&mut self, rng: &mut Stream) -> Observation {
        match self {
            Source::Finite(src) => {
                src.state = src.chain.step(src.state, rng);
                Observation::State(src.state)
            }
            Source::Ar(src) => {
                let (x1, x2) = src.sample_step(rng);
                Observation::Regression { x1, x2 }
            }
            Source::Mdp(src) => Observation::Transition(src.sample_step(rng)),
        }
    }

    /// Stationary law over observations, when the observation space is finite.
    pub fn stationary_observations(&self) -> Option<Result<Vec<(f64, Observation)>, MarkovError>> {
        match self {
            Source::Finite(src) => Some(stationary_distribution(&src.chain).map(|mu| {
                mu.into_iter()
                    .enumerate()
                    .map(|(s, p)| (p, Observation::State(s)))
                    .collect()
            })),
            Source::Mdp(src) => Some(src.mdp().stationary_transitions().map(|law| {
                law.into_iter()
                    .map(|(p, t)| (p, Observation::Transition(t)))
                    .collect()
            })),
            Source::Ar(_) => None,
        }
    }
}
