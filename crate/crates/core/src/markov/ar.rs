use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::{MarkovError, MixingProfile};

/// Standard normal draw clipped to `[-clip, clip]`.
pub fn clipped_normal<R: Rng + ?Sized>(rng: &mut R, clip: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z.clamp(-clip, clip)
}

/// `E[clip(Z)²]` for `Z ~ N(0, 1)`:
/// `(2Φ(c) − 1) − 2cφ(c) + 2c²(1 − Φ(c))`.
pub fn clipped_normal_variance(clip: f64) -> f64 {
    let n = Normal::standard();
    let cdf = n.cdf(clip);
    (2.0 * cdf - 1.0) - 2.0 * clip * n.pdf(clip) + 2.0 * clip * clip * (1.0 - cdf)
}

/// Auto-regressive regression source
///
/// ```text
/// X(1) ← A X(1) + clip(ξ) e₁
/// X(2) = ⟨u, X(1)⟩ + clip(ζ)
/// ```
///
/// with independent standard normal `ξ, ζ`. Clipping keeps the observation
/// space compact.
#[derive(Debug, Clone, PartialEq)]
pub struct ArSource {
    a: DMatrix<f64>,
    u: DVector<f64>,
    noise_clip: f64,
    state: DVector<f64>,
    spectral_radius: f64,
}

impl ArSource {
    /// Starts from `X(1) = 0`. A zero clip gives a noiseless process.
    pub fn new(a: DMatrix<f64>, u: DVector<f64>, noise_clip: f64) -> Result<Self, MarkovError> {
        let d = u.len();
        if d == 0 || a.shape() != (d, d) {
            return Err(MarkovError::Dimension(format!(
                "A is {}x{} but u has length {d}",
                a.nrows(),
                a.ncols()
            )));
        }
        if !(noise_clip >= 0.0 && noise_clip.is_finite()) {
            return Err(MarkovError::NoiseClip(noise_clip));
        }
        let spectral_radius = a
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if spectral_radius >= 1.0 {
            return Err(MarkovError::Unstable(spectral_radius));
        }
        let mut src = Self {
            a,
            u,
            noise_clip,
            state: DVector::zeros(d),
            spectral_radius,
        };
        // eigenvalue solvers leave round-off on exactly nilpotent matrices
        if src.nilpotency_index().is_some() {
            src.spectral_radius = 0.0;
        }
        Ok(src)
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn noise_clip(&self) -> f64 {
        self.noise_clip
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.state
    }

    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }

    pub fn sample_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> (DVector<f64>, f64) {
        let shock = clipped_normal(rng, self.noise_clip);
        let mut next = &self.a * &self.state;
        next[0] += shock;
        self.state = next;
        let y = clipped_normal(rng, self.noise_clip);
        let x2 = self.u.dot(&self.state) + y;
        (self.state.clone(), x2)
    }

    /// Smallest `p` with `Aᵖ = 0`, if `A` is nilpotent of index `≤ d`.
    pub fn nilpotency_index(&self) -> Option<usize> {
        let d = self.dim();
        let mut power = DMatrix::identity(d, d);
        for p in 0..=d {
            if power.iter().all(|&v| v == 0.0) {
                return Some(p);
            }
            power = &power * &self.a;
        }
        None
    }

    /// Mixing time of the state chain.
    ///
    /// With nilpotent `A` the state is an exact function of the last `p`
    /// shocks, so the chain is exactly stationary after `p` steps. Otherwise
    /// the geometric envelope `m ρᵏ` with `ρ` the spectral radius is used.
    pub fn mixing_time(&self, eps: f64, m: f64) -> Result<usize, MarkovError> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(MarkovError::EpsOutOfRange(eps));
        }
        if let Some(p) = self.nilpotency_index() {
            return Ok(p);
        }
        Ok(MixingProfile {
            m,
            rho: self.spectral_radius,
            beta: 0.0,
        }
        .envelope_time(eps))
    }

    /// `ρ` = spectral radius, `m` as supplied, `β` fitted over `eps_grid`.
    pub fn mixing_profile(&self, eps_grid: &[f64], m: f64) -> Result<MixingProfile, MarkovError> {
        if eps_grid.is_empty() {
            return Err(MarkovError::EmptyGrid);
        }
        let mut beta = 0.0_f64;
        for &eps in eps_grid {
            let tau = self.mixing_time(eps, m)?;
            beta = beta.max(tau as f64 / (1.0 / eps).ln());
        }
        Ok(MixingProfile {
            m,
            rho: self.spectral_radius,
            beta,
        })
    }

    /// Stationary covariance of `X(1)`: solves `Σ = AΣAᵀ + q e₁e₁ᵀ` with `q`
    /// the clipped-noise variance.
    pub fn stationary_covariance(&self) -> DMatrix<f64> {
        let d = self.dim();
        let q = clipped_normal_variance(self.noise_clip);
        // Σ = Σₖ Aᵏ Q (Aᵀ)ᵏ
        let mut sigma = DMatrix::zeros(d, d);
        let mut term = DMatrix::zeros(d, d);
        term[(0, 0)] = q;
        for _ in 0..100_000 {
            sigma += &term;
            let next = &self.a * &term * self.a.transpose();
            let size = next.abs().max();
            term = next;
            if size == 0.0 || size <= 1e-17 * sigma.abs().max() {
                break;
            }
        }
        sigma
    }

    /// `sup ‖X(1)‖` over every trajectory started at zero:
    /// `clip · Σₖ ‖Aᵏ e₁‖`.
    pub fn state_norm_bound(&self) -> f64 {
        let d = self.dim();
        let mut v = DVector::zeros(d);
        v[0] = 1.0;
        let mut total = 0.0;
        for _ in 0..100_000 {
            let n = v.norm();
            if n == 0.0 {
                break;
            }
            total += n;
            if n < 1e-16 * total {
                // geometric tail: at most n ρ/(1−ρ) with ρ the radius
                total += n * self.spectral_radius / (1.0 - self.spectral_radius);
                break;
            }
            v = &self.a * v;
        }
        self.noise_clip * total
    }

    /// `sup |X(2)| ≤ ‖u‖ sup ‖X(1)‖ + clip`.
    pub fn response_bound(&self) -> f64 {
        self.u.norm() * self.state_norm_bound() + self.noise_clip
    }
}
