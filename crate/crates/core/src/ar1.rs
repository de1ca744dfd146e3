//! Stationary AR(1) covariance algebra and the profile maximum-likelihood update.
//!
//! `σ₂²` is the innovation variance; the stationary marginal variance is
//! `σ₂² / (1 − ρ²)` and `Cov(ξ₂,s, ξ₂,t) = σ₂² ρ^|s−t| / (1 − ρ²)`.

use nalgebra::DMatrix;

use crate::error::{GlmmError, Result};

/// `|ρ|` is kept at most `1 − STATIONARITY_MARGIN` after any update.
pub const STATIONARITY_MARGIN: f64 = 1e-6;

/// Search interval for `ρ` in the profile update.
pub const RHO_SEARCH_BOUND: f64 = 0.99;

/// Floor applied to the innovation variance.
pub const VARIANCE_FLOOR: f64 = 1e-10;

const GOLDEN_TOL: f64 = 1e-6;
const FALLBACK_STEP: f64 = 0.002;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ar1Params {
    pub rho: f64,
    pub sigma2_sq: f64,
}

impl Ar1Params {
    pub fn new(rho: f64, sigma2_sq: f64) -> Result<Self> {
        let p = Self { rho, sigma2_sq };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho.abs() < 1.0) {
            return Err(GlmmError::Stationarity(self.rho));
        }
        if !(self.sigma2_sq > 0.0 && self.sigma2_sq.is_finite()) {
            return Err(GlmmError::InvalidArgument(format!(
                "sigma2_sq must be positive, got {}",
                self.sigma2_sq
            )));
        }
        Ok(())
    }

    pub fn marginal_variance(&self) -> f64 {
        self.sigma2_sq / (1.0 - self.rho * self.rho)
    }
}

fn check_len(n_times: usize) -> Result<()> {
    if n_times == 0 {
        return Err(GlmmError::InvalidArgument("AR(1) length must be >= 1".into()));
    }
    Ok(())
}

/// Stationary covariance of `(ξ₂,1, …, ξ₂,T)`.
pub fn ar1_covariance(params: &Ar1Params, n_times: usize) -> Result<DMatrix<f64>> {
    params.validate()?;
    check_len(n_times)?;
    let v = params.marginal_variance();
    Ok(DMatrix::from_fn(n_times, n_times, |s, t| {
        v * params.rho.powi(s.abs_diff(t) as i32)
    }))
}

/// Tridiagonal inverse of [`ar1_covariance`]: `B(ρ) / σ₂²` with
/// `diag B = (1, 1+ρ², …, 1+ρ², 1)` and off-diagonal `−ρ`.
pub fn ar1_precision(params: &Ar1Params, n_times: usize) -> Result<DMatrix<f64>> {
    params.validate()?;
    check_len(n_times)?;
    let mut b = band_matrix(params.rho, n_times);
    b /= params.sigma2_sq;
    Ok(b)
}

fn band_matrix(rho: f64, n_times: usize) -> DMatrix<f64> {
    if n_times == 1 {
        return DMatrix::from_element(1, 1, 1.0 - rho * rho);
    }
    let mut b = DMatrix::zeros(n_times, n_times);
    for t in 0..n_times {
        b[(t, t)] = if t == 0 || t == n_times - 1 {
            1.0
        } else {
            1.0 + rho * rho
        };
        if t + 1 < n_times {
            b[(t, t + 1)] = -rho;
            b[(t + 1, t)] = -rho;
        }
    }
    b
}

/// `log det Σ₂ = T log σ₂² − log(1 − ρ²)`.
pub fn ar1_logdet(params: &Ar1Params, n_times: usize) -> Result<f64> {
    params.validate()?;
    check_len(n_times)?;
    Ok(n_times as f64 * params.sigma2_sq.ln() - (1.0 - params.rho * params.rho).ln())
}

/// Expected Gaussian log-density kernel `−½ log det Σ₂ − ½ tr(Σ₂⁻¹ S₂)`.
pub fn profile_objective(params: &Ar1Params, s2: &DMatrix<f64>) -> Result<f64> {
    let n_times = s2.nrows();
    let q = MomentSummary::from_moment(s2)?;
    let logdet = ar1_logdet(params, n_times)?;
    Ok(-0.5 * logdet - 0.5 * q.band_trace(params.rho) / params.sigma2_sq)
}

/// Sufficient statistics of a second-moment matrix for the AR(1) likelihood:
/// `tr(B(ρ) S) = trace − 2ρ·lag1 + ρ²·interior`.
#[derive(Debug, Clone, Copy)]
struct MomentSummary {
    n_times: usize,
    trace: f64,
    lag1: f64,
    interior: f64,
}

impl MomentSummary {
    fn from_moment(s2: &DMatrix<f64>) -> Result<Self> {
        if !s2.is_square() {
            return Err(GlmmError::Shape(format!(
                "second moment must be square, got {}x{}",
                s2.nrows(),
                s2.ncols()
            )));
        }
        let n_times = s2.nrows();
        check_len(n_times)?;
        let trace = s2.trace();
        let lag1 = (0..n_times.saturating_sub(1))
            .map(|t| 0.5 * (s2[(t, t + 1)] + s2[(t + 1, t)]))
            .sum();
        let interior = if n_times == 1 {
            // the 1x1 band is 1 − ρ²
            -trace
        } else {
            (1..n_times - 1).map(|t| s2[(t, t)]).sum()
        };
        Ok(Self {
            n_times,
            trace,
            lag1,
            interior,
        })
    }

    fn band_trace(&self, rho: f64) -> f64 {
        self.trace - 2.0 * rho * self.lag1 + rho * rho * self.interior
    }

    fn sigma_for(&self, rho: f64) -> f64 {
        (self.band_trace(rho) / self.n_times as f64).max(VARIANCE_FLOOR)
    }

    /// Objective with `σ₂²` profiled out.
    fn profiled(&self, rho: f64) -> f64 {
        let t = self.n_times as f64;
        let s = self.sigma_for(rho);
        -0.5 * (t * s.ln() - (1.0 - rho * rho).ln() + self.band_trace(rho) / s)
    }
}

fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > tol {
        if fa >= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = f(b);
        }
    }
    let x = 0.5 * (lo + hi);
    let fx = f(x);
    // endpoints of the final bracket can beat the midpoint when the max sits on a bound
    [(x, fx), (a, fa), (b, fb)]
        .into_iter()
        .fold((x, fx), |best, c| if c.1 > best.1 { c } else { best })
}

/// Maximises `−½ log det Σ₂ − ½ tr(Σ₂⁻¹ S₂)` over `(σ₂², ρ)`.
///
/// For fixed `ρ` the optimal `σ₂²` is `tr(B(ρ) S₂) / T`; `ρ` is found by a
/// golden-section search on `[−0.99, 0.99]`. If a coarse scan finds a better
/// point than the golden-section result the profile is not unimodal, and a
/// dense grid with step 0.002 followed by a local refinement is used instead.
pub fn profile_ml_update(s2: &DMatrix<f64>) -> Result<Ar1Params> {
    let summary = MomentSummary::from_moment(s2)?;
    if !(summary.trace > 0.0 && summary.trace.is_finite()) {
        return Err(GlmmError::DegenerateMoment(format!(
            "trace of the time-effect second moment is {}",
            summary.trace
        )));
    }
    let f = |rho: f64| summary.profiled(rho);
    let bound = RHO_SEARCH_BOUND;
    let (mut rho, best) = golden_max(f, -bound, bound, GOLDEN_TOL);

    let coarse_best = (0..=40)
        .map(|k| -bound + 2.0 * bound * k as f64 / 40.0)
        .map(|r| (r, f(r)))
        .fold((rho, best), |acc, c| if c.1 > acc.1 { c } else { acc });
    if coarse_best.1 > best + 1e-12 {
        log::debug!("profile_ml_update: profile not unimodal, using dense grid");
        let steps = (2.0 * bound / FALLBACK_STEP).round() as usize;
        let (grid_rho, _) = (0..=steps)
            .map(|k| (-bound + FALLBACK_STEP * k as f64).min(bound))
            .map(|r| (r, f(r)))
            .fold((coarse_best.0, coarse_best.1), |acc, c| if c.1 > acc.1 { c } else { acc });
        let lo = (grid_rho - FALLBACK_STEP).max(-bound);
        let hi = (grid_rho + FALLBACK_STEP).min(bound);
        let refined = golden_max(f, lo, hi, GOLDEN_TOL);
        rho = if refined.1 >= f(grid_rho) {
            refined.0
        } else {
            grid_rho
        };
    }
    let max_rho = 1.0 - STATIONARITY_MARGIN;
    let rho = rho.clamp(-max_rho, max_rho);
    Ok(Ar1Params {
        rho,
        sigma2_sq: summary.sigma_for(rho),
    })
}
