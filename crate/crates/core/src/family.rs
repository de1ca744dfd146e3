//! Response families, their canonical links and the order-1 linearisation.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{GlmmError, Result};

/// Bound applied to `η` for the log and logit links while iterating.
pub const ETA_CLAMP: f64 = 30.0;

const EXP_OVERFLOW: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    PoissonLog,
    BernoulliLogit,
    GaussianIdentity,
}

impl FamilyKind {
    pub const ALL: [FamilyKind; 3] = [
        FamilyKind::PoissonLog,
        FamilyKind::BernoulliLogit,
        FamilyKind::GaussianIdentity,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FamilyKind::PoissonLog => "poisson-log",
            FamilyKind::BernoulliLogit => "bernoulli-logit",
            FamilyKind::GaussianIdentity => "gaussian-identity",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FamilyKind {
    type Err = GlmmError;

    fn from_str(s: &str) -> Result<Self> {
        FamilyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                GlmmError::InvalidArgument(format!(
                    "unknown family '{s}' (expected poisson-log, bernoulli-logit or gaussian-identity)"
                ))
            })
    }
}

/// Exponential family with its canonical link.
///
/// `dispersion` is the known error variance of the Gaussian family and is
/// ignored by the other two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub kind: FamilyKind,
    pub dispersion: f64,
}

impl Family {
    pub fn poisson() -> Self {
        Self {
            kind: FamilyKind::PoissonLog,
            dispersion: 1.0,
        }
    }

    pub fn bernoulli() -> Self {
        Self {
            kind: FamilyKind::BernoulliLogit,
            dispersion: 1.0,
        }
    }

    pub fn gaussian(dispersion: f64) -> Self {
        Self {
            kind: FamilyKind::GaussianIdentity,
            dispersion,
        }
    }

    pub fn from_kind(kind: FamilyKind) -> Self {
        Self {
            kind,
            dispersion: 1.0,
        }
    }

    pub fn link(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::PoissonLog => mu.ln(),
            FamilyKind::BernoulliLogit => (mu / (1.0 - mu)).ln(),
            FamilyKind::GaussianIdentity => mu,
        }
    }

    pub fn link_derivative(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::PoissonLog => 1.0 / mu,
            FamilyKind::BernoulliLogit => 1.0 / (mu * (1.0 - mu)),
            FamilyKind::GaussianIdentity => 1.0,
        }
    }

    /// `Var(Y | ξ)` as a function of the conditional mean.
    pub fn variance(&self, mu: f64) -> f64 {
        match self.kind {
            FamilyKind::PoissonLog => mu,
            FamilyKind::BernoulliLogit => mu * (1.0 - mu),
            FamilyKind::GaussianIdentity => self.dispersion,
        }
    }

    fn mean_in_range(&self, mu: f64) -> bool {
        match self.kind {
            FamilyKind::PoissonLog => mu > 0.0 && mu.is_finite(),
            FamilyKind::BernoulliLogit => mu > 0.0 && mu < 1.0,
            FamilyKind::GaussianIdentity => mu.is_finite(),
        }
    }

    /// Checks that every response lies in the family's support.
    pub fn check_support(&self, y: &[f64]) -> Result<()> {
        if matches!(self.kind, FamilyKind::GaussianIdentity) && !(self.dispersion > 0.0) {
            return Err(GlmmError::InvalidArgument(format!(
                "gaussian dispersion must be positive, got {}",
                self.dispersion
            )));
        }
        for (i, &v) in y.iter().enumerate() {
            let ok = match self.kind {
                FamilyKind::PoissonLog => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
                FamilyKind::BernoulliLogit => v == 0.0 || v == 1.0,
                FamilyKind::GaussianIdentity => v.is_finite(),
            };
            if !ok {
                return Err(GlmmError::InvalidArgument(format!(
                    "response {v} at row {i} is outside the support of {}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    /// Starting mean for the first linearisation, kept away from the boundary.
    pub fn initial_mean(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| match self.kind {
            FamilyKind::PoissonLog => v + 0.5,
            FamilyKind::BernoulliLogit => (v + 0.5) / 2.0,
            FamilyKind::GaussianIdentity => v,
        })
    }

    /// Unit deviance summed over observations.
    pub fn deviance(&self, y: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        y.iter()
            .zip(mu.iter())
            .map(|(&y, &m)| match self.kind {
                FamilyKind::PoissonLog => {
                    let t = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
                    2.0 * (t - (y - m))
                }
                FamilyKind::BernoulliLogit => {
                    let m = m.clamp(1e-15, 1.0 - 1e-15);
                    -2.0 * (y * m.ln() + (1.0 - y) * (1.0 - m).ln())
                }
                FamilyKind::GaussianIdentity => (y - m).powi(2) / self.dispersion,
            })
            .sum()
    }
}

/// `μ = g⁻¹(η)`.
///
/// For the log link, `η` beyond ±700 would overflow `exp`; such entries are
/// clamped and a warning is logged.
pub fn inverse_link(eta: &DVector<f64>, family: &Family) -> DVector<f64> {
    let mut overflowed = 0usize;
    let mu = eta.map(|e| match family.kind {
        FamilyKind::PoissonLog => {
            if e.abs() > EXP_OVERFLOW {
                overflowed += 1;
            }
            e.clamp(-EXP_OVERFLOW, EXP_OVERFLOW).exp()
        }
        FamilyKind::BernoulliLogit => {
            if e >= 0.0 {
                1.0 / (1.0 + (-e).exp())
            } else {
                let ex = e.exp();
                ex / (1.0 + ex)
            }
        }
        FamilyKind::GaussianIdentity => e,
    });
    if overflowed > 0 {
        log::warn!("inverse_link: clamped {overflowed} linear predictor values beyond ±{EXP_OVERFLOW}");
    }
    mu
}

/// Clamps `η` to ±[`ETA_CLAMP`] for the non-identity links; returns how many entries moved.
pub fn clamp_eta(eta: &mut DVector<f64>, family: &Family) -> usize {
    if matches!(family.kind, FamilyKind::GaussianIdentity) {
        return 0;
    }
    let mut count = 0;
    for e in eta.iter_mut() {
        if e.abs() > ETA_CLAMP {
            *e = e.clamp(-ETA_CLAMP, ETA_CLAMP);
            count += 1;
        }
    }
    count
}

/// Working response `z = g(μ) + (y − μ) g′(μ)` and the diagonal of `Γ`,
/// `γ = g′(μ)² Var(Y | ξ)`.
pub fn working_response(
    y: &DVector<f64>,
    mu: &DVector<f64>,
    family: &Family,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if y.len() != mu.len() {
        return Err(GlmmError::Shape(format!(
            "y has {} entries, mu has {}",
            y.len(),
            mu.len()
        )));
    }
    let n = y.len();
    let mut z = DVector::zeros(n);
    let mut gamma = DVector::zeros(n);
    for i in 0..n {
        let m = mu[i];
        if !family.mean_in_range(m) {
            return Err(GlmmError::DegenerateMean { index: i, mu: m });
        }
        let d = family.link_derivative(m);
        z[i] = family.link(m) + (y[i] - m) * d;
        gamma[i] = d * d * family.variance(m);
    }
    Ok((z, gamma))
}
