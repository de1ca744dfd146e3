//! L2-penalised EM for the panel GLMM.
//!
//! Each outer iteration linearises the response around the current mean,
//! picks the ridge parameter λ by a Γ⁻¹-weighted GCV criterion, runs one EM
//! sweep on the linearised mixed model, and refreshes `E[ξ|z]`, `μ`, `z` and
//! `Γ` under the new parameters. Iteration stops once the relative change of
//! `(β, σ₁², σ₂², ρ)` drops below the tolerance.

mod gcv;
mod steps;

use nalgebra::{DMatrix, DVector};

pub use gcv::{
    augmented_solve, gcv_refine_lambda, gcv_score, gcv_select_lambda, gcv_select_lambda_with, hat_matrix, log_grid,
    AugmentedSolution, GcvPath, Smoother,
};
pub use steps::{e_step, m_step_ar1, m_step_beta, m_step_sigma1, posterior_moments, q_pen, Posterior};

use crate::error::{GlmmError, Result};
use crate::family::{clamp_eta, inverse_link, working_response, Family};
use crate::linalg::{cholesky, weighted_cross, weighted_cross_vec};
use crate::model::{DesignMatrices, ModelState, PanelDataset, PanelLayout};

/// One linearised model `z = Xβ + Uξ + e`, `Var(e | ξ) = diag(gamma_diag)`.
#[derive(Debug, Clone)]
pub struct LinearisedModel<'a> {
    pub z: DVector<f64>,
    pub gamma_diag: DVector<f64>,
    pub designs: &'a DesignMatrices,
    pub layout: PanelLayout,
}

impl<'a> LinearisedModel<'a> {
    pub fn new(
        z: DVector<f64>,
        gamma_diag: DVector<f64>,
        designs: &'a DesignMatrices,
        layout: PanelLayout,
    ) -> Result<Self> {
        let n = layout.n_obs();
        if z.len() != n || gamma_diag.len() != n || designs.x.nrows() != n {
            return Err(GlmmError::Shape(format!(
                "z has {}, gamma has {}, X has {} rows, layout n = {n}",
                z.len(),
                gamma_diag.len(),
                designs.x.nrows()
            )));
        }
        if designs.u().ncols() != layout.n_random() {
            return Err(GlmmError::Shape("random design does not match layout".into()));
        }
        if let Some(i) = gamma_diag.iter().position(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(GlmmError::numerical(format!(
                "working variance at row {i} is {}",
                gamma_diag[i]
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(GlmmError::numerical("non-finite working response"));
        }
        Ok(Self {
            z,
            gamma_diag,
            designs,
            layout,
        })
    }

    /// Linearises `y` around `mu`.
    pub fn from_mean(
        y: &DVector<f64>,
        mu: &DVector<f64>,
        family: &Family,
        designs: &'a DesignMatrices,
        layout: PanelLayout,
    ) -> Result<Self> {
        let (z, gamma) = working_response(y, mu, family)?;
        Self::new(z, gamma, designs, layout)
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.designs.x
    }

    pub fn u(&self) -> &DMatrix<f64> {
        self.designs.u()
    }

    /// Diagonal of `Γ⁻¹`.
    pub fn weights(&self) -> DVector<f64> {
        self.gamma_diag.map(|g| 1.0 / g)
    }

    /// `UᵀΓ⁻¹U`, assembled from per-individual and per-time weight sums.
    pub(crate) fn ut_w_u(&self) -> DMatrix<f64> {
        let (n_ind, n_t) = (self.layout.n_individuals(), self.layout.n_times());
        let mut m = DMatrix::zeros(n_ind + n_t, n_ind + n_t);
        for i in 0..n_ind {
            for t in 0..n_t {
                let w = 1.0 / self.gamma_diag[self.layout.row(i, t)];
                m[(i, i)] += w;
                m[(n_ind + t, n_ind + t)] += w;
                m[(i, n_ind + t)] = w;
                m[(n_ind + t, i)] = w;
            }
        }
        m
    }

    /// `UᵀΓ⁻¹M`, by summing weighted rows per individual and per time.
    pub(crate) fn ut_w(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let (n_ind, n_t) = (self.layout.n_individuals(), self.layout.n_times());
        let mut out = DMatrix::zeros(n_ind + n_t, m.ncols());
        for i in 0..n_ind {
            for t in 0..n_t {
                let r = self.layout.row(i, t);
                let w = 1.0 / self.gamma_diag[r];
                for c in 0..m.ncols() {
                    let v = w * m[(r, c)];
                    out[(i, c)] += v;
                    out[(n_ind + t, c)] += v;
                }
            }
        }
        out
    }

    pub(crate) fn ut_w_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
        self.ut_w(&m).column(0).into_owned()
    }
}

/// How λ is chosen at each outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaSelection {
    /// GCV minimiser, re-evaluated every iteration: the grid argmin, refined
    /// between its grid neighbours when [`RidgeConfig::refine_lambda`] is set.
    Gcv(Vec<f64>),
    /// A fixed ridge parameter (`0` disables the penalty).
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeConfig {
    pub lambda: LambdaSelection,
    pub max_outer_iters: usize,
    pub tol: f64,
    pub em_inner_iters: usize,
    pub smoother: Smoother,
    /// Refine the GCV grid argmin by a golden-section search in `log λ`.
    pub refine_lambda: bool,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            lambda: LambdaSelection::Gcv(log_grid(1e-4, 1e4, 50)),
            max_outer_iters: 500,
            tol: 1e-6,
            em_inner_iters: 1,
            smoother: Smoother::Full,
            refine_lambda: true,
        }
    }
}

impl RidgeConfig {
    pub fn with_grid(grid: Vec<f64>) -> Self {
        Self {
            lambda: LambdaSelection::Gcv(grid),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.lambda {
            LambdaSelection::Gcv(grid) => {
                if grid.is_empty() {
                    return Err(GlmmError::InvalidArgument("λ grid must be non-empty".into()));
                }
                if grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                    return Err(GlmmError::InvalidArgument("λ grid values must be positive".into()));
                }
                if grid.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(GlmmError::InvalidArgument("λ grid must be strictly ascending".into()));
                }
            }
            LambdaSelection::Fixed(l) => {
                if !(*l >= 0.0 && l.is_finite()) {
                    return Err(GlmmError::InvalidArgument(format!("fixed λ must be >= 0, got {l}")));
                }
            }
        }
        if !(self.tol > 0.0) {
            return Err(GlmmError::InvalidArgument("tol must be positive".into()));
        }
        if self.max_outer_iters == 0 || self.em_inner_iters == 0 {
            return Err(GlmmError::InvalidArgument(
                "iteration counts must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
    NumericalFailure,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::MaxIters => "max-iters",
            Termination::NumericalFailure => "numerical-failure",
        }
    }
}

/// Parameters after one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    pub criterion: f64,
    pub beta: DVector<f64>,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub rho: f64,
    /// `None` when the fit has no ridge parameter.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub theta_hat: ModelState,
    pub lambda_path: Vec<f64>,
    /// One GCV path per outer iteration (empty for a fixed λ).
    pub gcv_paths: Vec<GcvPath>,
    pub trajectories: Vec<IterationRecord>,
    pub n_iters: usize,
    pub termination: Termination,
    /// Linear-predictor entries clamped over the whole fit.
    pub eta_clamps: usize,
}

impl FitReport {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }

    /// λ used in the last iteration.
    pub fn final_lambda(&self) -> Option<f64> {
        self.trajectories.last().and_then(|r| r.lambda)
    }
}

/// `‖θ_new − θ_old‖₂ / (‖θ_old‖₂ + 1e-12)` over the stacked parameter vector.
pub fn convergence_criterion(old: &DVector<f64>, new: &DVector<f64>) -> f64 {
    (new - old).norm() / (old.norm() + 1e-12)
}

/// Fixed-ridge (`λ = 1`) weighted least squares on the first linearisation with `ξ = 0`.
fn initial_beta(lin: &LinearisedModel<'_>) -> Result<DVector<f64>> {
    let x = lin.x();
    let w = lin.weights();
    let mut a = weighted_cross(x, &w, x);
    for i in 0..a.nrows() {
        a[(i, i)] += 1.0;
    }
    Ok(cholesky(a, "initial ridge system")?.solve(&weighted_cross_vec(x, &w, &lin.z)))
}

/// Starting state: ridge-initialised β, `σ₁² = σ₂² = 0.5`, `ρ = 0`.
pub fn initial_state(dataset: &PanelDataset, designs: &DesignMatrices) -> Result<ModelState> {
    let mu0 = dataset.family.initial_mean(&dataset.y);
    let lin = LinearisedModel::from_mean(&dataset.y, &mu0, &dataset.family, designs, dataset.layout)?;
    ModelState::new(initial_beta(&lin)?, 0.5, 0.5, 0.0, dataset.layout.n_random())
}

/// Runs the penalised EM to convergence.
pub fn fit(dataset: &PanelDataset, config: &RidgeConfig) -> Result<FitReport> {
    config.validate()?;
    let designs = dataset.designs()?;
    let theta0 = initial_state(dataset, &designs)?;
    fit_from(dataset, &designs, config, theta0)
}

/// Runs the penalised EM from a given starting state.
pub fn fit_from(
    dataset: &PanelDataset,
    designs: &DesignMatrices,
    config: &RidgeConfig,
    theta0: ModelState,
) -> Result<FitReport> {
    config.validate()?;
    let layout = dataset.layout;
    let n_ind = layout.n_individuals();
    let family = dataset.family;

    let mut theta = theta0;
    let mut mu = family.initial_mean(&dataset.y);
    let mut report = FitReport {
        theta_hat: theta.clone(),
        lambda_path: Vec::new(),
        gcv_paths: Vec::new(),
        trajectories: Vec::new(),
        n_iters: 0,
        termination: Termination::MaxIters,
        eta_clamps: 0,
    };

    for iter in 1..=config.max_outer_iters {
        let step = || -> Result<(ModelState, f64, Option<GcvPath>, DVector<f64>, usize)> {
            // (1) linearisation
            let lin = LinearisedModel::from_mean(&dataset.y, &mu, &family, designs, layout)?;

            // (2.b) λ by GCV at the pre-update parameters
            let (lambda, path) = match &config.lambda {
                LambdaSelection::Gcv(grid) => {
                    let (l, p) = if config.refine_lambda {
                        gcv_refine_lambda(&lin, &theta, grid, config.smoother)?
                    } else {
                        gcv_select_lambda_with(&lin, &theta, grid, config.smoother)?
                    };
                    (l, Some(p))
                }
                LambdaSelection::Fixed(l) => (*l, None),
            };

            // (2.c) EM sweep(s)
            let mut next = theta.clone();
            for _ in 0..config.em_inner_iters {
                let post = e_step(&lin, &next)?;
                let beta = m_step_beta(&lin, &post.mean, lambda)?;
                let sigma1_sq = m_step_sigma1(&post.mean, &post.cov, n_ind);
                let ar = m_step_ar1(&post.mean, &post.cov, n_ind)?;
                next.beta = beta;
                next.sigma1_sq = sigma1_sq;
                next.sigma2_sq = ar.sigma2_sq;
                next.rho = ar.rho;
            }

            // (3) updating step
            let post = e_step(&lin, &next)?;
            next.xi_mean = post.mean;
            next.xi_cov = post.cov;
            let mut eta = lin.x() * &next.beta + lin.u() * &next.xi_mean;
            let clamps = clamp_eta(&mut eta, &family);
            let mu_next = inverse_link(&eta, &family);
            Ok((next, lambda, path, mu_next, clamps))
        };
        let (next, lambda, path, mu_next, clamps) = step().map_err(|e| e.at_iteration(iter))?;

        if next.param_vector().iter().any(|v| !v.is_finite()) {
            return Err(GlmmError::NumericalFailure {
                context: "non-finite parameter update".into(),
                iteration: Some(iter),
            });
        }

        let criterion = convergence_criterion(&theta.param_vector(), &next.param_vector());
        report.eta_clamps += clamps;
        report.lambda_path.push(lambda);
        if let Some(p) = path {
            report.gcv_paths.push(p);
        }
        report.trajectories.push(IterationRecord {
            iteration: iter,
            criterion,
            beta: next.beta.clone(),
            sigma1_sq: next.sigma1_sq,
            sigma2_sq: next.sigma2_sq,
            rho: next.rho,
            lambda: Some(lambda),
        });
        report.n_iters = iter;
        theta = next;
        mu = mu_next;

        if criterion < config.tol {
            report.termination = Termination::Converged;
            break;
        }
    }
    if report.eta_clamps > 0 {
        log::warn!("linear predictor clamped {} times during the fit", report.eta_clamps);
    }
    report.theta_hat = theta;
    Ok(report)
}
