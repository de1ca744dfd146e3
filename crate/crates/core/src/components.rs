//! Supervised-component EM for many, redundant covariates.
//!
//! The fixed part of the linear predictor is restricted to a few components
//! `f_k = C w_k` of the principal space of the standardised covariates,
//! `η = γ₀ + Σ_k γ_k f_k + Uξ`. Each component maximises
//!
//! ```text
//! Q_reg(w) = (1 − s) · E[L | z] + s · φ(w),
//! φ(w)     = (Σ_j cor²(x_j, Cw)^l)^(1/l)
//! ```
//!
//! over unit vectors `w`, with the coefficients profiled out by weighted least
//! squares. Rank-`k` components are constrained to have scores orthogonal to
//! those of ranks `1..k`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{GlmmError, Result};
use crate::family::{clamp_eta, inverse_link};
use crate::linalg::{cholesky, symmetrize, weighted_cross, weighted_cross_vec};
use crate::model::{ModelState, PanelDataset};
use crate::ridge_em::{
    convergence_criterion, m_step_ar1, m_step_sigma1, posterior_moments, FitReport, IterationRecord,
    LinearisedModel, Termination,
};

const RANK_TOL: f64 = 1e-10;
/// Sufficient-increase fraction for the ascent line search.
const ARMIJO: f64 = 0.3;

/// Principal components of the standardised covariates.
#[derive(Debug, Clone)]
pub struct PrincipalBasis {
    /// `n × r` component scores, `C = X_s V`.
    pub c: DMatrix<f64>,
    /// `p × r` orthonormal directions `V`; `X_s = C Vᵀ`.
    pub basis: DMatrix<f64>,
    /// `diag(CᵀC)`, descending.
    pub eigenvalues: DVector<f64>,
    pub means: DVector<f64>,
    pub scales: DVector<f64>,
    /// Standardised covariates `X_s`.
    pub standardized: DMatrix<f64>,
    x_t_c: DMatrix<f64>,
    col_norms_sq: DVector<f64>,
}

impl PrincipalBasis {
    pub fn rank(&self) -> usize {
        self.c.ncols()
    }

    pub fn n_vars(&self) -> usize {
        self.basis.nrows()
    }

    /// Standardises new rows with the stored column means and scales.
    pub fn standardize(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.n_vars() {
            return Err(GlmmError::Shape(format!(
                "expected {} covariates, got {}",
                self.n_vars(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.means[j]) / self.scales[j]
        }))
    }

    /// Squared correlations `cor²(x_j, Cw)` for every covariate.
    pub fn squared_correlations(&self, w: &DVector<f64>) -> Result<DVector<f64>> {
        let f_norm_sq = self.score_norm_sq(w);
        if !(f_norm_sq > 0.0) {
            return Err(GlmmError::DegenerateComponent("component scores are identically zero".into()));
        }
        let a = &self.x_t_c * w;
        Ok(DVector::from_fn(a.len(), |j, _| {
            a[j] * a[j] / (self.col_norms_sq[j] * f_norm_sq)
        }))
    }

    fn score_norm_sq(&self, w: &DVector<f64>) -> f64 {
        w.iter()
            .zip(self.eigenvalues.iter())
            .map(|(wi, li)| wi * wi * li)
            .sum()
    }

    /// φ and its gradient in `w`.
    fn relevance_and_gradient(&self, w: &DVector<f64>, l: f64) -> Result<(f64, DVector<f64>)> {
        let cor2 = self.squared_correlations(w)?;
        let phi = l_norm(&cor2, l);
        if !(phi > 0.0) {
            return Err(GlmmError::DegenerateComponent(
                "component is uncorrelated with every covariate".into(),
            ));
        }
        let s = self.score_norm_sq(w);
        let a = &self.x_t_c * w;
        // ∂φ/∂c_j = (c_j / φ)^(l−1)
        let t = DVector::from_fn(cor2.len(), |j, _| {
            let r = cor2[j] / phi;
            let weight = if l == 1.0 { 1.0 } else { r.powf(l - 1.0) };
            weight * a[j] / self.col_norms_sq[j]
        });
        let lam_w = w.component_mul(&self.eigenvalues);
        let grad = (self.x_t_c.transpose() * t - lam_w * phi) * (2.0 / s);
        Ok((phi, grad))
    }
}

fn l_norm(values: &DVector<f64>, l: f64) -> f64 {
    let m = values.iter().fold(0.0f64, |m, v| m.max(*v));
    if m == 0.0 {
        return 0.0;
    }
    m * values.iter().map(|v| (v / m).powf(l)).sum::<f64>().powf(1.0 / l)
}

/// Standardises `x` and extracts the principal components with non-zero eigenvalues.
pub fn principal_basis(x: &DMatrix<f64>) -> Result<PrincipalBasis> {
    let (n, p) = x.shape();
    if n < 2 || p == 0 {
        return Err(GlmmError::Shape(format!("need n >= 2 and p >= 1, got {n}x{p}")));
    }
    let means = DVector::from_fn(p, |j, _| x.column(j).mean());
    let mut scales = DVector::zeros(p);
    for j in 0..p {
        let var = x.column(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + means[j].abs())) {
            return Err(GlmmError::Standardisation { column: j });
        }
        scales[j] = sd;
    }
    let standardized = DMatrix::from_fn(n, p, |i, j| (x[(i, j)] - means[j]) / scales[j]);

    // eigendecomposition of the smaller Gram matrix
    let wide = n <= p;
    let gram = if wide {
        &standardized * standardized.transpose()
    } else {
        standardized.transpose() * &standardized
    };
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]];
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > RANK_TOL * top)
        .collect();
    let r = kept.len();

    let mut c = DMatrix::zeros(n, r);
    let mut basis = DMatrix::zeros(p, r);
    for (col, &k) in kept.iter().enumerate() {
        let vec = eig.eigenvectors.column(k);
        if wide {
            let sv = eig.eigenvalues[k].sqrt();
            c.set_column(col, &(vec * sv));
            basis.set_column(col, &(standardized.transpose() * vec / sv));
        } else {
            c.set_column(col, &(&standardized * vec));
            basis.set_column(col, &vec);
        }
    }
    let eigenvalues = DVector::from_fn(r, |k, _| c.column(k).norm_squared());
    let x_t_c = standardized.transpose() * &c;
    let col_norms_sq = DVector::from_fn(p, |j, _| standardized.column(j).norm_squared());
    Ok(PrincipalBasis {
        c,
        basis,
        eigenvalues,
        means,
        scales,
        standardized,
        x_t_c,
        col_norms_sq,
    })
}

/// Structural relevance `φ(w) = (Σ_j cor²(x_j, Cw)^l)^(1/l)`.
pub fn structural_relevance(w: &DVector<f64>, basis: &PrincipalBasis, l: f64) -> Result<f64> {
    check_l(l)?;
    if w.len() != basis.rank() {
        return Err(GlmmError::Shape(format!("w has {}, basis rank is {}", w.len(), basis.rank())));
    }
    Ok(l_norm(&basis.squared_correlations(w)?, l))
}

fn check_l(l: f64) -> Result<()> {
    if !(l >= 1.0 && l.is_finite()) {
        return Err(GlmmError::InvalidArgument(format!("l must be >= 1, got {l}")));
    }
    Ok(())
}

fn check_s(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(GlmmError::InvalidArgument(format!("s must lie in [0, 1], got {s}")));
    }
    Ok(())
}

/// Result of one constrained sphere ascent.
#[derive(Debug, Clone)]
pub struct ComponentOptimum {
    /// Unit loading vector in the principal basis.
    pub w: DVector<f64>,
    /// Coefficient of `f = Cw` in the weighted regression of `z − U E[ξ]` on
    /// the intercept, the earlier components and `f`.
    pub gamma: f64,
    /// `Q_reg(w)` up to terms that do not depend on `w`.
    pub objective: f64,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Ascent controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AscentConfig {
    pub max_steps: usize,
    pub grad_tol: f64,
}

impl Default for AscentConfig {
    fn default() -> Self {
        Self {
            max_steps: 1000,
            grad_tol: 1e-9,
        }
    }
}

/// The objective of one component search, with everything that does not
/// depend on `w` precomputed.
struct ComponentObjective<'a> {
    basis: &'a PrincipalBasis,
    s: f64,
    l: f64,
    /// `C̃ᵀ Γ⁻¹ r̃` where tildes denote the Γ⁻¹-residual after regressing on
    /// the intercept and earlier components.
    lik_a: DVector<f64>,
    /// `C̃ᵀ Γ⁻¹ C̃`.
    lik_b: DMatrix<f64>,
    /// Orthonormal basis of the constraint directions `Cᵀ f_j`.
    constraint: Option<DMatrix<f64>>,
}

impl ComponentObjective<'_> {
    fn project(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.constraint {
            Some(q) => v - q * (q.transpose() * v),
            None => v.clone(),
        }
    }

    /// Profiled expected log-likelihood gain `½ (aᵀw)² / (wᵀBw)` and its gradient.
    fn likelihood(&self, w: &DVector<f64>) -> (f64, DVector<f64>) {
        let aw = self.lik_a.dot(w);
        let bw = &self.lik_b * w;
        let wbw = w.dot(&bw).max(f64::MIN_POSITIVE);
        let value = 0.5 * aw * aw / wbw;
        let grad = &self.lik_a * (aw / wbw) - bw * (aw * aw / (wbw * wbw));
        (value, grad)
    }

    fn value_and_gradient(&self, w: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (lik, lik_grad) = self.likelihood(w);
        let (phi, phi_grad) = if self.s > 0.0 {
            self.basis.relevance_and_gradient(w, self.l)?
        } else {
            (0.0, DVector::zeros(w.len()))
        };
        let value = (1.0 - self.s) * lik + self.s * phi;
        let grad = lik_grad * (1.0 - self.s) + phi_grad * self.s;
        Ok((value, grad))
    }

    fn value(&self, w: &DVector<f64>) -> Result<f64> {
        Ok(self.value_and_gradient(w)?.0)
    }

    fn feasible_unit(&self, v: &DVector<f64>) -> Option<DVector<f64>> {
        let p = self.project(v);
        let norm = p.norm();
        (norm > 1e-8 * v.norm().max(1e-300)).then(|| p / norm)
    }
}

/// Weighted projection onto the span of `cols`: returns `v − cols (colsᵀWcols)⁻¹ colsᵀW v`.
fn weighted_residual(cols: &DMatrix<f64>, w: &DVector<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = weighted_cross(cols, w, cols);
    let chol = cholesky(gram, "component Gram matrix")
        .map_err(|e| GlmmError::DegenerateComponent(e.to_string()))?;
    Ok(v - cols * chol.solve(&weighted_cross(cols, w, v)))
}

fn orthonormal_columns(g: &DMatrix<f64>) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for j in 0..g.ncols() {
        let mut v = g.column(j).into_owned();
        for _ in 0..2 {
            for q in &cols {
                let proj = q.dot(&v);
                v -= q * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-12 * g.column(j).norm().max(1e-300) {
            cols.push(v / norm);
        }
    }
    DMatrix::from_columns(&cols)
}

/// Sign convention: the covariate most correlated with `Cw` correlates positively.
fn fix_sign(w: DVector<f64>, basis: &PrincipalBasis) -> DVector<f64> {
    let a = &basis.x_t_c * &w;
    let (mut best, mut best_abs) = (0.0, -1.0);
    for j in 0..a.len() {
        let v = a[j] / basis.col_norms_sq[j].sqrt();
        if v.abs() > best_abs + 1e-12 {
            best_abs = v.abs();
            best = v;
        }
    }
    if best < 0.0 {
        -w
    } else {
        w
    }
}

/// Finds one component: a constrained local maximiser of `Q_reg` on the unit sphere.
///
/// `xi_mean` is `E[ξ | z]` from the current E-step; `prior_scores` holds the
/// scores `f_j` of already extracted components, which the new scores must be
/// orthogonal to. `warm_start` seeds the search together with the likelihood
/// direction and the leading principal directions.
pub fn optimize_component(
    lin: &LinearisedModel<'_>,
    basis: &PrincipalBasis,
    xi_mean: &DVector<f64>,
    s: f64,
    l: f64,
    prior_scores: &[DVector<f64>],
    warm_start: Option<&DVector<f64>>,
    config: &AscentConfig,
) -> Result<ComponentOptimum> {
    check_s(s)?;
    check_l(l)?;
    let n = lin.z.len();
    let r = basis.rank();
    if prior_scores.len() >= r {
        return Err(GlmmError::InvalidArgument(format!(
            "cannot extract component {} from a rank-{r} basis",
            prior_scores.len() + 1
        )));
    }
    let w_diag = lin.weights();
    let resid = &lin.z - lin.u() * xi_mean;

    let mut fixed = DMatrix::from_element(n, 1 + prior_scores.len(), 1.0);
    for (j, f) in prior_scores.iter().enumerate() {
        fixed.set_column(j + 1, f);
    }
    let resid_mat = DMatrix::from_column_slice(n, 1, resid.as_slice());
    let r_tilde = weighted_residual(&fixed, &w_diag, &resid_mat)?;
    let c_tilde = weighted_residual(&fixed, &w_diag, &basis.c)?;
    let lik_a = weighted_cross(&c_tilde, &w_diag, &r_tilde).column(0).into_owned();
    let mut lik_b = weighted_cross(&c_tilde, &w_diag, &c_tilde);
    symmetrize(&mut lik_b);

    let constraint = if prior_scores.is_empty() {
        None
    } else {
        let g = DMatrix::from_columns(
            &prior_scores.iter().map(|f| basis.c.transpose() * f).collect::<Vec<_>>(),
        );
        Some(orthonormal_columns(&g))
    };
    let objective = ComponentObjective {
        basis,
        s,
        l,
        lik_a,
        lik_b,
        constraint,
    };

    // starting candidates
    let mut candidates: Vec<DVector<f64>> = Vec::new();
    if let Some(w0) = warm_start {
        candidates.push(w0.clone());
    }
    {
        // likelihood direction: B⁺a on the feasible subspace
        let mut b = objective.lik_b.clone();
        if let Some(q) = &objective.constraint {
            let pi = DMatrix::identity(r, r) - q * q.transpose();
            b = &pi * b * &pi + q * q.transpose();
        }
        let scale = b.diagonal().amax().max(1e-300);
        for i in 0..r {
            b[(i, i)] += 1e-12 * scale;
        }
        if let Some(chol) = b.cholesky() {
            candidates.push(chol.solve(&objective.project(&objective.lik_a)));
        }
    }
    for k in 0..r.min(prior_scores.len() + 3) {
        let mut e = DVector::zeros(r);
        e[k] = 1.0;
        candidates.push(e);
    }
    let mut best: Option<(DVector<f64>, f64)> = None;
    for cand in candidates {
        if let Some(w) = objective.feasible_unit(&cand) {
            let v = objective.value(&w)?;
            if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
                best = Some((w, v));
            }
        }
    }
    let (mut w, mut value) = best.ok_or_else(|| {
        GlmmError::DegenerateComponent("no feasible starting direction".into())
    })?;

    let mut trace = vec![value];
    let mut step = 1.0;
    let mut converged = false;
    for _ in 0..config.max_steps {
        let (v, grad) = objective.value_and_gradient(&w)?;
        value = v;
        let g = objective.project(&grad);
        let tangent = &g - &w * g.dot(&w);
        let gnorm = tangent.norm();
        if gnorm <= config.grad_tol * (1.0 + value.abs()) {
            converged = true;
            break;
        }
        let mut accepted = false;
        while step * gnorm > 1e-16 {
            let trial = objective.feasible_unit(&(&w + &tangent * step));
            if let Some(trial) = trial {
                let tv = objective.value(&trial)?;
                if tv > value && tv >= value + ARMIJO * step * gnorm * gnorm {
                    w = trial;
                    value = tv;
                    accepted = true;
                    step *= 2.0;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            // no ascent direction is resolvable in floating point
            converged = true;
            break;
        }
        trace.push(value);
    }
    if !converged {
        return Err(GlmmError::ComponentFailure(format!(
            "sphere ascent did not converge after {} steps",
            config.max_steps
        )));
    }

    let w = fix_sign(w, basis);
    let f = &basis.c * &w;
    let f_mat = DMatrix::from_column_slice(n, 1, f.as_slice());
    let f_tilde = weighted_residual(&fixed, &w_diag, &f_mat)?;
    let denom = weighted_cross(&f_tilde, &w_diag, &f_tilde)[(0, 0)];
    let gamma = weighted_cross(&f_tilde, &w_diag, &r_tilde)[(0, 0)] / denom;
    Ok(ComponentOptimum {
        w,
        gamma,
        objective: value,
        trace,
    })
}

/// Extracted components and their coefficients.
#[derive(Debug, Clone)]
pub struct ComponentSet {
    /// `r × K` unit loadings in the principal basis.
    pub w: DMatrix<f64>,
    /// `n × K` scores `F = CW`.
    pub scores: DMatrix<f64>,
    /// `p × K` unit loadings on the standardised covariates.
    pub loadings: DMatrix<f64>,
    pub s: f64,
    pub l: f64,
    pub intercept: f64,
    pub gamma_coefs: DVector<f64>,
}

impl ComponentSet {
    /// Coefficients of the standardised covariates, `V W γ`.
    pub fn standardized_coefficients(&self) -> DVector<f64> {
        &self.loadings * &self.gamma_coefs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComponentConfig {
    pub max_outer_iters: usize,
    pub tol: f64,
    pub ascent: AscentConfig,
}

impl Default for ComponentConfig {
    fn default() -> Self {
        Self {
            max_outer_iters: 500,
            tol: 1e-6,
            ascent: AscentConfig::default(),
        }
    }
}

/// A component fit for one `(s, l)`.
#[derive(Debug, Clone)]
pub struct ComponentModel {
    pub basis: PrincipalBasis,
    pub components: ComponentSet,
    /// `theta_hat.beta` holds the standardised-covariate coefficients.
    pub report: FitReport,
}

impl ComponentModel {
    /// Population-level linear predictor (random effects at zero) for new covariate rows.
    pub fn predict_eta(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let xs = self.basis.standardize(x)?;
        Ok((xs * self.components.standardized_coefficients()).add_scalar(self.components.intercept))
    }
}

fn fixed_part(intercept: f64, scores: &[DVector<f64>], gamma: &DVector<f64>, n: usize) -> DVector<f64> {
    let mut eta = DVector::from_element(n, intercept);
    for (f, g) in scores.iter().zip(gamma.iter()) {
        eta += f * *g;
    }
    eta
}

/// Runs the component EM at fixed `(s, l)`.
pub fn fit_components_fixed(
    dataset: &PanelDataset,
    n_components: usize,
    s: f64,
    l: f64,
    config: &ComponentConfig,
) -> Result<ComponentModel> {
    check_s(s)?;
    check_l(l)?;
    if !(config.tol > 0.0) || config.max_outer_iters == 0 {
        return Err(GlmmError::InvalidArgument("tol must be positive and max iterations >= 1".into()));
    }
    let basis = principal_basis(&dataset.x)?;
    if n_components == 0 || n_components > basis.rank() {
        return Err(GlmmError::InvalidArgument(format!(
            "number of components must be in 1..={}, got {n_components}",
            basis.rank()
        )));
    }
    let designs = dataset.designs()?;
    let layout = dataset.layout;
    let n = layout.n_obs();
    let n_ind = layout.n_individuals();
    let family = dataset.family;

    let mut mu = family.initial_mean(&dataset.y);
    let lin0 = LinearisedModel::from_mean(&dataset.y, &mu, &family, &designs, layout)?;
    let w0 = lin0.weights();
    let mut intercept = lin0.z.dot(&w0) / w0.sum();
    let mut scores: Vec<DVector<f64>> = Vec::new();
    let mut loadings_w: Vec<DVector<f64>> = Vec::new();
    let mut gamma = DVector::zeros(0);
    let mut theta = ModelState::new(DVector::zeros(basis.n_vars()), 0.5, 0.5, 0.0, layout.n_random())?;

    let param_vec = |intercept: f64, theta: &ModelState| {
        let v = theta.param_vector();
        let mut out = DVector::zeros(v.len() + 1);
        out[0] = intercept;
        out.rows_mut(1, v.len()).copy_from(&v);
        out
    };

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
        let step = || -> Result<_> {
            let lin = LinearisedModel::from_mean(&dataset.y, &mu, &family, &designs, layout)?;
            let offset = fixed_part(intercept, &scores, &gamma, n);
            let post = posterior_moments(&lin, &offset, &theta.prior_precision(&layout)?)?;

            let mut new_scores = Vec::with_capacity(n_components);
            let mut new_w = Vec::with_capacity(n_components);
            for k in 0..n_components {
                let opt = optimize_component(
                    &lin,
                    &basis,
                    &post.mean,
                    s,
                    l,
                    &new_scores,
                    loadings_w.get(k),
                    &config.ascent,
                )?;
                new_scores.push(&basis.c * &opt.w);
                new_w.push(opt.w);
            }

            // joint weighted regression of z − U E[ξ] on [1, F]
            let w_diag = lin.weights();
            let mut design = DMatrix::from_element(n, 1 + n_components, 1.0);
            for (k, f) in new_scores.iter().enumerate() {
                design.set_column(k + 1, f);
            }
            let resid = &lin.z - lin.u() * &post.mean;
            let coef = cholesky(weighted_cross(&design, &w_diag, &design), "component regression")
                .map_err(|e| GlmmError::numerical(e.to_string()))?
                .solve(&weighted_cross_vec(&design, &w_diag, &resid));
            let new_intercept = coef[0];
            let new_gamma = coef.rows(1, n_components).into_owned();

            let mut next = theta.clone();
            next.sigma1_sq = m_step_sigma1(&post.mean, &post.cov, n_ind);
            let ar = m_step_ar1(&post.mean, &post.cov, n_ind)?;
            next.sigma2_sq = ar.sigma2_sq;
            next.rho = ar.rho;
            let wmat = DMatrix::from_columns(&new_w);
            next.beta = &basis.basis * &wmat * &new_gamma;

            let offset = fixed_part(new_intercept, &new_scores, &new_gamma, n);
            let post = posterior_moments(&lin, &offset, &next.prior_precision(&layout)?)?;
            next.xi_mean = post.mean;
            next.xi_cov = post.cov;
            let mut eta = offset + lin.u() * &next.xi_mean;
            let clamps = clamp_eta(&mut eta, &family);
            let mu_next = inverse_link(&eta, &family);
            Ok((next, new_intercept, new_gamma, new_scores, new_w, mu_next, clamps))
        };
        let (next, new_intercept, new_gamma, new_scores, new_w, mu_next, clamps) =
            step().map_err(|e| e.at_iteration(iter))?;

        let criterion = convergence_criterion(&param_vec(intercept, &theta), &param_vec(new_intercept, &next));
        if !criterion.is_finite() {
            return Err(GlmmError::NumericalFailure {
                context: "non-finite parameter update".into(),
                iteration: Some(iter),
            });
        }
        report.eta_clamps += clamps;
        report.trajectories.push(IterationRecord {
            iteration: iter,
            criterion,
            beta: next.beta.clone(),
            sigma1_sq: next.sigma1_sq,
            sigma2_sq: next.sigma2_sq,
            rho: next.rho,
            lambda: None,
        });
        report.n_iters = iter;
        theta = next;
        intercept = new_intercept;
        gamma = new_gamma;
        scores = new_scores;
        loadings_w = new_w;
        mu = mu_next;
        if criterion < config.tol {
            report.termination = Termination::Converged;
            break;
        }
    }
    report.theta_hat = theta;

    let w = DMatrix::from_columns(&loadings_w);
    let components = ComponentSet {
        scores: &basis.c * &w,
        loadings: &basis.basis * &w,
        w,
        s,
        l,
        intercept,
        gamma_coefs: gamma,
    };
    Ok(ComponentModel {
        basis,
        components,
        report,
    })
}

/// Cross-validation over individuals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
}

/// Held-out deviance of one `(s, l)` cell, summed over folds.
#[derive(Debug, Clone, PartialEq)]
pub struct CvCell {
    pub s: f64,
    pub l: f64,
    pub deviance: f64,
}

#[derive(Debug, Clone)]
pub struct ComponentFit {
    pub model: ComponentModel,
    pub selected_s: f64,
    pub selected_l: f64,
    pub cv_table: Vec<CvCell>,
    pub fold_of_individual: Vec<usize>,
}

impl ComponentFit {
    pub fn components(&self) -> &ComponentSet {
        &self.model.components
    }

    pub fn report(&self) -> &FitReport {
        &self.model.report
    }
}

/// Seeded assignment of individuals to folds.
pub fn assign_folds(n_individuals: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_individuals).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n_individuals];
    for (pos, &ind) in order.iter().enumerate() {
        fold[ind] = pos % folds;
    }
    fold
}

/// Tunes `(s, l)` by held-out deviance over folds of individuals, then refits
/// on the full panel. Held-out individuals are predicted with `ξ = 0`.
pub fn fit_components(
    dataset: &PanelDataset,
    n_components: usize,
    s_grid: &[f64],
    l_grid: &[f64],
    cv: &CvConfig,
    config: &ComponentConfig,
) -> Result<ComponentFit> {
    if s_grid.is_empty() || l_grid.is_empty() {
        return Err(GlmmError::InvalidArgument("s and l grids must be non-empty".into()));
    }
    s_grid.iter().try_for_each(|s| check_s(*s))?;
    l_grid.iter().try_for_each(|l| check_l(*l))?;
    let n_ind = dataset.layout.n_individuals();
    if cv.folds < 2 || cv.folds > n_ind {
        return Err(GlmmError::InvalidArgument(format!(
            "cv folds must be in 2..={n_ind}, got {}",
            cv.folds
        )));
    }
    let fold_of = assign_folds(n_ind, cv.folds, cv.seed);

    let grid: Vec<(f64, f64)> = s_grid
        .iter()
        .flat_map(|&s| l_grid.iter().map(move |&l| (s, l)))
        .collect();
    let cells: Vec<(usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..cv.folds).map(move |f| (g, f)))
        .collect();

    let losses: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(g, fold)| {
            let (s, l) = grid[g];
            let train: Vec<usize> = (0..n_ind).filter(|&i| fold_of[i] != fold).collect();
            let test: Vec<usize> = (0..n_ind).filter(|&i| fold_of[i] == fold).collect();
            let train_data = dataset.select_individuals(&train)?;
            let test_data = dataset.select_individuals(&test)?;
            let model = fit_components_fixed(&train_data, n_components, s, l, config)?;
            let eta = model.predict_eta(&test_data.x)?;
            let mu = inverse_link(&eta, &dataset.family);
            Ok(dataset.family.deviance(&test_data.y, &mu))
        })
        .collect();

    let mut cv_table: Vec<CvCell> = grid
        .iter()
        .map(|&(s, l)| CvCell { s, l, deviance: 0.0 })
        .collect();
    for (&(g, _), loss) in cells.iter().zip(losses) {
        cv_table[g].deviance += loss?;
    }
    let best = cv_table
        .iter()
        .enumerate()
        .fold(None::<usize>, |acc, (k, c)| match acc {
            Some(b) if cv_table[b].deviance <= c.deviance => Some(b),
            _ => Some(k),
        })
        .expect("non-empty grid");
    let (selected_s, selected_l) = grid[best];
    let model = fit_components_fixed(dataset, n_components, selected_s, selected_l, config)?;
    Ok(ComponentFit {
        model,
        selected_s,
        selected_l,
        cv_table,
        fold_of_individual: fold_of,
    })
}
