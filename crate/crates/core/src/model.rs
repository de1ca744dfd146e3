//! Panel layout, design matrices and the parameter tuple shared by the estimators.
//!
//! Observations are stored individual-major: row `i = individual * T + time`
//! (zero-based). Every length-`n` vector in the crate follows this order.

use nalgebra::{DMatrix, DVector};

use crate::ar1::Ar1Params;
use crate::error::{GlmmError, Result};
use crate::family::Family;

/// Dimensions of a balanced panel: `N` individuals observed at the same `T` times.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelLayout {
    n_individuals: usize,
    n_times: usize,
}

impl PanelLayout {
    pub fn new(n_individuals: usize, n_times: usize) -> Result<Self> {
        if n_individuals == 0 || n_times == 0 {
            return Err(GlmmError::InvalidLayout(format!(
                "need at least one individual and one time point, got N={n_individuals}, T={n_times}"
            )));
        }
        Ok(Self {
            n_individuals,
            n_times,
        })
    }

    pub fn n_individuals(&self) -> usize {
        self.n_individuals
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_obs(&self) -> usize {
        self.n_individuals * self.n_times
    }

    /// Number of random-effect levels, `N + T`.
    pub fn n_random(&self) -> usize {
        self.n_individuals + self.n_times
    }

    /// Row index of `(individual, time)`, both zero-based.
    pub fn row(&self, individual: usize, time: usize) -> usize {
        debug_assert!(individual < self.n_individuals && time < self.n_times);
        individual * self.n_times + time
    }

    pub fn individual_of(&self, row: usize) -> usize {
        row / self.n_times
    }

    pub fn time_of(&self, row: usize) -> usize {
        row % self.n_times
    }
}

/// Incidence matrices of the two random effects.
///
/// `u1 = I_N ⊗ 1_T`, `u2 = 1_N ⊗ I_T`, `u = [u1 | u2]`. Stored densely; each
/// row of `u` holds exactly two ones.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomDesign {
    pub u1: DMatrix<f64>,
    pub u2: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

/// Fixed-effect design together with the random-effect incidence.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub x: DMatrix<f64>,
    pub random: RandomDesign,
}

impl DesignMatrices {
    pub fn new(layout: &PanelLayout, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != layout.n_obs() {
            return Err(GlmmError::Shape(format!(
                "X has {} rows, layout has n = {}",
                x.nrows(),
                layout.n_obs()
            )));
        }
        Ok(Self {
            x,
            random: build_designs(layout)?,
        })
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.random.u
    }
}

/// Builds the individual and time incidence matrices for `layout`.
pub fn build_designs(layout: &PanelLayout) -> Result<RandomDesign> {
    let (n_ind, n_t) = (layout.n_individuals(), layout.n_times());
    if n_t < 2 {
        return Err(GlmmError::InvalidLayout(format!(
            "the AR(1) time effect needs T >= 2, got T={n_t}"
        )));
    }
    let n = layout.n_obs();
    let mut u1 = DMatrix::zeros(n, n_ind);
    let mut u2 = DMatrix::zeros(n, n_t);
    let mut u = DMatrix::zeros(n, n_ind + n_t);
    for row in 0..n {
        let (i, t) = (layout.individual_of(row), layout.time_of(row));
        u1[(row, i)] = 1.0;
        u2[(row, t)] = 1.0;
        u[(row, i)] = 1.0;
        u[(row, n_ind + t)] = 1.0;
    }
    Ok(RandomDesign { u1, u2, u })
}

/// `η = Xβ + Uξ`.
pub fn linear_predictor(
    x: &DMatrix<f64>,
    u: &DMatrix<f64>,
    beta: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.ncols() != beta.len() || u.ncols() != xi.len() || x.nrows() != u.nrows() {
        return Err(GlmmError::Shape(format!(
            "X is {}x{}, beta has {}, U is {}x{}, xi has {}",
            x.nrows(),
            x.ncols(),
            beta.len(),
            u.nrows(),
            u.ncols(),
            xi.len()
        )));
    }
    Ok(x * beta + u * xi)
}

/// Parameter tuple `(β, σ₁², σ₂², ρ)` plus the current posterior moments of `ξ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub beta: DVector<f64>,
    pub sigma1_sq: f64,
    /// Innovation variance of the AR(1) time effect.
    pub sigma2_sq: f64,
    pub rho: f64,
    pub xi_mean: DVector<f64>,
    pub xi_cov: DMatrix<f64>,
}

impl ModelState {
    /// A state with zero posterior moments.
    pub fn new(
        beta: DVector<f64>,
        sigma1_sq: f64,
        sigma2_sq: f64,
        rho: f64,
        n_random: usize,
    ) -> Result<Self> {
        let state = Self {
            beta,
            sigma1_sq,
            sigma2_sq,
            rho,
            xi_mean: DVector::zeros(n_random),
            xi_cov: DMatrix::zeros(n_random, n_random),
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma1_sq > 0.0 && self.sigma1_sq.is_finite()) {
            return Err(GlmmError::InvalidArgument(format!(
                "sigma1_sq must be positive, got {}",
                self.sigma1_sq
            )));
        }
        if !(self.sigma2_sq > 0.0 && self.sigma2_sq.is_finite()) {
            return Err(GlmmError::InvalidArgument(format!(
                "sigma2_sq must be positive, got {}",
                self.sigma2_sq
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(GlmmError::Stationarity(self.rho));
        }
        Ok(())
    }

    pub fn ar1(&self) -> Ar1Params {
        Ar1Params {
            rho: self.rho,
            sigma2_sq: self.sigma2_sq,
        }
    }

    /// Stacked vector `(β, σ₁², σ₂², ρ)` used by the convergence criterion.
    pub fn param_vector(&self) -> DVector<f64> {
        let p = self.beta.len();
        let mut v = DVector::zeros(p + 3);
        v.rows_mut(0, p).copy_from(&self.beta);
        v[p] = self.sigma1_sq;
        v[p + 1] = self.sigma2_sq;
        v[p + 2] = self.rho;
        v
    }

    /// Prior covariance `D = blockdiag(σ₁² I_N, Σ₂)`.
    pub fn prior_cov(&self, layout: &PanelLayout) -> Result<DMatrix<f64>> {
        let (n_ind, n_t) = (layout.n_individuals(), layout.n_times());
        let mut d = DMatrix::zeros(n_ind + n_t, n_ind + n_t);
        for i in 0..n_ind {
            d[(i, i)] = self.sigma1_sq;
        }
        let sigma2 = crate::ar1::ar1_covariance(&self.ar1(), n_t)?;
        d.view_mut((n_ind, n_ind), (n_t, n_t)).copy_from(&sigma2);
        Ok(d)
    }

    /// Prior precision `D⁻¹`, using the closed-form tridiagonal AR(1) inverse.
    pub fn prior_precision(&self, layout: &PanelLayout) -> Result<DMatrix<f64>> {
        let (n_ind, n_t) = (layout.n_individuals(), layout.n_times());
        let mut d_inv = DMatrix::zeros(n_ind + n_t, n_ind + n_t);
        for i in 0..n_ind {
            d_inv[(i, i)] = 1.0 / self.sigma1_sq;
        }
        let prec = crate::ar1::ar1_precision(&self.ar1(), n_t)?;
        d_inv.view_mut((n_ind, n_ind), (n_t, n_t)).copy_from(&prec);
        Ok(d_inv)
    }
}

/// Observed panel: response, covariates and the response family.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    pub layout: PanelLayout,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub family: Family,
}

impl PanelDataset {
    pub fn new(layout: PanelLayout, y: DVector<f64>, x: DMatrix<f64>, family: Family) -> Result<Self> {
        let n = layout.n_obs();
        if y.len() != n || x.nrows() != n {
            return Err(GlmmError::Shape(format!(
                "y has {} entries and X has {} rows, layout has n = {n}",
                y.len(),
                x.nrows()
            )));
        }
        if x.ncols() == 0 {
            return Err(GlmmError::Shape("at least one covariate required".into()));
        }
        family.check_support(y.as_slice())?;
        Ok(Self { layout, y, x, family })
    }

    pub fn designs(&self) -> Result<DesignMatrices> {
        DesignMatrices::new(&self.layout, self.x.clone())
    }

    /// Sub-panel restricted to the given individuals, in the given order.
    pub fn select_individuals(&self, individuals: &[usize]) -> Result<Self> {
        let t = self.layout.n_times();
        let layout = PanelLayout::new(individuals.len(), t)?;
        let rows: Vec<usize> = individuals
            .iter()
            .flat_map(|&i| (0..t).map(move |s| i * t + s))
            .collect();
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r]));
        let x = self.x.select_rows(rows.iter());
        Ok(Self {
            layout,
            y,
            x,
            family: self.family,
        })
    }
}
