//! E-step and M-steps of the penalised EM on one linearised model.

use nalgebra::{DMatrix, DVector};

use crate::ar1::{self, Ar1Params, VARIANCE_FLOOR};
use crate::error::{GlmmError, Result};
use crate::linalg::{cholesky, symmetrize, weighted_cross, weighted_cross_vec};
use crate::model::ModelState;

use super::LinearisedModel;

/// Gaussian posterior moments of `ξ | z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Posterior {
    /// Second moment of the time-effect block, `E[ξ₂ξ₂ᵀ | z]`.
    pub fn time_second_moment(&self, n_individuals: usize) -> DMatrix<f64> {
        let n_t = self.mean.len() - n_individuals;
        let m2 = self.mean.rows(n_individuals, n_t);
        let c22 = self.cov.view((n_individuals, n_individuals), (n_t, n_t));
        m2 * m2.transpose() + c22
    }
}

/// Posterior of `ξ` under `z = offset + Uξ + e`, `ξ ~ N(0, D)`, `e ~ N(0, Γ)`.
///
/// Uses the precision form `Var[ξ|z] = (UᵀΓ⁻¹U + D⁻¹)⁻¹`, algebraically equal to
/// `D − DUᵀV⁻¹UD` with `V = UDUᵀ + Γ` but factorising a `q × q` rather than an
/// `n × n` matrix.
pub fn posterior_moments(
    lin: &LinearisedModel<'_>,
    offset: &DVector<f64>,
    d_inv: &DMatrix<f64>,
) -> Result<Posterior> {
    let mut precision = lin.ut_w_u();
    precision += d_inv;
    let chol = cholesky(precision, "posterior precision UᵀΓ⁻¹U + D⁻¹")
        .map_err(|e| GlmmError::numerical(e.to_string()))?;
    let mut cov = chol.inverse();
    symmetrize(&mut cov);
    let resid = &lin.z - offset;
    let mean = chol.solve(&lin.ut_w_vec(&resid));
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(GlmmError::numerical("non-finite posterior mean"));
    }
    Ok(Posterior { mean, cov })
}

/// E-step: posterior moments of `ξ` given `z` under `theta`.
pub fn e_step(lin: &LinearisedModel<'_>, theta: &ModelState) -> Result<Posterior> {
    theta.validate()?;
    let offset = lin.x() * &theta.beta;
    let d_inv = theta.prior_precision(&lin.layout)?;
    posterior_moments(lin, &offset, &d_inv)
}

/// β-maximiser of the expected penalised log-likelihood:
/// `(XᵀΓ⁻¹X + λI)⁻¹ XᵀΓ⁻¹ (z − U E[ξ|z])`.
pub fn m_step_beta(lin: &LinearisedModel<'_>, xi_mean: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda >= 0.0) {
        return Err(GlmmError::InvalidArgument(format!(
            "ridge parameter must be non-negative, got {lambda}"
        )));
    }
    let x = lin.x();
    let w = lin.weights();
    let mut a = weighted_cross(x, &w, x);
    for i in 0..a.nrows() {
        a[(i, i)] += lambda;
    }
    let rhs = weighted_cross_vec(x, &w, &(&lin.z - lin.u() * xi_mean));
    let chol = cholesky(a, "XᵀΓ⁻¹X + λI")?;
    Ok(chol.solve(&rhs))
}

/// `σ₁² = (‖E[ξ₁]‖² + tr Var[ξ₁]) / N`, floored at `1e-10`.
pub fn m_step_sigma1(xi_mean: &DVector<f64>, xi_cov: &DMatrix<f64>, n_individuals: usize) -> f64 {
    let m1 = xi_mean.rows(0, n_individuals);
    let tr: f64 = (0..n_individuals).map(|i| xi_cov[(i, i)]).sum();
    let value = (m1.norm_squared() + tr) / n_individuals as f64;
    if value < VARIANCE_FLOOR {
        log::warn!("individual variance collapsed to {value:e}; flooring at {VARIANCE_FLOOR:e}");
        VARIANCE_FLOOR
    } else {
        value
    }
}

/// AR(1) update from `S₂ = E[ξ₂]E[ξ₂]ᵀ + Var[ξ₂]`.
pub fn m_step_ar1(xi_mean: &DVector<f64>, xi_cov: &DMatrix<f64>, n_individuals: usize) -> Result<Ar1Params> {
    let post = Posterior {
        mean: xi_mean.clone(),
        cov: xi_cov.clone(),
    };
    ar1::profile_ml_update(&post.time_second_moment(n_individuals))
}

/// Expected complete penalised log-likelihood `Q_pen(θ, θ')`, where the
/// expectation is taken under the posterior computed at `θ'`.
pub fn q_pen(
    lin: &LinearisedModel<'_>,
    theta: &ModelState,
    posterior: &Posterior,
    lambda: f64,
) -> Result<f64> {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let (n_ind, n_t) = (lin.layout.n_individuals(), lin.layout.n_times());
    let u = lin.u();
    let w = lin.weights();

    let r = &lin.z - lin.x() * &theta.beta - u * &posterior.mean;
    let uc = u * &posterior.cov;
    let trace_term: f64 = (0..u.nrows())
        .map(|i| w[i] * uc.row(i).dot(&u.row(i)))
        .sum();
    let data = -0.5
        * (lin.z.len() as f64 * ln2pi
            + lin.gamma_diag.iter().map(|g| g.ln()).sum::<f64>()
            + r.component_mul(&r).dot(&w)
            + trace_term);

    let m1 = posterior.mean.rows(0, n_ind);
    let tr1: f64 = (0..n_ind).map(|i| posterior.cov[(i, i)]).sum();
    let indiv = -0.5
        * (n_ind as f64 * (ln2pi + theta.sigma1_sq.ln()) + (m1.norm_squared() + tr1) / theta.sigma1_sq);

    let time = -0.5 * n_t as f64 * ln2pi
        + ar1::profile_objective(&theta.ar1(), &posterior.time_second_moment(n_ind))?;

    Ok(data + indiv + time - 0.5 * lambda * theta.beta.norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DesignMatrices, PanelLayout};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        designs: DesignMatrices,
        layout: PanelLayout,
        z: DVector<f64>,
        gamma: DVector<f64>,
        theta: ModelState,
    }

    fn instance(seed: u64, n_ind: usize, n_t: usize, p: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = PanelLayout::new(n_ind, n_t).unwrap();
        let n = layout.n_obs();
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let designs = DesignMatrices::new(&layout, x).unwrap();
        let z = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let gamma = DVector::from_fn(n, |_, _| rng.random_range(0.3..2.0));
        let beta = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let theta = ModelState::new(
            beta,
            rng.random_range(0.2..1.5),
            rng.random_range(0.2..1.5),
            rng.random_range(-0.8..0.8),
            layout.n_random(),
        )
        .unwrap();
        Instance {
            designs,
            layout,
            z,
            gamma,
            theta,
        }
    }

    impl Instance {
        fn lin(&self) -> LinearisedModel<'_> {
            LinearisedModel::new(self.z.clone(), self.gamma.clone(), &self.designs, self.layout).unwrap()
        }
    }

    #[test]
    fn prior_collapse_gives_zero_posterior() {
        let mut inst = instance(1, 2, 3, 2);
        inst.theta.sigma1_sq = 1e-12;
        inst.theta.sigma2_sq = 1e-12;
        let post = e_step(&inst.lin(), &inst.theta).unwrap();
        assert!(post.mean.norm() < 1e-8);
        assert!(post.cov.norm() < 1e-8);
    }

    #[test]
    fn uninformative_data_returns_prior() {
        let mut inst = instance(2, 2, 3, 2);
        inst.gamma.fill(1e12);
        let post = e_step(&inst.lin(), &inst.theta).unwrap();
        let d = inst.theta.prior_cov(&inst.layout).unwrap();
        assert!(post.mean.norm() < 1e-8);
        assert!((&post.cov - &d).norm() / d.norm() < 1e-3);
    }

    #[test]
    fn matches_dense_conditioning() {
        for seed in 0..5 {
            let inst = instance(10 + seed, 2, 3, 2);
            let lin = inst.lin();
            let post = e_step(&lin, &inst.theta).unwrap();
            let d = inst.theta.prior_cov(&inst.layout).unwrap();
            let u = &inst.designs.random.u;
            let v = u * &d * u.transpose() + DMatrix::from_diagonal(&inst.gamma);
            let v_inv = v.try_inverse().unwrap();
            let k = &d * u.transpose() * &v_inv;
            let mean = &k * (&inst.z - &inst.designs.x * &inst.theta.beta);
            let cov = &d - &k * u * &d;
            assert!((post.mean - mean).abs().max() < 1e-10);
            assert!((post.cov - cov).abs().max() < 1e-10);
        }
    }

    #[test]
    fn posterior_cov_is_symmetric_psd() {
        let inst = instance(4, 3, 5, 2);
        let post = e_step(&inst.lin(), &inst.theta).unwrap();
        assert!((&post.cov - post.cov.transpose()).abs().max() < 1e-10);
        let eig = post.cov.clone().symmetric_eigenvalues();
        assert!(eig.min() > -1e-10);
    }

    #[test]
    fn beta_interpolates_square_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layout = PanelLayout::new(2, 2).unwrap();
        let x = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { rng.random_range(-0.3..0.3) });
        let designs = DesignMatrices::new(&layout, x.clone()).unwrap();
        let z = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
        let lin = LinearisedModel::new(z.clone(), DVector::from_element(4, 1.0), &designs, layout).unwrap();
        let beta = m_step_beta(&lin, &DVector::zeros(4), 0.0).unwrap();
        let direct = x.lu().solve(&z).unwrap();
        assert!((beta - direct).abs().max() < 1e-10);
    }

    #[test]
    fn beta_scalar_shrinkage() {
        let layout = PanelLayout::new(2, 3).unwrap();
        let designs = DesignMatrices::new(&layout, DMatrix::identity(6, 6)).unwrap();
        let z = DVector::from_fn(6, |i, _| i as f64 - 2.0);
        let xi = DVector::from_fn(5, |i, _| 0.1 * i as f64);
        let lin = LinearisedModel::new(z.clone(), DVector::from_element(6, 1.0), &designs, layout).unwrap();
        let beta = m_step_beta(&lin, &xi, 1.0).unwrap();
        let expected = (&z - &designs.random.u * &xi) / 2.0;
        assert!((beta - expected).abs().max() < 1e-12);
    }

    #[test]
    fn rank_deficient_unpenalised_is_singular() {
        let layout = PanelLayout::new(2, 3).unwrap();
        let x = DMatrix::from_fn(6, 2, |i, _| i as f64);
        let designs = DesignMatrices::new(&layout, x).unwrap();
        let lin = LinearisedModel::new(DVector::zeros(6), DVector::from_element(6, 1.0), &designs, layout).unwrap();
        assert!(matches!(
            m_step_beta(&lin, &DVector::zeros(5), 0.0),
            Err(GlmmError::SingularSystem(_))
        ));
        assert!(m_step_beta(&lin, &DVector::zeros(5), 0.1).is_ok());
    }

    #[test]
    fn beta_matches_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let layout = PanelLayout::new(4, 5).unwrap();
        let x = DMatrix::from_fn(20, 5, |_, _| rng.random_range(-1.0..1.0));
        let designs = DesignMatrices::new(&layout, x.clone()).unwrap();
        let z = DVector::from_fn(20, |_, _| rng.random_range(-2.0..2.0));
        let gamma = DVector::from_fn(20, |_, _| rng.random_range(0.5..2.0));
        let xi = DVector::from_fn(9, |_, _| rng.random_range(-0.5..0.5));
        let lambda = 0.7;
        let lin = LinearisedModel::new(z.clone(), gamma.clone(), &designs, layout).unwrap();
        let beta = m_step_beta(&lin, &xi, lambda).unwrap();

        // plain gradient descent on ½‖z − Uξ − Xb‖²_{Γ⁻¹} + ½λ‖b‖²
        let r0 = &z - &designs.random.u * &xi;
        let w = gamma.map(|g| 1.0 / g);
        let hess = weighted_cross(&x, &w, &x) + DMatrix::identity(5, 5) * lambda;
        let step = 1.0 / hess.clone().symmetric_eigenvalues().max();
        let mut b = DVector::zeros(5);
        for _ in 0..20000 {
            let grad = -x.transpose() * (&r0 - &x * &b).component_mul(&w) + &b * lambda;
            if grad.norm() < 1e-13 {
                break;
            }
            b -= grad * step;
        }
        assert!((beta - b).abs().max() < 1e-6);
    }

    #[test]
    fn sigma1_examples() {
        let cov = DMatrix::identity(4, 4) * 0.3;
        assert!((m_step_sigma1(&DVector::zeros(4), &cov, 4) - 0.3).abs() < 1e-15);
        let mean = DVector::from_column_slice(&[2.0, 0.0, 0.0, 0.0]);
        assert_eq!(m_step_sigma1(&mean, &DMatrix::zeros(4, 4), 4), 1.0);
        assert_eq!(m_step_sigma1(&DVector::zeros(4), &DMatrix::zeros(4, 4), 4), VARIANCE_FLOOR);
    }

    #[test]
    fn sigma1_matches_scalar_maximisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 6;
        let mean = DVector::from_fn(n + 3, |_, _| rng.random_range(-1.0..1.0));
        let a = DMatrix::from_fn(n + 3, n + 3, |_, _| rng.random_range(-0.5..0.5));
        let cov = &a * a.transpose();
        let est = m_step_sigma1(&mean, &cov, n);
        let second: f64 = mean.rows(0, n).norm_squared() + (0..n).map(|i| cov[(i, i)]).sum::<f64>();
        let objective = |s: f64| -0.5 * (n as f64 * s.ln() + second / s);
        // golden section on log σ²
        let (mut lo, mut hi) = (-10.0f64, 10.0f64);
        while hi - lo > 1e-10 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if objective(m1.exp()) < objective(m2.exp()) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        assert!((est - (0.5 * (lo + hi)).exp()).abs() < 1e-7 * est);
    }

    #[test]
    fn m_step_increases_q_pen() {
        for seed in 0..5 {
            let inst = instance(40 + seed, 3, 6, 3);
            let lin = inst.lin();
            let lambda = 0.5;
            let post = e_step(&lin, &inst.theta).unwrap();
            let beta = m_step_beta(&lin, &post.mean, lambda).unwrap();
            let s1 = m_step_sigma1(&post.mean, &post.cov, 3);
            let ar = m_step_ar1(&post.mean, &post.cov, 3).unwrap();
            let mut next = inst.theta.clone();
            next.beta = beta;
            next.sigma1_sq = s1;
            next.sigma2_sq = ar.sigma2_sq;
            next.rho = ar.rho;
            let before = q_pen(&lin, &inst.theta, &post, lambda).unwrap();
            let after = q_pen(&lin, &next, &post, lambda).unwrap();
            assert!(after >= before - 1e-8, "{after} < {before}");
        }
    }

    #[test]
    fn q_pen_gradient_vanishes_at_beta_update() {
        let inst = instance(77, 3, 4, 3);
        let lin = inst.lin();
        let lambda = 0.3;
        let post = e_step(&lin, &inst.theta).unwrap();
        let mut theta = inst.theta.clone();
        theta.beta = m_step_beta(&lin, &post.mean, lambda).unwrap();
        let h = 1e-6;
        let mut grad = DVector::zeros(3);
        for j in 0..3 {
            let mut plus = theta.clone();
            plus.beta[j] += h;
            let mut minus = theta.clone();
            minus.beta[j] -= h;
            grad[j] = (q_pen(&lin, &plus, &post, lambda).unwrap()
                - q_pen(&lin, &minus, &post, lambda).unwrap())
                / (2.0 * h);
        }
        assert!(grad.norm() < 1e-6, "{grad}");
    }
}
