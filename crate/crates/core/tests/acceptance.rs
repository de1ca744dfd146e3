//! Acceptance checks. Each criterion prints one `PASS`/`FAIL` line with the
//! tolerance it was held to; the process exits non-zero if any fails.
//!
//! Pass a substring as the first free argument to run a subset, e.g.
//! `cargo test --test acceptance -- gcv`.

use std::error::Error;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use panel_glmm::ar1::{ar1_covariance, ar1_logdet, ar1_precision, profile_ml_update, profile_objective, Ar1Params};
use panel_glmm::components::{
    fit_components, fit_components_fixed, optimize_component, principal_basis, structural_relevance, AscentConfig,
    ComponentConfig, CvConfig,
};
use panel_glmm::ridge_em::{e_step, gcv_select_lambda, m_step_beta, LinearisedModel};
use panel_glmm::simulation::{convergence_study, mse_study, rho_recovery_study, RidgeEstimator, SimScenario};
use panel_glmm::{fit, DesignMatrices, Family, ModelState, PanelDataset, PanelLayout, RidgeConfig};

type Check = std::result::Result<Outcome, Box<dyn Error>>;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Check {
    Ok(Outcome { pass, detail })
}

// ---------------------------------------------------------------------------
// dense reference constructions, written independently of the library

fn dense_u(n_ind: usize, n_t: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(n_ind * n_t, n_ind + n_t);
    for i in 0..n_ind {
        for t in 0..n_t {
            u[(i * n_t + t, i)] = 1.0;
            u[(i * n_t + t, n_ind + t)] = 1.0;
        }
    }
    u
}

fn dense_ar1_cov(rho: f64, sigma_sq: f64, n_t: usize) -> DMatrix<f64> {
    let marginal = sigma_sq / (1.0 - rho * rho);
    DMatrix::from_fn(n_t, n_t, |s, t| marginal * rho.powi((s as i32 - t as i32).abs()))
}

fn dense_prior(n_ind: usize, n_t: usize, s1: f64, s2: f64, rho: f64) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(n_ind + n_t, n_ind + n_t);
    for i in 0..n_ind {
        d[(i, i)] = s1;
    }
    d.view_mut((n_ind, n_ind), (n_t, n_t)).copy_from(&dense_ar1_cov(rho, s2, n_t));
    d
}

fn inv(m: &DMatrix<f64>) -> Result<DMatrix<f64>, Box<dyn Error>> {
    m.clone().lu().try_inverse().ok_or_else(|| "singular oracle matrix".into())
}

/// A random linearised problem drawn from the model itself.
struct Instance {
    layout: PanelLayout,
    designs: DesignMatrices,
    z: DVector<f64>,
    gamma: DVector<f64>,
    theta: ModelState,
    d: DMatrix<f64>,
}

impl Instance {
    fn random(rng: &mut ChaCha8Rng, max_ind: usize, max_t: usize, max_p: usize) -> Result<Self, Box<dyn Error>> {
        let n_ind = rng.random_range(2..=max_ind);
        let n_t = rng.random_range(2..=max_t);
        let p = rng.random_range(1..=max_p);
        let layout = PanelLayout::new(n_ind, n_t)?;
        let n = layout.n_obs();
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let beta = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
        let s1 = rng.random_range(0.2..1.5);
        let s2 = rng.random_range(0.2..1.5);
        let rho = rng.random_range(-0.9..0.9);
        let gamma: DVector<f64> = DVector::from_fn(n, |_, _| rng.random_range(0.5..2.0));
        let d = dense_prior(n_ind, n_t, s1, s2, rho);
        let l = d.clone().cholesky().ok_or("prior not positive definite")?.unpack();
        let xi = &l * DVector::from_fn(n_ind + n_t, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = dense_u(n_ind, n_t);
        let z = &x * &beta
            + &u * xi
            + DVector::from_fn(n, |i, _| gamma[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
        let theta = ModelState::new(beta, s1, s2, rho, n_ind + n_t)?;
        let designs = DesignMatrices::new(&layout, x)?;
        Ok(Self { layout, designs, z, gamma, theta, d })
    }

    fn lin(&self) -> Result<LinearisedModel<'_>, Box<dyn Error>> {
        Ok(LinearisedModel::new(self.z.clone(), self.gamma.clone(), &self.designs, self.layout)?)
    }
}

// ---------------------------------------------------------------------------
// 1: E-step

/// Self-normalised importance sampling of `ξ | z` with the prior as proposal.
/// Returns z-scores of the posterior mean and covariance entries and the
/// effective sample size.
fn importance_z_scores(inst: &Instance, mean: &DVector<f64>, cov: &DMatrix<f64>, draws: usize, seed: u64) -> (Vec<f64>, f64) {
    let (n_ind, n_t) = (inst.layout.n_individuals(), inst.layout.n_times());
    let q = n_ind + n_t;
    let l = inst.d.clone().cholesky().unwrap().unpack();
    let offset = &inst.designs.x * &inst.theta.beta;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = vec![0.0; draws * q];
    let mut logw = vec![0.0; draws];
    let mut eps = vec![0.0; q];
    for s in 0..draws {
        eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
        let xi = &mut xs[s * q..(s + 1) * q];
        for a in 0..q {
            xi[a] = (0..=a).map(|b| l[(a, b)] * eps[b]).sum();
        }
        let mut acc = 0.0;
        for i in 0..n_ind {
            for t in 0..n_t {
                let row = i * n_t + t;
                let r = inst.z[row] - offset[row] - xi[i] - xi[n_ind + t];
                acc += r * r / inst.gamma[row];
            }
        }
        logw[s] = -0.5 * acc;
    }
    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logw.iter().map(|v| (v - top).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();

    let weighted = |g: &dyn Fn(&[f64]) -> f64, exact: f64| {
        let est: f64 = (0..draws).map(|s| w[s] * g(&xs[s * q..(s + 1) * q])).sum();
        let var: f64 = (0..draws)
            .map(|s| (w[s] * (g(&xs[s * q..(s + 1) * q]) - est)).powi(2))
            .sum();
        (est - exact) / var.sqrt()
    };
    let mut zs = Vec::new();
    for a in 0..q {
        zs.push(weighted(&|x: &[f64]| x[a], mean[a]));
    }
    for a in 0..q {
        for b in 0..=a {
            zs.push(weighted(&|x: &[f64]| (x[a] - mean[a]) * (x[b] - mean[b]), cov[(a, b)]));
        }
    }
    (zs, ess)
}

fn criterion_e_step() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst_dense: f64 = 0.0;
    let mut all_z = Vec::new();
    let mut worst_rms: f64 = 0.0;
    let mut min_ess = f64::INFINITY;
    for k in 0..20 {
        let inst = Instance::random(&mut rng, 3, 5, 3)?;
        let post = e_step(&inst.lin()?, &inst.theta)?;

        let u = dense_u(inst.layout.n_individuals(), inst.layout.n_times());
        let v = &u * &inst.d * u.transpose() + DMatrix::from_diagonal(&inst.gamma);
        let v_inv = inv(&v)?;
        let gain = &inst.d * u.transpose() * &v_inv;
        let mean = &gain * (&inst.z - &inst.designs.x * &inst.theta.beta);
        let cov = &inst.d - &gain * &u * &inst.d;
        worst_dense = worst_dense
            .max((&post.mean - mean).abs().max())
            .max((&post.cov - cov).abs().max());

        let (zs, ess) = importance_z_scores(&inst, &post.mean, &post.cov, 500_000, 7000 + k);
        let rms = (zs.iter().map(|z| z * z).sum::<f64>() / zs.len() as f64).sqrt();
        worst_rms = worst_rms.max(rms);
        min_ess = min_ess.min(ess);
        all_z.extend(zs);
    }
    let max_z = all_z.iter().map(|z| z.abs()).fold(0.0, f64::max);
    let within3 = all_z.iter().filter(|z| z.abs() <= 3.0).count() as f64 / all_z.len() as f64;
    outcome(
        worst_dense < 1e-8 && worst_rms <= 3.0 && max_z < 5.0,
        format!(
            "dense max|Δ| = {worst_dense:.2e} (< 1e-8); Monte Carlo 500k draws: worst per-instance RMS z = {worst_rms:.2} (<= 3), \
             max|z| = {max_z:.2} (< 5), {:.1}% of {} moments within 3 SE, min ESS {min_ess:.0}",
            100.0 * within3,
            all_z.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 2: M-step

fn random_second_moment(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n_t = rng.random_range(3..=15);
    let rho = rng.random_range(-0.9..0.9);
    let sigma = rng.random_range(0.1..3.0);
    let l = dense_ar1_cov(rho, sigma, n_t).cholesky().unwrap().unpack();
    let m = &l * DVector::from_fn(n_t, |_, _| rng.sample::<f64, _>(StandardNormal));
    let a = DMatrix::from_fn(n_t, n_t, |_, _| rng.random_range(-0.3..0.3));
    &m * m.transpose() + &a * a.transpose() / n_t as f64
}

fn criterion_m_step() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_grad: f64 = 0.0;
    for _ in 0..20 {
        let inst = Instance::random(&mut rng, 5, 6, 3)?;
        let lin = inst.lin()?;
        let post = e_step(&lin, &inst.theta)?;
        let lambda = 10f64.powf(rng.random_range(-3.0..1.0));
        let beta = m_step_beta(&lin, &post.mean, lambda)?;
        let x = &inst.designs.x;
        let u = dense_u(inst.layout.n_individuals(), inst.layout.n_times());
        let r = &inst.z - x * &beta - &u * &post.mean;
        let grad = x.transpose() * r.component_div(&inst.gamma) - &beta * lambda;
        worst_grad = worst_grad.max(grad.norm());
    }

    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..10 {
        let s2 = random_second_moment(&mut rng);
        let n_t = s2.nrows();
        let est = profile_ml_update(&s2)?;
        let value = profile_objective(&est, &s2)?;
        let scale = s2.trace() / n_t as f64;
        let mut best = f64::NEG_INFINITY;
        for a in 0..100 {
            let rho = -0.99 + 1.98 * a as f64 / 99.0;
            for b in 0..100 {
                let sigma = scale * 10f64.powf(-3.0 + 5.0 * b as f64 / 99.0);
                best = best.max(profile_objective(&Ar1Params::new(rho, sigma)?, &s2)?);
            }
        }
        worst_gap = worst_gap.max(best - value);
    }
    outcome(
        worst_grad < 1e-6 && worst_gap <= 0.0,
        format!(
            "max ‖∂Q_pen/∂β‖ = {worst_grad:.2e} over 20 instances (< 1e-6); \
             best 100x100 grid minus AR(1) update = {worst_gap:.2e} over 10 S2 (<= 0)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 3: GCV

fn dense_gcv(inst: &Instance, lambda: f64) -> Result<f64, Box<dyn Error>> {
    let (n_ind, n_t) = (inst.layout.n_individuals(), inst.layout.n_times());
    let x = &inst.designs.x;
    let p = x.ncols();
    let q = n_ind + n_t;
    let n = x.nrows();
    let mut m = DMatrix::zeros(n, p + q);
    m.columns_mut(0, p).copy_from(x);
    m.columns_mut(p, q).copy_from(&dense_u(n_ind, n_t));
    let w = DMatrix::from_diagonal(&inst.gamma.map(|g| 1.0 / g));
    let mut a = m.transpose() * &w * &m;
    for i in 0..p {
        a[(i, i)] += lambda;
    }
    let mut block = a.view_mut((p, p), (q, q));
    block += inv(&inst.d)?;
    let s = &m * inv(&a)? * m.transpose() * &w;
    let r = &inst.z - &s * &inst.z;
    let rss = (r.transpose() * &w * &r)[(0, 0)];
    let nf = n as f64;
    Ok((rss / nf) / (1.0 - s.trace() / nf).powi(2))
}

fn criterion_gcv() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let grid: Vec<f64> = (0..41).map(|k| 10f64.powf(-4.0 + 8.0 * k as f64 / 40.0)).collect();
    let mut agree = 0;
    let mut worst_rel: f64 = 0.0;
    let total = 20;
    for _ in 0..total {
        let inst = Instance::random(&mut rng, 3, 5, 3)?;
        let (lambda, path) = gcv_select_lambda(&inst.lin()?, &inst.theta, &grid)?;
        let scores = grid.iter().map(|&l| dense_gcv(&inst, l)).collect::<Result<Vec<_>, _>>()?;
        let mut best = 0;
        for k in 1..grid.len() {
            // ties go to the larger λ, which comes later in the grid
            if scores[k] <= scores[best] {
                best = k;
            }
        }
        if grid[best] == lambda {
            agree += 1;
        }
        for (a, b) in path.scores.iter().zip(&scores) {
            worst_rel = worst_rel.max((a - b).abs() / b.abs());
        }
    }
    outcome(
        agree == total,
        format!("selected λ equals dense argmin on {agree}/{total} instances (n <= 15, 41-point grid); max relative score gap {worst_rel:.1e}"),
    )
}

// ---------------------------------------------------------------------------
// 4: Gaussian reduction

fn gaussian_panel(rng: &mut ChaCha8Rng, n_ind: usize, n_t: usize, p: usize) -> Result<PanelDataset, Box<dyn Error>> {
    let layout = PanelLayout::new(n_ind, n_t)?;
    let n = layout.n_obs();
    let normal = Normal::new(0.0, 1.0)?;
    let x = DMatrix::from_fn(n, p, |_, _| normal.sample(rng));
    let a: Vec<f64> = (0..n_ind).map(|_| 0.8 * normal.sample(rng)).collect();
    let mut b = vec![normal.sample(rng); n_t];
    for t in 1..n_t {
        b[t] = 0.5 * b[t - 1] + 0.7 * normal.sample(rng);
    }
    let y = DVector::from_fn(n, |i, _| {
        let xb: f64 = (0..p).map(|j| x[(i, j)] * (1.0 - 0.4 * j as f64)).sum();
        xb + a[i / n_t] + b[i % n_t] + 0.5 * normal.sample(rng)
    });
    Ok(PanelDataset::new(layout, y, x, Family::gaussian(0.25))?)
}

fn criterion_gaussian() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut cfg = RidgeConfig::default();
    cfg.tol = 1e-12;
    cfg.max_outer_iters = 5000;
    let mut worst: f64 = 0.0;
    let mut converged = 0;
    let total = 5;
    for k in 0..total {
        let data = gaussian_panel(&mut rng, 5 + k, 6 + k, 2 + k % 2)?;
        let rep = fit(&data, &cfg)?;
        if rep.converged() {
            converged += 1;
        }
        let th = &rep.theta_hat;
        let lambda = rep.final_lambda().ok_or("no λ recorded")?;
        let (n_ind, n_t) = (data.layout.n_individuals(), data.layout.n_times());
        let p = data.x.ncols();
        let q = n_ind + n_t;
        let u = dense_u(n_ind, n_t);
        // Henderson mixed-model equations with Γ = dispersion · I
        let w = 1.0 / 0.25;
        let mut lhs = DMatrix::zeros(p + q, p + q);
        lhs.view_mut((0, 0), (p, p)).copy_from(&(data.x.transpose() * &data.x * w));
        lhs.view_mut((0, p), (p, q)).copy_from(&(data.x.transpose() * &u * w));
        lhs.view_mut((p, 0), (q, p)).copy_from(&(u.transpose() * &data.x * w));
        lhs.view_mut((p, p), (q, q))
            .copy_from(&(u.transpose() * &u * w + inv(&dense_prior(n_ind, n_t, th.sigma1_sq, th.sigma2_sq, th.rho))?));
        for i in 0..p {
            lhs[(i, i)] += lambda;
        }
        let mut rhs = DVector::zeros(p + q);
        rhs.rows_mut(0, p).copy_from(&(data.x.transpose() * &data.y * w));
        rhs.rows_mut(p, q).copy_from(&(u.transpose() * &data.y * w));
        let sol = lhs.lu().solve(&rhs).ok_or("singular Henderson system")?;
        worst = worst
            .max((sol.rows(0, p) - &th.beta).abs().max())
            .max((sol.rows(p, q) - &th.xi_mean).abs().max());
    }
    outcome(
        converged == total && worst < 1e-8,
        format!("{converged}/{total} gaussian fits converged at tol 1e-12; max |Δ| to Henderson solution = {worst:.2e} (< 1e-8)"),
    )
}

// ---------------------------------------------------------------------------
// 5-7: simulation studies

fn criterion_convergence() -> Check {
    let scenario = SimScenario {
        n_replicates: 40,
        ..SimScenario::default()
    };
    let study = convergence_study(&scenario, &RidgeConfig::default())?;
    let med = study.median_iterations();
    let counts = study.iteration_counts();
    let max = counts.iter().max().copied().unwrap_or(0);
    outcome(
        study.n_converged() == 40 && (30.0..=300.0).contains(&med),
        format!(
            "{}/40 Poisson replicates (N=10, T=20, ρ=0.5) reached tol 1e-6 within 500 iterations; median {med} (in [30, 300]), max {max}",
            study.n_converged()
        ),
    )
}

fn criterion_mse() -> Check {
    let scenario = SimScenario {
        n_replicates: 50,
        ..SimScenario::default()
    };
    let table = mse_study(&scenario, &[10, 40, 100], &RidgeEstimator(RidgeConfig::default()))?;
    let decreasing = |s: &[f64]| s.windows(2).all(|w| w[1] < w[0]);
    let fmt = |s: &[f64]| s.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" > ");
    let (beta, s1, s2, rho) = (table.series("beta"), table.series("sigma1_sq"), table.series("sigma2_sq"), table.series("rho"));
    let ratio = s1.iter().cloned().fold(f64::MIN, f64::max) / s1.iter().cloned().fold(f64::MAX, f64::min);
    outcome(
        decreasing(&beta) && decreasing(&s2) && decreasing(&rho) && ratio < 2.5,
        format!(
            "T = 10, 40, 100, 50 replicates: MSE(β) {}, MSE(σ₂²) {}, MSE(ρ) {} (strictly decreasing); MSE(σ₁²) max/min = {ratio:.2} (< 2.5)",
            fmt(&beta),
            fmt(&s2),
            fmt(&rho)
        ),
    )
}

fn criterion_rho() -> Check {
    let scenario = SimScenario {
        n_replicates: 50,
        ..SimScenario::default()
    }
    .with_layout(10, 100)?;
    let rec = rho_recovery_study(&[0.2, 0.5, 0.8], &scenario, &RidgeConfig::default())?;
    let sums = rec.summaries();
    let close = sums.iter().all(|s| (s.median - s.rho_true).abs() <= 0.1);
    let ordered = sums.windows(2).all(|w| w[0].median < w[1].median);
    let text: Vec<String> = sums
        .iter()
        .map(|s| format!("ρ={}: median {:.3} [IQR {:.3}, {:.3}]", s.rho_true, s.median, s.q1, s.q3))
        .collect();
    outcome(
        close && ordered,
        format!("N=10, T=100, 50 replicates: {} (within ±0.1, ordered: {ordered})", text.join("; ")),
    )
}

// ---------------------------------------------------------------------------
// 8: AR(1) algebra

fn criterion_ar1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst_id: f64 = 0.0;
    let mut worst_logdet: f64 = 0.0;
    for _ in 0..100 {
        let rho = rng.random_range(-0.99..0.99);
        let sigma = 10f64.powf(rng.random_range(-2.0..1.0));
        let n_t = rng.random_range(1..=50);
        let params = Ar1Params::new(rho, sigma)?;
        let prod = ar1_covariance(&params, n_t)? * ar1_precision(&params, n_t)?;
        worst_id = worst_id.max((prod - DMatrix::identity(n_t, n_t)).abs().max());
        let chol = dense_ar1_cov(rho, sigma, n_t).cholesky().ok_or("covariance not positive definite")?;
        let dense: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        worst_logdet = worst_logdet.max((ar1_logdet(&params, n_t)? - dense).abs());
    }
    outcome(
        worst_id < 1e-10 && worst_logdet < 1e-9,
        format!("100 random (ρ, σ₂², T <= 50): max |cov·prec − I| = {worst_id:.2e} (< 1e-10), max |Δ logdet| = {worst_logdet:.2e} (< 1e-9)"),
    )
}

// ---------------------------------------------------------------------------
// 9: components

fn planted_panel(seed: u64) -> Result<PanelDataset, Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = PanelLayout::new(12, 10)?;
    let n = layout.n_obs();
    let normal = Normal::new(0.0, 1.0)?;
    let mut x = DMatrix::from_fn(n, 4, |_, _| normal.sample(&mut rng));
    let a: Vec<f64> = (0..12).map(|_| 0.3 * normal.sample(&mut rng)).collect();
    let c0 = x.column(0).into_owned();
    let m0 = c0.mean();
    for j in 1..4 {
        // noise columns uncorrelated with the informative one
        let cj = x.column(j).into_owned();
        let mj = cj.mean();
        let proj = (&c0.add_scalar(-m0)).dot(&cj.add_scalar(-mj)) / c0.add_scalar(-m0).norm_squared();
        x.set_column(j, &(cj - c0.add_scalar(-m0) * proj));
    }
    let y = DVector::from_fn(n, |i, _| {
        let eta = 0.5 + 0.7 * x[(i, 0)] + a[i / 10];
        rand_distr::Poisson::new(eta.exp()).unwrap().sample(&mut rng)
    });
    Ok(PanelDataset::new(layout, y, x, Family::poisson())?)
}

fn criterion_components() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(909);

    // φ non-increasing in l
    let x = DMatrix::from_fn(40, 8, |_, _| rng.random_range(-1.0..1.0));
    let basis = principal_basis(&x)?;
    let mut monotone = true;
    for _ in 0..50 {
        let w = DVector::from_fn(basis.rank(), |_, _| rng.random_range(-1.0..1.0)).normalize();
        let vals = [1.0, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&l| structural_relevance(&w, &basis, l))
            .collect::<Result<Vec<_>, _>>()?;
        monotone &= vals.windows(2).all(|v| v[1] <= v[0] + 1e-12);
    }

    // s = 1, l = 1 against the generalised eigenproblem of Σ_j x̃_j x̃_jᵀ/‖x̃_j‖² on span(C)
    let layout = PanelLayout::new(5, 6)?;
    let x = DMatrix::from_fn(30, 5, |_, _| rng.random_range(-1.0..1.0));
    let designs = DesignMatrices::new(&layout, x.clone())?;
    let z = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
    let gamma = DVector::from_fn(30, |_, _| rng.random_range(0.5..1.5));
    let lin = LinearisedModel::new(z, gamma, &designs, layout)?;
    let basis = principal_basis(&x)?;
    let opt = optimize_component(&lin, &basis, &DVector::zeros(11), 1.0, 1.0, &[], None, &AscentConfig::default())?;
    let mut xs = x.clone();
    for j in 0..5 {
        let col = xs.column(j).into_owned();
        let m = col.mean();
        let sd = (col.add_scalar(-m).norm_squared() / 30.0).sqrt();
        xs.set_column(j, &col.add_scalar(-m).unscale(sd));
    }
    let f = &basis.c * &opt.w;
    let mut a = DMatrix::zeros(30, 30);
    for j in 0..5 {
        let xj = xs.column(j);
        a += xj * xj.transpose() / xj.norm_squared();
    }
    let eig = a.symmetric_eigen();
    let top = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
    let cosine = f.dot(&top).abs() / f.norm();

    // rank-2 orthogonality and planted signal
    let data = planted_panel(17)?;
    let two = fit_components_fixed(&data, 2, 0.5, 1.0, &ComponentConfig::default())?;
    let f2 = &two.components.scores;
    let ortho = f2.column(0).dot(&f2.column(1)).abs();
    let planted = fit_components(
        &data,
        1,
        &[0.1, 0.5],
        &[1.0, 2.0],
        &CvConfig { folds: 3, seed: 1 },
        &ComponentConfig::default(),
    )?;
    let loading = planted.components().loadings[(0, 0)].abs();

    outcome(
        monotone && cosine > 0.999 && ortho < 1e-8 && loading > 0.9,
        format!(
            "φ non-increasing in l on 50 loadings: {monotone}; eigen-oracle cosine = {cosine:.6} (> 0.999); \
             |f₂ᵀf₁| = {ortho:.1e} (< 1e-8); planted informative loading = {loading:.3} (> 0.9)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 10: determinism

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map(|rd| rd.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_file()).collect())
        .unwrap_or_else(|_| Vec::new())
        .into_iter()
        .map(|p: std::path::PathBuf| {
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap_or_default())
        })
        .collect();
    files.sort();
    files
}

fn criterion_determinism() -> Check {
    let dir = tempfile::tempdir()?;
    let exe = env!("CARGO_BIN_EXE_panel-glmm");
    let panel = dir.path().join("input");
    let status = Command::new(exe)
        .args(["simulate", "--seed", "3", "--out"])
        .arg(&panel)
        .env_remove("PANEL_GLMM_OUT_DIR")
        .status()?;
    if !status.success() {
        return outcome(false, "could not simulate an input panel".into());
    }
    let input = panel.join("panel.csv").to_string_lossy().into_owned();
    let commands: Vec<Vec<&str>> = vec![
        vec!["simulate"],
        vec!["fit", "--input", &input],
        vec!["fit-components", "--input", &input, "--s-grid", "0.25,0.75", "--l-grid", "1,2", "--cv-folds", "2"],
        vec!["study-convergence", "--replicates", "4"],
        vec!["study-mse", "--t-list", "5,10", "--replicates", "3"],
        vec!["study-rho", "--rho-list", "0.2,0.8", "--replicates", "3"],
    ];
    let mut identical = 0;
    let mut failures = Vec::new();
    for (k, cmd) in commands.iter().enumerate() {
        let runs: Vec<_> = (0..2)
            .map(|r| {
                let out = dir.path().join(format!("{k}-{r}"));
                let ok = Command::new(exe)
                    .args(cmd)
                    .args(["--seed", "42", "--out"])
                    .arg(&out)
                    .env_remove("PANEL_GLMM_OUT_DIR")
                    .output()
                    .map(|o| o.status.success())
                    .unwrap_or(false);
                (ok, snapshot(&out))
            })
            .collect();
        if runs.iter().all(|(ok, s)| *ok && !s.is_empty()) && runs[0].1 == runs[1].1 {
            identical += 1;
        } else {
            failures.push(cmd[0]);
        }
    }
    outcome(
        identical == commands.len(),
        format!("{identical}/{} commands byte-identical across two runs with --seed 42{}", commands.len(),
            if failures.is_empty() { String::new() } else { format!("; differing: {failures:?}") }),
    )
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(&str, fn() -> Check); 10] = [
        ("e-step oracle", criterion_e_step),
        ("m-step optimality", criterion_m_step),
        ("gcv argmin", criterion_gcv),
        ("gaussian henderson", criterion_gaussian),
        ("convergence study", criterion_convergence),
        ("mse trends", criterion_mse),
        ("rho recovery", criterion_rho),
        ("ar1 algebra", criterion_ar1),
        ("component properties", criterion_components),
        ("determinism", criterion_determinism),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "{} criterion {:>2} ({name}): {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            k + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
