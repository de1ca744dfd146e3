//! Synthetic panels and the diagnostic studies: convergence trajectories,
//! MSE against panel length, and recovery of ρ.
//!
//! Replicate `r` of a scenario draws from a `ChaCha8Rng` seeded with
//! `seed + r`, so parallel and serial runs produce identical results.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GlmmError, Result};
use crate::family::{inverse_link, Family, FamilyKind, ETA_CLAMP};
use crate::model::{ModelState, PanelDataset, PanelLayout};
use crate::ridge_em::{fit, FitReport, IterationRecord, RidgeConfig, Termination};

/// Floor applied to zero true variances.
const SIM_VARIANCE_FLOOR: f64 = 1e-10;

/// A data-generating process plus the number of replicates to draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScenario {
    pub layout: PanelLayout,
    pub beta_true: DVector<f64>,
    pub sigma1_sq_true: f64,
    pub sigma2_sq_true: f64,
    pub rho_true: f64,
    /// Pairwise correlation of the covariate columns.
    pub x_correlation: f64,
    pub family: Family,
    pub seed: u64,
    pub n_replicates: usize,
}

impl Default for SimScenario {
    /// Poisson, `N = 10`, `T = 20`, `β = (1, 0.5, −0.5)`, `σ₁² = σ₂² = 0.3`, `ρ = 0.5`.
    fn default() -> Self {
        Self {
            layout: PanelLayout::new(10, 20).expect("valid layout"),
            beta_true: DVector::from_column_slice(&[1.0, 0.5, -0.5]),
            sigma1_sq_true: 0.3,
            sigma2_sq_true: 0.3,
            rho_true: 0.5,
            x_correlation: 0.5,
            family: Family::poisson(),
            seed: 1,
            n_replicates: 40,
        }
    }
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.beta_true.is_empty() {
            return Err(GlmmError::InvalidArgument("beta_true must have at least one entry".into()));
        }
        if self.beta_true.iter().any(|b| !b.is_finite()) {
            return Err(GlmmError::InvalidArgument("beta_true must be finite".into()));
        }
        for (name, v) in [("sigma1_sq_true", self.sigma1_sq_true), ("sigma2_sq_true", self.sigma2_sq_true)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(GlmmError::InvalidArgument(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.rho_true.abs() < 1.0) {
            return Err(GlmmError::InvalidArgument(format!("rho_true must lie in (-1, 1), got {}", self.rho_true)));
        }
        if !(0.0..1.0).contains(&self.x_correlation) {
            return Err(GlmmError::InvalidArgument(format!(
                "x_correlation must lie in [0, 1), got {}",
                self.x_correlation
            )));
        }
        if self.n_replicates == 0 {
            return Err(GlmmError::InvalidArgument("n_replicates must be at least 1".into()));
        }
        Ok(())
    }

    pub fn with_layout(&self, n_individuals: usize, n_times: usize) -> Result<Self> {
        Ok(Self {
            layout: PanelLayout::new(n_individuals, n_times)?,
            ..self.clone()
        })
    }

    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        self.seed.wrapping_add(replicate as u64)
    }

    /// The generating parameters as a model state (variances floored).
    pub fn true_state(&self) -> Result<ModelState> {
        ModelState::new(
            self.beta_true.clone(),
            self.sigma1_sq_true.max(SIM_VARIANCE_FLOOR),
            self.sigma2_sq_true.max(SIM_VARIANCE_FLOOR),
            self.rho_true,
            self.layout.n_random(),
        )
    }
}

/// A generated panel together with its latent quantities.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub dataset: PanelDataset,
    /// `(ξ₁, ξ₂)` stacked.
    pub xi: DVector<f64>,
    pub eta: DVector<f64>,
    pub replicate: usize,
}

/// Draws a stationary AR(1) path of length `t` with innovation variance `sigma_sq`.
pub fn draw_ar1<R: Rng + ?Sized>(rng: &mut R, t: usize, rho: f64, sigma_sq: f64) -> Vec<f64> {
    let sd = sigma_sq.sqrt();
    let mut path = Vec::with_capacity(t);
    let mut prev = 0.0;
    for k in 0..t {
        let e: f64 = rng.sample(StandardNormal);
        prev = if k == 0 {
            e * sd / (1.0 - rho * rho).sqrt()
        } else {
            rho * prev + e * sd
        };
        path.push(prev);
    }
    path
}

/// Draws replicate `replicate` of the scenario.
pub fn generate_panel(scenario: &SimScenario, replicate: usize) -> Result<SimulatedPanel> {
    scenario.validate()?;
    let layout = scenario.layout;
    let (n, n_ind, n_t) = (layout.n_obs(), layout.n_individuals(), layout.n_times());
    let p = scenario.beta_true.len();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.replicate_seed(replicate));

    let c = scenario.x_correlation;
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let common: f64 = rng.sample(StandardNormal);
        for j in 0..p {
            let own: f64 = rng.sample(StandardNormal);
            x[(i, j)] = c.sqrt() * common + (1.0 - c).sqrt() * own;
        }
    }

    let s1 = scenario.sigma1_sq_true.max(SIM_VARIANCE_FLOOR).sqrt();
    let xi1: Vec<f64> = (0..n_ind).map(|_| s1 * rng.sample::<f64, _>(StandardNormal)).collect();
    let xi2 = draw_ar1(
        &mut rng,
        n_t,
        scenario.rho_true,
        scenario.sigma2_sq_true.max(SIM_VARIANCE_FLOOR),
    );

    let eta = DVector::from_fn(n, |r, _| {
        (x.row(r) * &scenario.beta_true)[(0, 0)] + xi1[layout.individual_of(r)] + xi2[layout.time_of(r)]
    });
    let mu = match scenario.family.kind {
        FamilyKind::PoissonLog => {
            if let Some(r) = eta.iter().position(|e| *e > ETA_CLAMP) {
                return Err(GlmmError::ScenarioRejected(format!(
                    "linear predictor {:.1} at row {r} overflows the Poisson mean; use a smaller beta_true",
                    eta[r]
                )));
            }
            eta.map(f64::exp)
        }
        _ => inverse_link(&eta, &scenario.family),
    };

    let y = match scenario.family.kind {
        FamilyKind::PoissonLog => DVector::from_iterator(
            n,
            mu.iter().map(|&m| Poisson::new(m).expect("finite positive mean").sample(&mut rng)),
        ),
        FamilyKind::BernoulliLogit => {
            DVector::from_iterator(n, mu.iter().map(|&m| if rng.random::<f64>() < m { 1.0 } else { 0.0 }))
        }
        FamilyKind::GaussianIdentity => {
            let noise = Normal::new(0.0, scenario.family.dispersion.sqrt())
                .map_err(|e| GlmmError::InvalidArgument(e.to_string()))?;
            DVector::from_iterator(n, mu.iter().map(|&m| m + noise.sample(&mut rng)))
        }
    };

    let mut xi = DVector::zeros(layout.n_random());
    for (k, v) in xi1.iter().chain(xi2.iter()).enumerate() {
        xi[k] = *v;
    }
    Ok(SimulatedPanel {
        dataset: PanelDataset::new(layout, y, x, scenario.family)?,
        xi,
        eta,
        replicate,
    })
}

/// Anything that turns a simulated panel into a fit report.
pub trait PanelEstimator: Sync {
    fn estimate(&self, panel: &SimulatedPanel, scenario: &SimScenario) -> Result<FitReport>;
}

/// The penalised EM with a given configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeEstimator(pub RidgeConfig);

impl PanelEstimator for RidgeEstimator {
    fn estimate(&self, panel: &SimulatedPanel, _scenario: &SimScenario) -> Result<FitReport> {
        fit(&panel.dataset, &self.0)
    }
}

/// Returns the generating parameters. Useful to check study bookkeeping.
#[derive(Debug, Clone, Copy, Default)]
pub struct TruthEstimator;

impl PanelEstimator for TruthEstimator {
    fn estimate(&self, _panel: &SimulatedPanel, scenario: &SimScenario) -> Result<FitReport> {
        Ok(FitReport {
            theta_hat: scenario.true_state()?,
            lambda_path: Vec::new(),
            gcv_paths: Vec::new(),
            trajectories: Vec::new(),
            n_iters: 0,
            termination: Termination::Converged,
            eta_clamps: 0,
        })
    }
}

/// Estimates from one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub beta: DVector<f64>,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub rho: f64,
    pub n_iters: usize,
    pub termination: Termination,
    pub trajectory: Vec<IterationRecord>,
    /// Wall-clock fitting time; not written to any table.
    pub runtime: Duration,
}

/// Squared-error summaries. `beta` averages over coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamMse {
    pub beta: f64,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub rho: f64,
}

impl ParamMse {
    pub const NAMES: [&'static str; 4] = ["beta", "sigma1_sq", "sigma2_sq", "rho"];

    pub fn values(&self) -> [f64; 4] {
        [self.beta, self.sigma1_sq, self.sigma2_sq, self.rho]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResult {
    pub scenario: SimScenario,
    pub replicates: Vec<ReplicateResult>,
    pub mse: ParamMse,
}

impl StudyResult {
    pub fn n_converged(&self) -> usize {
        self.replicates
            .iter()
            .filter(|r| r.termination == Termination::Converged)
            .count()
    }

    pub fn iteration_counts(&self) -> Vec<usize> {
        self.replicates.iter().map(|r| r.n_iters).collect()
    }

    pub fn median_iterations(&self) -> f64 {
        let counts: Vec<f64> = self.iteration_counts().into_iter().map(|c| c as f64).collect();
        quantile(&counts, 0.5)
    }

    pub fn rho_estimates(&self) -> Vec<f64> {
        self.replicates.iter().map(|r| r.rho).collect()
    }

    /// `(replicate, iteration, criterion, β…, σ₁², σ₂², ρ, λ)` rows.
    pub fn write_trajectories<W: Write>(&self, out: W) -> Result<()> {
        let p = self.scenario.beta_true.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["replicate".to_string(), "iteration".into(), "criterion".into()];
        header.extend((1..=p).map(|j| format!("beta{j}")));
        header.extend(["sigma1_sq", "sigma2_sq", "rho", "lambda"].map(String::from));
        w.write_record(&header).map_err(io_err)?;
        for rep in &self.replicates {
            for rec in &rep.trajectory {
                let mut row = vec![rep.replicate.to_string(), rec.iteration.to_string(), rec.criterion.to_string()];
                row.extend(rec.beta.iter().map(|b| b.to_string()));
                row.extend([rec.sigma1_sq, rec.sigma2_sq, rec.rho].map(|v| v.to_string()));
                row.push(rec.lambda.map(|l| l.to_string()).unwrap_or_default());
                w.write_record(&row).map_err(io_err)?;
            }
        }
        w.flush().map_err(|e| io_err(e.into()))
    }

    /// `(replicate, n_iters, termination, β…, σ₁², σ₂², ρ)` rows.
    pub fn write_estimates<W: Write>(&self, out: W) -> Result<()> {
        let p = self.scenario.beta_true.len();
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["replicate".to_string(), "n_iters".into(), "termination".into()];
        header.extend((1..=p).map(|j| format!("beta{j}")));
        header.extend(["sigma1_sq", "sigma2_sq", "rho"].map(String::from));
        w.write_record(&header).map_err(io_err)?;
        for rep in &self.replicates {
            let mut row = vec![
                rep.replicate.to_string(),
                rep.n_iters.to_string(),
                rep.termination.as_str().to_string(),
            ];
            row.extend(rep.beta.iter().map(|b| b.to_string()));
            row.extend([rep.sigma1_sq, rep.sigma2_sq, rep.rho].map(|v| v.to_string()));
            w.write_record(&row).map_err(io_err)?;
        }
        w.flush().map_err(|e| io_err(e.into()))
    }
}

pub(crate) fn io_err(e: csv::Error) -> GlmmError {
    GlmmError::Io(format!("write failed: {e}"))
}

/// Linear-interpolation quantile (the usual "type 7") of unsorted data.
pub fn quantile(values: &[f64], prob: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn mse_of(scenario: &SimScenario, reps: &[ReplicateResult]) -> ParamMse {
    let k = reps.len() as f64;
    let p = scenario.beta_true.len() as f64;
    let mean = |f: &dyn Fn(&ReplicateResult) -> f64| reps.iter().map(f).sum::<f64>() / k;
    ParamMse {
        beta: mean(&|r| (&r.beta - &scenario.beta_true).norm_squared() / p),
        sigma1_sq: mean(&|r| (r.sigma1_sq - scenario.sigma1_sq_true).powi(2)),
        sigma2_sq: mean(&|r| (r.sigma2_sq - scenario.sigma2_sq_true).powi(2)),
        rho: mean(&|r| (r.rho - scenario.rho_true).powi(2)),
    }
}

/// Generates and fits every replicate of `scenario`.
///
/// Replicates run in parallel; results are returned in replicate order and
/// the first failure (by replicate index) is reported.
pub fn run_study(scenario: &SimScenario, estimator: &dyn PanelEstimator) -> Result<StudyResult> {
    scenario.validate()?;
    let results: Vec<Result<ReplicateResult>> = (0..scenario.n_replicates)
        .into_par_iter()
        .map(|r| {
            let panel = generate_panel(scenario, r)?;
            let start = Instant::now();
            let report = estimator.estimate(&panel, scenario).map_err(|e| match e {
                GlmmError::NumericalFailure { context, iteration } => GlmmError::NumericalFailure {
                    context: format!("replicate {r}: {context}"),
                    iteration,
                },
                other => other,
            })?;
            let theta = report.theta_hat;
            Ok(ReplicateResult {
                replicate: r,
                beta: theta.beta,
                sigma1_sq: theta.sigma1_sq,
                sigma2_sq: theta.sigma2_sq,
                rho: theta.rho,
                n_iters: report.n_iters,
                termination: report.termination,
                trajectory: report.trajectories,
                runtime: start.elapsed(),
            })
        })
        .collect();
    let replicates = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(StudyResult {
        mse: mse_of(scenario, &replicates),
        scenario: scenario.clone(),
        replicates,
    })
}

/// Fits every replicate with the penalised EM and keeps the trajectories.
pub fn convergence_study(scenario: &SimScenario, config: &RidgeConfig) -> Result<StudyResult> {
    run_study(scenario, &RidgeEstimator(config.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    #[serde(rename = "T")]
    pub n_times: usize,
    pub parameter: String,
    pub mse: f64,
    pub n_replicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MseTable {
    pub studies: Vec<StudyResult>,
}

impl MseTable {
    pub fn rows(&self) -> Vec<MseRow> {
        self.studies
            .iter()
            .flat_map(|s| {
                ParamMse::NAMES
                    .iter()
                    .zip(s.mse.values())
                    .map(|(name, mse)| MseRow {
                        n_times: s.scenario.layout.n_times(),
                        parameter: name.to_string(),
                        mse,
                        n_replicates: s.replicates.len(),
                    })
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    /// MSE of one parameter across the panel lengths, in study order.
    pub fn series(&self, parameter: &str) -> Vec<f64> {
        self.rows()
            .into_iter()
            .filter(|r| r.parameter == parameter)
            .map(|r| r.mse)
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row).map_err(io_err)?;
        }
        w.flush().map_err(|e| io_err(e.into()))
    }
}

/// Repeats the study for each panel length in `t_list`, keeping `N` and the seed.
pub fn mse_study(base: &SimScenario, t_list: &[usize], estimator: &dyn PanelEstimator) -> Result<MseTable> {
    if t_list.is_empty() {
        return Err(GlmmError::InvalidArgument("T list must be non-empty".into()));
    }
    let studies = t_list
        .iter()
        .map(|&t| run_study(&base.with_layout(base.layout.n_individuals(), t)?, estimator))
        .collect::<Result<Vec<_>>>()?;
    Ok(MseTable { studies })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoSummary {
    pub rho_true: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub n_replicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoRecovery {
    pub studies: Vec<StudyResult>,
}

impl RhoRecovery {
    pub fn summaries(&self) -> Vec<RhoSummary> {
        self.studies
            .iter()
            .map(|s| {
                let est = s.rho_estimates();
                RhoSummary {
                    rho_true: s.scenario.rho_true,
                    q1: quantile(&est, 0.25),
                    median: quantile(&est, 0.5),
                    q3: quantile(&est, 0.75),
                    n_replicates: est.len(),
                }
            })
            .collect()
    }

    /// `(rho_true, replicate, rho_hat)` rows.
    pub fn write_estimates<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rho_true", "replicate", "rho_hat"]).map_err(io_err)?;
        for s in &self.studies {
            for r in &s.replicates {
                w.write_record([s.scenario.rho_true.to_string(), r.replicate.to_string(), r.rho.to_string()])
                    .map_err(io_err)?;
            }
        }
        w.flush().map_err(|e| io_err(e.into()))
    }

    pub fn write_summary<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in self.summaries() {
            w.serialize(s).map_err(io_err)?;
        }
        w.flush().map_err(|e| io_err(e.into()))
    }
}

/// Fits replicates for each true ρ in `rho_list`, all else as in `scenario`.
pub fn rho_recovery_study(rho_list: &[f64], scenario: &SimScenario, config: &RidgeConfig) -> Result<RhoRecovery> {
    if rho_list.is_empty() {
        return Err(GlmmError::InvalidArgument("rho list must be non-empty".into()));
    }
    let estimator = RidgeEstimator(config.clone());
    let studies = rho_list
        .iter()
        .map(|&rho| {
            let s = SimScenario {
                rho_true: rho,
                ..scenario.clone()
            };
            run_study(&s, &estimator)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RhoRecovery { studies })
}
