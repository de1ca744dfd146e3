//! Command-line front end backing the `panel-glmm` binary.
//!
//! Configuration precedence: command-line flags, then the TOML file given by
//! `--config`, then built-in defaults. The default output directory is read
//! from `PANEL_GLMM_OUT_DIR` when set.
//!
//! Exit codes: 0 on success, 1 on usage, validation or I/O errors, 2 on
//! numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::components::{fit_components, ComponentConfig, CvConfig};
use crate::error::{GlmmError, Result};
use crate::family::{Family, FamilyKind};
use crate::model::{PanelDataset, PanelLayout};
use crate::ridge_em::{fit, log_grid, FitReport, IterationRecord, LambdaSelection, RidgeConfig};
use crate::simulation::{
    convergence_study, generate_panel, io_err, mse_study, rho_recovery_study, RidgeEstimator, SimScenario,
};

/// Environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "PANEL_GLMM_OUT_DIR";
const FALLBACK_OUT_DIR: &str = "panel-glmm-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Fit,
    FitComponents,
    Simulate,
    StudyConvergence,
    StudyMse,
    StudyRho,
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub input: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub family: FamilyKind,
    /// Known dispersion of the Gaussian family.
    pub dispersion: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_count: usize,
    pub components: usize,
    pub s_grid: Vec<f64>,
    pub l_grid: Vec<f64>,
    pub cv_folds: usize,
    pub seed: u64,
    pub n_individuals: usize,
    pub n_times: usize,
    pub beta: Vec<f64>,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub rho: f64,
    pub x_correlation: f64,
    pub replicates: usize,
    pub t_list: Vec<usize>,
    pub rho_list: Vec<f64>,
}

/// Every setting as optional; the shape of the TOML config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct PartialConfig {
    pub input: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub family: Option<FamilyKind>,
    pub dispersion: Option<f64>,
    pub tol: Option<f64>,
    pub max_iters: Option<usize>,
    pub lambda_min: Option<f64>,
    pub lambda_max: Option<f64>,
    pub lambda_count: Option<usize>,
    pub components: Option<usize>,
    pub s_grid: Option<Vec<f64>>,
    pub l_grid: Option<Vec<f64>>,
    pub cv_folds: Option<usize>,
    pub seed: Option<u64>,
    pub n_individuals: Option<usize>,
    pub n_times: Option<usize>,
    pub beta: Option<Vec<f64>>,
    pub sigma1_sq: Option<f64>,
    pub sigma2_sq: Option<f64>,
    pub rho: Option<f64>,
    pub x_correlation: Option<f64>,
    pub replicates: Option<usize>,
    pub t_list: Option<Vec<usize>>,
    pub rho_list: Option<Vec<f64>>,
}

macro_rules! merge_fields {
    ($hi:expr, $lo:expr; $($f:ident),* $(,)?) => {
        PartialConfig { $($f: $hi.$f.or($lo.$f)),* }
    };
}

impl PartialConfig {
    /// Fields set in `self` win over those in `lower`.
    pub fn over(self, lower: PartialConfig) -> PartialConfig {
        merge_fields!(self, lower;
            input, out_dir, family, dispersion, tol, max_iters, lambda_min, lambda_max,
            lambda_count, components, s_grid, l_grid, cv_folds, seed, n_individuals, n_times,
            beta, sigma1_sq, sigma2_sq, rho, x_correlation, replicates, t_list, rho_list)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| GlmmError::Io(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| GlmmError::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    fn resolve(self, command: Command) -> Result<RunConfig> {
        let scenario = SimScenario::default();
        let ridge = RidgeConfig::default();
        let config = RunConfig {
            command,
            input: self.input,
            out_dir: self.out_dir.unwrap_or_else(default_out_dir),
            family: self.family.unwrap_or(FamilyKind::PoissonLog),
            dispersion: self.dispersion.unwrap_or(1.0),
            tol: self.tol.unwrap_or(ridge.tol),
            max_iters: self.max_iters.unwrap_or(ridge.max_outer_iters),
            lambda_min: self.lambda_min.unwrap_or(1e-4),
            lambda_max: self.lambda_max.unwrap_or(1e4),
            lambda_count: self.lambda_count.unwrap_or(50),
            components: self.components.unwrap_or(1),
            s_grid: self.s_grid.unwrap_or_else(|| vec![0.25, 0.5, 0.75]),
            l_grid: self.l_grid.unwrap_or_else(|| vec![1.0, 2.0, 4.0]),
            cv_folds: self.cv_folds.unwrap_or(5),
            seed: self.seed.unwrap_or(scenario.seed),
            n_individuals: self.n_individuals.unwrap_or(scenario.layout.n_individuals()),
            n_times: self.n_times.unwrap_or(scenario.layout.n_times()),
            beta: self.beta.unwrap_or_else(|| scenario.beta_true.iter().copied().collect()),
            sigma1_sq: self.sigma1_sq.unwrap_or(scenario.sigma1_sq_true),
            sigma2_sq: self.sigma2_sq.unwrap_or(scenario.sigma2_sq_true),
            rho: self.rho.unwrap_or(scenario.rho_true),
            x_correlation: self.x_correlation.unwrap_or(scenario.x_correlation),
            replicates: self.replicates.unwrap_or(scenario.n_replicates),
            t_list: self.t_list.unwrap_or_else(|| vec![10, 40, 100]),
            rho_list: self.rho_list.unwrap_or_else(|| vec![0.2, 0.5, 0.8]),
        };
        config.validate()?;
        Ok(config)
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(FALLBACK_OUT_DIR))
}

fn invalid(msg: impl Into<String>) -> GlmmError {
    GlmmError::InvalidArgument(msg.into())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if matches!(self.command, Command::Fit | Command::FitComponents) {
            match &self.input {
                None => return Err(invalid("--input is required for this command")),
                Some(p) if p.as_os_str().is_empty() => return Err(invalid("--input must not be empty")),
                _ => {}
            }
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(invalid("--out must not be empty"));
        }
        if !(self.tol > 0.0) {
            return Err(invalid("tol must be positive (--tol)"));
        }
        if self.max_iters == 0 {
            return Err(invalid("max-iters must be at least 1 (--max-iters)"));
        }
        if !(self.dispersion > 0.0 && self.dispersion.is_finite()) {
            return Err(invalid("dispersion must be positive (--dispersion)"));
        }
        if !(self.lambda_min > 0.0 && self.lambda_max.is_finite() && self.lambda_min <= self.lambda_max) {
            return Err(invalid("lambda grid needs 0 < lambda-min <= lambda-max (--lambda-min, --lambda-max)"));
        }
        if self.lambda_count == 0 || (self.lambda_count > 1 && self.lambda_min == self.lambda_max) {
            return Err(invalid("lambda-count must be >= 1 and the grid strictly increasing (--lambda-count)"));
        }
        if self.components == 0 {
            return Err(invalid("components must be at least 1 (--components)"));
        }
        if self.s_grid.is_empty() || self.s_grid.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(invalid("s-grid values must lie in [0, 1] (--s-grid)"));
        }
        if self.l_grid.is_empty() || self.l_grid.iter().any(|l| !(*l >= 1.0 && l.is_finite())) {
            return Err(invalid("l-grid values must be >= 1 (--l-grid)"));
        }
        if self.cv_folds < 2 {
            return Err(invalid("cv-folds must be at least 2 (--cv-folds)"));
        }
        if self.t_list.is_empty() || self.t_list.iter().any(|t| *t < 2) {
            return Err(invalid("t-list values must be >= 2 (--t-list)"));
        }
        if self.rho_list.is_empty() || self.rho_list.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(invalid("rho-list values must lie in (-1, 1) (--rho-list)"));
        }
        if matches!(
            self.command,
            Command::Simulate | Command::StudyConvergence | Command::StudyMse | Command::StudyRho
        ) {
            self.scenario()?.validate()?;
        }
        Ok(())
    }

    pub fn family(&self) -> Family {
        match self.family {
            FamilyKind::GaussianIdentity => Family::gaussian(self.dispersion),
            kind => Family::from_kind(kind),
        }
    }

    pub fn ridge_config(&self) -> RidgeConfig {
        RidgeConfig {
            lambda: LambdaSelection::Gcv(log_grid(self.lambda_min, self.lambda_max, self.lambda_count)),
            max_outer_iters: self.max_iters,
            tol: self.tol,
            ..RidgeConfig::default()
        }
    }

    pub fn component_config(&self) -> ComponentConfig {
        ComponentConfig {
            max_outer_iters: self.max_iters,
            tol: self.tol,
            ..ComponentConfig::default()
        }
    }

    pub fn scenario(&self) -> Result<SimScenario> {
        Ok(SimScenario {
            layout: PanelLayout::new(self.n_individuals, self.n_times)?,
            beta_true: DVector::from_column_slice(&self.beta),
            sigma1_sq_true: self.sigma1_sq,
            sigma2_sq_true: self.sigma2_sq,
            rho_true: self.rho,
            x_correlation: self.x_correlation,
            family: self.family(),
            seed: self.seed,
            n_replicates: self.replicates,
        })
    }

    /// Every setting except the command, as TOML loadable with `--config`.
    pub fn to_toml(&self) -> Result<String> {
        let partial = PartialConfig {
            input: self.input.clone(),
            out_dir: Some(self.out_dir.clone()),
            family: Some(self.family),
            dispersion: Some(self.dispersion),
            tol: Some(self.tol),
            max_iters: Some(self.max_iters),
            lambda_min: Some(self.lambda_min),
            lambda_max: Some(self.lambda_max),
            lambda_count: Some(self.lambda_count),
            components: Some(self.components),
            s_grid: Some(self.s_grid.clone()),
            l_grid: Some(self.l_grid.clone()),
            cv_folds: Some(self.cv_folds),
            seed: Some(self.seed),
            n_individuals: Some(self.n_individuals),
            n_times: Some(self.n_times),
            beta: Some(self.beta.clone()),
            sigma1_sq: Some(self.sigma1_sq),
            sigma2_sq: Some(self.sigma2_sq),
            rho: Some(self.rho),
            x_correlation: Some(self.x_correlation),
            replicates: Some(self.replicates),
            t_list: Some(self.t_list.clone()),
            rho_list: Some(self.rho_list.clone()),
        };
        toml::to_string(&partial).map_err(|e| invalid(format!("cannot serialise config: {e}")))
    }
}

#[derive(Debug, Parser)]
#[command(name = "panel-glmm", version, about = "Penalised EM for GLMMs on balanced panel data")]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Debug, Subcommand)]
enum CliCommand {
    /// Fit the ridge-penalised model with per-iteration GCV.
    Fit {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Fit the supervised-component model, tuned by cross-validation.
    FitComponents {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        components: ComponentArgs,
    },
    /// Write one simulated panel and its latent effects.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Convergence trajectories over replicates.
    StudyConvergence {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Parameter MSE for several panel lengths.
    StudyMse {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Comma-separated panel lengths [default: 10,40,100].
        #[arg(long, value_delimiter = ',')]
        t_list: Option<Vec<usize>>,
    },
    /// Estimated ρ for several true values.
    StudyRho {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Comma-separated true ρ values [default: 0.2,0.5,0.8].
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        rho_list: Option<Vec<f64>>,
    },
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML file with default settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long = "out")]
    out_dir: Option<PathBuf>,
    /// poisson-log, bernoulli-logit or gaussian-identity [default: poisson-log].
    #[arg(long)]
    family: Option<FamilyKind>,
    /// Known variance of the Gaussian family [default: 1].
    #[arg(long)]
    dispersion: Option<f64>,
    /// Convergence tolerance on the relative parameter change [default: 1e-6].
    #[arg(long, allow_negative_numbers = true)]
    tol: Option<f64>,
    /// Maximum outer iterations [default: 500].
    #[arg(long)]
    max_iters: Option<usize>,
    /// Smallest λ of the log-spaced GCV grid [default: 1e-4].
    #[arg(long)]
    lambda_min: Option<f64>,
    /// Largest λ of the GCV grid [default: 1e4].
    #[arg(long)]
    lambda_max: Option<f64>,
    /// Number of GCV grid points [default: 50].
    #[arg(long)]
    lambda_count: Option<usize>,
    /// Seed for simulation and fold assignment [default: 1].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// CSV with header `id,time,y,x1,...,xp`.
    #[arg(long)]
    input: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ComponentArgs {
    /// Number of components K [default: 1].
    #[arg(long)]
    components: Option<usize>,
    /// Comma-separated weights s in [0, 1] of the relevance term [default: 0.25,0.5,0.75].
    #[arg(long, value_delimiter = ',')]
    s_grid: Option<Vec<f64>>,
    /// Comma-separated relevance exponents l >= 1 [default: 1,2,4].
    #[arg(long, value_delimiter = ',')]
    l_grid: Option<Vec<f64>>,
    /// Folds of individuals for cross-validation [default: 5].
    #[arg(long)]
    cv_folds: Option<usize>,
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Number of individuals N [default: 10].
    #[arg(long)]
    n_individuals: Option<usize>,
    /// Number of time points T [default: 20].
    #[arg(long)]
    n_times: Option<usize>,
    /// Comma-separated true coefficients [default: 1,0.5,-0.5].
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Option<Vec<f64>>,
    /// Individual-effect variance [default: 0.3].
    #[arg(long)]
    sigma1_sq: Option<f64>,
    /// AR(1) innovation variance [default: 0.3].
    #[arg(long)]
    sigma2_sq: Option<f64>,
    /// AR(1) coefficient [default: 0.5].
    #[arg(long, allow_negative_numbers = true)]
    rho: Option<f64>,
    /// Pairwise correlation of the simulated covariates [default: 0.5].
    #[arg(long)]
    x_correlation: Option<f64>,
    /// Number of replicated panels [default: 40].
    #[arg(long)]
    replicates: Option<usize>,
}

impl CommonArgs {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            out_dir: self.out_dir.clone(),
            family: self.family,
            dispersion: self.dispersion,
            tol: self.tol,
            max_iters: self.max_iters,
            lambda_min: self.lambda_min,
            lambda_max: self.lambda_max,
            lambda_count: self.lambda_count,
            seed: self.seed,
            ..PartialConfig::default()
        }
    }
}

impl ScenarioArgs {
    fn partial(&self) -> PartialConfig {
        PartialConfig {
            n_individuals: self.n_individuals,
            n_times: self.n_times,
            beta: self.beta.clone(),
            sigma1_sq: self.sigma1_sq,
            sigma2_sq: self.sigma2_sq,
            rho: self.rho,
            x_correlation: self.x_correlation,
            replicates: self.replicates,
            ..PartialConfig::default()
        }
    }
}

/// Why argument parsing stopped.
#[derive(Debug)]
pub enum ParseError {
    /// Usage error, or a `--help`/`--version` request.
    Usage(clap::Error),
    Invalid(GlmmError),
}

impl std::fmt::Display for ParseError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseError::Usage(e) => write!(f, "{e}"),
            ParseError::Invalid(e) => write!(f, "{e}"),
        }
    }
}

/// Parses `argv` (including the program name) into a validated configuration.
pub fn parse_args<I, T>(args: I) -> std::result::Result<RunConfig, ParseError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(ParseError::Usage)?;
    let (command, common, flags) = match cli.command {
        CliCommand::Fit { common, input } => {
            let flags = PartialConfig {
                input: input.input,
                ..PartialConfig::default()
            };
            (Command::Fit, common, flags)
        }
        CliCommand::FitComponents {
            common,
            input,
            components,
        } => {
            let flags = PartialConfig {
                input: input.input,
                components: components.components,
                s_grid: components.s_grid,
                l_grid: components.l_grid,
                cv_folds: components.cv_folds,
                ..PartialConfig::default()
            };
            (Command::FitComponents, common, flags)
        }
        CliCommand::Simulate { common, scenario } => (Command::Simulate, common, scenario.partial()),
        CliCommand::StudyConvergence { common, scenario } => {
            (Command::StudyConvergence, common, scenario.partial())
        }
        CliCommand::StudyMse {
            common,
            scenario,
            t_list,
        } => {
            let flags = PartialConfig {
                t_list,
                ..scenario.partial()
            };
            (Command::StudyMse, common, flags)
        }
        CliCommand::StudyRho {
            common,
            scenario,
            rho_list,
        } => {
            let flags = PartialConfig {
                rho_list,
                ..scenario.partial()
            };
            (Command::StudyRho, common, flags)
        }
    };
    let file = match &common.config {
        Some(path) => PartialConfig::from_toml_file(path).map_err(ParseError::Invalid)?,
        None => PartialConfig::default(),
    };
    flags
        .over(common.partial())
        .over(file)
        .resolve(command)
        .map_err(ParseError::Invalid)
}

fn cell_error(line: usize, column: &str, cell: &str) -> GlmmError {
    invalid(format!("row {line}, column '{column}': cannot parse '{cell}' as a number"))
}

/// Reads a balanced panel from CSV with header `id,time,y,x1,...,xp`.
///
/// Rows may come in any order; they are sorted by individual, then time.
pub fn read_panel_csv<R: Read>(reader: R, family: Family) -> Result<PanelDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| GlmmError::Io(format!("cannot read header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 3 || header[0] != "id" || header[1] != "time" || header[2] != "y" {
        return Err(invalid(format!(
            "header must start with id,time,y; got {}",
            header.join(",")
        )));
    }
    let p = header.len() - 3;
    if p == 0 {
        return Err(invalid("at least one covariate required"));
    }

    let mut cells: BTreeMap<(i64, i64), (f64, Vec<f64>)> = BTreeMap::new();
    for (k, record) in rdr.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| invalid(format!("row {line}: {e}")))?;
        let id: i64 = record[0].parse().map_err(|_| cell_error(line, "id", &record[0]))?;
        let time: i64 = record[1].parse().map_err(|_| cell_error(line, "time", &record[1]))?;
        let mut values = Vec::with_capacity(p + 1);
        for c in 2..header.len() {
            let v: f64 = record[c].parse().map_err(|_| cell_error(line, &header[c], &record[c]))?;
            values.push(v);
        }
        let y = values[0];
        if cells.insert((id, time), (y, values[1..].to_vec())).is_some() {
            return Err(invalid(format!("duplicate row for (id={id}, time={time}) at row {line}")));
        }
    }

    let ids: Vec<i64> = {
        let mut v: Vec<i64> = cells.keys().map(|k| k.0).collect();
        v.dedup();
        v
    };
    let times: Vec<i64> = {
        let mut v: Vec<i64> = cells.keys().map(|k| k.1).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let missing: Vec<String> = ids
        .iter()
        .flat_map(|&i| times.iter().map(move |&t| (i, t)))
        .filter(|k| !cells.contains_key(k))
        .map(|(i, t)| format!("(id={i}, time={t})"))
        .collect();
    if !missing.is_empty() {
        let shown = missing.iter().take(20).cloned().collect::<Vec<_>>().join(", ");
        let more = if missing.len() > 20 {
            format!(" and {} more", missing.len() - 20)
        } else {
            String::new()
        };
        return Err(invalid(format!("unbalanced panel, missing {shown}{more}")));
    }

    let layout = PanelLayout::new(ids.len(), times.len())?;
    let n = layout.n_obs();
    let mut y = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, p);
    // BTreeMap order is individual-major, time-minor
    for (r, (_, (yv, xv))) in cells.into_iter().enumerate() {
        y[r] = yv;
        for (j, v) in xv.into_iter().enumerate() {
            x[(r, j)] = v;
        }
    }
    PanelDataset::new(layout, y, x, family)
}

pub fn load_panel_csv(path: &Path, family: Family) -> Result<PanelDataset> {
    let file = File::open(path).map_err(|e| GlmmError::Io(format!("cannot open {}: {e}", path.display())))?;
    read_panel_csv(file, family)
}

/// Writes a panel with ids and times numbered from 1.
pub fn write_panel_csv<W: Write>(dataset: &PanelDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let p = dataset.x.ncols();
    let mut header = vec!["id".to_string(), "time".into(), "y".into()];
    header.extend((1..=p).map(|j| format!("x{j}")));
    w.write_record(&header).map_err(io_err)?;
    let layout = dataset.layout;
    for r in 0..layout.n_obs() {
        let mut row = vec![
            (layout.individual_of(r) + 1).to_string(),
            (layout.time_of(r) + 1).to_string(),
            dataset.y[r].to_string(),
        ];
        row.extend(dataset.x.row(r).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| io_err(e.into()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| GlmmError::Io(format!("cannot create {}: {e}", path.display())))
}

fn write_pairs(path: &Path, header: [&str; 2], rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header).map_err(io_err)?;
    for (name, value) in rows {
        w.write_record([name.clone(), value.to_string()]).map_err(io_err)?;
    }
    w.flush().map_err(|e| io_err(e.into()))
}

/// `iteration,criterion,beta1..,sigma1_sq,sigma2_sq,rho,lambda`.
pub fn write_trajectory<W: Write>(records: &[IterationRecord], p: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["iteration".to_string(), "criterion".into()];
    header.extend((1..=p).map(|j| format!("beta{j}")));
    header.extend(["sigma1_sq", "sigma2_sq", "rho", "lambda"].map(String::from));
    w.write_record(&header).map_err(io_err)?;
    for rec in records {
        let mut row = vec![rec.iteration.to_string(), rec.criterion.to_string()];
        row.extend(rec.beta.iter().map(|b| b.to_string()));
        row.extend([rec.sigma1_sq, rec.sigma2_sq, rec.rho].map(|v| v.to_string()));
        row.push(rec.lambda.map(|l| l.to_string()).unwrap_or_default());
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| io_err(e.into()))
}

/// `iteration,lambda,gcv`, one block per outer iteration.
pub fn write_gcv_paths<W: Write>(report: &FitReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "lambda", "gcv"]).map_err(io_err)?;
    for (k, path) in report.gcv_paths.iter().enumerate() {
        for (l, g) in path.lambdas.iter().zip(&path.scores) {
            w.write_record([(k + 1).to_string(), l.to_string(), g.to_string()])
                .map_err(io_err)?;
        }
    }
    w.flush().map_err(|e| io_err(e.into()))
}

fn variance_rows(report: &FitReport) -> Vec<(String, f64)> {
    let t = &report.theta_hat;
    vec![
        ("sigma1_sq".into(), t.sigma1_sq),
        ("sigma2_sq".into(), t.sigma2_sq),
        ("rho".into(), t.rho),
    ]
}

fn status_rows(report: &FitReport) -> Vec<(String, f64)> {
    vec![
        ("n_iters".into(), report.n_iters as f64),
        ("converged".into(), if report.converged() { 1.0 } else { 0.0 }),
    ]
}

fn run_fit(config: &RunConfig) -> Result<String> {
    let input = config.input.as_deref().expect("validated");
    let data = load_panel_csv(input, config.family())?;
    let report = fit(&data, &config.ridge_config())?;
    let dir = &config.out_dir;
    let mut rows: Vec<(String, f64)> = report
        .theta_hat
        .beta
        .iter()
        .enumerate()
        .map(|(j, b)| (format!("beta{}", j + 1), *b))
        .collect();
    rows.extend(variance_rows(&report));
    rows.push(("lambda".into(), report.final_lambda().unwrap_or(f64::NAN)));
    rows.extend(status_rows(&report));
    write_pairs(&dir.join("estimates.csv"), ["parameter", "value"], &rows)?;
    write_trajectory(&report.trajectories, data.x.ncols(), create(&dir.join("trajectory.csv"))?)?;
    write_gcv_paths(&report, create(&dir.join("gcv_path.csv"))?)?;
    Ok(format!(
        "{} after {} iterations; wrote estimates.csv, trajectory.csv, gcv_path.csv",
        report.termination.as_str(),
        report.n_iters
    ))
}

fn run_fit_components(config: &RunConfig) -> Result<String> {
    let input = config.input.as_deref().expect("validated");
    let data = load_panel_csv(input, config.family())?;
    let cv = CvConfig {
        folds: config.cv_folds,
        seed: config.seed,
    };
    let fitted = fit_components(
        &data,
        config.components,
        &config.s_grid,
        &config.l_grid,
        &cv,
        &config.component_config(),
    )?;
    let set = fitted.components();
    let report = fitted.report();
    let dir = &config.out_dir;

    let mut rows = vec![("intercept".to_string(), set.intercept)];
    rows.extend(
        set.standardized_coefficients()
            .iter()
            .enumerate()
            .map(|(j, b)| (format!("beta{}", j + 1), *b)),
    );
    rows.extend(set.gamma_coefs.iter().enumerate().map(|(k, g)| (format!("gamma{}", k + 1), *g)));
    rows.extend(variance_rows(report));
    rows.push(("s".into(), fitted.selected_s));
    rows.push(("l".into(), fitted.selected_l));
    rows.extend(status_rows(report));
    write_pairs(&dir.join("estimates.csv"), ["parameter", "value"], &rows)?;
    write_trajectory(&report.trajectories, data.x.ncols(), create(&dir.join("trajectory.csv"))?)?;

    let mut w = csv::Writer::from_writer(create(&dir.join("cv.csv"))?);
    w.write_record(["s", "l", "deviance"]).map_err(io_err)?;
    for c in &fitted.cv_table {
        w.write_record([c.s.to_string(), c.l.to_string(), c.deviance.to_string()])
            .map_err(io_err)?;
    }
    w.flush().map_err(|e| io_err(e.into()))?;

    let mut w = csv::Writer::from_writer(create(&dir.join("loadings.csv"))?);
    let mut header = vec!["variable".to_string()];
    header.extend((1..=set.loadings.ncols()).map(|k| format!("component{k}")));
    w.write_record(&header).map_err(io_err)?;
    for j in 0..set.loadings.nrows() {
        let mut row = vec![format!("x{}", j + 1)];
        row.extend(set.loadings.row(j).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(io_err)?;
    }
    w.flush().map_err(|e| io_err(e.into()))?;
    Ok(format!(
        "selected s={} l={}; {} after {} iterations; wrote estimates.csv, trajectory.csv, cv.csv, loadings.csv",
        fitted.selected_s,
        fitted.selected_l,
        report.termination.as_str(),
        report.n_iters
    ))
}

fn run_simulate(config: &RunConfig) -> Result<String> {
    let scenario = config.scenario()?;
    let panel = generate_panel(&scenario, 0)?;
    let dir = &config.out_dir;
    write_panel_csv(&panel.dataset, create(&dir.join("panel.csv"))?)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("latent.csv"))?);
    w.write_record(["effect", "index", "value"]).map_err(io_err)?;
    let n_ind = scenario.layout.n_individuals();
    for (k, v) in panel.xi.iter().enumerate() {
        let (effect, index) = if k < n_ind { ("individual", k + 1) } else { ("time", k - n_ind + 1) };
        w.write_record([effect.to_string(), index.to_string(), v.to_string()])
            .map_err(io_err)?;
    }
    w.flush().map_err(|e| io_err(e.into()))?;
    Ok("wrote panel.csv, latent.csv".into())
}

fn run_study_convergence(config: &RunConfig) -> Result<String> {
    let study = convergence_study(&config.scenario()?, &config.ridge_config())?;
    study.write_trajectories(create(&config.out_dir.join("convergence.csv"))?)?;
    study.write_estimates(create(&config.out_dir.join("replicates.csv"))?)?;
    Ok(format!(
        "{}/{} replicates converged, median {} iterations; wrote convergence.csv, replicates.csv",
        study.n_converged(),
        study.replicates.len(),
        study.median_iterations()
    ))
}

fn run_study_mse(config: &RunConfig) -> Result<String> {
    let table = mse_study(&config.scenario()?, &config.t_list, &RidgeEstimator(config.ridge_config()))?;
    table.write_csv(create(&config.out_dir.join("mse.csv"))?)?;
    Ok("wrote mse.csv".into())
}

fn run_study_rho(config: &RunConfig) -> Result<String> {
    let study = rho_recovery_study(&config.rho_list, &config.scenario()?, &config.ridge_config())?;
    study.write_estimates(create(&config.out_dir.join("rho_recovery.csv"))?)?;
    study.write_summary(create(&config.out_dir.join("rho_summary.csv"))?)?;
    Ok("wrote rho_recovery.csv, rho_summary.csv".into())
}

/// Runs a resolved configuration and returns a one-line summary.
pub fn run(config: &RunConfig) -> Result<String> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)
        .map_err(|e| GlmmError::Io(format!("cannot create {}: {e}", config.out_dir.display())))?;
    match config.command {
        Command::Fit => run_fit(config),
        Command::FitComponents => run_fit_components(config),
        Command::Simulate => run_simulate(config),
        Command::StudyConvergence => run_study_convergence(config),
        Command::StudyMse => run_study_mse(config),
        Command::StudyRho => run_study_rho(config),
    }
}

/// Exit code for a library error: 2 for numerical failures, 1 otherwise.
pub fn exit_code(err: &GlmmError) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses, runs, reports, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let config = match parse_args(args) {
        Ok(c) => c,
        Err(ParseError::Usage(e)) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
        Err(ParseError::Invalid(e)) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match run(&config) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
