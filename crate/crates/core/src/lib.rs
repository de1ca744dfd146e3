//! Regularised EM estimation of generalised linear mixed models on balanced
//! panel data.
//!
//! The model has an individual random effect `ξ₁ ~ N(0, σ₁² I_N)` and a time
//! random effect `ξ₂` following a stationary AR(1) process with parameter `ρ`
//! and innovation variance `σ₂²`. Two estimators are provided:
//!
//! - [`ridge_em::fit`]: an L2-penalised EM wrapped in an outer linearisation
//!   loop, with the ridge parameter re-selected by GCV at every iteration;
//! - [`components::fit_components`]: a supervised-component EM for the
//!   `p ≫ n` case, tuned by cross-validation over individuals.
//!
//! [`simulation`] generates synthetic panels and runs the convergence, MSE
//! and ρ-recovery studies; [`cli`] backs the `panel-glmm` binary.

pub mod ar1;
pub mod cli;
pub mod components;
pub mod error;
pub mod family;
mod linalg;
pub mod model;
pub mod ridge_em;
pub mod simulation;

pub use components::{fit_components, fit_components_fixed, ComponentFit, ComponentModel};
pub use error::{GlmmError, Result};
pub use family::{Family, FamilyKind};
pub use model::{build_designs, linear_predictor, DesignMatrices, ModelState, PanelDataset, PanelLayout};
pub use ridge_em::{fit, FitReport, RidgeConfig};
pub use simulation::{generate_panel, SimScenario};
