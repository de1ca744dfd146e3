//! Iteration counts of the penalised EM over replicated Poisson panels.

use panel_glmm::simulation::{convergence_study, quantile, SimScenario};
use panel_glmm::RidgeConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = SimScenario::default();
    let study = convergence_study(&scenario, &RidgeConfig::default())?;
    let counts: Vec<f64> = study.iteration_counts().into_iter().map(|c| c as f64).collect();
    println!(
        "{}/{} converged; iterations: min {} q1 {} median {} q3 {} max {}",
        study.n_converged(),
        scenario.n_replicates,
        quantile(&counts, 0.0),
        quantile(&counts, 0.25),
        quantile(&counts, 0.5),
        quantile(&counts, 0.75),
        quantile(&counts, 1.0)
    );
    let first = &study.replicates[0];
    println!("replicate 0 trajectory (every 5th iteration):");
    for rec in first.trajectory.iter().step_by(5) {
        println!(
            "  {:>3} crit {:.2e} sigma1_sq {:.4} sigma2_sq {:.4} rho {:.4}",
            rec.iteration, rec.criterion, rec.sigma1_sq, rec.sigma2_sq, rec.rho
        );
    }
    Ok(())
}
