//! Fits the penalised EM to one simulated Poisson panel and compares the
//! estimates with the truth.

use panel_glmm::simulation::{generate_panel, SimScenario};
use panel_glmm::{fit, RidgeConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = SimScenario::default().with_layout(10, 40)?;
    let panel = generate_panel(&scenario, 0)?;
    let report = fit(&panel.dataset, &RidgeConfig::default())?;
    let th = &report.theta_hat;

    println!("{:?} after {} iterations, final λ = {:.4}", report.termination, report.n_iters, report.final_lambda().unwrap());
    println!("{:<10} {:>9} {:>9}", "parameter", "truth", "estimate");
    for (j, (b, bh)) in scenario.beta_true.iter().zip(th.beta.iter()).enumerate() {
        println!("{:<10} {b:>9.3} {bh:>9.3}", format!("beta{}", j + 1));
    }
    println!("{:<10} {:>9.3} {:>9.3}", "sigma1_sq", scenario.sigma1_sq_true, th.sigma1_sq);
    println!("{:<10} {:>9.3} {:>9.3}", "sigma2_sq", scenario.sigma2_sq_true, th.sigma2_sq);
    println!("{:<10} {:>9.3} {:>9.3}", "rho", scenario.rho_true, th.rho);
    Ok(())
}
