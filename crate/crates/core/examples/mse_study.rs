//! Mean squared error of each parameter as the panel gets longer.

use panel_glmm::simulation::{mse_study, RidgeEstimator, SimScenario};
use panel_glmm::RidgeConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = SimScenario { n_replicates: 20, ..SimScenario::default() };
    let table = mse_study(&scenario, &[10, 40, 100], &RidgeEstimator(RidgeConfig::default()))?;
    println!("{:>4} {:>10} {:>10}", "T", "parameter", "mse");
    for row in table.rows() {
        println!("{:>4} {:>10} {:>10.5}", row.n_times, row.parameter, row.mse);
    }
    Ok(())
}
