//! Distribution of ρ̂ for several true autocorrelations.

use panel_glmm::simulation::{rho_recovery_study, SimScenario};
use panel_glmm::RidgeConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = SimScenario { n_replicates: 20, ..SimScenario::default() }.with_layout(10, 100)?;
    let rec = rho_recovery_study(&[0.2, 0.5, 0.8], &scenario, &RidgeConfig::default())?;
    println!("{:>6} {:>7} {:>7} {:>7}", "rho", "q1", "median", "q3");
    for s in rec.summaries() {
        println!("{:>6} {:>7.3} {:>7.3} {:>7.3}", s.rho_true, s.q1, s.median, s.q3);
    }
    Ok(())
}
