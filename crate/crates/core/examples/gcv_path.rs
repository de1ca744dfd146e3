//! GCV scores over a λ grid at the initial state of a simulated panel, with
//! the grid argmin and its refinement.

use panel_glmm::ridge_em::{gcv_refine_lambda, gcv_select_lambda, initial_state, log_grid, LinearisedModel, Smoother};
use panel_glmm::simulation::{generate_panel, SimScenario};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let panel = generate_panel(&SimScenario::default(), 3)?;
    let data = &panel.dataset;
    let designs = data.designs()?;
    let theta = initial_state(data, &designs)?;
    let mu = data.family.initial_mean(&data.y);
    let lin = LinearisedModel::from_mean(&data.y, &mu, &data.family, &designs, data.layout)?;

    let grid = log_grid(1e-3, 1e3, 13);
    let (best, path) = gcv_select_lambda(&lin, &theta, &grid)?;
    println!("{:>10} {:>12} {:>8}", "lambda", "gcv", "tr S");
    for ((l, s), t) in path.lambdas.iter().zip(&path.scores).zip(&path.traces) {
        let mark = if *l == best { " <" } else { "" };
        println!("{l:>10.3e} {s:>12.6} {t:>8.3}{mark}");
    }
    let (refined, _) = gcv_refine_lambda(&lin, &theta, &grid, Smoother::Full)?;
    println!("grid argmin {best:.4e}, refined {refined:.4e}");
    Ok(())
}
