//! Supervised-component fit on a wide design where a single covariate carries
//! the signal; (s, l) are tuned by cross-validation over individuals.

use nalgebra::{DMatrix, DVector};
use panel_glmm::components::{fit_components, ComponentConfig, CvConfig};
use panel_glmm::simulation::draw_ar1;
use panel_glmm::{Family, PanelDataset, PanelLayout};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layout = PanelLayout::new(12, 10)?;
    let n = layout.n_obs();
    let p = 20;
    let normal = Normal::new(0.0, 1.0)?;
    let x = DMatrix::from_fn(n, p, |_, _| normal.sample(&mut rng));
    let a: Vec<f64> = (0..12).map(|_| 0.5 * normal.sample(&mut rng)).collect();
    let b = draw_ar1(&mut rng, 10, 0.5, 0.2);
    let y = DVector::from_fn(n, |i, _| {
        let eta: f64 = 0.5 + 0.7 * x[(i, 0)] + a[layout.individual_of(i)] + b[layout.time_of(i)];
        Poisson::new(eta.exp()).unwrap().sample(&mut rng)
    });
    let data = PanelDataset::new(layout, y, x, Family::poisson())?;

    let fit = fit_components(
        &data,
        1,
        &[0.2, 0.8],
        &[1.0, 2.0],
        &CvConfig { folds: 3, seed: 1 },
        &ComponentConfig::default(),
    )?;
    println!("selected s = {}, l = {}", fit.selected_s, fit.selected_l);
    for cell in &fit.cv_table {
        println!("  s = {:<4} l = {:<4} held-out deviance = {:.2}", cell.s, cell.l, cell.deviance);
    }
    let load = fit.components().loadings.column(0);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&i, &j| load[j].abs().total_cmp(&load[i].abs()));
    println!("largest |loadings|:");
    for &j in &order[..5] {
        println!("  x{:<3} {:+.3}", j + 1, load[j]);
    }
    let rep = fit.report();
    let th = &rep.theta_hat;
    println!(
        "{:?} after {} iterations: sigma1_sq = {:.3}, sigma2_sq = {:.3}, rho = {:.3}",
        rep.termination, rep.n_iters, th.sigma1_sq, th.sigma2_sq, th.rho
    );
    Ok(())
}
