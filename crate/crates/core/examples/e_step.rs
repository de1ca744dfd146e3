//! Working response of a Poisson panel and the Gaussian posterior of the
//! random effects given it.

use nalgebra::{DMatrix, DVector};
use panel_glmm::ridge_em::{e_step, LinearisedModel};
use panel_glmm::{Family, ModelState, PanelDataset, PanelLayout};

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let layout = PanelLayout::new(3, 4)?;
    let y = DVector::from_vec(vec![2.0, 0.0, 3.0, 1.0, 4.0, 6.0, 3.0, 5.0, 0.0, 1.0, 1.0, 0.0]);
    let x = DMatrix::from_fn(12, 1, |i, _| (i % 4) as f64 / 3.0);
    let data = PanelDataset::new(layout, y, x, Family::poisson())?;
    let designs = data.designs()?;

    let mu = data.family.initial_mean(&data.y);
    let lin = LinearisedModel::from_mean(&data.y, &mu, &data.family, &designs, layout)?;
    println!("z = {}", fmt(lin.z.as_slice()));
    println!("Γ = {}", fmt(lin.gamma_diag.as_slice()));

    let theta = ModelState::new(DVector::from_element(1, 0.3), 0.4, 0.2, 0.5, layout.n_random())?;
    let post = e_step(&lin, &theta)?;
    println!("E[ξ₁ | z] = {}", fmt(&post.mean.as_slice()[..3]));
    println!("E[ξ₂ | z] = {}", fmt(&post.mean.as_slice()[3..]));
    println!("sd[ξ | z] = {}", fmt(post.cov.diagonal().map(f64::sqrt).as_slice()));
    Ok(())
}
