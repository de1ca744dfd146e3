//! Closed-form AR(1) covariance, precision and log-determinant, and the
//! profile-likelihood update from a second-moment matrix.

use panel_glmm::ar1::{ar1_covariance, ar1_logdet, ar1_precision, profile_ml_update, Ar1Params};
use panel_glmm::simulation::draw_ar1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = Ar1Params::new(0.6, 0.5)?;
    let cov = ar1_covariance(&params, 5)?;
    let prec = ar1_precision(&params, 5)?;
    println!("covariance:{cov}precision (tridiagonal):{prec}");
    println!("max |cov·prec − I| = {:.2e}", (cov * prec - nalgebra::DMatrix::identity(5, 5)).abs().max());
    println!("log det = {:.6}", ar1_logdet(&params, 5)?);

    // average outer product of many simulated paths, then re-estimate
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = 30;
    let mut s2 = nalgebra::DMatrix::zeros(t, t);
    let reps = 2000;
    for _ in 0..reps {
        let path = nalgebra::DVector::from_vec(draw_ar1(&mut rng, t, params.rho, params.sigma2_sq));
        s2 += &path * path.transpose();
    }
    s2 /= reps as f64;
    let est = profile_ml_update(&s2)?;
    println!("profile update from {reps} paths: rho = {:.3}, sigma2_sq = {:.3}", est.rho, est.sigma2_sq);
    Ok(())
}
