//! Splits the gap between the chain marginal and the diffusion density into
//! the exact h/2 correction terms plus a residual, for growing step counts.
//! The time-homogeneous model keeps the time-derivative term at exactly
//! zero; the residual over h should shrink as n grows.

use parametrix::chain::{correction_terms, Discretization};
use parametrix::model::{build_model, ModelConfig};
use parametrix::series::QuadratureSpec;

fn main() -> parametrix::Result<()> {
    let model = build_model(&ModelConfig::family("sin1d"))?;
    let mut spec = QuadratureSpec::for_model(&model)?;
    spec.points_per_axis = 129;
    let x = vec![0.0];
    println!(
        "{:>4} {:>14} {:>14} {:>14} {:>14} {:>14}",
        "n", "p - pd", "h1 terms", "a0 terms", "residual", "residual/h"
    );
    for n in [8usize, 16] {
        let t = (n as f64).powf(-1.0 / 3.0);
        let disc = Discretization::from_horizon(n, t)?;
        let y = vec![0.5 * t.sqrt()];
        let r = correction_terms(&model, &disc, &x, &y, 2, &spec)?;
        println!(
            "{n:>4} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e} {:>14.6e}",
            r.p_minus_pd,
            r.term_h1 + r.term_h1_phi,
            r.term_a0 + r.term_a0_phi,
            r.residual,
            r.residual.abs() / disc.h
        );
    }
    Ok(())
}
