//! Compares three transition densities of the sine-modulated 1-d model on a
//! line of terminal points: the parametrix series (diffusion), the Markov
//! chain marginal, and the frozen Gaussian proxy.

use parametrix::chain::{chain_density, default_chain_grid, Discretization};
use parametrix::frozen::frozen_density;
use parametrix::model::{build_model, ModelConfig};
use parametrix::series::{density_profile, QuadratureSpec, TruncationPolicy};

fn main() -> parametrix::Result<()> {
    let model = build_model(&ModelConfig::family("sin1d"))?;
    let disc = Discretization::from_horizon(16, 0.25)?;
    let t = disc.horizon();
    let x = vec![0.0];
    let spec = QuadratureSpec::for_model(&model)?;
    let policy = TruncationPolicy::default();

    let targets: Vec<Vec<f64>> = (0..9).map(|i| vec![-1.0 + 0.25 * i as f64]).collect();
    let series = density_profile(&model, 0.0, t, &x, &targets, &policy, &spec)?;
    let grid = default_chain_grid(&model, &disc, &x, spec.points_per_axis)?;
    let chain = chain_density(&model, &disc, 0, disc.n, &x, &grid)?;

    println!(
        "{:>8} {:>16} {:>16} {:>16} {:>7}",
        "y", "series", "chain", "frozen", "orders"
    );
    for (y, sv) in targets.iter().zip(&series) {
        let pf = frozen_density(&model, 0.0, t, &x, y)?;
        println!(
            "{:>8.3} {:>16.8e} {:>16.8e} {:>16.8e} {:>7}",
            y[0],
            sv.value,
            chain.value_at(y),
            pf,
            sv.orders_used
        );
    }
    println!("chain mass on its grid: {:.8}", chain.mass());
    Ok(())
}
