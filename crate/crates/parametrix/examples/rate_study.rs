//! Measures the weighted sup distance between the chain marginal and the
//! series density as the step count grows (with the horizon shrinking like
//! n^{-1/3}), then fits the log-log decay rate.

use parametrix::chain::{chain_density, default_chain_grid, Discretization};
use parametrix::metrics::{fit_rate, WeightQ};
use parametrix::model::{build_model, ModelConfig};
use parametrix::series::{density_profile, QuadratureSpec, TruncationPolicy};

fn main() -> parametrix::Result<()> {
    let model = build_model(&ModelConfig::family("sin1d"))?;
    let x = vec![0.0];
    let mut points = Vec::new();
    for n in [8usize, 16, 32] {
        let t = (n as f64).powf(-1.0 / 3.0);
        let disc = Discretization::from_horizon(n, t)?;
        let mut spec = QuadratureSpec::for_model(&model)?;
        spec.points_per_axis = 129;
        let policy = TruncationPolicy {
            max_order: 3,
            ..TruncationPolicy::default()
        };
        let half = 4.0 * (t * spec.sigma_peak).sqrt();
        let targets: Vec<Vec<f64>> = (0..17)
            .map(|i| vec![x[0] - half + 2.0 * half * i as f64 / 16.0])
            .collect();
        let series = density_profile(&model, 0.0, t, &x, &targets, &policy, &spec)?;
        let grid = default_chain_grid(&model, &disc, &x, spec.points_per_axis)?;
        let chain = chain_density(&model, &disc, 0, n, &x, &grid)?;
        let weight = WeightQ::new(t.sqrt(), model.s_prime(), 1)?;
        let mut sup = 0.0f64;
        for (y, sv) in targets.iter().zip(&series) {
            let gap = (sv.value - chain.value_at(y)).abs();
            sup = sup.max(weight.value(&[y[0] - x[0]]) * gap);
        }
        println!("n={n:>3} T={t:.4} weighted sup error {sup:.6e}");
        points.push((n as f64, sup));
    }
    let fit = fit_rate(&points)?;
    println!(
        "fitted slope {:.4} (r^2 {:.4}); an n^(-1/2) law would give -0.5",
        fit.slope, fit.r_squared
    );
    Ok(())
}
