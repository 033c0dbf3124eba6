//! Independent numerical oracles: the series and chain solvers are checked
//! against methods that share no code with them — a Crank-Nicolson solve of
//! the forward Kolmogorov equation, closed-form Gaussians, and a separable
//! product construction in two dimensions.

use parametrix::chain::{discrete_parametrix_terms, Discretization};
use parametrix::model::{build_model, ModelConfig, ModelSpec};
use parametrix::series::{density_profile, QuadratureSpec, TruncationPolicy};

/// Crank-Nicolson solve of the 1-d forward equation
/// `dp/dt = (sigma(t,y) p)'' / 2 - (m(t,y) p)'` from a point mass at `x0`,
/// with a few backward-Euler startup steps to damp the delta. Conservative
/// second-order stencil, Dirichlet ends, Thomas solver.
fn fokker_planck_cn(
    model: &ModelSpec,
    t_end: f64,
    x0: f64,
    half_width: f64,
    nodes: usize,
    steps: usize,
) -> (Vec<f64>, Vec<f64>) {
    let n = nodes;
    let dy = 2.0 * half_width / (n - 1) as f64;
    let ys: Vec<f64> = (0..n).map(|i| x0 - half_width + i as f64 * dy).collect();
    let dt = t_end / steps as f64;
    let mut p = vec![0.0; n];
    p[n / 2] = 1.0 / dy;

    let coeff = |t: f64| -> (Vec<f64>, Vec<f64>) {
        (
            ys.iter().map(|&y| model.sigma1(t, y)).collect(),
            ys.iter().map(|&y| model.drift1(t, y)).collect(),
        )
    };
    let apply = |sig: &[f64], m: &[f64], p: &[f64], out: &mut [f64]| {
        out[0] = 0.0;
        out[n - 1] = 0.0;
        for i in 1..n - 1 {
            out[i] = (sig[i + 1] * p[i + 1] - 2.0 * sig[i] * p[i] + sig[i - 1] * p[i - 1])
                / (2.0 * dy * dy)
                - (m[i + 1] * p[i + 1] - m[i - 1] * p[i - 1]) / (2.0 * dy);
        }
    };
    // Solves (I - w A) q = r.
    let solve = |sig: &[f64], m: &[f64], w: f64, r: &[f64]| -> Vec<f64> {
        let mut lower = vec![0.0; n];
        let mut diag = vec![1.0; n];
        let mut upper = vec![0.0; n];
        for i in 1..n - 1 {
            lower[i] = -w * (sig[i - 1] / (2.0 * dy * dy) + m[i - 1] / (2.0 * dy));
            diag[i] = 1.0 + w * sig[i] / (dy * dy);
            upper[i] = -w * (sig[i + 1] / (2.0 * dy * dy) - m[i + 1] / (2.0 * dy));
        }
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        d[0] = r[0];
        for i in 1..n {
            let denom = diag[i] - lower[i] * c[i - 1];
            c[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
            d[i] = (r[i] - lower[i] * d[i - 1]) / denom;
        }
        let mut q = vec![0.0; n];
        q[n - 1] = d[n - 1];
        for i in (0..n - 1).rev() {
            q[i] = d[i] - c[i] * q[i + 1];
        }
        q
    };

    let damped = 4.min(steps);
    for k in 0..steps {
        let t0 = k as f64 * dt;
        let t1 = t0 + dt;
        if k < damped {
            let (sig, m) = coeff(t1);
            p = solve(&sig, &m, dt, &p);
        } else {
            let (sig0, m0) = coeff(t0);
            let mut rhs = vec![0.0; n];
            apply(&sig0, &m0, &p, &mut rhs);
            for i in 0..n {
                rhs[i] = p[i] + 0.5 * dt * rhs[i];
            }
            rhs[0] = 0.0;
            rhs[n - 1] = 0.0;
            let (sig1, m1) = coeff(t1);
            p = solve(&sig1, &m1, 0.5 * dt, &rhs);
        }
    }
    (ys, p)
}

fn normal1(y: f64, mean: f64, var: f64) -> f64 {
    ((y - mean).powi(2) / (-2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn value_at(ys: &[f64], p: &[f64], y: f64) -> f64 {
    let i = ys
        .iter()
        .position(|&v| (v - y).abs() < 1e-9)
        .expect("query point must be a solver node");
    p[i]
}

#[test]
fn forward_solver_reproduces_gaussians() {
    // Pure diffusion and drifted diffusion both have closed forms; this
    // certifies the oracle itself before it judges the series solver.
    let plain = build_model(&ModelConfig::family("constant")).unwrap();
    let mut cfg = ModelConfig::family("constant");
    cfg.m = Some(0.3);
    let drifted = build_model(&cfg).unwrap();
    let t = 0.25;
    for (model, mean) in [(&plain, 0.0), (&drifted, 0.3 * t)] {
        let (ys, p) = fokker_planck_cn(model, t, 0.0, 5.0, 2001, 2048);
        let mut worst = 0.0f64;
        for &y in &[-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5] {
            let exact = normal1(y, mean, t);
            let rel = (value_at(&ys, &p, y) - exact).abs() / exact;
            worst = worst.max(rel);
        }
        assert!(
            worst < 5e-4,
            "{}: worst relative error {worst:.3e}",
            model.name
        );
    }
}

#[test]
fn series_density_matches_forward_solver() {
    // Variable diffusion 1 + 0.5 sin y with drift 0.5 tanh y: no closed
    // form, so the parametrix series is checked against the PDE solve.
    let model = build_model(&ModelConfig::family("sin1d")).unwrap();
    let t = 0.25;
    let x = vec![0.0];
    let (ys, p) = fokker_planck_cn(&model, t, 0.0, 5.0, 2001, 2048);

    let spec = QuadratureSpec::for_model(&model).unwrap();
    let policy = TruncationPolicy::default();
    let queries = [-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0];
    let targets: Vec<Vec<f64>> = queries.iter().map(|&y| vec![y]).collect();
    let series = density_profile(&model, 0.0, t, &x, &targets, &policy, &spec).unwrap();

    let mut worst = 0.0f64;
    for (&y, sv) in queries.iter().zip(&series) {
        let oracle = value_at(&ys, &p, y);
        let rel = (sv.value - oracle).abs() / oracle;
        worst = worst.max(rel);
    }
    assert!(worst < 2e-3, "worst relative error {worst:.3e}");
}

#[test]
fn two_dimensional_density_is_a_product_of_one_dimensional_ones() {
    // The 2-d family has diagonal, per-axis coefficients, so its transition
    // density factorizes exactly into two copies of the 1-d one.
    let model2 = build_model(&ModelConfig::family("sin2d")).unwrap();
    let model1 = build_model(&ModelConfig::family("sin1d")).unwrap();
    let t = 0.25;
    let policy = TruncationPolicy::default();
    // Two orders suffice against a 2e-2 tolerance; the third costs minutes.
    let policy2 = TruncationPolicy {
        max_order: 2,
        ..TruncationPolicy::default()
    };
    let mut spec2 = QuadratureSpec::for_model(&model2).unwrap();
    spec2.points_per_axis = 25;
    spec2.ladder_steps = 12;
    let spec1 = QuadratureSpec::for_model(&model1).unwrap();

    let points = [[0.0, 0.0], [0.3, -0.2], [0.5, 0.5]];
    let targets2: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
    let values2 =
        density_profile(&model2, 0.0, t, &[0.0, 0.0], &targets2, &policy2, &spec2).unwrap();

    let mut axis: Vec<f64> = points.iter().flatten().copied().collect();
    axis.sort_by(|a, b| a.partial_cmp(b).unwrap());
    axis.dedup();
    let targets1: Vec<Vec<f64>> = axis.iter().map(|&v| vec![v]).collect();
    let values1 = density_profile(&model1, 0.0, t, &[0.0], &targets1, &policy, &spec1).unwrap();
    let one_d = |v: f64| -> f64 {
        let i = axis.iter().position(|&a| a == v).unwrap();
        values1[i].value
    };

    for (p, v2) in points.iter().zip(&values2) {
        let product = one_d(p[0]) * one_d(p[1]);
        let rel = (v2.value - product).abs() / product;
        assert!(
            rel < 2e-2,
            "at {p:?}: 2-d {:.6e} vs product {product:.6e} (rel {rel:.3e})",
            v2.value
        );
    }
}

#[test]
fn discrete_term_envelope_is_stable_under_mesh_refinement() {
    // The ladder terms of the discrete series obey the same
    // factorial-decay envelope as the continuous ones; the fitted constant
    // must not blow up as the mesh refines.
    let model = build_model(&ModelConfig::family("sin1d")).unwrap();
    let gamma_half = [1.0, 0.886_226_925_452_758, 1.0, 1.329_340_388_179_137];
    let t: f64 = 0.25;
    let rho = t.sqrt();
    let mut fitted = Vec::new();
    for n in [8usize, 16] {
        let disc = Discretization::from_horizon(n, t).unwrap();
        let mut c1 = 0.0f64;
        for y in [0.0, 0.4] {
            let terms = discrete_parametrix_terms(&model, &disc, 0, n, &[0.0], &[y], 3).unwrap();
            for (r, &v) in terms.iter().enumerate() {
                if v.abs() > 0.0 {
                    c1 = c1.max(
                        (v.abs() * gamma_half[r] / rho.powi(r as i32)).powf(1.0 / (r as f64 + 1.0)),
                    );
                }
            }
        }
        fitted.push(c1);
    }
    assert!(
        fitted[1] <= fitted[0] * 1.5,
        "fitted constants should be stable: {fitted:?}"
    );
    assert!(
        fitted.iter().all(|&c| c.is_finite() && c > 0.0),
        "{fitted:?}"
    );
}
