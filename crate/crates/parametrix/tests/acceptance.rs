//! Acceptance suite: seven numbered end-to-end criteria, one test each.
//! Every test prints a single `criterion N: PASS/FAIL - ...` line (visible
//! with `--nocapture`, or in the failure output) before asserting, so a red
//! run still reports the measured numbers. Tolerances and runtime budgets
//! are pinned here and only here.

use std::time::Instant;

use parametrix::chain::{
    chain_density, correction_terms, default_chain_grid, discrete_parametrix_density,
    frozen_chain_density, Discretization,
};
use parametrix::experiments::aligned_chain_grid;
use parametrix::frozen::{frozen_density, GaussianEval};
use parametrix::grid::SpatialGrid;
use parametrix::metrics::{fit_rate, EnvelopeSpec, WeightQ, RATE_SLOPE_BAND};
use parametrix::model::{build_model, ModelConfig, ModelSpec};
use parametrix::quad;
use parametrix::series::{
    density_profile, diffusion_density, LadderEngine, QuadratureSpec, TruncationPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Numerical tolerances, one per criterion (7 bundles the module-level ones).
const GAUSSIAN_AGREEMENT_TOL: f64 = 1e-6;
const DISCRETE_IDENTITY_TOL: f64 = 5e-5;
const SCALED_BACKSLIDE_TOL: f64 = 0.15;
const TREND_SLOPE_CAP: f64 = 0.1;
const FD_STEP: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-5;
const FD_ABS_TOL: f64 = 1e-8;
const CHAIN_COMPOSE_TOL: f64 = 1e-4;
const SERIES_COMPOSE_REL_TOL: f64 = 5e-3;
const MASS_TOL: f64 = 5e-3;

// Wall-clock budgets in seconds, one per criterion.
const BUDGETS: [f64; 7] = [10.0, 60.0, 600.0, 120.0, 120.0, 600.0, 300.0];

fn sin1d() -> ModelSpec {
    build_model(&ModelConfig::family("sin1d")).unwrap()
}

/// The sin family with a linear-in-time diffusion amplitude; keeps
/// ellipticity (min sigma = 0.25 over t <= 1) while making the frozen-chain
/// Riemann sums genuinely differ from the time integrals.
fn sin1d_time_modulated() -> ModelSpec {
    let mut cfg = ModelConfig::family("sin1d");
    cfg.b_t = Some(0.25);
    build_model(&cfg).unwrap()
}

fn line(center: f64, half: f64, points: usize) -> Vec<Vec<f64>> {
    (0..points)
        .map(|i| vec![center - half + 2.0 * half * i as f64 / (points - 1) as f64])
        .collect()
}

fn report(id: usize, pass: bool, elapsed: f64, detail: &str) {
    println!(
        "criterion {id}: {} - {detail} [{elapsed:.1}s / {:.0}s budget]",
        if pass { "PASS" } else { "FAIL" },
        BUDGETS[id - 1]
    );
}

fn budget_check(id: usize, elapsed: f64) {
    assert!(
        elapsed < BUDGETS[id - 1],
        "criterion {id} took {elapsed:.1}s, budget {:.0}s",
        BUDGETS[id - 1]
    );
}

/// 1. With constant coefficients the chain recursion, the series solver and
///    the frozen Gaussian are all the same density; the three evaluators must
///    agree pairwise on the full evaluation grid.
#[test]
fn criterion_1_constant_model_collapses_to_one_gaussian() {
    let start = Instant::now();
    let model = build_model(&ModelConfig::family("constant")).unwrap();
    let (n, t) = (16, 0.25);
    let disc = Discretization::from_horizon(n, t).unwrap();
    let x = [0.0];
    let spec = QuadratureSpec::for_model(&model).unwrap();
    let grid = default_chain_grid(&model, &disc, &x, spec.points_per_axis).unwrap();
    let chain = chain_density(&model, &disc, 0, n, &x, &grid).unwrap();
    let targets: Vec<Vec<f64>> = (0..grid.len()).map(|g| grid.node_vec(g)).collect();
    let series = density_profile(
        &model,
        0.0,
        t,
        &x,
        &targets,
        &TruncationPolicy::default(),
        &spec,
    )
    .unwrap();
    let mut worst = 0.0f64;
    for (g, y) in targets.iter().enumerate() {
        let pc = chain.values[g];
        let ps = series[g].value;
        let pf = frozen_density(&model, 0.0, t, &x, y).unwrap();
        worst = worst
            .max((pc - ps).abs())
            .max((pc - pf).abs())
            .max((ps - pf).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= GAUSSIAN_AGREEMENT_TOL && elapsed < BUDGETS[0];
    report(
        1,
        pass,
        elapsed,
        &format!("pairwise sup gap {worst:.3e} (tolerance {GAUSSIAN_AGREEMENT_TOL:.0e})"),
    );
    assert!(
        worst <= GAUSSIAN_AGREEMENT_TOL,
        "pairwise sup gap {worst:.3e} exceeds {GAUSSIAN_AGREEMENT_TOL:.0e}"
    );
    budget_check(1, elapsed);
}

/// 2. Summing the discrete convolution ladder to full depth must reproduce
///    the chain recursion (the two compute the same object by different
///    routes; the gap is pure quadrature error).
#[test]
fn criterion_2_discrete_series_resums_the_chain() {
    let start = Instant::now();
    let model = sin1d();
    let x = [0.0];
    let t = 0.25;
    let mut sups = Vec::new();
    for n in [4usize, 8] {
        let disc = Discretization::from_horizon(n, t).unwrap();
        let grid = default_chain_grid(&model, &disc, &x, 257).unwrap();
        let field = chain_density(&model, &disc, 0, n, &x, &grid).unwrap();
        let mut sup = 0.0f64;
        for y in line(0.0, 2.5, 11) {
            let resummed = discrete_parametrix_density(&model, &disc, 0, n, &x, &y, n).unwrap();
            sup = sup.max((resummed - field.value_at(&y)).abs());
        }
        sups.push(sup);
    }
    let worst = sups.iter().fold(0.0f64, |m, s| m.max(*s));
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst <= DISCRETE_IDENTITY_TOL && elapsed < BUDGETS[1];
    report(
        2,
        pass,
        elapsed,
        &format!(
            "sup gap {:.3e} (n=4) / {:.3e} (n=8), tolerance {DISCRETE_IDENTITY_TOL:.0e}",
            sups[0], sups[1]
        ),
    );
    assert!(
        worst <= DISCRETE_IDENTITY_TOL,
        "resummed-vs-chain sup gap {worst:.3e} exceeds {DISCRETE_IDENTITY_TOL:.0e}"
    );
    budget_check(2, elapsed);
}

/// 3. Shrinking-horizon convergence: the weighted sup error between the
///    chain and the diffusion density fits a log-log slope inside the pinned
///    band, and sqrt(n)-scaled errors do not backslide by more than 15%.
#[test]
fn criterion_3_weighted_chain_error_rate_in_band() {
    let start = Instant::now();
    let model = sin1d();
    let x = vec![0.0];
    let spec = QuadratureSpec::for_model(&model).unwrap();
    let policy = TruncationPolicy {
        max_order: 3,
        ..TruncationPolicy::default()
    };
    let b = model.bounds();
    let mut pts = Vec::new();
    for n in [8usize, 16, 32, 64] {
        let t = (n as f64).powf(-1.0 / 3.0);
        let disc = Discretization::from_horizon(n, t).unwrap();
        let half = 6.0 * (t * b.sigma_star_star).sqrt();
        let targets = line(x[0], half, 41);
        let series = density_profile(&model, 0.0, t, &x, &targets, &policy, &spec).unwrap();
        let grid = aligned_chain_grid(&model, &disc, &x, half, 41, &spec).unwrap();
        let field = chain_density(&model, &disc, 0, n, &x, &grid).unwrap();
        let weight = WeightQ::new(t.sqrt(), model.s_prime(), 1).unwrap();
        let mut err = 0.0f64;
        for (y, s) in targets.iter().zip(&series) {
            let gap = (field.value_at(y) - s.value).abs();
            err = err.max(weight.value(&[y[0] - x[0]]) * gap);
        }
        pts.push((n as f64, err));
    }
    let fitted = fit_rate(&pts).unwrap();
    let in_band = fitted.slope >= RATE_SLOPE_BAND.0 && fitted.slope <= RATE_SLOPE_BAND.1;
    let scaled: Vec<f64> = pts.iter().map(|(n, e)| n.sqrt() * e).collect();
    let non_increasing = scaled
        .windows(2)
        .all(|w| w[1] <= w[0] * (1.0 + SCALED_BACKSLIDE_TOL));
    let elapsed = start.elapsed().as_secs_f64();
    let pass = in_band && non_increasing && elapsed < BUDGETS[2];
    report(
        3,
        pass,
        elapsed,
        &format!(
            "fitted slope {:.4} vs band [{}, {}] (r2 {:.4}); sqrt(n)-scaled errors non-increasing: {}",
            fitted.slope, RATE_SLOPE_BAND.0, RATE_SLOPE_BAND.1, fitted.r_squared, non_increasing
        ),
    );
    assert!(
        non_increasing,
        "sqrt(n)-scaled errors backslide beyond {SCALED_BACKSLIDE_TOL}: {scaled:?}"
    );
    assert!(
        in_band,
        "fitted slope {:.4} outside [{}, {}] (r2 {:.4}, errors {:?}): with \
         Gaussian innovations the third innovation moments vanish, the \
         chain/diffusion gap shrinks one half-order faster than the general \
         envelope the band encodes, and the clean measured decay lands near \
         slope -1.2; a slope inside the band would need an innovation law \
         with nonzero third moments, which the closed-form ladders do not \
         support",
        fitted.slope, RATE_SLOPE_BAND.0, RATE_SLOPE_BAND.1, fitted.r_squared, pts
    );
    budget_check(3, elapsed);
}

/// 4. The series terms at a fixed window admit one Gaussian-envelope pair
///    (C, C1) with factorially decaying order bounds; the pair is fitted by
///    scanning the envelope decay constant and minimizing C1.
#[test]
fn criterion_4_series_terms_fit_one_factorial_envelope_pair() {
    let start = Instant::now();
    let model = sin1d();
    let x = vec![0.0];
    let t: f64 = 0.25;
    let rho = t.sqrt();
    let spec = QuadratureSpec::for_model(&model).unwrap();
    let mut engine = LadderEngine::new(&model, 0.0, t, &x, &spec).unwrap();
    engine.ensure_order(4).unwrap();
    let m = engine.steps();
    let grid = engine.grid().clone();
    // Envelope-relative term norm at the full window for one decay constant.
    let a_r = |phi: &EnvelopeSpec, r: usize| -> f64 {
        engine
            .term_field(r, m)
            .iter()
            .enumerate()
            .map(|(g, v)| v.abs() / phi.value(&[grid.axis_coord(0, g) - x[0]]))
            .fold(0.0f64, f64::max)
    };
    let mut best: Option<(f64, f64)> = None;
    for i in 1..=10 {
        let c = 0.05 * i as f64;
        let phi = EnvelopeSpec::phi(c, rho, 1).unwrap();
        let mut c1 = 0.0f64;
        for r in 0..=4usize {
            let candidate = (a_r(&phi, r) * quad::gamma_one_plus_half(r) / rho.powi(r as i32))
                .powf(1.0 / (r as f64 + 1.0));
            c1 = c1.max(candidate);
        }
        if best.is_none_or(|(_, b)| c1 < b) {
            best = Some((c, c1));
        }
    }
    let (c_fit, c1_fit) = best.unwrap();
    // Re-verify the claimed factorial bound order by order.
    let phi = EnvelopeSpec::phi(c_fit, rho, 1).unwrap();
    let mut holds = c1_fit.is_finite() && c1_fit > 0.0;
    let mut norms = Vec::new();
    for r in 0..=4usize {
        let norm = a_r(&phi, r);
        let bound = c1_fit.powi(r as i32 + 1) * rho.powi(r as i32) / quad::gamma_one_plus_half(r);
        holds &= norm.is_finite() && norm <= bound * (1.0 + 1e-9);
        norms.push(norm);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = holds && elapsed < BUDGETS[3];
    report(
        4,
        pass,
        elapsed,
        &format!(
            "fitted pair C={c_fit:.2}, C1={c1_fit:.4}; envelope-relative term norms {:?}",
            norms.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>()
        ),
    );
    assert!(
        holds,
        "no single pair bounds all orders: C={c_fit}, C1={c1_fit}, norms {norms:?}"
    );
    budget_check(4, elapsed);
}

/// 5. The frozen-chain vs frozen-diffusion gap, normalized by
///    sqrt(h)/rho times the heavy-tailed envelope, fits constants that do not
///    grow with the step count (least-squares slope over log n at most 0.1).
#[test]
fn criterion_5_frozen_gap_constant_stays_flat_in_n() {
    let start = Instant::now();
    let model = sin1d_time_modulated();
    let x = vec![0.0];
    let t: f64 = 0.25;
    let rho = t.sqrt();
    let b = model.bounds();
    let zeta = EnvelopeSpec::zeta(model.s_prime(), rho, 1).unwrap();
    let targets = line(x[0], 6.0 * (t * b.sigma_star_star).sqrt(), 81);
    let ns = [8usize, 16, 32];
    let mut cs = Vec::new();
    for &n in &ns {
        let disc = Discretization::from_horizon(n, t).unwrap();
        let mut c_n = 0.0f64;
        for y in &targets {
            let ph = frozen_chain_density(&model, &disc, 0, n, &x, y).unwrap();
            let p = frozen_density(&model, 0.0, t, &x, y).unwrap();
            let envelope = disc.h.sqrt() / rho * zeta.value(&[y[0] - x[0]]);
            c_n = c_n.max((ph - p).abs() / envelope);
        }
        cs.push(c_n);
    }
    // Least-squares slope of the fitted constant against log n.
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let xbar = xs.iter().sum::<f64>() / xs.len() as f64;
    let cbar = cs.iter().sum::<f64>() / cs.len() as f64;
    let sxx: f64 = xs.iter().map(|v| (v - xbar).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&cs)
        .map(|(v, c)| (v - xbar) * (c - cbar))
        .sum();
    let slope = sxy / sxx;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = slope <= TREND_SLOPE_CAP && elapsed < BUDGETS[4];
    report(
        5,
        pass,
        elapsed,
        &format!(
            "fitted constants {:?}, trend slope {slope:.4} (cap {TREND_SLOPE_CAP})",
            cs.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>()
        ),
    );
    assert!(
        slope <= TREND_SLOPE_CAP,
        "fitted constants grow with n: {cs:?}, slope {slope:.4}"
    );
    budget_check(5, elapsed);
}

/// 6. Correction accounting in the shrinking-horizon regime: after removing
///    the four order-h correction terms, the remaining residual divided by h
///    strictly decreases across n (the gap closes faster than h).
#[test]
fn criterion_6_correction_residual_decays_below_h() {
    let start = Instant::now();
    let model = sin1d_time_modulated();
    let x = vec![0.0];
    let spec = QuadratureSpec::for_model(&model).unwrap();
    let ns = [8usize, 16, 32];
    let mut roh = Vec::new();
    let mut converged = true;
    for &n in &ns {
        let t = (n as f64).powf(-1.0 / 3.0);
        let disc = Discretization::from_horizon(n, t).unwrap();
        let y = vec![x[0] + 0.5 * t.sqrt()];
        let rep = correction_terms(&model, &disc, &x, &y, 2, &spec).unwrap();
        converged &= rep.converged;
        roh.push(rep.residual.abs() / disc.h);
    }
    let decreasing = roh.windows(2).all(|w| w[1] < w[0]);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = decreasing && elapsed < BUDGETS[5];
    report(
        6,
        pass,
        elapsed,
        &format!(
            "residual/h over n={ns:?}: {:?}, strictly decreasing: {decreasing} (series converged: {converged})",
            roh.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>()
        ),
    );
    assert!(decreasing, "residual/h does not strictly decrease: {roh:?}");
    budget_check(6, elapsed);
}

/// 7. Hygiene bundle: analytic derivatives vs finite differences, grid
///    composition of the chain, composition of the series density over an
///    intermediate time, trapezoid mass of both solvers, and byte determinism
///    of the command-line artifacts.
#[test]
fn criterion_7_hygiene_derivatives_composition_mass_cli() {
    let start = Instant::now();
    let model = sin1d();

    // (a) 500 random argument tuples, derivative orders 1..=4, 4th-order
    // central differences of the next-lower analytic derivative.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut fd_worst = 0.0f64;
    let mut fd_ok = true;
    for _ in 0..500 {
        let s = rng.gen_range(0.0..0.4);
        let t = s + rng.gen_range(0.05..0.5);
        let xq = rng.gen_range(-2.0..2.0);
        let yq = rng.gen_range(-2.0..2.0);
        let order = rng.gen_range(1..=4usize);
        let eval = GaussianEval::new(&model, s, t, &[yq]).unwrap();
        let lower = [order - 1];
        let f = |v: f64| eval.derivative(&lower, &[v], &[yq]).unwrap();
        let fd = (-f(xq + 2.0 * FD_STEP) + 8.0 * f(xq + FD_STEP) - 8.0 * f(xq - FD_STEP)
            + f(xq - 2.0 * FD_STEP))
            / (12.0 * FD_STEP);
        let got = eval.derivative(&[order], &[xq], &[yq]).unwrap();
        let gap = (got - fd).abs();
        fd_worst = fd_worst.max(gap / (FD_REL_TOL * fd.abs()).max(FD_ABS_TOL));
        fd_ok &= gap < (FD_REL_TOL * fd.abs()).max(FD_ABS_TOL);
    }

    // (b) Chain composition over an intermediate node.
    let disc = Discretization::new(4, 0.0625).unwrap();
    let grid = SpatialGrid::centered(&[0.0], &[4.2], 129).unwrap();
    let direct = chain_density(&model, &disc, 0, 4, &[0.0], &grid).unwrap();
    let firstleg = chain_density(&model, &disc, 0, 2, &[0.0], &grid).unwrap();
    let w = grid.trapezoid_weights();
    let mut composed = vec![0.0; grid.len()];
    for (g, (fv, wg)) in firstleg.values.iter().zip(&w).enumerate() {
        let f = fv * wg;
        if f.abs() < 1e-12 {
            continue;
        }
        let leg = chain_density(&model, &disc, 2, 4, &grid.node_vec(g), &grid).unwrap();
        for (c, v) in composed.iter_mut().zip(&leg.values) {
            *c += f * v;
        }
    }
    let chain_compose_sup = composed
        .iter()
        .zip(&direct.values)
        .map(|(c, v)| (c - v).abs())
        .fold(0.0f64, f64::max);

    // (c) Series composition at the mode over the halfway time.
    let spec = QuadratureSpec::for_model(&model).unwrap();
    let policy = TruncationPolicy::default();
    let (t, u) = (0.25, 0.125);
    let reference = diffusion_density(&model, 0.0, t, &[0.0], &[0.0], &policy, &spec)
        .unwrap()
        .value;
    let mut coarse = spec.clone();
    coarse.points_per_axis = 129;
    coarse.ladder_steps = 16;
    let coarse_policy = TruncationPolicy {
        max_order: 2,
        ..TruncationPolicy::default()
    };
    let zs = line(0.0, 2.5, 41);
    let first = density_profile(&model, 0.0, u, &[0.0], &zs, &policy, &spec).unwrap();
    let zw = quad::simpson_weights(zs.len(), zs[1][0] - zs[0][0]).unwrap();
    let mut series_composed = 0.0;
    for ((z, fv), wq) in zs.iter().zip(&first).zip(&zw) {
        let second = diffusion_density(&model, u, t, z, &[0.0], &coarse_policy, &coarse)
            .unwrap()
            .value;
        series_composed += wq * fv.value * second;
    }
    let series_compose_rel = (series_composed - reference).abs() / reference;

    // (d) Trapezoid mass of the chain recursion and of the series slices.
    let mass_disc = Discretization::from_horizon(16, 0.25).unwrap();
    let mass_grid = default_chain_grid(&model, &mass_disc, &[0.0], 257).unwrap();
    let chain_mass_err = (chain_density(&model, &mass_disc, 0, 16, &[0.0], &mass_grid)
        .unwrap()
        .mass()
        - 1.0)
        .abs();
    let mut engine = LadderEngine::new(&model, 0.0, 0.25, &[0.0], &coarse).unwrap();
    engine.ensure_order(2).unwrap();
    let series_mass_err = (engine.mass(2, engine.steps()).unwrap() - 1.0).abs();

    // (e) Byte-identical data artifacts across two runs of the binary.
    let exe = env!("CARGO_BIN_EXE_parametrix");
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    std::fs::write(
        &cfg_path,
        r#"{
  "model": { "family": "constant" },
  "density": { "n": 8, "eval_points": 9 },
  "quadrature": { "points_per_axis": 129, "ladder_steps": 16 }
}"#,
    )
    .unwrap();
    let mut identical = true;
    let mut compared = 0usize;
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    for out in [&out1, &out2] {
        std::fs::create_dir(out).unwrap();
        let status = std::process::Command::new(exe)
            .args(["density", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success(), "density run failed in {}", out.display());
    }
    for entry in std::fs::read_dir(&out1).unwrap() {
        let name = entry.unwrap().file_name();
        if name.to_string_lossy().ends_with("_manifest.json") {
            continue;
        }
        let a = std::fs::read(out1.join(&name)).unwrap();
        let b = std::fs::read(out2.join(&name)).unwrap();
        identical &= a == b;
        compared += 1;
    }

    let elapsed = start.elapsed().as_secs_f64();
    let checks_pass = fd_ok
        && chain_compose_sup < CHAIN_COMPOSE_TOL
        && series_compose_rel <= SERIES_COMPOSE_REL_TOL
        && chain_mass_err <= MASS_TOL
        && series_mass_err <= MASS_TOL
        && identical
        && compared > 0;
    let pass = checks_pass && elapsed < BUDGETS[6];
    report(
        7,
        pass,
        elapsed,
        &format!(
            "fd worst {fd_worst:.2}x tol; chain compose sup {chain_compose_sup:.2e}; \
             series compose rel {series_compose_rel:.2e}; mass err chain {chain_mass_err:.1e} \
             / series {series_mass_err:.1e}; {compared} artifacts byte-identical: {identical}"
        ),
    );
    assert!(
        fd_ok,
        "finite-difference check failed (worst {fd_worst:.2}x tolerance)"
    );
    assert!(
        chain_compose_sup < CHAIN_COMPOSE_TOL,
        "chain composition sup {chain_compose_sup:.3e}"
    );
    assert!(
        series_compose_rel <= SERIES_COMPOSE_REL_TOL,
        "series composition relative gap {series_compose_rel:.3e}"
    );
    assert!(
        chain_mass_err <= MASS_TOL,
        "chain mass error {chain_mass_err:.3e}"
    );
    assert!(
        series_mass_err <= MASS_TOL,
        "series mass error {series_mass_err:.3e}"
    );
    assert!(identical && compared > 0, "artifacts differ between reruns");
    budget_check(7, elapsed);
}
