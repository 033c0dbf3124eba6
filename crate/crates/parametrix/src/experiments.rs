//! Experiment drivers behind the command-line front end. Each `run_*`
//! function implements one subcommand: it computes the requested
//! quantities, writes CSV/JSON artifacts plus a run manifest into an
//! existing output directory, and returns the overall pass verdict.
//! Data files carry no timestamps, so reruns are byte-identical; wall-clock
//! information is confined to the manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::chain::{chain_density, correction_terms, default_chain_grid, Discretization};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::frozen::frozen_density;
use crate::grid::SpatialGrid;
use crate::metrics::{fit_rate, WeightQ};
use crate::model::{build_model, validate_assumptions, CustomInnovations, ModelSpec, SampleSpec};
use crate::series::{density_profile, QuadratureSpec};

/// Reported in every run manifest.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `|residual| / h` values below this count as already converged when the
/// correction command checks for decrease across step counts. Covers models
/// whose correction terms vanish identically, where the sequence is
/// floating-point noise rather than a trend.
pub const TRIVIAL_RESIDUAL_OVER_H: f64 = 1e-8;

/// Exit code for a failed run. Usage and configuration problems exit 2;
/// numerical failures exit 1, matching the convention where a clean passing
/// run exits 0 and a run that completed but failed its check exits 1.
pub fn error_exit_code(err: &Error) -> i32 {
    match err {
        Error::UnknownFamily(_)
        | Error::EllipticityViolated(_)
        | Error::InvalidConfig(_)
        | Error::InvalidArgument(_)
        | Error::Io(_)
        | Error::Json(_) => 2,
        _ => 1,
    }
}

#[derive(Debug, Serialize)]
struct PhaseTiming {
    phase: String,
    ms: u128,
}

/// Written next to every command's outputs: what was produced, from which
/// configuration, and whether the run passed.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub started_unix_ms: u128,
    timings_ms: Vec<PhaseTiming>,
    pub files: Vec<String>,
    pub pass: bool,
}

/// Collects output files and phase timings for one command run.
struct RunContext {
    dir: PathBuf,
    files: Vec<String>,
    timings: Vec<PhaseTiming>,
    started_unix_ms: u128,
}

impl RunContext {
    fn new(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "output directory {} does not exist",
                dir.display()
            )));
        }
        let started_unix_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            timings: Vec::new(),
            started_unix_ms,
        })
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), text)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn time(&mut self, phase: &str, since: Instant) {
        self.timings.push(PhaseTiming {
            phase: phase.to_string(),
            ms: since.elapsed().as_millis(),
        });
    }

    /// Verifies every produced file exists non-empty, then writes the
    /// manifest and returns the pass verdict unchanged.
    fn finish(self, command: &str, config_hash: &str, pass: bool) -> Result<bool> {
        for name in &self.files {
            let path = self.dir.join(name);
            let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
            if size == 0 {
                return Err(Error::Io(std::io::Error::other(format!(
                    "produced file {} is missing or empty",
                    path.display()
                ))));
            }
        }
        let manifest = RunManifest {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            config_hash: config_hash.to_string(),
            started_unix_ms: self.started_unix_ms,
            timings_ms: self.timings,
            files: self.files,
            pass,
        };
        let name = format!("{}_manifest.json", command.replace('-', "_"));
        std::fs::write(
            self.dir.join(name),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(pass)
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

fn point_header(dim: usize) -> String {
    if dim == 1 {
        "y".to_string()
    } else {
        (1..=dim)
            .map(|a| format!("y{a}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Builds the configured model; a nonzero `innovation_shift` wraps the
/// innovation law with a translated copy (a deliberate mean-zero breaker
/// consumed by the validator).
fn configured_model(cfg: &ExperimentConfig) -> Result<ModelSpec> {
    let base = build_model(&cfg.model)?;
    let shift = match cfg.innovation_shift {
        Some(s) if s != 0.0 => s,
        _ => return Ok(base),
    };
    let dim = base.dim();
    let for_density = base.innovations.clone();
    let for_psi = base.innovations.clone();
    let shifted = CustomInnovations::new(
        dim,
        move |t, x, u| {
            let c: Vec<f64> = u.iter().map(|v| v - shift).collect();
            for_density.density(t, x, &c)
        },
        move |u| {
            let c: Vec<f64> = u.iter().map(|v| v - shift).collect();
            for_psi.psi(&c)
        },
    );
    ModelSpec::from_parts(
        format!("{}-shifted", base.name),
        base.coeffs.clone(),
        Arc::new(shifted),
        base.s_prime(),
    )
}

/// Evaluation points on a line through `x` along the first axis.
fn line_targets(x: &[f64], half: f64, points: usize) -> Vec<Vec<f64>> {
    let m = points.max(2);
    (0..m)
        .map(|i| {
            let mut y = x.to_vec();
            y[0] = x[0] - half + 2.0 * half * i as f64 / (m - 1) as f64;
            y
        })
        .collect()
}

/// Chain grid whose nodes contain the evaluation line: the default grid's
/// step is shrunk to an integer fraction of the evaluation spacing, so
/// `value_at` on a target is a node read instead of an interpolation.
pub fn aligned_chain_grid(
    model: &ModelSpec,
    disc: &Discretization,
    x: &[f64],
    eval_half: f64,
    eval_points: usize,
    spec: &QuadratureSpec,
) -> Result<SpatialGrid> {
    let b = model.bounds();
    let t = disc.horizon();
    let hw0 = (8.0 * (t * b.sigma_star_star).sqrt() + b.drift_sup * t).max(eval_half);
    let base_step = 2.0 * hw0 / (spec.points_per_axis.max(3) - 1) as f64;
    let eval_step = 2.0 * eval_half / (eval_points.max(2) - 1) as f64;
    let q = (eval_step / base_step).ceil().max(1.0);
    let step = eval_step / q;
    let half_steps = (hw0 / step).ceil() as usize;
    SpatialGrid::centered(
        x,
        &vec![half_steps as f64 * step; model.dim()],
        2 * half_steps + 1,
    )
}

/// `validate`: every standing-assumption check over the default sample plan,
/// written to `assumptions.json`. Passes iff all checks pass.
pub fn run_validate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<bool> {
    let mut ctx = RunContext::new(out_dir)?;
    let t0 = Instant::now();
    let model = configured_model(cfg)?;
    let sample = SampleSpec::default_for_dim(model.dim());
    let report = validate_assumptions(&model, &sample)?;
    ctx.time("checks", t0);
    for check in &report.checks {
        println!(
            "{} {}: max violation {:.3e} (tolerance {:.1e})",
            verdict(check.pass),
            check.id,
            check.max_violation,
            check.tolerance
        );
    }
    let pass = report.passed();
    println!("validate: {}", verdict(pass));
    let t0 = Instant::now();
    ctx.write("assumptions.json", &serde_json::to_string_pretty(&report)?)?;
    ctx.time("write", t0);
    ctx.finish("validate", &cfg.digest(), pass)
}

/// `density`: series, chain, and frozen densities on a line of terminal
/// points through the start point, one CSV row per point with the weighted
/// series-vs-chain gap and a truncation status. Passes iff the chain mass
/// is conserved; truncated series rows are flagged but do not fail the run.
pub fn run_density(cfg: &ExperimentConfig, out_dir: &Path) -> Result<bool> {
    let mut ctx = RunContext::new(out_dir)?;
    let model = build_model(&cfg.model)?;
    let dim = model.dim();
    let disc = cfg.regime.discretization(cfg.density.n)?;
    let end = cfg.density_end_index()?;
    let t_end = disc.time(end);
    let x = cfg.start_point(dim);

    let mut spec = QuadratureSpec::for_model(&model)?;
    cfg.quadrature.apply(&mut spec);
    spec.validate()?;
    let policy = cfg.quadrature.policy();

    let eval_half = cfg.density.eval_half_width_sigmas * (t_end * spec.sigma_peak).sqrt();
    let targets = line_targets(&x, eval_half, cfg.density.eval_points);

    let t0 = Instant::now();
    let series = density_profile(&model, 0.0, t_end, &x, &targets, &policy, &spec)?;
    ctx.time("series", t0);

    let t0 = Instant::now();
    let grid = aligned_chain_grid(&model, &disc, &x, eval_half, targets.len(), &spec)?;
    let chain = chain_density(&model, &disc, 0, end, &x, &grid)?;
    ctx.time("chain", t0);

    let t0 = Instant::now();
    let weight = WeightQ::new(t_end.sqrt(), model.s_prime(), dim)?;
    let mut rows = String::new();
    let mut sup_gap = 0.0f64;
    let mut all_converged = true;
    let mut diff = vec![0.0; dim];
    for (y, sv) in targets.iter().zip(&series) {
        let pc = chain.value_at(y);
        let pf = frozen_density(&model, 0.0, t_end, &x, y)?;
        for a in 0..dim {
            diff[a] = y[a] - x[a];
        }
        let gap = weight.value(&diff) * (sv.value - pc).abs();
        sup_gap = sup_gap.max(gap);
        all_converged &= sv.converged;
        let coords: Vec<String> = y.iter().map(|v| fmt(*v)).collect();
        rows.push_str(&format!(
            "{},{},{},{},{},{}\n",
            coords.join(","),
            fmt(sv.value),
            fmt(pc),
            fmt(pf),
            fmt(gap),
            if sv.converged { "ok" } else { "truncated" }
        ));
    }
    let mass = chain.mass();
    // Truncated rows are reported in the status column; the run itself is
    // judged on the chain's mass hygiene.
    let pass = (mass - 1.0).abs() <= 5e-3;
    ctx.write(
        "density.csv",
        &format!(
            "{},p_series,p_chain,p_frozen,weighted_gap,status\n{rows}",
            point_header(dim)
        ),
    )?;
    #[derive(Serialize)]
    struct DensitySummary {
        t: f64,
        n: usize,
        x: Vec<f64>,
        chain_mass: f64,
        weighted_sup_gap: f64,
        all_converged: bool,
        pass: bool,
    }
    ctx.write(
        "density_summary.json",
        &serde_json::to_string_pretty(&DensitySummary {
            t: t_end,
            n: disc.n,
            x: x.clone(),
            chain_mass: mass,
            weighted_sup_gap: sup_gap,
            all_converged,
            pass,
        })?,
    )?;
    ctx.time("tabulate", t0);
    println!(
        "density: {} rows at t={t_end:.6}, chain mass {mass:.8}, weighted sup gap {sup_gap:.3e}",
        targets.len()
    );
    println!("density: {}", verdict(pass));
    ctx.finish("density", &cfg.digest(), pass)
}

/// `chain-density`: one chain marginal on its default grid, written as CSV,
/// with trapezoid mass as the pass criterion.
pub fn run_chain_density(cfg: &ExperimentConfig, out_dir: &Path) -> Result<bool> {
    let mut ctx = RunContext::new(out_dir)?;
    let model = build_model(&cfg.model)?;
    let disc = cfg.regime.discretization(cfg.density.n)?;
    let end = cfg.density_end_index()?;
    let x = cfg.start_point(model.dim());
    let mut spec = QuadratureSpec::for_model(&model)?;
    cfg.quadrature.apply(&mut spec);
    spec.validate()?;
    let t0 = Instant::now();
    let grid = default_chain_grid(&model, &disc, &x, spec.points_per_axis)?;
    let field = chain_density(&model, &disc, 0, end, &x, &grid)?;
    ctx.time("chain", t0);
    let mass = field.mass();
    let pass = (mass - 1.0).abs() <= 5e-3;
    let t0 = Instant::now();
    ctx.write("chain_density.csv", &field.to_csv())?;
    #[derive(Serialize)]
    struct ChainSummary {
        n: usize,
        steps: usize,
        t: f64,
        mass: f64,
        sup: f64,
        pass: bool,
    }
    ctx.write(
        "chain_density_summary.json",
        &serde_json::to_string_pretty(&ChainSummary {
            n: disc.n,
            steps: end,
            t: field.t,
            mass,
            sup: field.sup_abs(),
            pass,
        })?,
    )?;
    ctx.time("write", t0);
    println!(
        "chain-density: mass {mass:.8} over {} nodes, sup {:.6e}",
        field.grid.len(),
        field.sup_abs()
    );
    println!("chain-density: {}", verdict(pass));
    ctx.finish("chain-density", &cfg.digest(), pass)
}

struct RateRow {
    n: usize,
    h: f64,
    t: f64,
    error: f64,
    weighted_error: f64,
}

/// `rate`: weighted sup distance between chain and series densities for
/// every configured step count, the fitted log-log slope against the
/// acceptance band, and the `sqrt(n)`-scaled monotonicity check.
/// `self_test` replaces measured errors with an exact `0.37 n^{-1/2}` law
/// to exercise the fit and report plumbing end to end.
pub fn run_rate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<bool> {
    if cfg.n_list.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rate study needs at least three step counts, got {}",
            cfg.n_list.len()
        )));
    }
    let mut ctx = RunContext::new(out_dir)?;
    let model = build_model(&cfg.model)?;
    let dim = model.dim();
    let x = cfg.start_point(dim);

    let mut rows: Vec<RateRow> = Vec::new();
    let mut all_converged = true;
    for &n in &cfg.n_list {
        let disc = cfg.regime.discretization(n)?;
        let t = disc.horizon();
        let t0 = Instant::now();
        let (error, weighted_error) = if cfg.rate.self_test {
            let e = 0.37 * (n as f64).powf(-0.5);
            (e, e)
        } else {
            let mut spec = QuadratureSpec::for_model(&model)?;
            cfg.quadrature.apply(&mut spec);
            spec.validate()?;
            let mut policy = cfg.quadrature.policy();
            if cfg.quadrature.max_order.is_none() {
                policy.max_order = cfg.rate.series_orders;
            }
            let eval_half = cfg.rate.y_half_width_sigmas * (t * spec.sigma_peak).sqrt();
            // Forced odd so the start point is an evaluation node.
            let targets = line_targets(&x, eval_half, cfg.rate.y_points | 1);
            let series = density_profile(&model, 0.0, t, &x, &targets, &policy, &spec)?;
            all_converged &= series.iter().all(|s| s.converged);
            let grid = aligned_chain_grid(&model, &disc, &x, eval_half, targets.len(), &spec)?;
            let chain = chain_density(&model, &disc, 0, n, &x, &grid)?;
            let weight = WeightQ::new(t.sqrt(), model.s_prime(), dim)?;
            let mut sup = 0.0f64;
            let mut wsup = 0.0f64;
            let mut diff = vec![0.0; dim];
            for (y, sv) in targets.iter().zip(&series) {
                let d = (sv.value - chain.value_at(y)).abs();
                for a in 0..dim {
                    diff[a] = y[a] - x[a];
                }
                sup = sup.max(d);
                wsup = wsup.max(weight.value(&diff) * d);
            }
            (sup, wsup)
        };
        ctx.time(&format!("n={n}"), t0);
        println!(
            "n={n:>5} T={t:.6} h={:.6} sup_error={error:.6e} weighted={weighted_error:.6e}",
            disc.h
        );
        rows.push(RateRow {
            n,
            h: disc.h,
            t,
            error,
            weighted_error,
        });
    }

    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.n as f64, r.weighted_error))
        .collect();
    let fit = fit_rate(&points)?;
    let (lo, hi) = cfg.rate.band;
    let slope_ok = fit.slope >= lo && fit.slope <= hi;
    let scaled: Vec<f64> = rows
        .iter()
        .map(|r| (r.n as f64).sqrt() * r.weighted_error)
        .collect();
    let tol = cfg.rate.non_increasing_tolerance;
    let scaled_ok = scaled.windows(2).all(|w| w[1] <= w[0] * (1.0 + tol));
    let pass = slope_ok && scaled_ok;
    if !all_converged {
        println!("rate: note: some series evaluations stopped before the term-norm threshold");
    }
    println!(
        "rate: fitted slope {:.4} (r2 {:.4}) against band [{lo}, {hi}]: {}",
        fit.slope,
        fit.r_squared,
        verdict(slope_ok)
    );
    println!(
        "rate: sqrt(n)-scaled errors non-increasing within {:.0}%: {}",
        tol * 100.0,
        verdict(scaled_ok)
    );
    println!("rate: {}", verdict(pass));

    let mut csv = String::from("n,h,T,error,weighted_error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.n,
            fmt(r.h),
            fmt(r.t),
            fmt(r.error),
            fmt(r.weighted_error)
        ));
    }
    ctx.write("rate.csv", &csv)?;
    #[derive(Serialize)]
    struct RateSummary {
        slope: f64,
        intercept: f64,
        r2: f64,
        band: [f64; 2],
        pass: bool,
    }
    ctx.write(
        "rate_summary.json",
        &serde_json::to_string_pretty(&RateSummary {
            slope: fit.slope,
            intercept: fit.intercept,
            r2: fit.r_squared,
            band: [lo, hi],
            pass,
        })?,
    )?;
    ctx.write("rate.gnuplot", &rate_gnuplot(fit.slope, fit.intercept))?;
    ctx.finish("rate", &cfg.digest(), pass)
}

fn rate_gnuplot(slope: f64, intercept: f64) -> String {
    let fit_line = format!(
        "plot 'rate.csv' every ::1 using 1:5 with linespoints title 'measured', \
         exp({intercept:.12e}) * x**({slope:.12e}) with lines dashtype 2 title 'fit'"
    );
    [
        "set datafile separator ','",
        "set logscale xy",
        "set xlabel 'n'",
        "set ylabel 'weighted sup error'",
        "set key left bottom",
        fit_line.as_str(),
    ]
    .join("\n")
        + "\n"
}

fn correct_gnuplot() -> String {
    [
        "set datafile separator ','",
        "set logscale x",
        "set xlabel 'n'",
        "set ylabel '|residual| / h'",
        "plot 'correct.csv' every ::1 using 1:12 with linespoints title 'residual over h'",
    ]
    .join("\n")
        + "\n"
}

/// `correct`: the exact decomposition of the chain-vs-diffusion gap into
/// its `h/2` correction terms for every configured step count. Passes iff
/// `|residual| / h` decreases across consecutive step counts (values at
/// noise level count as already converged).
pub fn run_correct(cfg: &ExperimentConfig, out_dir: &Path) -> Result<bool> {
    if cfg.n_list.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "correction study needs at least three step counts, got {}",
            cfg.n_list.len()
        )));
    }
    let mut ctx = RunContext::new(out_dir)?;
    let model = build_model(&cfg.model)?;
    let x = cfg.start_point(model.dim());
    let mut rows = Vec::new();
    let mut all_converged = true;
    for &n in &cfg.n_list {
        let disc = cfg.regime.discretization(n)?;
        let t = disc.horizon();
        let mut y = x.clone();
        y[0] += cfg.correct.y_offset_sqrt_t * t.sqrt();
        let mut spec = QuadratureSpec::for_model(&model)?;
        cfg.quadrature.apply(&mut spec);
        spec.validate()?;
        let t0 = Instant::now();
        let report = correction_terms(&model, &disc, &x, &y, cfg.correct.r_phi, &spec)?;
        ctx.time(&format!("n={n}"), t0);
        all_converged &= report.converged;
        println!(
            "n={n:>5} p-pd={:.6e} residual={:.3e} residual/h={:.6e}",
            report.p_minus_pd,
            report.residual,
            report.residual.abs() / disc.h
        );
        rows.push((n, disc.h, t, report));
    }
    let roh: Vec<f64> = rows
        .iter()
        .map(|(_, h, _, r)| r.residual.abs() / h)
        .collect();
    let decreasing = roh
        .windows(2)
        .all(|w| w[1] < w[0] || w[1] < TRIVIAL_RESIDUAL_OVER_H);
    let pass = decreasing;
    if !all_converged {
        println!("correct: note: some series evaluations stopped before the term-norm threshold");
    }
    println!(
        "correct: residual/h decreasing across n: {}",
        verdict(decreasing)
    );
    println!("correct: {}", verdict(pass));

    let mut csv = String::from(
        "n,h,T,p,pd,p_minus_pd,term_h1,term_a0,term_h1_phi,term_a0_phi,residual,residual_over_h\n",
    );
    for ((n, h, t, r), roh) in rows.iter().zip(&roh) {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            n,
            fmt(*h),
            fmt(*t),
            fmt(r.p_value),
            fmt(r.pd_value),
            fmt(r.p_minus_pd),
            fmt(r.term_h1),
            fmt(r.term_a0),
            fmt(r.term_h1_phi),
            fmt(r.term_a0_phi),
            fmt(r.residual),
            fmt(*roh)
        ));
    }
    ctx.write("correct.csv", &csv)?;
    #[derive(Serialize)]
    struct CorrectSummary {
        n_list: Vec<usize>,
        residual_over_h: Vec<f64>,
        decreasing: bool,
        all_converged: bool,
        pass: bool,
    }
    ctx.write(
        "correct_summary.json",
        &serde_json::to_string_pretty(&CorrectSummary {
            n_list: rows.iter().map(|r| r.0).collect(),
            residual_over_h: roh,
            decreasing,
            all_converged,
            pass,
        })?,
    )?;
    ctx.write("correct.gnuplot", &correct_gnuplot())?;
    ctx.finish("correct", &cfg.digest(), pass)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn cfg(json: &str) -> ExperimentConfig {
        ExperimentConfig::from_json(json).unwrap()
    }

    fn read(dir: &Path, name: &str) -> String {
        std::fs::read_to_string(dir.join(name)).unwrap()
    }

    #[test]
    fn validate_accepts_constant_and_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(r#"{ "model": { "family": "constant" } }"#);
        assert!(run_validate(&c, dir.path()).unwrap());
        let report: serde_json::Value =
            serde_json::from_str(&read(dir.path(), "assumptions.json")).unwrap();
        assert!(report["checks"].as_array().unwrap().len() >= 4);
        let manifest: serde_json::Value =
            serde_json::from_str(&read(dir.path(), "validate_manifest.json")).unwrap();
        assert_eq!(manifest["config_hash"].as_str().unwrap(), c.digest());
        assert_eq!(manifest["pass"].as_bool(), Some(true));
        assert_eq!(manifest["files"][0].as_str(), Some("assumptions.json"));
    }

    #[test]
    fn validate_flags_shifted_innovations() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(r#"{ "model": { "family": "sin1d" }, "innovation_shift": 0.2 }"#);
        assert!(!run_validate(&c, dir.path()).unwrap());
        let report: serde_json::Value =
            serde_json::from_str(&read(dir.path(), "assumptions.json")).unwrap();
        let failed: Vec<&str> = report["checks"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|c| c["pass"] == serde_json::Value::Bool(false))
            .map(|c| c["id"].as_str().unwrap())
            .collect();
        assert!(!failed.is_empty());
    }

    #[test]
    fn density_constant_columns_agree_and_rerun_is_identical() {
        let c = cfg(r#"{
            "model": { "family": "constant" },
            "regime": { "kind": "fixed_t", "t": 0.25 },
            "density": { "n": 8, "eval_points": 9, "eval_half_width_sigmas": 4.0 },
            "quadrature": { "points_per_axis": 129 }
        }"#);
        let dir = tempfile::tempdir().unwrap();
        assert!(run_density(&c, dir.path()).unwrap());
        let body = read(dir.path(), "density.csv");
        let mut lines = body.lines();
        assert_eq!(
            lines.next().unwrap(),
            "y,p_series,p_chain,p_frozen,weighted_gap,status"
        );
        let mut rows = 0;
        for line in lines {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols.len(), 6);
            let ps: f64 = cols[1].parse().unwrap();
            let pc: f64 = cols[2].parse().unwrap();
            let pf: f64 = cols[3].parse().unwrap();
            assert!((ps - pc).abs() <= 1e-8, "{line}");
            assert!((ps - pf).abs() <= 1e-8, "{line}");
            assert_eq!(cols[5], "ok");
            rows += 1;
        }
        assert_eq!(rows, 9);

        let dir2 = tempfile::tempdir().unwrap();
        assert!(run_density(&c, dir2.path()).unwrap());
        assert_eq!(body, read(dir2.path(), "density.csv"));
    }

    #[test]
    fn density_requires_existing_output_directory() {
        let c = cfg(r#"{ "model": { "family": "constant" } }"#);
        let err = run_density(&c, Path::new("/nonexistent/nowhere")).unwrap_err();
        assert_eq!(error_exit_code(&err), 2);
    }

    #[test]
    fn chain_density_conserves_mass() {
        let c = cfg(r#"{
            "model": { "family": "sin1d" },
            "regime": { "kind": "fixed_t", "t": 0.25 },
            "density": { "n": 8 },
            "quadrature": { "points_per_axis": 129 }
        }"#);
        let dir = tempfile::tempdir().unwrap();
        assert!(run_chain_density(&c, dir.path()).unwrap());
        let summary: serde_json::Value =
            serde_json::from_str(&read(dir.path(), "chain_density_summary.json")).unwrap();
        assert!((summary["mass"].as_f64().unwrap() - 1.0).abs() < 5e-3);
        assert!(read(dir.path(), "chain_density.csv").starts_with("y,value"));
    }

    #[test]
    fn rate_self_test_recovers_the_injected_slope() {
        let c = cfg(r#"{
            "model": { "family": "sin1d" },
            "n_list": [8, 16, 32, 64],
            "rate": { "self_test": true }
        }"#);
        let dir = tempfile::tempdir().unwrap();
        assert!(run_rate(&c, dir.path()).unwrap());
        let summary: serde_json::Value =
            serde_json::from_str(&read(dir.path(), "rate_summary.json")).unwrap();
        let keys: Vec<&String> = summary.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["band", "intercept", "pass", "r2", "slope"]);
        assert!((summary["slope"].as_f64().unwrap() + 0.5).abs() < 1e-9);
        assert!((summary["r2"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(summary["pass"].as_bool(), Some(true));
        let csv = read(dir.path(), "rate.csv");
        assert!(csv.starts_with("n,h,T,error,weighted_error\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(dir.path().join("rate.gnuplot").exists());
    }

    #[test]
    fn rate_needs_three_step_counts() {
        let c = cfg(
            r#"{ "model": { "family": "sin1d" }, "n_list": [8, 16], "rate": { "self_test": true } }"#,
        );
        let dir = tempfile::tempdir().unwrap();
        let err = run_rate(&c, dir.path()).unwrap_err();
        assert_eq!(error_exit_code(&err), 2);
    }

    #[test]
    fn correct_constant_model_passes_trivially() {
        let c = cfg(r#"{
            "model": { "family": "constant" },
            "regime": { "kind": "fixed_t", "t": 0.25 },
            "n_list": [4, 6, 8],
            "quadrature": { "points_per_axis": 65 }
        }"#);
        let dir = tempfile::tempdir().unwrap();
        assert!(run_correct(&c, dir.path()).unwrap());
        let summary: serde_json::Value =
            serde_json::from_str(&read(dir.path(), "correct_summary.json")).unwrap();
        for v in summary["residual_over_h"].as_array().unwrap() {
            assert!(v.as_f64().unwrap() < TRIVIAL_RESIDUAL_OVER_H, "{summary}");
        }
        let csv = read(dir.path(), "correct.csv");
        assert!(csv.starts_with("n,h,T,p,pd,"));
        assert_eq!(csv.lines().count(), 4);
    }
}
