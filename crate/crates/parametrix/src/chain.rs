//! Markov-chain transition densities and their discrete parametrix.
//!
//! The chain moves by `X_{k+1} = X_k + m(kh, X_k) h + sqrt(h) xi_{k+1}`.
//! Exact densities come from grid recursion (deterministic quadrature, no
//! sampling noise); frozen chains and the one-step kernel difference `H_h`
//! have closed forms under Gaussian innovations. Discrete convolutions
//! `(g oxh f)(jh, kh, x, y) = sum_{i=j}^{k-1} h int g(jh, ih, x, w)
//! f(ih, kh, w, y) dw` are composed left to right so every power reuses the
//! previous level's fields; a coincident-time density factor acts as a Dirac
//! delta and a coincident-time kernel factor vanishes (empty sums stay
//! empty).

use crate::error::{Error, Result};
use crate::frozen::{
    frozen_density, kernel_a0_eval, kernel_h_eval, kernel_hl_eval, CoeffJet, CoeffValues,
    GaussianEval,
};
use crate::grid::{DensityField, SpatialGrid};
use crate::model::ModelSpec;
use crate::quad;
use crate::series::{truncation_tail, LadderEngine, QuadratureSpec, SeriesValue};
use rayon::prelude::*;
use serde::Serialize;

/// Uniform time mesh of the chain.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Discretization {
    pub n: usize,
    pub h: f64,
}

impl Discretization {
    pub fn new(n: usize, h: f64) -> Result<Self> {
        let d = Self { n, h };
        d.validate()?;
        Ok(d)
    }

    /// Mesh from a horizon: `h = T / n` so `T = n h` holds exactly.
    pub fn from_horizon(n: usize, t: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("step count must be positive".into()));
        }
        Self::new(n, t / n as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::InvalidConfig(format!(
                "chain needs at least 2 steps, got {}",
                self.n
            )));
        }
        if !(self.h > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "mesh {} must be positive",
                self.h
            )));
        }
        if self.horizon() > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "horizon n h = {} exceeds 1",
                self.horizon()
            )));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.n as f64 * self.h
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.h
    }
}

/// Density of `X_{j+1}` at `z` given `X_j = x`:
/// `h^{-d/2} q(jh, x, (z - x - m(jh, x) h) / sqrt(h))`.
pub fn one_step_density(
    model: &ModelSpec,
    disc: &Discretization,
    j: usize,
    x: &[f64],
    z: &[f64],
) -> f64 {
    debug_assert!(j < disc.n);
    let d = model.dim();
    let t = disc.time(j);
    let mut drift = vec![0.0; d];
    model.coeffs.drift(t, x, &mut drift);
    let sqrt_h = disc.h.sqrt();
    let u: Vec<f64> = (0..d)
        .map(|a| (z[a] - x[a] - drift[a] * disc.h) / sqrt_h)
        .collect();
    model.innovations.density(t, x, &u) / disc.h.powf(d as f64 / 2.0)
}

/// One step of the chain frozen at `freeze`: coefficients and innovation law
/// are taken at the freeze point instead of the current state.
fn one_step_frozen(
    model: &ModelSpec,
    disc: &Discretization,
    j: usize,
    x: &[f64],
    z: &[f64],
    freeze: &[f64],
) -> f64 {
    let d = model.dim();
    let t = disc.time(j);
    let mut drift = vec![0.0; d];
    model.coeffs.drift(t, freeze, &mut drift);
    let sqrt_h = disc.h.sqrt();
    let u: Vec<f64> = (0..d)
        .map(|a| (z[a] - x[a] - drift[a] * disc.h) / sqrt_h)
        .collect();
    model.innovations.density(t, freeze, &u) / disc.h.powf(d as f64 / 2.0)
}

/// Default spatial grid for chain recursions: half-width
/// `kappa sqrt(T sigma_peak) + ||m|| T` around the start point.
pub fn default_chain_grid(
    model: &ModelSpec,
    disc: &Discretization,
    x: &[f64],
    points: usize,
) -> Result<SpatialGrid> {
    let b = model.bounds();
    let t = disc.horizon();
    let hw = 8.0 * (t * b.sigma_star_star).sqrt() + b.drift_sup * t;
    SpatialGrid::centered(x, &vec![hw; model.dim()], points)
}

fn recursion_step(
    model: &ModelSpec,
    disc: &Discretization,
    i: usize,
    grid: &SpatialGrid,
    weights: &[f64],
    vals: &[f64],
    freeze: Option<&[f64]>,
) -> Vec<f64> {
    let d = grid.dim();
    let n = grid.len();
    let t = disc.time(i);
    let sqrt_h = disc.h.sqrt();
    let h_norm = disc.h.powf(d as f64 / 2.0);
    // Source-node coefficient data, computed once per step.
    let mut drifts = vec![0.0; n * d];
    let mut dr = vec![0.0; d];
    let mut node = vec![0.0; d];
    for g in 0..n {
        grid.node(g, &mut node);
        let at = freeze.unwrap_or(&node);
        model.coeffs.drift(t, at, &mut dr);
        drifts[g * d..(g + 1) * d].copy_from_slice(&dr);
    }
    (0..n)
        .into_par_iter()
        .map(|gz| {
            let mut z = vec![0.0; d];
            grid.node(gz, &mut z);
            let mut w = vec![0.0; d];
            let mut u = vec![0.0; d];
            let mut acc = 0.0;
            for gw in 0..n {
                let f = vals[gw] * weights[gw];
                if f == 0.0 {
                    continue;
                }
                grid.node(gw, &mut w);
                for a in 0..d {
                    u[a] = (z[a] - w[a] - drifts[gw * d + a] * disc.h) / sqrt_h;
                }
                let at: &[f64] = freeze.unwrap_or(&w);
                acc += f * model.innovations.density(t, at, &u) / h_norm;
            }
            acc
        })
        .collect()
}

/// Exact chain density by Chapman-Kolmogorov recursion on the grid.
/// Aborts with a resize hint when trapezoid mass leaks beyond one percent.
pub fn chain_density(
    model: &ModelSpec,
    disc: &Discretization,
    j: usize,
    k: usize,
    x: &[f64],
    grid: &SpatialGrid,
) -> Result<DensityField> {
    disc.validate()?;
    if !(j < k && k <= disc.n) {
        return Err(Error::InvalidArgument(format!(
            "time indices must satisfy j < k <= n, got ({j}, {k}, {})",
            disc.n
        )));
    }
    if grid.dim() != model.dim() {
        return Err(Error::InvalidArgument(
            "grid dimension does not match the model".into(),
        ));
    }
    let weights = grid.trapezoid_weights();
    let n = grid.len();
    let mut vals = vec![0.0; n];
    let mut z = vec![0.0; d_of(grid)];
    for g in 0..n {
        grid.node(g, &mut z);
        vals[g] = one_step_density(model, disc, j, x, &z);
    }
    check_mass(&vals, &weights, grid, j + 1)?;
    for i in j + 1..k {
        vals = recursion_step(model, disc, i, grid, &weights, &vals, None);
        check_mass(&vals, &weights, grid, i + 1)?;
    }
    Ok(DensityField::new(
        grid.clone(),
        vals,
        disc.time(j),
        disc.time(k),
        x.to_vec(),
    ))
}

fn d_of(grid: &SpatialGrid) -> usize {
    grid.dim()
}

fn check_mass(vals: &[f64], weights: &[f64], grid: &SpatialGrid, step: usize) -> Result<()> {
    let mass: f64 = vals.iter().zip(weights).map(|(v, w)| v * w).sum();
    if (mass - 1.0).abs() > 1e-2 {
        let hw = grid.step()[0] * (grid.shape()[0] - 1) as f64 / 2.0;
        return Err(Error::MassLeakage(format!(
            "step {step}: trapezoid mass {mass:.6} drifted from 1; widen the grid \
             (current half-width {hw:.3}, try {:.3})",
            1.5 * hw
        )));
    }
    Ok(())
}

/// Density of the chain frozen at `y`, evaluated at `y`: closed-form
/// Gaussian when innovations are Gaussian (mean `x + sum_i m(ih, y) h`,
/// covariance `sum_i sigma(ih, y) h`), otherwise grid recursion with frozen
/// one-step kernels.
pub fn frozen_chain_density(
    model: &ModelSpec,
    disc: &Discretization,
    j: usize,
    k: usize,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    disc.validate()?;
    if !(j < k && k <= disc.n) {
        return Err(Error::InvalidArgument(format!(
            "time indices must satisfy j < k <= n, got ({j}, {k}, {})",
            disc.n
        )));
    }
    let d = model.dim();
    if model.innovations.is_gaussian() {
        let mut m_int = vec![0.0; d];
        let mut s_int = vec![0.0; d * d];
        let mut dr = vec![0.0; d];
        let mut sg = vec![0.0; d * d];
        for i in j..k {
            let t = disc.time(i);
            model.coeffs.drift(t, y, &mut dr);
            model.coeffs.diffusion(t, y, &mut sg);
            for a in 0..d {
                m_int[a] += dr[a] * disc.h;
            }
            for ab in 0..d * d {
                s_int[ab] += sg[ab] * disc.h;
            }
        }
        let ev = GaussianEval::from_moments(disc.time(j), disc.time(k), y, &m_int, &s_int)?;
        return Ok(ev.density(x, y));
    }
    frozen_chain_by_recursion(model, disc, j, k, x, y)
}

/// Grid-recursion evaluation of the frozen chain (any innovation law).
pub(crate) fn frozen_chain_by_recursion(
    model: &ModelSpec,
    disc: &Discretization,
    j: usize,
    k: usize,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    let d = model.dim();
    let b = model.bounds();
    let span = disc.time(k) - disc.time(j);
    let hw = 8.0 * (span * b.sigma_star_star).sqrt() + b.drift_sup * span;
    // Centering the grid at y makes the final read-off land on a node.
    let half: Vec<f64> = (0..d).map(|a| hw + (x[a] - y[a]).abs()).collect();
    let points = if d == 1 { 257 } else { 33 };
    let grid = SpatialGrid::centered(y, &half, points)?;
    let weights = grid.trapezoid_weights();
    let n = grid.len();
    let mut vals = vec![0.0; n];
    let mut z = vec![0.0; d];
    for g in 0..n {
        grid.node(g, &mut z);
        vals[g] = one_step_frozen(model, disc, j, x, &z, y);
    }
    for i in j + 1..k {
        vals = recursion_step(model, disc, i, &grid, &weights, &vals, Some(y));
        check_mass(&vals, &weights, &grid, i + 1)?;
    }
    Ok(grid.interpolate(&vals, y))
}

/// Scalar Gaussian density helper.
#[inline]
fn normal_density1(x: f64, mean: f64, var: f64) -> f64 {
    let w = x - mean;
    (-0.5 * w * w / var).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// The discrete one-step kernel difference:
/// `H_h(jh, kh, x, y) = h^{-1} [ int p_h(jh,(j+1)h,x,z) ptilde_h((j+1)h,kh,z,y) dz`
/// `- int ptilde_h^y(jh,(j+1)h,x,z) ptilde_h((j+1)h,kh,z,y) dz ]`.
/// Under Gaussian innovations both integrals collapse to Gaussians whose
/// means and covariances add, giving a closed form; otherwise the defining
/// integrals are evaluated by grid quadrature.
pub fn kernel_hh(
    model: &ModelSpec,
    disc: &Discretization,
    j: usize,
    k: usize,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    disc.validate()?;
    if !(j < k && k <= disc.n) {
        return Err(Error::InvalidArgument(format!(
            "time indices must satisfy j < k <= n, got ({j}, {k}, {})",
            disc.n
        )));
    }
    let d = model.dim();
    if model.innovations.is_gaussian() {
        // Tail sums of the frozen chain over (j+1)..k.
        let mut mp = vec![0.0; d];
        let mut sp = vec![0.0; d * d];
        let mut dr = vec![0.0; d];
        let mut sg = vec![0.0; d * d];
        for i in j + 1..k {
            let t = disc.time(i);
            model.coeffs.drift(t, y, &mut dr);
            model.coeffs.diffusion(t, y, &mut sg);
            for a in 0..d {
                mp[a] += dr[a] * disc.h;
            }
            for ab in 0..d * d {
                sp[ab] += sg[ab] * disc.h;
            }
        }
        let tj = disc.time(j);
        let at_x = CoeffValues::at(model, tj, x);
        let at_y = CoeffValues::at(model, tj, y);
        if d == 1 {
            let a = normal_density1(
                y[0],
                x[0] + at_x.drift[0] * disc.h + mp[0],
                at_x.sigma[0] * disc.h + sp[0],
            );
            let b = normal_density1(
                y[0],
                x[0] + at_y.drift[0] * disc.h + mp[0],
                at_y.sigma[0] * disc.h + sp[0],
            );
            return Ok((a - b) / disc.h);
        }
        let mut ma = vec![0.0; d];
        let mut sa = vec![0.0; d * d];
        let mut mb = vec![0.0; d];
        let mut sb = vec![0.0; d * d];
        for a in 0..d {
            ma[a] = at_x.drift[a] * disc.h + mp[a];
            mb[a] = at_y.drift[a] * disc.h + mp[a];
        }
        for ab in 0..d * d {
            sa[ab] = at_x.sigma[ab] * disc.h + sp[ab];
            sb[ab] = at_y.sigma[ab] * disc.h + sp[ab];
        }
        let eva = GaussianEval::from_moments(disc.time(j), disc.time(k), y, &ma, &sa)?;
        let evb = GaussianEval::from_moments(disc.time(j), disc.time(k), y, &mb, &sb)?;
        return Ok((eva.density(x, y) - evb.density(x, y)) / disc.h);
    }
    // Generic path: quadrature over the intermediate point.
    if k == j + 1 {
        return Ok((one_step_density(model, disc, j, x, y)
            - one_step_frozen(model, disc, j, x, y, y))
            / disc.h);
    }
    let b = model.bounds();
    let span = disc.time(k) - disc.time(j);
    let hw = 8.0 * (span * b.sigma_star_star).sqrt() + b.drift_sup * span;
    let center: Vec<f64> = (0..d).map(|a| 0.5 * (x[a] + y[a])).collect();
    let half: Vec<f64> = (0..d).map(|a| hw + 0.5 * (x[a] - y[a]).abs()).collect();
    let points = if d == 1 { 257 } else { 33 };
    let grid = SpatialGrid::centered(&center, &half, points)?;
    kernel_hh_on_grid(model, disc, j, k, x, y, &grid)
}

/// Quadrature form of [`kernel_hh`] on a caller-chosen grid (used by the
/// Richardson self-check and non-Gaussian innovations).
pub(crate) fn kernel_hh_on_grid(
    model: &ModelSpec,
    disc: &Discretization,
    j: usize,
    k: usize,
    x: &[f64],
    y: &[f64],
    grid: &SpatialGrid,
) -> Result<f64> {
    if k == j + 1 {
        // The trailing frozen factor is a Dirac mass at y.
        return Ok((one_step_density(model, disc, j, x, y)
            - one_step_frozen(model, disc, j, x, y, y))
            / disc.h);
    }
    let weights = grid.trapezoid_weights();
    let d = grid.dim();
    let mut acc = 0.0;
    let mut z = vec![0.0; d];
    for g in 0..grid.len() {
        grid.node(g, &mut z);
        let diff =
            one_step_density(model, disc, j, x, &z) - one_step_frozen(model, disc, j, x, &z, y);
        if diff == 0.0 {
            continue;
        }
        acc += weights[g] * diff * frozen_chain_density(model, disc, j + 1, k, &z, y)?;
    }
    Ok(acc / disc.h)
}

// ---------------------------------------------------------------------------
// Discrete-convolution ladders
// ---------------------------------------------------------------------------

/// Coefficient tables over the chain's time nodes and a spatial grid:
/// values, discrete prefix sums (`sum_l val(l) h`) and, when requested,
/// continuous prefix integrals, all laid out contiguously over grid nodes.
struct LadderTables {
    d: usize,
    nn: usize,
    h: f64,
    t0: f64,
    cvals: Vec<CoeffValues>,
    dsum_m: Vec<f64>,
    dsum_s: Vec<f64>,
    csum_m: Vec<f64>,
    csum_s: Vec<f64>,
}

impl LadderTables {
    fn new(
        model: &ModelSpec,
        t0: f64,
        h: f64,
        steps: usize,
        grid: &SpatialGrid,
        continuous: bool,
    ) -> Result<Self> {
        let d = model.dim();
        let nn = grid.len();
        let mut val_m = vec![0.0; (steps + 1) * d * nn];
        let mut val_s = vec![0.0; (steps + 1) * d * d * nn];
        let mut dsum_m = vec![0.0; (steps + 1) * d * nn];
        let mut dsum_s = vec![0.0; (steps + 1) * d * d * nn];
        let mut csum_m = vec![0.0; if continuous { (steps + 1) * d * nn } else { 0 }];
        let mut csum_s = vec![
            0.0;
            if continuous {
                (steps + 1) * d * d * nn
            } else {
                0
            }
        ];
        let homogeneous = model.coeffs.time_homogeneous();
        let gl = quad::gauss_legendre_16();
        let mut z = vec![0.0; d];
        let mut dr = vec![0.0; d];
        let mut sg = vec![0.0; d * d];
        for g in 0..nn {
            grid.node(g, &mut z);
            for i in 0..=steps {
                let ti = t0 + i as f64 * h;
                model.coeffs.drift(ti, &z, &mut dr);
                model.coeffs.diffusion(ti, &z, &mut sg);
                for a in 0..d {
                    val_m[(i * d + a) * nn + g] = dr[a];
                }
                for ab in 0..d * d {
                    val_s[(i * d * d + ab) * nn + g] = sg[ab];
                }
                if i > 0 {
                    for a in 0..d {
                        dsum_m[(i * d + a) * nn + g] = dsum_m[((i - 1) * d + a) * nn + g]
                            + val_m[((i - 1) * d + a) * nn + g] * h;
                    }
                    for ab in 0..d * d {
                        dsum_s[(i * d * d + ab) * nn + g] = dsum_s[((i - 1) * d * d + ab) * nn + g]
                            + val_s[((i - 1) * d * d + ab) * nn + g] * h;
                    }
                    if continuous {
                        if homogeneous {
                            for a in 0..d {
                                csum_m[(i * d + a) * nn + g] =
                                    val_m[(i * d + a) * nn + g] * (i as f64 * h);
                            }
                            for ab in 0..d * d {
                                csum_s[(i * d * d + ab) * nn + g] =
                                    val_s[(i * d * d + ab) * nn + g] * (i as f64 * h);
                            }
                        } else {
                            let (a0, b0) = (ti - h, ti);
                            let c0 = 0.5 * (a0 + b0);
                            let hh = 0.5 * (b0 - a0);
                            let mut pm = vec![0.0; d];
                            let mut ps = vec![0.0; d * d];
                            for (&xi, &wi) in gl.nodes.iter().zip(&gl.weights) {
                                let u = c0 + hh * xi;
                                model.coeffs.drift(u, &z, &mut dr);
                                model.coeffs.diffusion(u, &z, &mut sg);
                                for a in 0..d {
                                    pm[a] += wi * hh * dr[a];
                                }
                                for ab in 0..d * d {
                                    ps[ab] += wi * hh * sg[ab];
                                }
                            }
                            for a in 0..d {
                                csum_m[(i * d + a) * nn + g] =
                                    csum_m[((i - 1) * d + a) * nn + g] + pm[a];
                            }
                            for ab in 0..d * d {
                                csum_s[(i * d * d + ab) * nn + g] =
                                    csum_s[((i - 1) * d * d + ab) * nn + g] + ps[ab];
                            }
                        }
                    }
                }
            }
        }
        let mut cvals = Vec::with_capacity((steps + 1) * nn);
        for i in 0..=steps {
            for g in 0..nn {
                cvals.push(CoeffValues {
                    drift: (0..d).map(|a| val_m[(i * d + a) * nn + g]).collect(),
                    sigma: (0..d * d)
                        .map(|ab| val_s[(i * d * d + ab) * nn + g])
                        .collect(),
                });
            }
        }
        Ok(Self {
            d,
            nn,
            h,
            t0,
            cvals,
            dsum_m,
            dsum_s,
            csum_m,
            csum_s,
        })
    }

    fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    fn coeffs(&self, i: usize, g: usize) -> &CoeffValues {
        &self.cvals[i * self.nn + g]
    }

    /// Continuous frozen Gaussian over `[t_l, t_i]`, frozen at node `gy`.
    fn cont_gauss(&self, l: usize, i: usize, gy: usize, node: &[f64]) -> Result<GaussianEval> {
        let d = self.d;
        let nn = self.nn;
        let mut m_int = vec![0.0; d];
        let mut s_int = vec![0.0; d * d];
        for a in 0..d {
            m_int[a] = self.csum_m[(i * d + a) * nn + gy] - self.csum_m[(l * d + a) * nn + gy];
        }
        for ab in 0..d * d {
            s_int[ab] =
                self.csum_s[(i * d * d + ab) * nn + gy] - self.csum_s[(l * d * d + ab) * nn + gy];
        }
        GaussianEval::from_moments(self.time(l), self.time(i), node, &m_int, &s_int)
    }

    /// Discrete frozen-chain Gaussian over steps `[l, i)`, frozen at `gy`.
    fn disc_gauss(&self, l: usize, i: usize, gy: usize, node: &[f64]) -> Result<GaussianEval> {
        let d = self.d;
        let nn = self.nn;
        let mut m_int = vec![0.0; d];
        let mut s_int = vec![0.0; d * d];
        for a in 0..d {
            m_int[a] = self.dsum_m[(i * d + a) * nn + gy] - self.dsum_m[(l * d + a) * nn + gy];
        }
        for ab in 0..d * d {
            s_int[ab] =
                self.dsum_s[(i * d * d + ab) * nn + gy] - self.dsum_s[(l * d * d + ab) * nn + gy];
        }
        GaussianEval::from_moments(self.time(l), self.time(i), node, &m_int, &s_int)
    }
}

/// Per-order values `(ptilde_h oxh H_h^(r))(jh, kh, x, y)` for
/// `r = 0..=r_cap`; their sum is the discrete parametrix identity, exact at
/// `r_cap = k - j` up to quadrature error.
pub fn discrete_parametrix_terms(
    model: &ModelSpec,
    disc: &Discretization,
    j: usize,
    k: usize,
    x: &[f64],
    y: &[f64],
    r_cap: usize,
) -> Result<Vec<f64>> {
    disc.validate()?;
    if !(j < k && k <= disc.n) {
        return Err(Error::InvalidArgument(format!(
            "time indices must satisfy j < k <= n, got ({j}, {k}, {})",
            disc.n
        )));
    }
    if r_cap > k - j {
        return Err(Error::InvalidArgument(format!(
            "order cap {r_cap} exceeds the step count {}",
            k - j
        )));
    }
    let mut terms = vec![frozen_chain_density(model, disc, j, k, x, y)?];
    if r_cap == 0 {
        return Ok(terms);
    }
    if !model.innovations.is_gaussian() {
        return Err(Error::InvalidConfig(
            "discrete parametrix ladders require Gaussian innovations; \
             non-Gaussian laws are only supported by the direct recursions"
                .into(),
        ));
    }
    let d = model.dim();
    let steps = k - j;
    let b = model.bounds();
    let span = disc.time(k) - disc.time(j);
    let hw = 8.0 * (span * b.sigma_star_star).sqrt() + b.drift_sup * span;
    let center: Vec<f64> = (0..d).map(|a| 0.5 * (x[a] + y[a])).collect();
    let half: Vec<f64> = (0..d).map(|a| hw + 0.5 * (x[a] - y[a]).abs()).collect();
    let points = if d == 1 { 257 } else { 33 };
    let grid = SpatialGrid::centered(&center, &half, points)?;
    let tables = LadderTables::new(model, disc.time(j), disc.h, steps, &grid, false)?;
    let weights = grid.trapezoid_weights();
    let nn = grid.len();
    let h = disc.h;

    // Frozen-chain fields ptilde_h(jh, (j+l)h, x, z_g), frozen at z_g.
    let mut pfields: Vec<Vec<f64>> = vec![Vec::new()];
    for l in 1..=steps {
        let mut vals = vec![0.0; nn];
        let mut node = vec![0.0; d];
        for (g, val) in vals.iter_mut().enumerate() {
            grid.node(g, &mut node);
            let ev = tables.disc_gauss(0, l, g, &node)?;
            *val = ev.density(x, &node);
        }
        pfields.push(vals);
    }

    // Closed-form H_h(t_l, t_i, z, y) where y is grid node gy (or the target
    // point via the `at_y`/`tail` overrides).
    let hh_at = |l: usize,
                 i: usize,
                 z: &[f64],
                 at_z: &CoeffValues,
                 yv: &[f64],
                 at_y: &CoeffValues,
                 mp: &[f64],
                 sp: &[f64]|
     -> Result<f64> {
        if d == 1 {
            let a = normal_density1(
                yv[0],
                z[0] + at_z.drift[0] * h + mp[0],
                at_z.sigma[0] * h + sp[0],
            );
            let bv = normal_density1(
                yv[0],
                z[0] + at_y.drift[0] * h + mp[0],
                at_y.sigma[0] * h + sp[0],
            );
            return Ok((a - bv) / h);
        }
        let mut ma = vec![0.0; d];
        let mut sa = vec![0.0; d * d];
        let mut mb = vec![0.0; d];
        let mut sb = vec![0.0; d * d];
        for a in 0..d {
            ma[a] = at_z.drift[a] * h + mp[a];
            mb[a] = at_y.drift[a] * h + mp[a];
        }
        for ab in 0..d * d {
            sa[ab] = at_z.sigma[ab] * h + sp[ab];
            sb[ab] = at_y.sigma[ab] * h + sp[ab];
        }
        let eva = GaussianEval::from_moments(tables.time(l), tables.time(i), yv, &ma, &sa)?;
        let evb = GaussianEval::from_moments(tables.time(l), tables.time(i), yv, &mb, &sb)?;
        Ok((eva.density(z, yv) - evb.density(z, yv)) / h)
    };

    // Tail sums of the frozen chain between l (exclusive) and i at a node.
    let tail = |l: usize, i: usize, gy: usize| -> (Vec<f64>, Vec<f64>) {
        let mut mp = vec![0.0; d];
        let mut sp = vec![0.0; d * d];
        for a in 0..d {
            mp[a] =
                tables.dsum_m[(i * d + a) * nn + gy] - tables.dsum_m[((l + 1) * d + a) * nn + gy];
        }
        for ab in 0..d * d {
            sp[ab] = tables.dsum_s[(i * d * d + ab) * nn + gy]
                - tables.dsum_s[((l + 1) * d * d + ab) * nn + gy];
        }
        (mp, sp)
    };
    // Same tail sums frozen at the exact target point.
    let mut tail_m_y = vec![0.0; (steps + 1) * d];
    let mut tail_s_y = vec![0.0; (steps + 1) * d * d];
    {
        let mut dr = vec![0.0; d];
        let mut sg = vec![0.0; d * d];
        for i in 1..=steps {
            let t = tables.time(i - 1);
            model.coeffs.drift(t, y, &mut dr);
            model.coeffs.diffusion(t, y, &mut sg);
            for a in 0..d {
                tail_m_y[i * d + a] = tail_m_y[(i - 1) * d + a] + dr[a] * h;
            }
            for ab in 0..d * d {
                tail_s_y[i * d * d + ab] = tail_s_y[(i - 1) * d * d + ab] + sg[ab] * h;
            }
        }
    }
    let at_x = |l: usize| CoeffValues::at(model, tables.time(l), x);
    let at_y_exact = |l: usize| CoeffValues::at(model, tables.time(l), y);

    // cur[i][gy] = (ptilde_h oxh H_h^(r))(jh, (j+i)h, x, z_gy) for the
    // current order r; the per-order value at (kh, y) is computed directly.
    let mut cur: Vec<Vec<f64>> = Vec::new();
    for r in 1..=r_cap {
        let prev = std::mem::take(&mut cur);
        let mut next: Vec<Vec<f64>> = vec![Vec::new()];
        for i in 1..=steps {
            let slice: Result<Vec<f64>> = (0..nn)
                .into_par_iter()
                .map(|gy| {
                    let mut ynode = vec![0.0; d];
                    grid.node(gy, &mut ynode);
                    let mut acc = 0.0;
                    let mut z = vec![0.0; d];
                    for l in 0..i {
                        if l == 0 {
                            if r == 1 {
                                // Dirac term of the coincident-time density
                                // factor.
                                let (mp, sp) = tail(0, i, gy);
                                acc += h * hh_at(
                                    0,
                                    i,
                                    x,
                                    &at_x(0),
                                    &ynode,
                                    tables.coeffs(0, gy),
                                    &mp,
                                    &sp,
                                )?;
                            }
                            continue;
                        }
                        let field: &[f64] = if r == 1 { &pfields[l] } else { &prev[l] };
                        if field.is_empty() {
                            continue;
                        }
                        let (mp, sp) = tail(l, i, gy);
                        let at_y = tables.coeffs(l, gy);
                        let mut inner = 0.0;
                        for g in 0..nn {
                            let f = field[g];
                            if f == 0.0 {
                                continue;
                            }
                            grid.node(g, &mut z);
                            inner += weights[g]
                                * f
                                * hh_at(l, i, &z, tables.coeffs(l, g), &ynode, at_y, &mp, &sp)?;
                        }
                        acc += h * inner;
                    }
                    Ok(acc)
                })
                .collect();
            next.push(slice?);
        }
        // Per-order value at the target point.
        let mut total = 0.0;
        let mut z = vec![0.0; d];
        for l in 0..steps {
            let mut mp = vec![0.0; d];
            let mut sp = vec![0.0; d * d];
            for a in 0..d {
                mp[a] = tail_m_y[steps * d + a] - tail_m_y[(l + 1) * d + a];
            }
            for ab in 0..d * d {
                sp[ab] = tail_s_y[steps * d * d + ab] - tail_s_y[(l + 1) * d * d + ab];
            }
            let at_y = at_y_exact(l);
            if l == 0 {
                if r == 1 {
                    total += h * hh_at(0, steps, x, &at_x(0), y, &at_y, &mp, &sp)?;
                }
                continue;
            }
            let field: &[f64] = if r == 1 { &pfields[l] } else { &prev[l] };
            if field.is_empty() {
                continue;
            }
            let mut inner = 0.0;
            for g in 0..nn {
                let f = field[g];
                if f == 0.0 {
                    continue;
                }
                grid.node(g, &mut z);
                inner +=
                    weights[g] * f * hh_at(l, steps, &z, tables.coeffs(l, g), y, &at_y, &mp, &sp)?;
            }
            total += h * inner;
        }
        terms.push(total);
        cur = next;
    }
    Ok(terms)
}

/// Sum of [`discrete_parametrix_terms`]; with `r_cap = k - j` this matches
/// [`chain_density`] up to quadrature error (the discrete parametrix
/// identity).
pub fn discrete_parametrix_density(
    model: &ModelSpec,
    disc: &Discretization,
    j: usize,
    k: usize,
    x: &[f64],
    y: &[f64],
    r_cap: usize,
) -> Result<f64> {
    Ok(discrete_parametrix_terms(model, disc, j, k, x, y, r_cap)?
        .iter()
        .sum())
}

/// The hybrid density `p^d(0, T, x, y) = sum_r (ptilde oxh H^(r))`:
/// continuous frozen density and kernel, discrete composition. Truncated at
/// `r_cap` with the same threshold/tail accounting as the series solver.
pub fn pd_density(
    model: &ModelSpec,
    disc: &Discretization,
    x: &[f64],
    y: &[f64],
    r_cap: usize,
    spec: &QuadratureSpec,
) -> Result<SeriesValue> {
    disc.validate()?;
    spec.validate()?;
    if r_cap > disc.n {
        return Err(Error::InvalidArgument(format!(
            "order cap {r_cap} exceeds the step count {}",
            disc.n
        )));
    }
    let d = model.dim();
    let steps = disc.n;
    let h = disc.h;
    let t = disc.horizon();
    let hw = spec.half_width(t);
    let center: Vec<f64> = (0..d).map(|a| 0.5 * (x[a] + y[a])).collect();
    let half: Vec<f64> = (0..d).map(|a| hw + 0.5 * (x[a] - y[a]).abs()).collect();
    let grid = SpatialGrid::centered(&center, &half, spec.points_per_axis)?;
    let tables = LadderTables::new(model, 0.0, h, steps, &grid, true)?;
    let weights = grid.trapezoid_weights();
    let nn = grid.len();

    // Continuous frozen fields ptilde(0, t_l, x, z_g).
    let mut pfields: Vec<Vec<f64>> = vec![Vec::new()];
    for l in 1..=steps {
        let mut vals = vec![0.0; nn];
        let mut node = vec![0.0; d];
        for (g, val) in vals.iter_mut().enumerate() {
            grid.node(g, &mut node);
            let ev = tables.cont_gauss(0, l, g, &node)?;
            *val = ev.density(x, &node);
        }
        pfields.push(vals);
    }

    let mut value = frozen_density(model, 0.0, t, x, y)?;
    let rho = t.sqrt();
    let threshold = 1e-6;
    let mut orders_used = 0;
    let mut converged = false;
    let mut c1_fit = 0.0f64;
    let mut cur: Vec<Vec<f64>> = Vec::new();
    for r in 1..=r_cap {
        let prev = std::mem::take(&mut cur);
        let mut next: Vec<Vec<f64>> = vec![Vec::new()];
        for i in 1..=steps {
            let slice: Result<Vec<f64>> = (0..nn)
                .into_par_iter()
                .map(|gy| {
                    let mut ynode = vec![0.0; d];
                    grid.node(gy, &mut ynode);
                    oxh_value(
                        model,
                        &tables,
                        &grid,
                        &weights,
                        &pfields,
                        &prev,
                        r,
                        i,
                        x,
                        &ynode,
                        Some(gy),
                    )
                })
                .collect();
            next.push(slice?);
        }
        let final_slice = &next[steps];
        let sup = final_slice.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if sup > 0.0 {
            let cand = (sup * quad::gamma_one_plus_half(r) / rho.powi(r as i32))
                .powf(1.0 / (r as f64 + 1.0));
            c1_fit = c1_fit.max(cand);
        }
        if sup < threshold {
            converged = true;
            break;
        }
        value += oxh_value(
            model, &tables, &grid, &weights, &pfields, &prev, r, steps, x, y, None,
        )?;
        orders_used = r;
        cur = next;
    }
    Ok(SeriesValue {
        value,
        truncation_estimate: truncation_tail(c1_fit, rho, orders_used),
        orders_used,
        converged,
    })
}

/// One target value of `(ptilde oxh H^(r))(0, t_i, x, y)` given the fields
/// of order `r - 1` (`prev`; the frozen fields serve for `r = 1`). When the
/// target is a grid node its index avoids recomputing coefficient values.
#[allow(clippy::too_many_arguments)]
fn oxh_value(
    model: &ModelSpec,
    tables: &LadderTables,
    grid: &SpatialGrid,
    weights: &[f64],
    pfields: &[Vec<f64>],
    prev: &[Vec<f64>],
    r: usize,
    i: usize,
    x: &[f64],
    y: &[f64],
    gy: Option<usize>,
) -> Result<f64> {
    let d = tables.d;
    let nn = tables.nn;
    let h = tables.h;
    let mut acc = 0.0;
    let mut z = vec![0.0; d];
    for l in 0..i {
        let at_y_store;
        let at_y: &CoeffValues = match gy {
            Some(g) => tables.coeffs(l, g),
            None => {
                at_y_store = CoeffValues::at(model, tables.time(l), y);
                &at_y_store
            }
        };
        if l == 0 {
            if r == 1 {
                // Dirac term: h * H(0, t_i, x, y).
                let ev = match gy {
                    Some(g) => tables.cont_gauss(0, i, g, y)?,
                    None => cont_gauss_at(model, tables, 0, i, y)?,
                };
                let at_x = CoeffValues::at(model, tables.time(0), x);
                acc += h * kernel_h_eval(&at_x, at_y, &ev, x);
            }
            continue;
        }
        let field: &[f64] = if r == 1 { &pfields[l] } else { &prev[l] };
        if field.is_empty() {
            continue;
        }
        let ev = match gy {
            Some(g) => tables.cont_gauss(l, i, g, y)?,
            None => cont_gauss_at(model, tables, l, i, y)?,
        };
        let mut inner = 0.0;
        for g in 0..nn {
            let f = field[g];
            if f == 0.0 {
                continue;
            }
            grid.node(g, &mut z);
            inner += weights[g] * f * kernel_h_eval(tables.coeffs(l, g), at_y, &ev, &z);
        }
        acc += h * inner;
    }
    Ok(acc)
}

/// Continuous frozen Gaussian over `[t_l, t_i]` frozen at an arbitrary
/// point (integrates the coefficients directly).
fn cont_gauss_at(
    model: &ModelSpec,
    tables: &LadderTables,
    l: usize,
    i: usize,
    y: &[f64],
) -> Result<GaussianEval> {
    GaussianEval::new(model, tables.time(l), tables.time(i), y)
}

/// The measured gap `p - p^d` split into the four discrete-convolution
/// summands plus the bookkeeping residual.
#[derive(Clone, Debug, Serialize)]
pub struct CorrectionReport {
    pub p_value: f64,
    pub pd_value: f64,
    pub p_minus_pd: f64,
    /// `h/2 (p oxh H_1)`
    pub term_h1: f64,
    /// `h/2 (p oxh A_0)`
    pub term_a0: f64,
    /// `h/2 (p oxh H_1 oxh Phi)`
    pub term_h1_phi: f64,
    /// `h/2 (p oxh A_0 oxh Phi)`
    pub term_a0_phi: f64,
    /// `p_minus_pd` minus the four terms (exact bookkeeping).
    pub residual: f64,
    pub converged: bool,
}

/// Computes the correction decomposition of `p - p^d` over `[0, T]`:
/// `h/2 (p oxh H_1) + h/2 (p oxh A_0) + h/2 (p oxh H_1 oxh Phi) +
/// h/2 (p oxh A_0 oxh Phi) + residual`, with `p` taken from the series
/// solver on time slices aligned with the chain mesh and `Phi` truncated at
/// `r_phi` discrete powers.
pub fn correction_terms(
    model: &ModelSpec,
    disc: &Discretization,
    x: &[f64],
    y: &[f64],
    r_phi: usize,
    spec: &QuadratureSpec,
) -> Result<CorrectionReport> {
    disc.validate()?;
    spec.validate()?;
    if disc.n < 4 {
        return Err(Error::InvalidArgument(format!(
            "correction pipeline needs n >= 4 time nodes, got {}",
            disc.n
        )));
    }
    let d = model.dim();
    let n = disc.n;
    let h = disc.h;
    let t = disc.horizon();
    // Series solver on a mesh that contains every chain node.
    let c = 64usize.div_ceil(n);
    let mut series_spec = spec.clone();
    series_spec.ladder_steps = c * n;
    let mut engine = LadderEngine::new(model, 0.0, t, x, &series_spec)?;
    // One order deeper than the correction terms resolve, so series
    // truncation does not contaminate the residual.
    let series_orders = 3;
    engine.ensure_order(series_orders)?;
    let grid = engine.grid().clone();
    let weights = grid.trapezoid_weights();
    let nn = grid.len();
    let mut pslices: Vec<Vec<f64>> = vec![Vec::new()];
    for l in 1..n {
        pslices.push(engine.density_slice(series_orders, c * l)?);
    }
    let p_value = engine.density_at(series_orders, engine.steps(), y)?;
    let pd = pd_density(model, disc, x, y, 4.min(n), spec)?;
    let p_minus_pd = p_value - pd.value;

    let tables = LadderTables::new(model, 0.0, h, n, &grid, true)?;
    let homogeneous = model.coeffs.time_homogeneous();

    // Kernel selector: 0 = H_1 (first time derivative), 1 = A_0 (iterated
    // generator difference), 2 = H (used for the Phi powers).
    let time_derivs: Vec<CoeffValues> = if homogeneous {
        Vec::new()
    } else {
        let mut out = Vec::with_capacity((n + 1) * nn);
        let mut node = vec![0.0; d];
        for l in 0..=n {
            for g in 0..nn {
                grid.node(g, &mut node);
                out.push(CoeffValues::time_deriv_at(model, 1, tables.time(l), &node));
            }
        }
        out
    };
    let jets: Vec<CoeffJet> = {
        let mut out = Vec::with_capacity((n + 1) * nn);
        let mut node = vec![0.0; d];
        for l in 0..=n {
            for g in 0..nn {
                grid.node(g, &mut node);
                out.push(CoeffJet::at(model, tables.time(l), &node));
            }
        }
        out
    };

    // Kernel selector: 0 = H_1 (first time-derivative kernel), 1 = A_0
    // (iterated generator difference), 2 = H (used for the Phi powers).
    // The left field is `sources[l]` (empty slices are skipped); `l = 0` with
    // a Dirac left factor contributes `h * K(0, t_i, x, .)` when `dirac`.
    let build = |which: usize,
                 sources: &[Vec<f64>],
                 dirac: bool,
                 i: usize,
                 yv: &[f64],
                 gy: Option<usize>|
     -> Result<f64> {
        let mut acc = 0.0;
        let mut z = vec![0.0; d];
        for l in 0..i {
            let field: &[f64] = if l == 0 { &[] } else { &sources[l] };
            if l > 0 && field.is_empty() {
                continue;
            }
            if l == 0 && !dirac {
                continue;
            }
            let ev = match gy {
                Some(g) => tables.cont_gauss(l, i, g, yv)?,
                None => cont_gauss_at(model, &tables, l, i, yv)?,
            };
            let at_y_store;
            let at_y: &CoeffValues = match gy {
                Some(g) => tables.coeffs(l, g),
                None => {
                    at_y_store = CoeffValues::at(model, tables.time(l), yv);
                    &at_y_store
                }
            };
            let dy_store;
            let dy: &CoeffValues = if which == 0 {
                match gy {
                    Some(g) => &time_derivs[l * nn + g],
                    None => {
                        dy_store = CoeffValues::time_deriv_at(model, 1, tables.time(l), yv);
                        &dy_store
                    }
                }
            } else {
                at_y
            };
            if l == 0 {
                // p(0, 0, x, .) is the Dirac mass at x.
                let v = match which {
                    0 => {
                        let dx = CoeffValues::time_deriv_at(model, 1, tables.time(0), x);
                        kernel_hl_eval(&dx, dy, &ev, x)
                    }
                    1 => {
                        let jet = CoeffJet::at(model, tables.time(0), x);
                        kernel_a0_eval(&jet, at_y, &ev, x)?
                    }
                    _ => {
                        let ax = CoeffValues::at(model, tables.time(0), x);
                        kernel_h_eval(&ax, at_y, &ev, x)
                    }
                };
                acc += h * v;
                continue;
            }
            let mut inner = 0.0;
            for g in 0..nn {
                let f = field[g];
                if f == 0.0 {
                    continue;
                }
                grid.node(g, &mut z);
                let v = match which {
                    0 => kernel_hl_eval(&time_derivs[l * nn + g], dy, &ev, &z),
                    1 => kernel_a0_eval(&jets[l * nn + g], at_y, &ev, &z)?,
                    _ => kernel_h_eval(tables.coeffs(l, g), at_y, &ev, &z),
                };
                inner += weights[g] * f * v;
            }
            acc += h * inner;
        }
        Ok(acc)
    };

    // Fields of (sources oxh K)(0, t_i, x, .) for i < n plus the value at
    // (T, y).
    let sweep = |which: usize, sources: &[Vec<f64>], dirac: bool| -> Result<(Vec<Vec<f64>>, f64)> {
        let mut fields: Vec<Vec<f64>> = vec![Vec::new()];
        for i in 1..n {
            let slice: Result<Vec<f64>> = (0..nn)
                .into_par_iter()
                .map(|gy| {
                    let mut ynode = vec![0.0; d];
                    grid.node(gy, &mut ynode);
                    build(which, sources, dirac, i, &ynode, Some(gy))
                })
                .collect();
            fields.push(slice?);
        }
        let final_value = build(which, sources, dirac, n, y, None)?;
        Ok((fields, final_value))
    };

    let (term_h1, term_h1_phi) = if homogeneous {
        (0.0, 0.0)
    } else {
        let (fields, final_h1) = sweep(0, &pslices, true)?;
        let mut phi_total = 0.0;
        let mut cur = fields;
        for _ in 1..=r_phi {
            let (next, fin) = sweep(2, &cur, false)?;
            phi_total += fin;
            cur = next;
        }
        (0.5 * h * final_h1, 0.5 * h * phi_total)
    };
    let (term_a0, term_a0_phi) = {
        let (fields, final_a0) = sweep(1, &pslices, true)?;
        let mut phi_total = 0.0;
        let mut cur = fields;
        for _ in 1..=r_phi {
            let (next, fin) = sweep(2, &cur, false)?;
            phi_total += fin;
            cur = next;
        }
        (0.5 * h * final_a0, 0.5 * h * phi_total)
    };

    let residual = p_minus_pd - (term_h1 + term_a0 + term_h1_phi + term_a0_phi);
    Ok(CorrectionReport {
        p_value,
        pd_value: pd.value,
        p_minus_pd,
        term_h1,
        term_a0,
        term_h1_phi,
        term_a0_phi,
        residual,
        converged: pd.converged,
    })
}
