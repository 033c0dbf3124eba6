//! Convolution series for the transition density.
//!
//! The density is summed as `p = sum_r (ptilde ox H^(r))` where `ox` is the
//! space-time convolution with a weakly singular `(t-u)^{-1/2}` time factor.
//! Terms are built by a ladder: every order is materialized as fields on a
//! shared tensor grid, one spatial slice per intermediate time node, and the
//! next order convolves the previous fields against the kernel `H`.
//!
//! Near the singular time endpoints the integrand is smooth in
//! `rho = sqrt(distance to endpoint)` rather than in time itself, so both
//! endpoint panels are integrated with a quadratic fit in `rho` (exact
//! moments), while the interior uses the composite trapezoid rule. Inner
//! spatial integrals switch to product-scaled windows whenever one factor is
//! too narrow for the grid.

use crate::error::{Error, Result};
use crate::frozen::{
    frozen_density, kernel_h, kernel_h1_eval, kernel_h_eval, CoeffValues, GaussianEval,
};
use crate::grid::SpatialGrid;
use crate::model::ModelSpec;
use crate::quad::{self, TimeRule};
use rayon::prelude::*;
use serde::Serialize;

/// Half-width of product-scaled quadrature windows, in standard deviations
/// of the product Gaussian. Wide enough that the truncated tail is below
/// 1e-12 even when the true factor is sqrt(3) narrower than the placement
/// estimate.
const SCALED_WINDOW: f64 = 12.0;

/// Storage cap for one ladder order: (time slices) x (grid nodes).
const LADDER_BUDGET: usize = 4_000_000;

fn scaled_axis_points(dim: usize) -> usize {
    if dim == 1 {
        65
    } else {
        33
    }
}

/// A kernel `K(s, t, x, y)` together with the exponent of its admissible
/// `(t-s)^{-alpha}` blow-up, so convolutions know how to place time nodes.
pub struct SpaceTimeKernel<'a> {
    evaluate: Box<dyn Fn(f64, f64, &[f64], &[f64]) -> f64 + Sync + 'a>,
    singularity_exponent: f64,
    dim: usize,
}

impl<'a> SpaceTimeKernel<'a> {
    pub fn new(
        dim: usize,
        singularity_exponent: f64,
        evaluate: impl Fn(f64, f64, &[f64], &[f64]) -> f64 + Sync + 'a,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("kernel dimension is zero".into()));
        }
        if !(0.0..1.0).contains(&singularity_exponent) {
            return Err(Error::InvalidArgument(format!(
                "singularity exponent {singularity_exponent} outside [0, 1)"
            )));
        }
        Ok(Self {
            evaluate: Box::new(evaluate),
            singularity_exponent,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn singularity_exponent(&self) -> f64 {
        self.singularity_exponent
    }

    pub fn eval(&self, s: f64, t: f64, x: &[f64], y: &[f64]) -> f64 {
        (self.evaluate)(s, t, x, y)
    }
}

/// Resolution knobs for convolutions and ladders.
#[derive(Clone, Debug)]
pub struct QuadratureSpec {
    /// How the singular time endpoint is handled.
    pub time_rule: TimeRule,
    /// Node count of the singular time rule (generic convolutions).
    pub time_nodes: usize,
    /// Odd number of spatial points per axis.
    pub points_per_axis: usize,
    /// Spatial boxes extend `kappa * sqrt(dt * sigma_peak)` plus drift slack.
    pub kappa: f64,
    /// Target relative tolerance (reported, not enforced adaptively).
    pub tolerance: f64,
    /// Number of uniform time panels in a term ladder.
    pub ladder_steps: usize,
    /// Largest diffusion eigenvalue; sets the spatial box scale.
    pub sigma_peak: f64,
    /// Sup-norm of the drift; widens boxes for transported mass.
    pub drift_sup: f64,
}

impl QuadratureSpec {
    /// Defaults tuned per dimension; dimensions above two are rejected
    /// because tensor-grid storage and interpolation stencils blow up.
    pub fn for_model(model: &ModelSpec) -> Result<Self> {
        let (points_per_axis, ladder_steps) = match model.dim() {
            1 => (257, 64),
            2 => (33, 24),
            d => {
                return Err(Error::InvalidConfig(format!(
                    "spatial dimension {d} is not supported; use 1 or 2"
                )))
            }
        };
        let b = model.bounds();
        Ok(Self {
            time_rule: TimeRule::SubstitutionSqrt,
            time_nodes: 16,
            points_per_axis,
            kappa: 8.0,
            tolerance: 1e-6,
            ladder_steps,
            sigma_peak: b.sigma_star_star,
            drift_sup: b.drift_sup,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_nodes < 8 {
            return Err(Error::InvalidConfig(format!(
                "time rule needs at least 8 nodes, got {}",
                self.time_nodes
            )));
        }
        if self.points_per_axis < 9 || self.points_per_axis % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "points per axis must be odd and >= 9, got {}",
                self.points_per_axis
            )));
        }
        if self.kappa < 6.0 {
            return Err(Error::InvalidConfig(format!(
                "box half-width factor {} is below the minimum 6",
                self.kappa
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig("tolerance must be positive".into()));
        }
        if self.ladder_steps < 4 {
            return Err(Error::InvalidConfig(format!(
                "ladder needs at least 4 time panels, got {}",
                self.ladder_steps
            )));
        }
        if !(self.sigma_peak > 0.0) || !(self.drift_sup >= 0.0) {
            return Err(Error::InvalidConfig(
                "box scale parameters must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial half-width used for a window of elapsed time `dt`.
    pub fn half_width(&self, dt: f64) -> f64 {
        self.kappa * (dt * self.sigma_peak).sqrt() + self.drift_sup * dt
    }
}

/// When to stop summing the series and how to estimate what was dropped.
#[derive(Clone, Debug)]
pub struct TruncationPolicy {
    pub max_order: usize,
    /// A term whose sup-norm on the ladder grid falls below this is dropped
    /// and the summation stops.
    pub term_norm_threshold: f64,
    /// Optional pre-fitted `(C, C1)` envelope constants; when absent, `C1`
    /// is fitted from the computed term norms.
    pub gamma_bound_constants: Option<(f64, f64)>,
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        Self {
            max_order: 4,
            term_norm_threshold: 1e-6,
            gamma_bound_constants: None,
        }
    }
}

impl TruncationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.term_norm_threshold > 0.0) {
            return Err(Error::InvalidConfig(
                "term norm threshold must be positive".into(),
            ));
        }
        if let Some((c, c1)) = self.gamma_bound_constants {
            if !(c > 0.0 && c1 > 0.0) {
                return Err(Error::InvalidConfig(
                    "envelope constants must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Tail bound `sum_{r > last_included} C1^{r+1} rho^r / Gamma(1 + r/2)`.
/// The factorial denominator makes sixty terms ample for any `C1 rho`
/// arising here.
pub fn truncation_tail(c1: f64, rho: f64, last_included: usize) -> f64 {
    if c1 <= 0.0 {
        return 0.0;
    }
    (last_included + 1..last_included + 61)
        .map(|r| c1.powi(r as i32 + 1) * rho.powi(r as i32) / quad::gamma_one_plus_half(r))
        .sum()
}

/// A truncated series evaluation with its accounting.
#[derive(Clone, Debug, Serialize)]
pub struct SeriesValue {
    pub value: f64,
    pub truncation_estimate: f64,
    pub orders_used: usize,
    pub converged: bool,
}

/// Direct double quadrature of `int_s^t du int f(s,u,x,z) g(u,t,z,y) dz`.
/// The time rule absorbs the right-endpoint `(t-u)^{-alpha}` blow-up of `g`;
/// the spatial box covers `x` and `y` plus diffusion spread.
pub fn convolve(
    f: &SpaceTimeKernel,
    g: &SpaceTimeKernel,
    s: f64,
    t: f64,
    x: &[f64],
    y: &[f64],
    quad_spec: &QuadratureSpec,
) -> Result<f64> {
    quad_spec.validate()?;
    if f.dim != g.dim {
        return Err(Error::InvalidArgument(format!(
            "kernel dimensions disagree: {} vs {}",
            f.dim, g.dim
        )));
    }
    let d = f.dim;
    if x.len() != d || y.len() != d {
        return Err(Error::InvalidArgument(
            "evaluation points do not match the kernel dimension".into(),
        ));
    }
    if !(t > s) {
        return Err(Error::InvalidArgument(format!(
            "time window [{s}, {t}] is empty"
        )));
    }
    let time = quad::singular_time_rule(
        quad_spec.time_rule,
        quad_spec.time_nodes,
        s,
        t,
        g.singularity_exponent,
    )?;
    let hw = quad_spec.half_width(t - s);
    let center: Vec<f64> = (0..d).map(|a| 0.5 * (x[a] + y[a])).collect();
    let half: Vec<f64> = (0..d).map(|a| hw + 0.5 * (x[a] - y[a]).abs()).collect();
    let grid = SpatialGrid::centered(&center, &half, quad_spec.points_per_axis)?;
    let wz = grid.trapezoid_weights();
    let mut z = vec![0.0; d];
    let mut total = 0.0;
    for (&u, &wu) in time.nodes.iter().zip(&time.weights) {
        let mut inner = 0.0;
        for gi in 0..grid.len() {
            grid.node(gi, &mut z);
            let term = f.eval(s, u, x, &z) * g.eval(u, t, &z, y);
            if !term.is_finite() {
                return Err(Error::NonFinite(format!(
                    "convolution integrand at u = {u}, z = {z:?}"
                )));
            }
            inner += wz[gi] * term;
        }
        total += wu * inner;
    }
    Ok(total)
}

/// Exact moment `int rho^j du = int rho^j 2 rho drho` over
/// `rho^2 in [0, rho2]`, where `rho = sqrt(distance to the endpoint)`.
fn sqrt_panel_moment(j: usize, rho2: f64) -> f64 {
    let p = 0.5 * j as f64 + 1.0;
    rho2.powf(p) / p
}

/// Integral over one endpoint region of the polynomial in `rho`
/// interpolating the `(rho, value)` samples (Newton form expanded to
/// monomials, then exact moments).
fn sqrt_fit_integral(pts: &[(f64, f64)], rho2: f64) -> f64 {
    let n = pts.len();
    let mut dd: Vec<f64> = pts.iter().map(|p| p.1).collect();
    for level in 1..n {
        for i in (level..n).rev() {
            dd[i] = (dd[i] - dd[i - 1]) / (pts[i].0 - pts[i - level].0);
        }
    }
    let mut c = vec![0.0; n];
    c[0] = dd[n - 1];
    for (deg, i) in (0..n - 1).rev().enumerate() {
        let a = pts[i].0;
        for k in (0..=deg + 1).rev() {
            let lower = if k == 0 { 0.0 } else { c[k - 1] };
            let own = if k <= deg { c[k] } else { 0.0 };
            c[k] = lower - a * own;
        }
        c[0] += dd[i];
    }
    c.iter()
        .enumerate()
        .map(|(j, cj)| cj * sqrt_panel_moment(j, rho2))
        .sum()
}

/// Term ladder: fields `F_r[k][g] = (ptilde ox H^(r))(s, tau_k, x, z_g)` on a
/// uniform time mesh `tau_k = s + k dt` and a shared spatial grid centered
/// at the start point.
pub struct LadderEngine {
    model: ModelSpec,
    s: f64,
    t: f64,
    x: Vec<f64>,
    grid: SpatialGrid,
    steps: usize,
    dt: f64,
    n: usize,
    weights: Vec<f64>,
    /// Prefix time integrals of the drift at grid nodes, laid out as
    /// `[(k*d + a) * n + g]` so each `(k, a)` is contiguous over nodes.
    cum_drift: Vec<f64>,
    /// Same for the diffusion matrix, `[(k*d*d + ab) * n + g]`.
    cum_sigma: Vec<f64>,
    /// Coefficient values at `(tau_k, z_g)`, same layouts.
    val_drift: Vec<f64>,
    val_sigma: Vec<f64>,
    drift_at_x: Vec<f64>,
    fields: Vec<Vec<Vec<f64>>>,
    sigma_floor: f64,
    sigma_peak: f64,
    scaled_pts: usize,
}

impl LadderEngine {
    pub fn new(
        model: &ModelSpec,
        s: f64,
        t: f64,
        x: &[f64],
        spec: &QuadratureSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let d = model.dim();
        if d > 2 {
            return Err(Error::InvalidConfig(format!(
                "spatial dimension {d} is not supported; use 1 or 2"
            )));
        }
        if x.len() != d {
            return Err(Error::InvalidArgument(
                "start point does not match the model dimension".into(),
            ));
        }
        if !(t > s) {
            return Err(Error::InvalidArgument(format!(
                "time window [{s}, {t}] is empty"
            )));
        }
        let steps = spec.ladder_steps;
        let half = vec![spec.half_width(t - s); d];
        let grid = SpatialGrid::centered(x, &half, spec.points_per_axis)?;
        let n = grid.len();
        if (steps + 1) * n > LADDER_BUDGET {
            return Err(Error::GridOverflow(format!(
                "ladder needs {} field entries (cap {LADDER_BUDGET}); reduce \
                 points_per_axis or ladder_steps",
                (steps + 1) * n
            )));
        }
        let dt = (t - s) / steps as f64;
        let bounds = model.bounds();
        let homogeneous = model.coeffs.time_homogeneous();

        let mut val_drift = vec![0.0; (steps + 1) * d * n];
        let mut val_sigma = vec![0.0; (steps + 1) * d * d * n];
        let mut cum_drift = vec![0.0; (steps + 1) * d * n];
        let mut cum_sigma = vec![0.0; (steps + 1) * d * d * n];
        let gl = quad::gauss_legendre_16();
        let mut z = vec![0.0; d];
        let mut dr = vec![0.0; d];
        let mut sg = vec![0.0; d * d];
        for g in 0..n {
            grid.node(g, &mut z);
            if homogeneous {
                model.coeffs.drift(s, &z, &mut dr);
                model.coeffs.diffusion(s, &z, &mut sg);
                for k in 0..=steps {
                    let elapsed = k as f64 * dt;
                    for a in 0..d {
                        val_drift[(k * d + a) * n + g] = dr[a];
                        cum_drift[(k * d + a) * n + g] = dr[a] * elapsed;
                    }
                    for ab in 0..d * d {
                        val_sigma[(k * d * d + ab) * n + g] = sg[ab];
                        cum_sigma[(k * d * d + ab) * n + g] = sg[ab] * elapsed;
                    }
                }
            } else {
                for k in 0..=steps {
                    let tk = s + k as f64 * dt;
                    model.coeffs.drift(tk, &z, &mut dr);
                    model.coeffs.diffusion(tk, &z, &mut sg);
                    for a in 0..d {
                        val_drift[(k * d + a) * n + g] = dr[a];
                    }
                    for ab in 0..d * d {
                        val_sigma[(k * d * d + ab) * n + g] = sg[ab];
                    }
                    if k > 0 {
                        // One 16-point panel per step integrates the smooth
                        // coefficients to machine precision at these widths.
                        let (a0, b0) = (tk - dt, tk);
                        let cgl = 0.5 * (a0 + b0);
                        let hgl = 0.5 * (b0 - a0);
                        let mut pm = vec![0.0; d];
                        let mut ps = vec![0.0; d * d];
                        for (&xi, &wi) in gl.nodes.iter().zip(&gl.weights) {
                            let u = cgl + hgl * xi;
                            model.coeffs.drift(u, &z, &mut dr);
                            model.coeffs.diffusion(u, &z, &mut sg);
                            for a in 0..d {
                                pm[a] += wi * hgl * dr[a];
                            }
                            for ab in 0..d * d {
                                ps[ab] += wi * hgl * sg[ab];
                            }
                        }
                        for a in 0..d {
                            cum_drift[(k * d + a) * n + g] =
                                cum_drift[((k - 1) * d + a) * n + g] + pm[a];
                        }
                        for ab in 0..d * d {
                            cum_sigma[(k * d * d + ab) * n + g] =
                                cum_sigma[((k - 1) * d * d + ab) * n + g] + ps[ab];
                        }
                    }
                }
            }
        }
        let mut drift_at_x = vec![0.0; d];
        model.coeffs.drift(s, x, &mut drift_at_x);

        let mut engine = Self {
            model: model.clone(),
            s,
            t,
            x: x.to_vec(),
            weights: grid.trapezoid_weights(),
            grid,
            steps,
            dt,
            n,
            cum_drift,
            cum_sigma,
            val_drift,
            val_sigma,
            drift_at_x,
            fields: Vec::new(),
            sigma_floor: bounds.sigma_star,
            sigma_peak: bounds.sigma_star_star,
            scaled_pts: scaled_axis_points(d),
        };
        let mut zero_order = Vec::with_capacity(steps + 1);
        zero_order.push(Vec::new());
        for k in 1..=steps {
            let slice: Result<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|g| {
                    let ev = engine.prefix_gaussian(0, k, g)?;
                    let mut node = vec![0.0; engine.grid.dim()];
                    engine.grid.node(g, &mut node);
                    Ok(ev.density(&engine.x, &node))
                })
                .collect();
            zero_order.push(slice?);
        }
        engine.fields.push(zero_order);
        Ok(engine)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn window(&self) -> (f64, f64) {
        (self.s, self.t)
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn time(&self, k: usize) -> f64 {
        self.s + k as f64 * self.dt
    }

    pub fn orders_built(&self) -> usize {
        self.fields.len() - 1
    }

    /// Frozen Gaussian over `[tau_i, tau_k]` frozen at grid node `g`, built
    /// from the prefix integrals (no quadrature at call time).
    fn prefix_gaussian(&self, i: usize, k: usize, g: usize) -> Result<GaussianEval> {
        let d = self.grid.dim();
        let n = self.n;
        let mut m_int = vec![0.0; d];
        let mut s_int = vec![0.0; d * d];
        for a in 0..d {
            m_int[a] = self.cum_drift[(k * d + a) * n + g] - self.cum_drift[(i * d + a) * n + g];
        }
        for ab in 0..d * d {
            s_int[ab] =
                self.cum_sigma[(k * d * d + ab) * n + g] - self.cum_sigma[(i * d * d + ab) * n + g];
        }
        let mut node = vec![0.0; d];
        self.grid.node(g, &mut node);
        GaussianEval::from_moments(self.time(i), self.time(k), &node, &m_int, &s_int)
    }

    /// Same, frozen at an off-grid point: the prefix integrals are smooth in
    /// the freeze coordinate, so cubic interpolation reproduces them far
    /// below the quadrature floor. Used where a narrow zero-order factor
    /// must be evaluated analytically instead of interpolating its values.
    /// The freeze coordinate is clamped into the grid box: beyond it the
    /// stencil extrapolates (weights grow like the cube of the overshoot)
    /// and can hand back a negative variance, while the factor this
    /// Gaussian multiplies is already exponentially dead there.
    fn interpolated_gaussian(&self, i: usize, k: usize, z: &[f64]) -> Result<GaussianEval> {
        let d = self.grid.dim();
        let n = self.n;
        let mut zc = vec![0.0; d];
        for a in 0..d {
            let lo = self.grid.axis_coord(a, 0);
            let hi = self.grid.axis_coord(a, self.grid.shape()[a] - 1);
            zc[a] = z[a].clamp(lo, hi);
        }
        let mut m_int = vec![0.0; d];
        let mut s_int = vec![0.0; d * d];
        for a in 0..d {
            let hi = self
                .grid
                .interpolate(&self.cum_drift[(k * d + a) * n..(k * d + a + 1) * n], &zc);
            let lo = self
                .grid
                .interpolate(&self.cum_drift[(i * d + a) * n..(i * d + a + 1) * n], &zc);
            m_int[a] = hi - lo;
        }
        for ab in 0..d * d {
            let hi = self.grid.interpolate(
                &self.cum_sigma[(k * d * d + ab) * n..(k * d * d + ab + 1) * n],
                &zc,
            );
            let lo = self.grid.interpolate(
                &self.cum_sigma[(i * d * d + ab) * n..(i * d * d + ab + 1) * n],
                &zc,
            );
            s_int[ab] = hi - lo;
        }
        GaussianEval::from_moments(self.time(i), self.time(k), &zc, &m_int, &s_int)
    }

    fn node_coeffs(&self, i: usize, g: usize) -> CoeffValues {
        let d = self.grid.dim();
        let n = self.n;
        CoeffValues {
            drift: (0..d)
                .map(|a| self.val_drift[(i * d + a) * n + g])
                .collect(),
            sigma: (0..d * d)
                .map(|ab| self.val_sigma[(i * d * d + ab) * n + g])
                .collect(),
        }
    }

    /// Builds field levels up to `order`.
    pub fn ensure_order(&mut self, order: usize) -> Result<()> {
        while self.orders_built() < order {
            let r = self.orders_built();
            let next = self.build_next_order(r)?;
            self.fields.push(next);
        }
        Ok(())
    }

    fn build_next_order(&self, r: usize) -> Result<Vec<Vec<f64>>> {
        let mut slices = Vec::with_capacity(self.steps + 1);
        slices.push(Vec::new());
        for k in 1..=self.steps {
            let slice = if k == 1 {
                if r == 0 {
                    let t1 = self.time(1);
                    let res: Result<Vec<f64>> = (0..self.n)
                        .into_par_iter()
                        .map(|g| {
                            let mut node = vec![0.0; self.grid.dim()];
                            self.grid.node(g, &mut node);
                            first_order_term(&self.model, self.s, t1, &self.x, &node)
                        })
                        .collect();
                    res?
                } else {
                    // Higher orders at one panel of elapsed time are below
                    // the scheme's resolution (they scale like dt^{r/2+1}
                    // relative to the density); they only re-enter later
                    // integrals with another dt weight.
                    vec![0.0; self.n]
                }
            } else {
                let res: Result<Vec<f64>> = (0..self.n)
                    .into_par_iter()
                    .map(|gy| self.ladder_value(r, k, gy))
                    .collect();
                res?
            };
            slices.push(slice);
        }
        Ok(slices)
    }

    /// One target value `F_{r+1}[k][gy]`: the time integral over `[s, tau_k]`
    /// of the inner spatial integrals `I(tau_i)`, assembled as
    /// sqrt-fit endpoint panels plus a trapezoid interior.
    fn ladder_value(&self, r: usize, k: usize, gy: usize) -> Result<f64> {
        debug_assert!(k >= 2);
        let dt = self.dt;
        let step = self.grid.step()[0];
        let mut ivals = vec![0.0; k];
        ivals[0] = if r == 0 { self.left_limit(k, gy)? } else { 0.0 };
        for i in 1..k {
            let j = k - i;
            let narrow = ((i.min(j) as f64) * dt * self.sigma_floor).sqrt() < step;
            ivals[i] = if j <= 2 || narrow {
                self.scaled_inner(r, i, k, gy)?
            } else {
                self.plain_inner(r, i, k, gy)?
            };
        }
        let r1 = dt.sqrt();
        let r2 = (2.0 * dt).sqrt();
        let r3 = (3.0 * dt).sqrt();
        let r4 = (4.0 * dt).sqrt();
        Ok(match k {
            2 => {
                sqrt_fit_integral(&[(0.0, ivals[0]), (r1, ivals[1])], dt)
                    + sqrt_fit_integral(&[(r1, ivals[1]), (r2, ivals[0])], dt)
            }
            3 => {
                sqrt_fit_integral(&[(0.0, ivals[0]), (r1, ivals[1]), (r2, ivals[2])], dt)
                    + sqrt_fit_integral(&[(r1, ivals[2]), (r2, ivals[1]), (r3, ivals[0])], 2.0 * dt)
            }
            _ => {
                // Cubic fits over [tau_0, tau_2] and [tau_{k-2}, tau_k]; the
                // fourth sample sits just outside each region.
                let left = sqrt_fit_integral(
                    &[
                        (0.0, ivals[0]),
                        (r1, ivals[1]),
                        (r2, ivals[2]),
                        (r3, ivals[3]),
                    ],
                    2.0 * dt,
                );
                let right = sqrt_fit_integral(
                    &[
                        (r1, ivals[k - 1]),
                        (r2, ivals[k - 2]),
                        (r3, ivals[k - 3]),
                        (r4, ivals[k - 4]),
                    ],
                    2.0 * dt,
                );
                let mut bulk = 0.0;
                if k >= 5 {
                    bulk = 0.5 * (ivals[2] + ivals[k - 2]);
                    for item in ivals.iter().take(k - 2).skip(3) {
                        bulk += item;
                    }
                    bulk *= dt;
                    if k >= 6 {
                        // Gregory end corrections lift the composite
                        // trapezoid to fourth order; slopes use one-sided
                        // second-order differences.
                        let dl = (-3.0 * ivals[2] + 4.0 * ivals[3] - ivals[4]) / (2.0 * dt);
                        let dr =
                            (3.0 * ivals[k - 2] - 4.0 * ivals[k - 3] + ivals[k - 4]) / (2.0 * dt);
                        bulk -= dt * dt / 12.0 * (dr - dl);
                    }
                }
                left + bulk + right
            }
        })
    }

    /// `lim_{u -> s} I(u)` for the zero-order factor: the narrow Gaussian
    /// collapses onto the start point, leaving the kernel itself.
    fn left_limit(&self, k: usize, gy: usize) -> Result<f64> {
        let ev = self.prefix_gaussian(0, k, gy)?;
        let at_x = CoeffValues::at(&self.model, self.s, &self.x);
        let at_y = self.node_coeffs(0, gy);
        Ok(kernel_h_eval(&at_x, &at_y, &ev, &self.x))
    }

    /// Inner integral by straight grid summation; valid when both factors
    /// are resolved by the grid spacing.
    fn plain_inner(&self, r: usize, i: usize, k: usize, gy: usize) -> Result<f64> {
        let ev = self.prefix_gaussian(i, k, gy)?;
        let field = &self.fields[r][i];
        let d = self.grid.dim();
        let n = self.n;
        if d == 1 {
            let p = ev.precision()[0];
            let norm = ev.normalizer();
            let mint = ev.params.integrated_drift[0];
            let y = self.grid.axis_coord(0, gy);
            let sy = self.val_sigma[i * n + gy];
            let my = self.val_drift[i * n + gy];
            let sz = &self.val_sigma[i * n..(i + 1) * n];
            let mz = &self.val_drift[i * n..(i + 1) * n];
            let mut acc = 0.0;
            for g in 0..n {
                let f = field[g];
                if f == 0.0 {
                    continue;
                }
                let w = y - self.grid.axis_coord(0, g) - mint;
                let e = w * w * p;
                if e > 400.0 {
                    continue;
                }
                let u = p * w;
                let dens = norm * (-0.5 * e).exp();
                let h = (0.5 * (sz[g] - sy) * (u * u - p) + (mz[g] - my) * u) * dens;
                acc += self.weights[g] * f * h;
            }
            Ok(acc)
        } else {
            let at_y = self.node_coeffs(i, gy);
            let mut z = vec![0.0; d];
            let mut acc = 0.0;
            for g in 0..n {
                let f = field[g];
                if f == 0.0 {
                    continue;
                }
                self.grid.node(g, &mut z);
                let at_z = self.node_coeffs(i, g);
                acc += self.weights[g] * f * kernel_h_eval(&at_z, &at_y, &ev, &z);
            }
            Ok(acc)
        }
    }

    /// Inner integral on a product-scaled window: node placement follows the
    /// Gaussian product of the two factors, so narrow factors are always
    /// resolved regardless of the grid spacing. The zero-order factor is
    /// evaluated analytically (interpolated prefix moments); higher orders
    /// interpolate their stored fields.
    fn scaled_inner(&self, r: usize, i: usize, k: usize, gy: usize) -> Result<f64> {
        let ev = self.prefix_gaussian(i, k, gy)?;
        let d = self.grid.dim();
        let dt = self.dt;
        let ti = self.time(i);
        let wf2 = (i as f64 * dt * self.sigma_peak).max(1e-300);
        let wh2 = ((k - i) as f64 * dt * self.sigma_peak).max(1e-300);
        let prec = 1.0 / wf2 + 1.0 / wh2;
        let s_prod = prec.powf(-0.5);
        let mut y = vec![0.0; d];
        self.grid.node(gy, &mut y);
        let center: Vec<f64> = (0..d)
            .map(|a| {
                let cf = self.x[a] + i as f64 * dt * self.drift_at_x[a];
                let ch = y[a] - ev.params.integrated_drift[a];
                (cf / wf2 + ch / wh2) / prec
            })
            .collect();
        let pts = self.scaled_pts;
        let hstep = 2.0 * SCALED_WINDOW / (pts - 1) as f64;
        let w1 = quad::simpson_weights(pts, hstep * s_prod)?;
        let at_y = self.node_coeffs(i, gy);
        let field = if r > 0 {
            Some(&self.fields[r][i])
        } else {
            None
        };
        if d == 1 {
            let mut acc = 0.0;
            for (q, &wq) in w1.iter().enumerate() {
                let zq = center[0] + (q as f64 * hstep - SCALED_WINDOW) * s_prod;
                let fv = match field {
                    Some(f) => self.grid.interpolate(f, &[zq]),
                    None => {
                        let pe = self.interpolated_gaussian(0, i, &[zq])?;
                        pe.density1(self.x[0], zq)
                    }
                };
                if fv == 0.0 {
                    continue;
                }
                let at_z = CoeffValues::at(&self.model, ti, &[zq]);
                let hv = kernel_h1_eval(
                    at_z.sigma[0],
                    at_z.drift[0],
                    at_y.sigma[0],
                    at_y.drift[0],
                    &ev,
                    zq,
                    y[0],
                );
                acc += wq * fv * hv;
            }
            Ok(acc)
        } else {
            let mut acc = 0.0;
            let mut zq = vec![0.0; d];
            for q0 in 0..pts {
                zq[0] = center[0] + (q0 as f64 * hstep - SCALED_WINDOW) * s_prod;
                for q1 in 0..pts {
                    zq[1] = center[1] + (q1 as f64 * hstep - SCALED_WINDOW) * s_prod;
                    let fv = match field {
                        Some(f) => self.grid.interpolate(f, &zq),
                        None => {
                            let pe = self.interpolated_gaussian(0, i, &zq)?;
                            pe.density(&self.x, &zq)
                        }
                    };
                    if fv == 0.0 {
                        continue;
                    }
                    let at_z = CoeffValues::at(&self.model, ti, &zq);
                    acc += w1[q0] * w1[q1] * fv * kernel_h_eval(&at_z, &at_y, &ev, &zq);
                }
            }
            Ok(acc)
        }
    }

    /// Term value at a time node; order zero is analytic, higher orders
    /// interpolate their fields (cubic in space, none in time).
    pub fn term_at(&self, r: usize, k: usize, y: &[f64]) -> Result<f64> {
        if k == 0 || k > self.steps {
            return Err(Error::InvalidArgument(format!(
                "time node {k} outside 1..={}",
                self.steps
            )));
        }
        if r == 0 {
            return frozen_density(&self.model, self.s, self.time(k), &self.x, y);
        }
        if r >= self.fields.len() {
            return Err(Error::InvalidArgument(format!(
                "order {r} not built (have {})",
                self.orders_built()
            )));
        }
        Ok(self.grid.interpolate(&self.fields[r][k], y))
    }

    /// Sup-norm of a term's field at a time node.
    pub fn term_sup(&self, r: usize, k: usize) -> f64 {
        self.fields[r][k].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn term_field(&self, r: usize, k: usize) -> &[f64] {
        &self.fields[r][k]
    }

    /// Grid values of the truncated series at a time node.
    pub fn density_slice(&self, orders: usize, k: usize) -> Result<Vec<f64>> {
        if k == 0 || k > self.steps {
            return Err(Error::InvalidArgument(format!(
                "time node {k} outside 1..={}",
                self.steps
            )));
        }
        if orders >= self.fields.len() {
            return Err(Error::InvalidArgument(format!(
                "order {orders} not built (have {})",
                self.orders_built()
            )));
        }
        let mut out = self.fields[0][k].clone();
        for r in 1..=orders {
            for (o, v) in out.iter_mut().zip(&self.fields[r][k]) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Truncated series value at an arbitrary point.
    pub fn density_at(&self, orders: usize, k: usize, y: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for r in 0..=orders {
            total += self.term_at(r, k, y)?;
        }
        Ok(total)
    }

    /// Box mass of the truncated series at a time node.
    pub fn mass(&self, orders: usize, k: usize) -> Result<f64> {
        let slice = self.density_slice(orders, k)?;
        Ok(slice.iter().zip(&self.weights).map(|(v, w)| v * w).sum())
    }
}

/// `(ptilde ox H^(r))(s, t, x, y)`; order zero is the frozen Gaussian.
pub fn parametrix_term(
    model: &ModelSpec,
    r: usize,
    s: f64,
    t: f64,
    x: &[f64],
    y: &[f64],
    spec: &QuadratureSpec,
) -> Result<f64> {
    if r == 0 {
        spec.validate()?;
        if !(t > s) {
            return Err(Error::InvalidArgument(format!(
                "time window [{s}, {t}] is empty"
            )));
        }
        return frozen_density(model, s, t, x, y);
    }
    let mut engine = LadderEngine::new(model, s, t, x, spec)?;
    engine.ensure_order(r)?;
    engine.term_at(r, engine.steps(), y)
}

/// Sums the series until a term's sup-norm drops below the policy threshold
/// (that term is dropped) or the order cap is hit. The truncation estimate
/// uses fitted-or-supplied envelope constants in the factorial tail bound.
pub fn diffusion_density(
    model: &ModelSpec,
    s: f64,
    t: f64,
    x: &[f64],
    y: &[f64],
    policy: &TruncationPolicy,
    spec: &QuadratureSpec,
) -> Result<SeriesValue> {
    policy.validate()?;
    let mut engine = LadderEngine::new(model, s, t, x, spec)?;
    let m = engine.steps();
    let rho = (t - s).sqrt();
    let mut value = engine.term_at(0, m, y)?;
    let mut orders_used = 0;
    let mut converged = false;
    let mut c1_fit = 0.0f64;
    for r in 1..=policy.max_order {
        engine.ensure_order(r)?;
        let sup = engine.term_sup(r, m);
        if sup > 0.0 {
            let candidate = (sup * quad::gamma_one_plus_half(r) / rho.powi(r as i32))
                .powf(1.0 / (r as f64 + 1.0));
            c1_fit = c1_fit.max(candidate);
        }
        if sup < policy.term_norm_threshold {
            converged = true;
            break;
        }
        value += engine.term_at(r, m, y)?;
        orders_used = r;
    }
    let c1 = policy
        .gamma_bound_constants
        .map(|(_, c1)| c1)
        .unwrap_or(c1_fit);
    Ok(SeriesValue {
        value,
        truncation_estimate: truncation_tail(c1, rho, orders_used),
        orders_used,
        converged,
    })
}

/// [`diffusion_density`] across many terminal points sharing one ladder.
/// The truncation order, convergence flag and tail estimate are decided
/// once from the term sup-norms (exactly as in the scalar version); each
/// target then sums the same retained orders.
pub fn density_profile(
    model: &ModelSpec,
    s: f64,
    t: f64,
    x: &[f64],
    targets: &[Vec<f64>],
    policy: &TruncationPolicy,
    spec: &QuadratureSpec,
) -> Result<Vec<SeriesValue>> {
    policy.validate()?;
    let mut engine = LadderEngine::new(model, s, t, x, spec)?;
    let m = engine.steps();
    let rho = (t - s).sqrt();
    let mut retained = Vec::new();
    let mut converged = false;
    let mut c1_fit = 0.0f64;
    for r in 1..=policy.max_order {
        engine.ensure_order(r)?;
        let sup = engine.term_sup(r, m);
        if sup > 0.0 {
            let candidate = (sup * quad::gamma_one_plus_half(r) / rho.powi(r as i32))
                .powf(1.0 / (r as f64 + 1.0));
            c1_fit = c1_fit.max(candidate);
        }
        if sup < policy.term_norm_threshold {
            converged = true;
            break;
        }
        retained.push(r);
    }
    let orders_used = retained.last().copied().unwrap_or(0);
    let c1 = policy
        .gamma_bound_constants
        .map(|(_, c1)| c1)
        .unwrap_or(c1_fit);
    let truncation_estimate = truncation_tail(c1, rho, orders_used);
    let mut out = Vec::with_capacity(targets.len());
    for y in targets {
        let mut value = engine.term_at(0, m, y)?;
        for &r in &retained {
            value += engine.term_at(r, m, y)?;
        }
        out.push(SeriesValue {
            value,
            truncation_estimate,
            orders_used,
            converged,
        });
    }
    Ok(out)
}

/// Direct evaluation of the first-order term `(ptilde ox H)(s, t, x, y)`:
/// the time integral is split at the midpoint and each half is mapped by
/// `distance-to-endpoint = v^2` (the integrand is smooth in `v`), while the
/// inner spatial integral runs on a product-scaled window with both factors
/// in closed form. Grid-free, so it stays accurate for arbitrarily short
/// windows; the ladder uses it for its first panel.
pub fn first_order_term(model: &ModelSpec, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let d = model.dim();
    if x.len() != d || y.len() != d {
        return Err(Error::InvalidArgument(
            "evaluation points do not match the model dimension".into(),
        ));
    }
    if !(t > s) {
        return Err(Error::InvalidArgument(format!(
            "time window [{s}, {t}] is empty"
        )));
    }
    let bounds = model.bounds();
    let gl = quad::gauss_legendre_16();
    let mid = 0.5 * (s + t);
    let mut total = 0.0;
    for left_half in [true, false] {
        let vmax = if left_half {
            (mid - s).sqrt()
        } else {
            (t - mid).sqrt()
        };
        for (&vb, &wb) in gl.nodes.iter().zip(&gl.weights) {
            // map [-1, 1] onto [0, vmax]
            let v = 0.5 * vmax * (vb + 1.0);
            let w = 0.5 * vmax * wb;
            let u = if left_half { s + v * v } else { t - v * v };
            total += w * 2.0 * v * first_order_inner(model, &bounds, s, u, t, x, y)?;
        }
    }
    Ok(total)
}

fn first_order_inner(
    model: &ModelSpec,
    bounds: &crate::model::CoefficientBounds,
    s: f64,
    u: f64,
    t: f64,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    let d = model.dim();
    let ev_right = GaussianEval::new(model, u, t, y)?;
    let at_y = CoeffValues::at(model, u, y);
    let wf2 = ((u - s) * bounds.sigma_star_star).max(1e-300);
    let wh2 = ((t - u) * bounds.sigma_star_star).max(1e-300);
    let prec = 1.0 / wf2 + 1.0 / wh2;
    let s_prod = prec.powf(-0.5);
    let mut drift_x = vec![0.0; d];
    model.coeffs.drift(s, x, &mut drift_x);
    let center: Vec<f64> = (0..d)
        .map(|a| {
            let cf = x[a] + (u - s) * drift_x[a];
            let ch = y[a] - ev_right.params.integrated_drift[a];
            (cf / wf2 + ch / wh2) / prec
        })
        .collect();
    let pts = scaled_axis_points(d);
    let hstep = 2.0 * SCALED_WINDOW / (pts - 1) as f64;
    let w1 = quad::simpson_weights(pts, hstep * s_prod)?;
    if d == 1 {
        let mut acc = 0.0;
        for (q, &wq) in w1.iter().enumerate() {
            let z = center[0] + (q as f64 * hstep - SCALED_WINDOW) * s_prod;
            let ev_left = GaussianEval::new(model, s, u, &[z])?;
            let pv = ev_left.density1(x[0], z);
            if pv == 0.0 {
                continue;
            }
            let at_z = CoeffValues::at(model, u, &[z]);
            let hv = kernel_h1_eval(
                at_z.sigma[0],
                at_z.drift[0],
                at_y.sigma[0],
                at_y.drift[0],
                &ev_right,
                z,
                y[0],
            );
            acc += wq * pv * hv;
        }
        Ok(acc)
    } else {
        let mut acc = 0.0;
        let mut z = vec![0.0; d];
        for q0 in 0..pts {
            z[0] = center[0] + (q0 as f64 * hstep - SCALED_WINDOW) * s_prod;
            for q1 in 0..pts {
                z[1] = center[1] + (q1 as f64 * hstep - SCALED_WINDOW) * s_prod;
                let ev_left = GaussianEval::new(model, s, u, &z)?;
                let pv = ev_left.density(x, &z);
                if pv == 0.0 {
                    continue;
                }
                let at_z = CoeffValues::at(model, u, &z);
                acc += w1[q0] * w1[q1] * pv * kernel_h_eval(&at_z, &at_y, &ev_right, &z);
            }
        }
        Ok(acc)
    }
}

/// How the powers inside the kernel sum `Phi = sum_{r=1}^{R} H^(r)` are
/// composed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhiVariant {
    /// Continuous convolution powers (standalone use).
    Continuous,
    /// Powers composed by the discrete-time convolution with the given step
    /// (the form consumed by the correction pipeline).
    Discrete { step: f64 },
}

/// `sum_{r=1}^{r_max} H^(r)(s, t, z, zp)` under the chosen composition.
/// The continuous variant supports `r_max <= 2`: the second power is a
/// dedicated two-sided singular quadrature, and nothing downstream needs
/// higher continuous powers (the discrete variant composes any order).
pub fn phi_kernel(
    model: &ModelSpec,
    s: f64,
    t: f64,
    z: &[f64],
    zp: &[f64],
    r_max: usize,
    spec: &QuadratureSpec,
    variant: PhiVariant,
) -> Result<f64> {
    if r_max < 1 {
        return Err(Error::InvalidArgument(
            "kernel sum needs at least one power".into(),
        ));
    }
    if !(t > s) {
        return Err(Error::InvalidArgument(format!(
            "time window [{s}, {t}] is empty"
        )));
    }
    match variant {
        PhiVariant::Continuous => {
            if r_max > 2 {
                return Err(Error::InvalidArgument(
                    "continuous composition is supported up to the second power; \
                     use the discrete variant for higher orders"
                        .into(),
                ));
            }
            let mut total = kernel_h(model, s, t, z, zp)?;
            if r_max >= 2 {
                total += h_square_continuous(model, s, t, z, zp)?;
            }
            Ok(total)
        }
        PhiVariant::Discrete { step } => phi_discrete(model, s, t, z, zp, r_max, spec, step),
    }
}

/// `(H ox H)(s, t, z, zp)` with singularities at both time endpoints handled
/// by splitting at the midpoint and substituting `distance = v^2`; the inner
/// integral runs on a product-scaled window with per-node frozen Gaussians.
fn h_square_continuous(model: &ModelSpec, s: f64, t: f64, z: &[f64], zp: &[f64]) -> Result<f64> {
    let d = model.dim();
    let bounds = model.bounds();
    let gl = quad::gauss_legendre_16();
    let mid = 0.5 * (s + t);
    let at_z_left = CoeffValues::at(model, s, z);
    let mut total = 0.0;
    for left_half in [true, false] {
        let vmax = if left_half {
            (mid - s).sqrt()
        } else {
            (t - mid).sqrt()
        };
        for (&vb, &wb) in gl.nodes.iter().zip(&gl.weights) {
            let v = 0.5 * vmax * (vb + 1.0);
            let w = 0.5 * vmax * wb;
            let u = if left_half { s + v * v } else { t - v * v };

            let ev_right = GaussianEval::new(model, u, t, zp)?;
            let at_zp = CoeffValues::at(model, u, zp);
            let wf2 = ((u - s) * bounds.sigma_star_star).max(1e-300);
            let wh2 = ((t - u) * bounds.sigma_star_star).max(1e-300);
            let prec = 1.0 / wf2 + 1.0 / wh2;
            let s_prod = prec.powf(-0.5);
            let center: Vec<f64> = (0..d).map(|a| (z[a] / wf2 + zp[a] / wh2) / prec).collect();
            let pts = scaled_axis_points(d);
            let hstep = 2.0 * SCALED_WINDOW / (pts - 1) as f64;
            let w1 = quad::simpson_weights(pts, hstep * s_prod)?;
            let mut inner = 0.0;
            let mut wp = vec![0.0; d];
            let mut idx = vec![0usize; d];
            let npts = pts.pow(d as u32);
            for flat in 0..npts {
                let mut rem = flat;
                for a in (0..d).rev() {
                    idx[a] = rem % pts;
                    rem /= pts;
                }
                let mut wq = 1.0;
                for a in 0..d {
                    wp[a] = center[a] + (idx[a] as f64 * hstep - SCALED_WINDOW) * s_prod;
                    wq *= w1[idx[a]];
                }
                let ev_left = GaussianEval::new(model, s, u, &wp)?;
                let at_w = CoeffValues::at(model, s, &wp);
                let left = kernel_h_eval(&at_z_left, &at_w, &ev_left, z);
                if left == 0.0 {
                    continue;
                }
                let at_w_u = CoeffValues::at(model, u, &wp);
                let right = kernel_h_eval(&at_w_u, &at_zp, &ev_right, &wp);
                inner += wq * left * right;
            }
            total += w * 2.0 * v * inner;
        }
    }
    Ok(total)
}

/// Discrete-composition powers: `(f oxh g)(jh, kh, x, y) =
/// sum_{i=j}^{k-1} h int f(jh, ih, x, w) g(ih, kh, w, y) dw`, with a
/// coincident-time kernel factor treated as zero. Fields for each power are
/// materialized on the time grid and reused.
#[allow(clippy::too_many_arguments)]
fn phi_discrete(
    model: &ModelSpec,
    s: f64,
    t: f64,
    z: &[f64],
    zp: &[f64],
    r_max: usize,
    spec: &QuadratureSpec,
    step: f64,
) -> Result<f64> {
    spec.validate()?;
    if !(step > 0.0) {
        return Err(Error::InvalidArgument("time step must be positive".into()));
    }
    let ratio = (t - s) / step;
    let kk = ratio.round() as usize;
    if kk == 0 || (ratio - kk as f64).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "time step {step} does not divide the window [{s}, {t}]"
        )));
    }
    let mut total = kernel_h(model, s, t, z, zp)?;
    if r_max == 1 || kk == 1 {
        return Ok(total);
    }
    let d = model.dim();
    let hw = spec.half_width(t - s);
    let center: Vec<f64> = (0..d).map(|a| 0.5 * (z[a] + zp[a])).collect();
    let half: Vec<f64> = (0..d).map(|a| hw + 0.5 * (z[a] - zp[a]).abs()).collect();
    let grid = SpatialGrid::centered(&center, &half, spec.points_per_axis)?;
    let wz = grid.trapezoid_weights();
    let n = grid.len();
    let times: Vec<f64> = (0..=kk).map(|i| s + i as f64 * step).collect();

    // First power at the interior times, left argument pinned at (s, z).
    let mut cur: Vec<Vec<f64>> = vec![vec![0.0; n]; kk];
    let mut node = vec![0.0; d];
    for i in 1..kk {
        let mut vals = vec![0.0; n];
        for (g, val) in vals.iter_mut().enumerate() {
            grid.node(g, &mut node);
            *val = kernel_h(model, s, times[i], z, &node)?;
        }
        cur[i] = vals;
    }

    for r in 2..=r_max {
        // Contribution of the r-th power at the final time and target point.
        let mut contrib = 0.0;
        for i in 1..kk {
            let ev = GaussianEval::new(model, times[i], t, zp)?;
            let at_zp = CoeffValues::at(model, times[i], zp);
            let mut inner = 0.0;
            for g in 0..n {
                let f = cur[i][g];
                if f == 0.0 {
                    continue;
                }
                grid.node(g, &mut node);
                let at_w = CoeffValues::at(model, times[i], &node);
                inner += wz[g] * f * kernel_h_eval(&at_w, &at_zp, &ev, &node);
            }
            contrib += step * inner;
        }
        total += contrib;
        if r == r_max {
            break;
        }
        // Fields of the r-th power at interior times, for the next level.
        let mut next: Vec<Vec<f64>> = vec![vec![0.0; n]; kk];
        let mut ynode = vec![0.0; d];
        for k2 in 2..kk {
            let mut vals = vec![0.0; n];
            for (gy, val) in vals.iter_mut().enumerate() {
                grid.node(gy, &mut ynode);
                let mut acc = 0.0;
                for i in 1..k2 {
                    let ev = GaussianEval::new(model, times[i], times[k2], &ynode)?;
                    let at_y = CoeffValues::at(model, times[i], &ynode);
                    let mut inner = 0.0;
                    for g in 0..n {
                        let f = cur[i][g];
                        if f == 0.0 {
                            continue;
                        }
                        grid.node(g, &mut node);
                        let at_w = CoeffValues::at(model, times[i], &node);
                        inner += wz[g] * f * kernel_h_eval(&at_w, &at_y, &ev, &node);
                    }
                    acc += step * inner;
                }
                *val = acc;
            }
            next[k2] = vals;
        }
        cur = next;
    }
    Ok(total)
}
