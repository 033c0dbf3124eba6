//! Frozen Gaussian transition densities and the analytic perturbation
//! kernels built from them.
//!
//! Freezing the coefficients at the terminal point `y` turns the
//! transition density into an explicit Gaussian whose mean shift and
//! covariance are time integrals of the coefficients. Everything here is
//! closed-form: spatial derivatives up to order 6 come from a Hermite
//! recursion against the precision matrix, so no finite differencing
//! enters the kernels themselves.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::quad::gauss_legendre_16;

/// Highest spatial derivative order the Hermite recursion is exercised
/// (and tested) at.
pub const MAX_DERIVATIVE_ORDER: usize = 6;

/// Time-integrated coefficients of a frozen window `(s, t]` at freeze
/// point `y`.
#[derive(Debug, Clone)]
pub struct FrozenParams {
    pub start_s: f64,
    pub end_t: f64,
    pub freeze_point: Vec<f64>,
    /// `int_s^t m(u, y) du`, one entry per axis.
    pub integrated_drift: Vec<f64>,
    /// `int_s^t sigma(u, y) du`, row-major `d x d`.
    pub integrated_cov: Vec<f64>,
}

impl FrozenParams {
    pub fn dim(&self) -> usize {
        self.freeze_point.len()
    }
}

/// Integrates the coefficients over `(s, t)` at the freeze point.
///
/// 16-point Gauss-Legendre with one adaptive bisection level: the whole
/// panel is compared against its two halves and the refined value wins
/// when they disagree. Exact for polynomial-in-time coefficients of
/// degree <= 31; time-homogeneous fields short-circuit to `(t-s) * value`.
pub fn integrated_coeffs(model: &ModelSpec, s: f64, t: f64, y: &[f64]) -> Result<FrozenParams> {
    if !(s < t) {
        return Err(Error::InvalidArgument(format!(
            "frozen window needs s < t, got s={s}, t={t}"
        )));
    }
    let d = model.dim();
    if y.len() != d {
        return Err(Error::InvalidArgument(
            "freeze point dimension mismatch".into(),
        ));
    }
    let mut drift = vec![0.0; d];
    let mut cov = vec![0.0; d * d];
    if model.coeffs.time_homogeneous() {
        model.coeffs.drift(s, y, &mut drift);
        model.coeffs.diffusion(s, y, &mut cov);
        let dt = t - s;
        drift.iter_mut().for_each(|v| *v *= dt);
        cov.iter_mut().for_each(|v| *v *= dt);
    } else {
        let len = d + d * d;
        let mut whole = vec![0.0; len];
        gl16_panel(model, s, t, y, &mut whole);
        let mut halves = vec![0.0; len];
        let mid = 0.5 * (s + t);
        gl16_panel(model, s, mid, y, &mut halves);
        gl16_panel(model, mid, t, y, &mut halves);
        let scale = halves.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let refine = whole
            .iter()
            .zip(&halves)
            .any(|(a, b)| (a - b).abs() > 1e-12 * scale);
        let chosen = if refine { &halves } else { &whole };
        drift.copy_from_slice(&chosen[..d]);
        cov.copy_from_slice(&chosen[d..]);
    }
    Ok(FrozenParams {
        start_s: s,
        end_t: t,
        freeze_point: y.to_vec(),
        integrated_drift: drift,
        integrated_cov: cov,
    })
}

/// Accumulates `(drift, diffusion)` integrals over one GL16 panel.
fn gl16_panel(model: &ModelSpec, a: f64, b: f64, y: &[f64], acc: &mut [f64]) {
    let d = model.dim();
    let rule = gauss_legendre_16();
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut dbuf = vec![0.0; d];
    let mut sbuf = vec![0.0; d * d];
    for (&xi, &wi) in rule.nodes.iter().zip(&rule.weights) {
        let u = c + h * xi;
        let w = wi * h;
        model.coeffs.drift(u, y, &mut dbuf);
        model.coeffs.diffusion(u, y, &mut sbuf);
        for i in 0..d {
            acc[i] += w * dbuf[i];
        }
        for i in 0..d * d {
            acc[d + i] += w * sbuf[i];
        }
    }
}

/// A frozen Gaussian ready for evaluation: precision matrix and
/// normalizer precomputed from [`FrozenParams`].
#[derive(Debug, Clone)]
pub struct GaussianEval {
    pub params: FrozenParams,
    dim: usize,
    /// Inverse of the integrated covariance, row-major.
    precision: Vec<f64>,
    /// `(2 pi)^{-d/2} det^{-1/2}`.
    normalizer: f64,
}

impl GaussianEval {
    pub fn new(model: &ModelSpec, s: f64, t: f64, y: &[f64]) -> Result<Self> {
        Self::from_params(integrated_coeffs(model, s, t, y)?)
    }

    pub fn from_params(params: FrozenParams) -> Result<Self> {
        let d = params.dim();
        if params.integrated_drift.len() != d || params.integrated_cov.len() != d * d {
            return Err(Error::InvalidArgument(
                "frozen parameter shapes disagree with the freeze point".into(),
            ));
        }
        if d == 1 {
            let v = params.integrated_cov[0];
            if !(v > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "integrated covariance {v} is not positive"
                )));
            }
            let normalizer = 1.0 / (2.0 * std::f64::consts::PI * v).sqrt();
            return Ok(Self {
                params,
                dim: 1,
                precision: vec![1.0 / v],
                normalizer,
            });
        }
        let cov = DMatrix::from_row_slice(d, d, &params.integrated_cov);
        let chol = cov.cholesky().ok_or_else(|| {
            Error::InvalidArgument("integrated covariance is not positive definite".into())
        })?;
        let det: f64 = chol.l().diagonal().iter().map(|v| v * v).product();
        let inv = chol.inverse();
        let normalizer = 1.0 / ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt();
        let mut precision = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                precision[i * d + j] = inv[(i, j)];
            }
        }
        Ok(Self {
            params,
            dim: d,
            precision,
            normalizer,
        })
    }

    /// Builds directly from moments (used by the chain closed forms where
    /// the "integrals" are Riemann sums over grid steps).
    pub fn from_moments(
        s: f64,
        t: f64,
        freeze_point: &[f64],
        integrated_drift: &[f64],
        integrated_cov: &[f64],
    ) -> Result<Self> {
        Self::from_params(FrozenParams {
            start_s: s,
            end_t: t,
            freeze_point: freeze_point.to_vec(),
            integrated_drift: integrated_drift.to_vec(),
            integrated_cov: integrated_cov.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    pub fn precision(&self) -> &[f64] {
        &self.precision
    }

    /// Gaussian density in the first spatial slot: the law of
    /// `x + integrated_drift + N(0, integrated_cov)` evaluated at `y`.
    pub fn density(&self, x: &[f64], y: &[f64]) -> f64 {
        if self.dim == 1 {
            return self.density1(x[0], y[0]);
        }
        let d = self.dim;
        let mut quad = 0.0;
        for i in 0..d {
            let wi = y[i] - x[i] - self.params.integrated_drift[i];
            for j in 0..d {
                let wj = y[j] - x[j] - self.params.integrated_drift[j];
                quad += wi * self.precision[i * d + j] * wj;
            }
        }
        self.normalizer * (-0.5 * quad).exp()
    }

    /// Scalar fast path of [`Self::density`].
    #[inline]
    pub fn density1(&self, x: f64, y: f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        let w = y - x - self.params.integrated_drift[0];
        self.normalizer * (-0.5 * w * w * self.precision[0]).exp()
    }

    /// Density together with its first and second derivatives in `x`
    /// (scalar path): returns `(p, p', p'')`.
    #[inline]
    pub fn density_with_derivs1(&self, x: f64, y: f64) -> (f64, f64, f64) {
        debug_assert_eq!(self.dim, 1);
        let p = self.precision[0];
        let w = y - x - self.params.integrated_drift[0];
        let u = p * w;
        let dens = self.normalizer * (-0.5 * w * u).exp();
        (dens, u * dens, (u * u - p) * dens)
    }

    /// First four derivatives in `x` (scalar path):
    /// `(p, p', p'', p''', p'''')`.
    #[inline]
    pub fn density_with_derivs4(&self, x: f64, y: f64) -> (f64, f64, f64, f64, f64) {
        debug_assert_eq!(self.dim, 1);
        let p = self.precision[0];
        let w = y - x - self.params.integrated_drift[0];
        let u = p * w;
        let u2 = u * u;
        let dens = self.normalizer * (-0.5 * w * u).exp();
        (
            dens,
            u * dens,
            (u2 - p) * dens,
            u * (u2 - 3.0 * p) * dens,
            (u2 * u2 - 6.0 * p * u2 + 3.0 * p * p) * dens,
        )
    }

    /// Analytic spatial derivative `D^nu_x` of the density, `|nu| <= 6`.
    pub fn derivative(&self, nu: &[usize], x: &[f64], y: &[f64]) -> Result<f64> {
        let d = self.dim;
        if nu.len() != d {
            return Err(Error::InvalidArgument(
                "derivative multi-index length must equal the dimension".into(),
            ));
        }
        let order: usize = nu.iter().sum();
        if order > MAX_DERIVATIVE_ORDER {
            return Err(Error::InvalidArgument(format!(
                "derivative order {order} exceeds the supported maximum {MAX_DERIVATIVE_ORDER}"
            )));
        }
        if d == 1 {
            let p = self.precision[0];
            let w = y[0] - x[0] - self.params.integrated_drift[0];
            let u = p * w;
            let dens = self.normalizer * (-0.5 * w * u).exp();
            let u2 = u * u;
            let poly = match order {
                0 => 1.0,
                1 => u,
                2 => u2 - p,
                3 => u * (u2 - 3.0 * p),
                4 => u2 * u2 - 6.0 * p * u2 + 3.0 * p * p,
                5 => u * (u2 * u2 - 10.0 * p * u2 + 15.0 * p * p),
                _ => u2 * u2 * u2 - 15.0 * p * u2 * u2 + 45.0 * p * p * u2 - 15.0 * p * p * p,
            };
            return Ok(poly * dens);
        }
        // Generic path: u = P (y - x - drift); the Hermite coefficient
        // array of D^nu against the precision matrix, evaluated at u.
        let mut w = vec![0.0; d];
        for i in 0..d {
            w[i] = y[i] - x[i] - self.params.integrated_drift[i];
        }
        let mut u = vec![0.0; d];
        let mut quad = 0.0;
        for i in 0..d {
            for j in 0..d {
                u[i] += self.precision[i * d + j] * w[j];
            }
        }
        for i in 0..d {
            quad += w[i] * u[i];
        }
        let dens = self.normalizer * (-0.5 * quad).exp();
        if order == 0 {
            return Ok(dens);
        }
        let coeffs = hermite_coeffs(d, nu, &self.precision);
        Ok(eval_dense_poly(d, order + 1, &coeffs, &u) * dens)
    }
}

/// Dense coefficient array of the Hermite polynomial `h_nu(u)` defined by
/// `D^nu_x pdens = h_nu(u) pdens` with `u = P (y - x - drift)`:
/// `h_0 = 1`, `h_{nu+e_i} = u_i h_nu - sum_j P_ij dh_nu/du_j`.
///
/// Storage is row-major over per-axis `u`-powers with width `|nu| + 1`.
fn hermite_coeffs(dim: usize, nu: &[usize], precision: &[f64]) -> Vec<f64> {
    let order: usize = nu.iter().sum();
    let width = order + 1;
    let size = width.pow(dim as u32);
    let mut cur = vec![0.0; size];
    cur[0] = 1.0;
    let mut degs = vec![0usize; dim];
    let stride = |axis: usize| width.pow((dim - 1 - axis) as u32);
    for axis in 0..dim {
        for _ in 0..nu[axis] {
            let mut next = vec![0.0; size];
            for flat in 0..size {
                let c = cur[flat];
                if c == 0.0 {
                    continue;
                }
                let mut rem = flat;
                for a in (0..dim).rev() {
                    degs[a] = rem % width;
                    rem /= width;
                }
                // u_axis * h
                next[flat + stride(axis)] += c;
                // - sum_j P[axis][j] dh/du_j
                for j in 0..dim {
                    if degs[j] >= 1 {
                        next[flat - stride(j)] -= precision[axis * dim + j] * degs[j] as f64 * c;
                    }
                }
            }
            cur = next;
        }
    }
    cur
}

fn eval_dense_poly(dim: usize, width: usize, coeffs: &[f64], u: &[f64]) -> f64 {
    // Precompute u powers per axis.
    let mut powers = vec![1.0; dim * width];
    for a in 0..dim {
        for p in 1..width {
            powers[a * width + p] = powers[a * width + p - 1] * u[a];
        }
    }
    let mut total = 0.0;
    for (flat, &c) in coeffs.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let mut rem = flat;
        let mut term = c;
        for a in (0..dim).rev() {
            let deg = rem % width;
            rem /= width;
            term *= powers[a * width + deg];
        }
        total += term;
    }
    total
}

/// `pdens(s, t, x, y)` with coefficients frozen at `y`.
pub fn frozen_density(model: &ModelSpec, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(GaussianEval::new(model, s, t, y)?.density(x, y))
}

/// Analytic `D^nu_x` of the frozen density, `|nu| <= 6`.
pub fn frozen_density_derivative(
    model: &ModelSpec,
    s: f64,
    t: f64,
    x: &[f64],
    y: &[f64],
    nu: &[usize],
) -> Result<f64> {
    GaussianEval::new(model, s, t, y)?.derivative(nu, x, y)
}

// ---------------------------------------------------------------------------
// Perturbation kernels
// ---------------------------------------------------------------------------

/// Coefficient values at one space-time point (buffer for kernel hot
/// paths; `sigma` is row-major `d x d`).
#[derive(Debug, Clone)]
pub struct CoeffValues {
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl CoeffValues {
    pub fn at(model: &ModelSpec, s: f64, v: &[f64]) -> Self {
        let d = model.dim();
        let mut drift = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        model.coeffs.drift(s, v, &mut drift);
        model.coeffs.diffusion(s, v, &mut sigma);
        Self { drift, sigma }
    }

    /// `l`-th time derivatives instead of values.
    pub fn time_deriv_at(model: &ModelSpec, l: usize, s: f64, v: &[f64]) -> Self {
        let d = model.dim();
        let mut drift = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        model.coeffs.drift_time_deriv(l, s, v, &mut drift);
        model.coeffs.diffusion_time_deriv(l, s, v, &mut sigma);
        Self { drift, sigma }
    }
}

/// Difference-of-generators kernel applied to the frozen density:
/// `H = 1/2 sum_ij (sigma_ij(s,x) - sigma_ij(s,y)) d2p/dx_i dx_j
///    + sum_i (m_i(s,x) - m_i(s,y)) dp/dx_i`,
/// with `y` both the freeze point and the comparison point, so `H` is
/// exactly zero at `x = y`.
pub fn kernel_h(model: &ModelSpec, s: f64, t: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    let eval = GaussianEval::new(model, s, t, y)?;
    let at_x = CoeffValues::at(model, s, x);
    let at_y = CoeffValues::at(model, s, y);
    Ok(kernel_h_eval(&at_x, &at_y, &eval, x))
}

/// Hot-path form of [`kernel_h`]: coefficient values and the frozen
/// Gaussian are precomputed by the caller; the evaluation point `y` is
/// the freeze point stored in `eval`.
pub fn kernel_h_eval(
    at_x: &CoeffValues,
    at_y: &CoeffValues,
    eval: &GaussianEval,
    x: &[f64],
) -> f64 {
    let d = eval.dim();
    let y = &eval.params.freeze_point;
    if d == 1 {
        return kernel_h1_eval(
            at_x.sigma[0],
            at_x.drift[0],
            at_y.sigma[0],
            at_y.drift[0],
            eval,
            x[0],
            y[0],
        );
    }
    let p = &eval.precision;
    let mut w = vec![0.0; d];
    let mut u = vec![0.0; d];
    for i in 0..d {
        w[i] = y[i] - x[i] - eval.params.integrated_drift[i];
    }
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            u[i] += p[i * d + j] * w[j];
        }
    }
    for i in 0..d {
        quad += w[i] * u[i];
    }
    let dens = eval.normalizer * (-0.5 * quad).exp();
    let mut total = 0.0;
    for i in 0..d {
        total += (at_x.drift[i] - at_y.drift[i]) * u[i] * dens;
        for j in 0..d {
            let dsig = at_x.sigma[i * d + j] - at_y.sigma[i * d + j];
            if dsig != 0.0 {
                total += 0.5 * dsig * (u[i] * u[j] - p[i * d + j]) * dens;
            }
        }
    }
    total
}

/// Scalar fast path of the kernel; all coefficient values supplied.
#[inline]
pub fn kernel_h1_eval(
    sigma_x: f64,
    drift_x: f64,
    sigma_y: f64,
    drift_y: f64,
    eval: &GaussianEval,
    x: f64,
    y: f64,
) -> f64 {
    let (_, d1, d2) = {
        let p = eval.precision[0];
        let w = y - x - eval.params.integrated_drift[0];
        let u = p * w;
        let dens = eval.normalizer * (-0.5 * w * u).exp();
        (dens, u * dens, (u * u - p) * dens)
    };
    0.5 * (sigma_x - sigma_y) * d2 + (drift_x - drift_y) * d1
}

/// Time-differentiated kernel: the same difference structure with the
/// `l`-th time derivatives of the coefficients, `l` in `{1, 2}`.
pub fn kernel_hl(model: &ModelSpec, l: usize, s: f64, t: f64, v: &[f64], z: &[f64]) -> Result<f64> {
    if !(l == 1 || l == 2) {
        return Err(Error::InvalidArgument(format!(
            "time-derivative order {l} must be 1 or 2"
        )));
    }
    let eval = GaussianEval::new(model, s, t, z)?;
    let at_v = CoeffValues::time_deriv_at(model, l, s, v);
    let at_z = CoeffValues::time_deriv_at(model, l, s, z);
    Ok(kernel_h_eval(&at_v, &at_z, &eval, v))
}

/// Hot-path form of [`kernel_hl`] with precomputed time-derivative values.
pub fn kernel_hl_eval(
    deriv_v: &CoeffValues,
    deriv_z: &CoeffValues,
    eval: &GaussianEval,
    v: &[f64],
) -> f64 {
    kernel_h_eval(deriv_v, deriv_z, eval, v)
}

/// Coefficient 2-jet at one point: values plus first and second spatial
/// derivatives (needed by the iterated-generator kernel).
#[derive(Debug, Clone)]
pub struct CoeffJet {
    pub drift: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `d_a m_k` indexed `[a][k]`.
    pub ddrift: Vec<Vec<f64>>,
    /// `d_a sigma_ij` indexed `[a][i*d+j]`.
    pub dsigma: Vec<Vec<f64>>,
    /// `d_a d_b m_k` indexed `[a*d+b][k]`.
    pub d2drift: Vec<Vec<f64>>,
    /// `d_a d_b sigma_ij` indexed `[a*d+b][i*d+j]`.
    pub d2sigma: Vec<Vec<f64>>,
}

impl CoeffJet {
    pub fn at(model: &ModelSpec, s: f64, v: &[f64]) -> Self {
        let d = model.dim();
        let mut drift = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        model.coeffs.drift(s, v, &mut drift);
        model.coeffs.diffusion(s, v, &mut sigma);
        let mut nu = vec![0usize; d];
        let mut ddrift = Vec::with_capacity(d);
        let mut dsigma = Vec::with_capacity(d);
        for a in 0..d {
            nu.fill(0);
            nu[a] = 1;
            let mut db = vec![0.0; d];
            let mut sb = vec![0.0; d * d];
            model.coeffs.drift_spatial_deriv(s, v, &nu, &mut db);
            model.coeffs.diffusion_spatial_deriv(s, v, &nu, &mut sb);
            ddrift.push(db);
            dsigma.push(sb);
        }
        let mut d2drift = Vec::with_capacity(d * d);
        let mut d2sigma = Vec::with_capacity(d * d);
        for a in 0..d {
            for b in 0..d {
                nu.fill(0);
                nu[a] += 1;
                nu[b] += 1;
                let mut db = vec![0.0; d];
                let mut sb = vec![0.0; d * d];
                model.coeffs.drift_spatial_deriv(s, v, &nu, &mut db);
                model.coeffs.diffusion_spatial_deriv(s, v, &nu, &mut sb);
                d2drift.push(db);
                d2sigma.push(sb);
            }
        }
        Self {
            drift,
            sigma,
            ddrift,
            dsigma,
            d2drift,
            d2sigma,
        }
    }
}

/// Iterated-generator kernel `A0 = L(L p) - 2 L(Lf p) + Lf(Lf p)` applied
/// to the frozen density, where `L` uses the coefficients at `(s, .)` and
/// `Lf` freezes them at `z`. Outer derivatives expand by the product rule
/// with analytic coefficient derivatives; the density derivatives (orders
/// up to 4) are analytic.
pub fn kernel_a0(model: &ModelSpec, s: f64, t: f64, v: &[f64], z: &[f64]) -> Result<f64> {
    let eval = GaussianEval::new(model, s, t, z)?;
    let jet = CoeffJet::at(model, s, v);
    let at_z = CoeffValues::at(model, s, z);
    kernel_a0_eval(&jet, &at_z, &eval, v)
}

/// Hot-path form of [`kernel_a0`] with precomputed jets.
pub fn kernel_a0_eval(
    jet: &CoeffJet,
    at_z: &CoeffValues,
    eval: &GaussianEval,
    v: &[f64],
) -> Result<f64> {
    let d = eval.dim();
    if d == 1 {
        return Ok(kernel_a0_1_eval(
            jet.sigma[0],
            jet.dsigma[0][0],
            jet.d2sigma[0][0],
            jet.drift[0],
            jet.ddrift[0][0],
            jet.d2drift[0][0],
            at_z.sigma[0],
            at_z.drift[0],
            eval,
            v[0],
        ));
    }
    let z = &eval.params.freeze_point;
    // Density derivative tensors up to order 4 at (v, z).
    let mut nu = vec![0usize; d];
    let g1 = |i: usize, nu: &mut [usize]| -> Result<f64> {
        nu.fill(0);
        nu[i] += 1;
        eval.derivative(nu, v, z)
    };
    let mut g1t = vec![0.0; d];
    for i in 0..d {
        g1t[i] = g1(i, &mut nu)?;
    }
    let mut g2t = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            nu.fill(0);
            nu[i] += 1;
            nu[j] += 1;
            g2t[i * d + j] = eval.derivative(&nu, v, z)?;
        }
    }
    let mut g3t = vec![0.0; d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                nu.fill(0);
                nu[i] += 1;
                nu[j] += 1;
                nu[k] += 1;
                g3t[(i * d + j) * d + k] = eval.derivative(&nu, v, z)?;
            }
        }
    }
    let mut g4t = vec![0.0; d * d * d * d];
    for i in 0..d {
        for j in 0..d {
            for k in 0..d {
                for l in 0..d {
                    nu.fill(0);
                    nu[i] += 1;
                    nu[j] += 1;
                    nu[k] += 1;
                    nu[l] += 1;
                    g4t[((i * d + j) * d + k) * d + l] = eval.derivative(&nu, v, z)?;
                }
            }
        }
    }

    // d_i [L p] and d2_ij [L p] by the product rule.
    let d1l = |i: usize| -> f64 {
        let mut acc = 0.0;
        for k in 0..d {
            for l in 0..d {
                acc += 0.5
                    * (jet.dsigma[i][k * d + l] * g2t[k * d + l]
                        + jet.sigma[k * d + l] * g3t[(i * d + k) * d + l]);
            }
        }
        for k in 0..d {
            acc += jet.ddrift[i][k] * g1t[k] + jet.drift[k] * g2t[i * d + k];
        }
        acc
    };
    let d2l = |i: usize, j: usize| -> f64 {
        let mut acc = 0.0;
        for k in 0..d {
            for l in 0..d {
                acc += 0.5
                    * (jet.d2sigma[i * d + j][k * d + l] * g2t[k * d + l]
                        + jet.dsigma[i][k * d + l] * g3t[(j * d + k) * d + l]
                        + jet.dsigma[j][k * d + l] * g3t[(i * d + k) * d + l]
                        + jet.sigma[k * d + l] * g4t[((i * d + j) * d + k) * d + l]);
            }
        }
        for k in 0..d {
            acc += jet.d2drift[i * d + j][k] * g1t[k]
                + jet.ddrift[i][k] * g2t[j * d + k]
                + jet.ddrift[j][k] * g2t[i * d + k]
                + jet.drift[k] * g3t[(i * d + j) * d + k];
        }
        acc
    };
    // Frozen inner application has constant coefficients.
    let d1lf = |i: usize| -> f64 {
        let mut acc = 0.0;
        for k in 0..d {
            for l in 0..d {
                acc += 0.5 * at_z.sigma[k * d + l] * g3t[(i * d + k) * d + l];
            }
        }
        for k in 0..d {
            acc += at_z.drift[k] * g2t[i * d + k];
        }
        acc
    };
    let d2lf = |i: usize, j: usize| -> f64 {
        let mut acc = 0.0;
        for k in 0..d {
            for l in 0..d {
                acc += 0.5 * at_z.sigma[k * d + l] * g4t[((i * d + j) * d + k) * d + l];
            }
        }
        for k in 0..d {
            acc += at_z.drift[k] * g3t[(i * d + j) * d + k];
        }
        acc
    };

    let mut ll = 0.0;
    let mut llf = 0.0;
    let mut lflf = 0.0;
    for i in 0..d {
        ll += jet.drift[i] * d1l(i);
        llf += jet.drift[i] * d1lf(i);
        lflf += at_z.drift[i] * d1lf(i);
        for j in 0..d {
            ll += 0.5 * jet.sigma[i * d + j] * d2l(i, j);
            llf += 0.5 * jet.sigma[i * d + j] * d2lf(i, j);
            lflf += 0.5 * at_z.sigma[i * d + j] * d2lf(i, j);
        }
    }
    Ok(ll - 2.0 * llf + lflf)
}

/// Scalar fast path of the iterated-generator kernel.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn kernel_a0_1_eval(
    sigma: f64,
    dsigma: f64,
    d2sigma: f64,
    drift: f64,
    ddrift: f64,
    d2drift: f64,
    sigma_z: f64,
    drift_z: f64,
    eval: &GaussianEval,
    v: f64,
) -> f64 {
    let z = eval.params.freeze_point[0];
    let (_, p1, p2, p3, p4) = eval.density_with_derivs4(v, z);
    // (L p)' and (L p)'' by the product rule.
    let d1l = ddrift * p1 + drift * p2 + 0.5 * dsigma * p2 + 0.5 * sigma * p3;
    let d2l = d2drift * p1
        + 2.0 * ddrift * p2
        + drift * p3
        + 0.5 * d2sigma * p2
        + dsigma * p3
        + 0.5 * sigma * p4;
    let ll = drift * d1l + 0.5 * sigma * d2l;
    // Frozen inner application: constant coefficients.
    let d1lf = drift_z * p2 + 0.5 * sigma_z * p3;
    let d2lf = drift_z * p3 + 0.5 * sigma_z * p4;
    let llf = drift * d1lf + 0.5 * sigma * d2lf;
    let lflf = drift_z * d1lf + 0.5 * sigma_z * d2lf;
    ll - 2.0 * llf + lflf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        build_model, CoefficientBounds, CustomCoeffs, GaussianInnovations, ModelConfig,
    };
    use rand::{Rng, SeedableRng};
    use std::sync::Arc;

    fn constant1d() -> ModelSpec {
        build_model(&ModelConfig::family("constant")).unwrap()
    }

    fn sin1d() -> ModelSpec {
        build_model(&ModelConfig::family("sin1d")).unwrap()
    }

    /// sigma(u, x) = 1 + u, m = 0 (genuinely time-dependent).
    fn linear_time_model() -> ModelSpec {
        let coeffs = Arc::new(CustomCoeffs::new(
            1,
            |_t, _x, out: &mut [f64]| out[0] = 0.0,
            |t, _x, out: &mut [f64]| out[0] = 1.0 + t,
            CoefficientBounds {
                sigma_star: 0.9,
                sigma_star_star: 2.1,
                drift_sup: 0.0,
                derivative_sup: 2.2,
            },
            false,
        ));
        let inn = Arc::new(GaussianInnovations::new(coeffs.clone()));
        ModelSpec::from_parts("linear-time", coeffs, inn, 3).unwrap()
    }

    /// sigma(t, x) = 1 + 0.5 t sin x, m = 0 (time- and space-dependent).
    fn time_sin_model() -> ModelSpec {
        let coeffs = Arc::new(CustomCoeffs::new(
            1,
            |_t, _x, out: &mut [f64]| out[0] = 0.0,
            |t, x: &[f64], out: &mut [f64]| out[0] = 1.0 + 0.5 * t * x[0].sin(),
            CoefficientBounds {
                sigma_star: 0.45,
                sigma_star_star: 1.55,
                drift_sup: 0.0,
                derivative_sup: 1.6,
            },
            false,
        ));
        let inn = Arc::new(GaussianInnovations::new(coeffs.clone()));
        ModelSpec::from_parts("time-sin", coeffs, inn, 3).unwrap()
    }

    #[test]
    fn integrated_coeffs_constant_window() {
        let m = constant1d();
        let p = integrated_coeffs(&m, 0.0, 0.25, &[0.0]).unwrap();
        assert!((p.integrated_cov[0] - 0.25).abs() < 1e-15);
        assert_eq!(p.integrated_drift[0], 0.0);
    }

    #[test]
    fn integrated_coeffs_space_dependence_is_frozen() {
        // sigma(u, y) = 1 + 0.5 sin y at y = pi/2 is constant 1.5 in u.
        let m = sin1d();
        let p = integrated_coeffs(&m, 0.0, 0.2, &[std::f64::consts::FRAC_PI_2]).unwrap();
        assert!(
            (p.integrated_cov[0] - 0.3).abs() < 1e-14,
            "{}",
            p.integrated_cov[0]
        );
    }

    #[test]
    fn integrated_coeffs_linear_time() {
        let m = linear_time_model();
        let p = integrated_coeffs(&m, 0.0, 1.0, &[0.0]).unwrap();
        assert!(
            (p.integrated_cov[0] - 1.5).abs() < 1e-13,
            "{}",
            p.integrated_cov[0]
        );
    }

    #[test]
    fn integrated_coeffs_rejects_bad_window() {
        let m = constant1d();
        assert!(integrated_coeffs(&m, 0.5, 0.5, &[0.0]).is_err());
        assert!(integrated_coeffs(&m, 0.6, 0.5, &[0.0]).is_err());
    }

    #[test]
    fn window_additivity() {
        let m = time_sin_model();
        let y = [0.7];
        let left = integrated_coeffs(&m, 0.0, 0.3, &y).unwrap();
        let right = integrated_coeffs(&m, 0.3, 0.8, &y).unwrap();
        let whole = integrated_coeffs(&m, 0.0, 0.8, &y).unwrap();
        assert!(
            (left.integrated_cov[0] + right.integrated_cov[0] - whole.integrated_cov[0]).abs()
                < 1e-13
        );
        assert!(
            (left.integrated_drift[0] + right.integrated_drift[0] - whole.integrated_drift[0])
                .abs()
                < 1e-13
        );
    }

    #[test]
    fn density_standard_normal_at_mode() {
        let m = constant1d();
        let v = frozen_density(&m, 0.0, 1.0, &[0.0], &[0.0]).unwrap();
        assert!((v - 0.3989422804014327).abs() < 1e-12, "{v}");
    }

    #[test]
    fn density_quarter_variance_off_mode() {
        let m = constant1d();
        let v = frozen_density(&m, 0.0, 0.25, &[0.0], &[0.5]).unwrap();
        // N(0, 0.25) at 0.5.
        assert!((v - 0.48394144903828673).abs() < 1e-12, "{v}");
    }

    #[test]
    fn density_matches_directly_assembled_formula() {
        let m = sin1d();
        let (s, t, x, y) = (0.0, 0.1, 0.0, 0.3);
        let v = frozen_density(&m, s, t, &[x], &[y]).unwrap();
        let p = integrated_coeffs(&m, s, t, &[y]).unwrap();
        let (mi, vi) = (p.integrated_drift[0], p.integrated_cov[0]);
        let w = y - x - mi;
        let direct = (-0.5 * w * w / vi).exp() / (2.0 * std::f64::consts::PI * vi).sqrt();
        assert!((v - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn density_normalizes_in_its_first_slot() {
        let m = sin1d();
        let (s, t, y) = (0.0, 0.1, 0.3);
        let eval = GaussianEval::new(&m, s, t, &[y]).unwrap();
        let center = y - eval.params.integrated_drift[0];
        let half = 8.0 * ((t - s) * m.bounds().sigma_star_star).sqrt();
        let n = 4001;
        let h = 2.0 * half / (n - 1) as f64;
        let mut mass = 0.0;
        for i in 0..n {
            let x = center - half + i as f64 * h;
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            mass += w * h * eval.density1(x, y);
        }
        assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
    }

    #[test]
    fn first_derivative_vanishes_at_the_mode() {
        let m = sin1d();
        let eval = GaussianEval::new(&m, 0.0, 0.2, &[0.4]).unwrap();
        let mode = 0.4 - eval.params.integrated_drift[0];
        let d1 = eval.derivative(&[1], &[mode], &[0.4]).unwrap();
        assert_eq!(d1, 0.0);
    }

    #[test]
    fn standard_normal_second_derivative_at_mode() {
        let m = constant1d();
        let v = frozen_density_derivative(&m, 0.0, 1.0, &[0.0], &[0.0], &[2]).unwrap();
        assert!((v + 0.3989422804014327).abs() < 1e-12, "{v}");
    }

    #[test]
    fn order_beyond_six_is_rejected() {
        let m = constant1d();
        let err = frozen_density_derivative(&m, 0.0, 1.0, &[0.0], &[0.1], &[7]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn derivatives_match_high_order_finite_differences() {
        // 500 random admissible arguments, all |nu| <= 4: analytic vs
        // 4th-order central differences of the next-lower derivative.
        let m = sin1d();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let h = 1e-3;
        for _ in 0..500 {
            let s = rng.gen_range(0.0..0.4);
            let t = s + rng.gen_range(0.05..0.5);
            let x = rng.gen_range(-2.0..2.0);
            let y = rng.gen_range(-2.0..2.0);
            let order = rng.gen_range(1..=4usize);
            let eval = GaussianEval::new(&m, s, t, &[y]).unwrap();
            let lower = [order - 1];
            let f = |xq: f64| eval.derivative(&lower, &[xq], &[y]).unwrap();
            let fd =
                (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h);
            let got = eval.derivative(&[order], &[x], &[y]).unwrap();
            let tol = (1e-5 * fd.abs()).max(1e-8);
            assert!(
                (got - fd).abs() < tol,
                "order {order} at s={s}, t={t}, x={x}, y={y}: {got} vs {fd}"
            );
        }
    }

    #[test]
    fn hermite_recursion_matches_scalar_formulas_orders_5_and_6() {
        let m = sin1d();
        let eval = GaussianEval::new(&m, 0.0, 0.3, &[0.8]).unwrap();
        let (x, y) = (0.25, 0.8);
        let p = eval.precision()[0];
        let u = p * (y - x - eval.params.integrated_drift[0]);
        let dens = eval.density1(x, y);
        let h5 = u * (u.powi(4) - 10.0 * p * u * u + 15.0 * p * p);
        let h6 = u.powi(6) - 15.0 * p * u.powi(4) + 45.0 * p * p * u * u - 15.0 * p.powi(3);
        // Force the generic recursion through a 1-d slice of a 2-d model.
        let coeffs5 = hermite_coeffs(1, &[5], eval.precision());
        let coeffs6 = hermite_coeffs(1, &[6], eval.precision());
        let got5 = eval_dense_poly(1, 6, &coeffs5, &[u]) * dens;
        let got6 = eval_dense_poly(1, 7, &coeffs6, &[u]) * dens;
        assert!((got5 - h5 * dens).abs() < 1e-10 * (h5 * dens).abs().max(1.0));
        assert!((got6 - h6 * dens).abs() < 1e-10 * (h6 * dens).abs().max(1.0));
        assert!((eval.derivative(&[5], &[x], &[y]).unwrap() - h5 * dens).abs() < 1e-12);
        assert!((eval.derivative(&[6], &[x], &[y]).unwrap() - h6 * dens).abs() < 1e-12);
    }

    #[test]
    fn two_dimensional_derivatives_match_finite_differences() {
        let m = build_model(&ModelConfig {
            d: Some(2),
            ..ModelConfig::family("sin2d")
        })
        .unwrap();
        let eval = GaussianEval::new(&m, 0.0, 0.2, &[0.3, -0.4]).unwrap();
        let y = [0.3, -0.4];
        let x = [0.1, 0.2];
        let h = 1e-3;
        for nu in [[1usize, 0], [0, 1], [1, 1], [2, 0], [2, 1], [2, 2]] {
            let axis = if nu[0] > 0 { 0 } else { 1 };
            let mut lower = nu;
            lower[axis] -= 1;
            let f = |q: f64| {
                let mut xq = x;
                xq[axis] = q;
                eval.derivative(&lower, &xq, &y).unwrap()
            };
            let x0 = x[axis];
            let fd = (-f(x0 + 2.0 * h) + 8.0 * f(x0 + h) - 8.0 * f(x0 - h) + f(x0 - 2.0 * h))
                / (12.0 * h);
            let got = eval.derivative(&nu, &x, &y).unwrap();
            let tol = (1e-5 * fd.abs()).max(1e-8);
            assert!((got - fd).abs() < tol, "nu {nu:?}: {got} vs {fd}");
        }
    }

    #[test]
    fn kernel_h_vanishes_for_constant_coefficients() {
        let m = constant1d();
        let v = kernel_h(&m, 0.0, 0.3, &[0.2], &[0.9]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn kernel_h_is_exactly_zero_at_coincident_points() {
        let m = sin1d();
        let v = kernel_h(&m, 0.1, 0.4, &[0.7], &[0.7]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn kernel_h_matches_finite_difference_assembly() {
        let m = sin1d();
        let (s, t, x, y) = (0.0, 0.1, 0.2, 0.5);
        let got = kernel_h(&m, s, t, &[x], &[y]).unwrap();
        // Assemble from finite differences of the density itself.
        let h = 1e-3;
        let f = |q: f64| frozen_density(&m, s, t, &[q], &[y]).unwrap();
        let d1 = (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h);
        let d2 = (-f(x + 2.0 * h) + 16.0 * f(x + h) - 30.0 * f(x) + 16.0 * f(x - h)
            - f(x - 2.0 * h))
            / (12.0 * h * h);
        let want =
            0.5 * (m.sigma1(s, x) - m.sigma1(s, y)) * d2 + (m.drift1(s, x) - m.drift1(s, y)) * d1;
        assert!(
            (got - want).abs() < 1e-5 * want.abs().max(1e-3),
            "{got} vs {want}"
        );
    }

    #[test]
    fn kernel_hl_vanishes_for_time_homogeneous_models() {
        let m = sin1d();
        for l in [1, 2] {
            let v = kernel_hl(&m, l, 0.0, 0.2, &[0.3], &[0.9]).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn kernel_hl_vanishes_at_coincident_points() {
        let m = time_sin_model();
        let v = kernel_hl(&m, 1, 0.1, 0.3, &[0.4], &[0.4]).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn kernel_hl_matches_hand_assembly() {
        // sigma = 1 + 0.5 t sin x: d sigma/dt = 0.5 sin x exactly.
        let m = time_sin_model();
        let (s, t, v, z) = (0.2, 0.5, 0.3, 0.8);
        let got = kernel_hl(&m, 1, s, t, &[v], &[z]).unwrap();
        let eval = GaussianEval::new(&m, s, t, &[z]).unwrap();
        let d2 = eval.derivative(&[2], &[v], &[z]).unwrap();
        let want = 0.5 * (0.5 * v.sin() - 0.5 * z.sin()) * d2;
        assert!(
            (got - want).abs() < 1e-8 * want.abs().max(1e-6),
            "{got} vs {want}"
        );
    }

    #[test]
    fn kernel_hl_rejects_bad_order() {
        let m = sin1d();
        assert!(kernel_hl(&m, 3, 0.0, 0.1, &[0.0], &[0.5]).is_err());
        assert!(kernel_hl(&m, 0, 0.0, 0.1, &[0.0], &[0.5]).is_err());
    }

    #[test]
    fn kernel_a0_vanishes_for_constant_coefficients() {
        let m = constant1d();
        let v = kernel_a0(&m, 0.0, 0.2, &[0.3], &[0.9]).unwrap();
        assert!(v.abs() < 1e-14, "{v}");
    }

    #[test]
    fn kernel_a0_matches_collected_symbolic_expansion() {
        // Independent algebra: fully collected coefficients of the density
        // derivatives, including the quadratic leading terms in the
        // coefficient differences (4th- and 3rd-order parts).
        let m = sin1d();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = rng.gen_range(0.0..0.3);
            let t = s + rng.gen_range(0.05..0.4);
            let v = rng.gen_range(-1.5..1.5);
            let z = rng.gen_range(-1.5..1.5);
            let got = kernel_a0(&m, s, t, &[v], &[z]).unwrap();

            let eval = GaussianEval::new(&m, s, t, &[z]).unwrap();
            let (_, p1, p2, p3, p4) = eval.density_with_derivs4(v, z);
            let (sv, sz) = (m.sigma1(s, v), m.sigma1(s, z));
            let (mv, mz) = (m.drift1(s, v), m.drift1(s, z));
            let mut buf = [0.0];
            m.coeffs.diffusion_spatial_deriv(s, &[v], &[1], &mut buf);
            let dsv = buf[0];
            m.coeffs.diffusion_spatial_deriv(s, &[v], &[2], &mut buf);
            let d2sv = buf[0];
            m.coeffs.drift_spatial_deriv(s, &[v], &[1], &mut buf);
            let dmv = buf[0];
            m.coeffs.drift_spatial_deriv(s, &[v], &[2], &mut buf);
            let d2mv = buf[0];
            let want = 0.25 * (sv - sz).powi(2) * p4
                + ((sv - sz) * (mv - mz) + 0.5 * sv * dsv) * p3
                + ((mv - mz).powi(2) + 0.5 * mv * dsv + sv * dmv + 0.25 * sv * d2sv) * p2
                + (mv * dmv + 0.5 * sv * d2mv) * p1;
            let tol = 1e-10 * want.abs().max(1e-8);
            assert!(
                (got - want).abs() < tol,
                "{got} vs {want} at s={s} t={t} v={v} z={z}"
            );
        }
    }

    #[test]
    fn generic_a0_path_agrees_with_scalar_fast_path() {
        // Run the d-generic tensor assembly on a 1-d model and compare.
        let m = sin1d();
        let (s, t, v, z) = (0.05, 0.3, -0.6, 0.4);
        let eval = GaussianEval::new(&m, s, t, &[z]).unwrap();
        let jet = CoeffJet::at(&m, s, &[v]);
        let at_z = CoeffValues::at(&m, s, &[z]);
        let scalar = kernel_a0_eval(&jet, &at_z, &eval, &[v]).unwrap();
        // Force the tensor loops by a handmade 1x1 "generic" evaluation.
        let d1l = {
            let g2 = eval.derivative(&[2], &[v], &[z]).unwrap();
            let g3 = eval.derivative(&[3], &[v], &[z]).unwrap();
            let g1 = eval.derivative(&[1], &[v], &[z]).unwrap();
            0.5 * (jet.dsigma[0][0] * g2 + jet.sigma[0] * g3)
                + jet.ddrift[0][0] * g1
                + jet.drift[0] * g2
        };
        let d2l = {
            let g1 = eval.derivative(&[1], &[v], &[z]).unwrap();
            let g2 = eval.derivative(&[2], &[v], &[z]).unwrap();
            let g3 = eval.derivative(&[3], &[v], &[z]).unwrap();
            let g4 = eval.derivative(&[4], &[v], &[z]).unwrap();
            0.5 * (jet.d2sigma[0][0] * g2 + 2.0 * jet.dsigma[0][0] * g3 + jet.sigma[0] * g4)
                + jet.d2drift[0][0] * g1
                + 2.0 * jet.ddrift[0][0] * g2
                + jet.drift[0] * g3
        };
        let g2 = eval.derivative(&[2], &[v], &[z]).unwrap();
        let g3 = eval.derivative(&[3], &[v], &[z]).unwrap();
        let g4 = eval.derivative(&[4], &[v], &[z]).unwrap();
        let d1lf = 0.5 * at_z.sigma[0] * g3 + at_z.drift[0] * g2;
        let d2lf = 0.5 * at_z.sigma[0] * g4 + at_z.drift[0] * g3;
        let ll = jet.drift[0] * d1l + 0.5 * jet.sigma[0] * d2l;
        let llf = jet.drift[0] * d1lf + 0.5 * jet.sigma[0] * d2lf;
        let lflf = at_z.drift[0] * d1lf + 0.5 * at_z.sigma[0] * d2lf;
        let want = ll - 2.0 * llf + lflf;
        assert!((scalar - want).abs() < 1e-12 * want.abs().max(1e-10));
    }
}
