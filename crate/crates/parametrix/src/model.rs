//! Model description: drift/diffusion coefficients, chain innovation laws,
//! and runtime verification of the standing assumptions.
//!
//! A model couples a coefficient field `(m, sigma)` with the innovation
//! density `q(t, x, .)` of the approximating chain. The moment and
//! regularity assumptions the asymptotic theory needs are not trusted
//! declarations here: [`validate_assumptions`] measures each of them on a
//! deterministic sample grid and reports the worst violation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::quad::simpson_weights;

/// Uniform bounds declared by a coefficient field.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientBounds {
    /// Lower ellipticity constant: `sigma_star <= theta' sigma theta` for
    /// unit `theta`.
    pub sigma_star: f64,
    /// Upper ellipticity constant.
    pub sigma_star_star: f64,
    /// Sup norm of the drift.
    pub drift_sup: f64,
    /// Declared bound for coefficients and their derivatives up to order
    /// two (checked by the smoothness assumption).
    pub derivative_sup: f64,
}

/// A time-space coefficient field `(m, sigma)` with enough derivatives for
/// the perturbation kernels.
///
/// All outputs are written into caller-provided buffers (`d` entries for
/// drift, `d*d` row-major for diffusion) so hot loops stay allocation-free.
pub trait Coefficients: Send + Sync {
    fn dim(&self) -> usize;
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);
    /// Spatial derivative `D^nu` of the drift; `nu` holds per-axis orders.
    fn drift_spatial_deriv(&self, t: f64, x: &[f64], nu: &[usize], out: &mut [f64]);
    /// Spatial derivative `D^nu` of the diffusion matrix.
    fn diffusion_spatial_deriv(&self, t: f64, x: &[f64], nu: &[usize], out: &mut [f64]);
    /// `l`-th time derivative of the drift, `l` in `{1, 2}`.
    fn drift_time_deriv(&self, l: usize, t: f64, x: &[f64], out: &mut [f64]);
    /// `l`-th time derivative of the diffusion matrix.
    fn diffusion_time_deriv(&self, l: usize, t: f64, x: &[f64], out: &mut [f64]);
    fn bounds(&self) -> CoefficientBounds;
    /// Highest spatial derivative order the field can produce.
    fn max_spatial_order(&self) -> usize;
    /// True when the coefficients do not depend on time (enables exact
    /// shortcuts in time integrals).
    fn time_homogeneous(&self) -> bool;
}

/// Innovation law of the chain: the density of the normalised one-step
/// noise given time and current state, plus the integrable envelope
/// dominating it.
pub trait Innovations: Send + Sync {
    fn dim(&self) -> usize;
    /// `q(t, x, y)`.
    fn density(&self, t: f64, x: &[f64], y: &[f64]) -> f64;
    /// Envelope `psi(y)` with `|q| <= psi` and finite moments up to the
    /// order required by the weight exponent.
    fn psi(&self, y: &[f64]) -> f64;
    /// True when `q(t, x, .)` is the centred Gaussian with covariance
    /// `sigma(t, x)`; closed-form chain marginals are then available.
    fn is_gaussian(&self) -> bool;
}

/// Immutable model handle shared across evaluators.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    dim: usize,
    pub coeffs: Arc<dyn Coefficients>,
    pub innovations: Arc<dyn Innovations>,
    s_prime: u32,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("s_prime", &self.s_prime)
            .finish()
    }
}

impl ModelSpec {
    pub fn from_parts(
        name: impl Into<String>,
        coeffs: Arc<dyn Coefficients>,
        innovations: Arc<dyn Innovations>,
        s_prime: u32,
    ) -> Result<Self> {
        let dim = coeffs.dim();
        if innovations.dim() != dim {
            return Err(Error::InvalidArgument(
                "coefficient/innovation dimension mismatch".into(),
            ));
        }
        if s_prime == 0 {
            return Err(Error::InvalidArgument(
                "weight smoothness index must be >= 1".into(),
            ));
        }
        let b = coeffs.bounds();
        if !(b.sigma_star > 0.0) || b.sigma_star_star < b.sigma_star {
            return Err(Error::EllipticityViolated(format!(
                "declared bounds ({}, {}) are not positive-ordered",
                b.sigma_star, b.sigma_star_star
            )));
        }
        Ok(Self {
            name: name.into(),
            dim,
            coeffs,
            innovations,
            s_prime,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn s_prime(&self) -> u32 {
        self.s_prime
    }

    /// Moment order `S = 2 d S' + 4` tied to the polynomial weights.
    pub fn s_exponent(&self) -> u32 {
        2 * self.dim as u32 * self.s_prime + 4
    }

    pub fn bounds(&self) -> CoefficientBounds {
        self.coeffs.bounds()
    }

    /// Scalar diffusion coefficient; only valid in dimension one.
    #[inline]
    pub fn sigma1(&self, t: f64, x: f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        let mut out = [0.0];
        self.coeffs.diffusion(t, &[x], &mut out);
        out[0]
    }

    /// Scalar drift; only valid in dimension one.
    #[inline]
    pub fn drift1(&self, t: f64, x: f64) -> f64 {
        debug_assert_eq!(self.dim, 1);
        let mut out = [0.0];
        self.coeffs.drift(t, &[x], &mut out);
        out[0]
    }

    pub fn sigma_matrix(&self, t: f64, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut buf = vec![0.0; d * d];
        self.coeffs.diffusion(t, x, &mut buf);
        DMatrix::from_row_slice(d, d, &buf)
    }

    pub fn drift_vector(&self, t: f64, x: &[f64]) -> DVector<f64> {
        let mut buf = vec![0.0; self.dim];
        self.coeffs.drift(t, x, &mut buf);
        DVector::from_vec(buf)
    }
}

/// JSON-facing model description.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// One of `constant`, `sin1d`, `sin2d`.
    pub family: String,
    #[serde(default)]
    pub d: Option<usize>,
    /// Diffusion level of the `constant` family.
    #[serde(default)]
    pub sigma: Option<f64>,
    /// Constant drift of the `constant` family.
    #[serde(default)]
    pub m: Option<f64>,
    /// Base diffusion level of the `sin*` families.
    #[serde(default)]
    pub a: Option<f64>,
    /// Spatial modulation amplitude of the `sin*` families.
    #[serde(default)]
    pub b: Option<f64>,
    /// Drift amplitude of the `sin*` families.
    #[serde(default)]
    pub c: Option<f64>,
    /// Linear-in-time modulation of the `sin*` amplitude:
    /// `sigma(t, x) = a + (b + b_t t) sin x`. Defaults to zero.
    #[serde(default)]
    pub b_t: Option<f64>,
    #[serde(default)]
    pub s_prime: Option<u32>,
}

impl ModelConfig {
    pub fn family(family: &str) -> Self {
        Self {
            family: family.into(),
            d: None,
            sigma: None,
            m: None,
            a: None,
            b: None,
            c: None,
            b_t: None,
            s_prime: None,
        }
    }
}

/// Builds a model from one of the built-in families.
///
/// `constant` is the homogeneous Gaussian benchmark; `sin1d` has
/// `sigma(t, x) = a + (b + b_t t) sin x` and `m(t, x) = c tanh x`
/// (requiring `a > max_t |b + b_t t|` for ellipticity); `sin2d` is the
/// two-dimensional diagonal variant of the same coefficients.
pub fn build_model(config: &ModelConfig) -> Result<ModelSpec> {
    let s_prime = config.s_prime.unwrap_or(3);
    match config.family.as_str() {
        "constant" => {
            let d = config.d.unwrap_or(1);
            if d == 0 || d > 2 {
                return Err(Error::InvalidConfig(format!(
                    "dimension {d} is not supported; experiments run at d <= 2"
                )));
            }
            let sigma = config.sigma.unwrap_or(1.0);
            if !(sigma > 0.0) {
                return Err(Error::EllipticityViolated(format!(
                    "constant diffusion level {sigma} must be positive"
                )));
            }
            let drift = vec![config.m.unwrap_or(0.0); d];
            let coeffs = Arc::new(ConstantCoeffs {
                dim: d,
                sigma,
                drift,
            });
            let innovations = Arc::new(GaussianInnovations::new(coeffs.clone()));
            ModelSpec::from_parts("constant", coeffs, innovations, s_prime)
        }
        "sin1d" | "sin2d" => {
            let d = match config.family.as_str() {
                "sin1d" => 1,
                _ => 2,
            };
            if let Some(cd) = config.d {
                if cd != d {
                    return Err(Error::InvalidConfig(format!(
                        "family {} is {d}-dimensional, config says d={cd}",
                        config.family
                    )));
                }
            }
            let a = config.a.unwrap_or(1.0);
            let b = config.b.unwrap_or(0.5);
            let c = config.c.unwrap_or(0.5);
            let b_t = config.b_t.unwrap_or(0.0);
            let bmax = b.abs().max((b + b_t).abs());
            if !(a > 0.0) || a - bmax <= 0.0 {
                return Err(Error::EllipticityViolated(format!(
                    "sin family needs a > max_t |b + b_t t|; got a={a}, max amplitude {bmax}"
                )));
            }
            let coeffs = Arc::new(SinCoeffs {
                dim: d,
                a,
                b,
                b_t,
                c,
            });
            let innovations = Arc::new(GaussianInnovations::new(coeffs.clone()));
            ModelSpec::from_parts(config.family.clone(), coeffs, innovations, s_prime)
        }
        other => Err(Error::UnknownFamily(other.into())),
    }
}

// ---------------------------------------------------------------------------
// Built-in coefficient fields
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConstantCoeffs {
    pub dim: usize,
    pub sigma: f64,
    pub drift: Vec<f64>,
}

impl Coefficients for ConstantCoeffs {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.drift);
    }

    fn diffusion(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.dim {
            out[i * self.dim + i] = self.sigma;
        }
    }

    fn drift_spatial_deriv(&self, _t: f64, _x: &[f64], nu: &[usize], out: &mut [f64]) {
        if nu.iter().sum::<usize>() == 0 {
            out.copy_from_slice(&self.drift);
        } else {
            out.fill(0.0);
        }
    }

    fn diffusion_spatial_deriv(&self, t: f64, x: &[f64], nu: &[usize], out: &mut [f64]) {
        if nu.iter().sum::<usize>() == 0 {
            self.diffusion(t, x, out);
        } else {
            out.fill(0.0);
        }
    }

    fn drift_time_deriv(&self, _l: usize, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion_time_deriv(&self, _l: usize, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn bounds(&self) -> CoefficientBounds {
        let drift_sup = self.drift.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        CoefficientBounds {
            sigma_star: self.sigma,
            sigma_star_star: self.sigma,
            drift_sup,
            derivative_sup: self.sigma.max(drift_sup) + 1e-12,
        }
    }

    fn max_spatial_order(&self) -> usize {
        6
    }

    fn time_homogeneous(&self) -> bool {
        true
    }
}

/// Diagonal sinusoidal diffusion with saturating drift:
/// `sigma_kk(t, x) = a + (b + b_t t) sin x_k`, `m_k(t, x) = c tanh x_k`.
#[derive(Debug, Clone)]
pub struct SinCoeffs {
    pub dim: usize,
    pub a: f64,
    pub b: f64,
    pub b_t: f64,
    pub c: f64,
}

impl SinCoeffs {
    #[inline]
    fn amplitude(&self, t: f64) -> f64 {
        self.b + self.b_t * t
    }
}

/// `d^order/dx^order tanh(x)` through the polynomial recursion in
/// `t = tanh(x)`: if `p_k(t)` represents the k-th derivative then
/// `p_{k+1} = p_k'(t) (1 - t^2)`.
pub fn tanh_derivative(order: usize, x: f64) -> f64 {
    let t = x.tanh();
    if order == 0 {
        return t;
    }
    // Coefficient vector of p_k in powers of t, starting from p_0 = t.
    let mut coeffs = vec![0.0, 1.0];
    for _ in 0..order {
        // q = p' * (1 - t^2)
        let mut q = vec![0.0; coeffs.len() + 1];
        for (j, &cj) in coeffs.iter().enumerate().skip(1) {
            let d = cj * j as f64;
            q[j - 1] += d;
            if j + 1 < q.len() {
                q[j + 1] -= d;
            }
        }
        coeffs = q;
    }
    coeffs.iter().rev().fold(0.0, |acc, &cj| acc * t + cj)
}

impl Coefficients for SinCoeffs {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        for k in 0..self.dim {
            out[k] = self.c * x[k].tanh();
        }
    }

    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let amp = self.amplitude(t);
        for k in 0..self.dim {
            out[k * self.dim + k] = self.a + amp * x[k].sin();
        }
    }

    fn drift_spatial_deriv(&self, _t: f64, x: &[f64], nu: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        let total: usize = nu.iter().sum();
        for k in 0..self.dim {
            // m_k depends on x_k only.
            if total == nu[k] {
                out[k] = self.c * tanh_derivative(nu[k], x[k]);
            }
        }
    }

    fn diffusion_spatial_deriv(&self, t: f64, x: &[f64], nu: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        let amp = self.amplitude(t);
        let total: usize = nu.iter().sum();
        for k in 0..self.dim {
            if total == nu[k] {
                let v = if nu[k] == 0 {
                    self.a + amp * x[k].sin()
                } else {
                    // d^n sin(x) = sin(x + n pi/2)
                    amp * (x[k] + nu[k] as f64 * std::f64::consts::FRAC_PI_2).sin()
                };
                out[k * self.dim + k] = v;
            }
        }
    }

    fn drift_time_deriv(&self, _l: usize, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }

    fn diffusion_time_deriv(&self, l: usize, _t: f64, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if l == 1 {
            for k in 0..self.dim {
                out[k * self.dim + k] = self.b_t * x[k].sin();
            }
        }
    }

    fn bounds(&self) -> CoefficientBounds {
        let bmax = self.b.abs().max((self.b + self.b_t).abs());
        // |tanh''| peaks at 2/(3 sqrt(3)) * 2 ~= 0.77, |tanh'''| <= 2.
        let drift_deriv = 2.0 * self.c.abs();
        CoefficientBounds {
            sigma_star: self.a - bmax,
            sigma_star_star: self.a + bmax,
            drift_sup: self.c.abs(),
            derivative_sup: (self.a + bmax).max(drift_deriv).max(self.b_t.abs()) + 1e-12,
        }
    }

    fn max_spatial_order(&self) -> usize {
        6
    }

    fn time_homogeneous(&self) -> bool {
        self.b_t == 0.0
    }
}

/// Coefficients supplied as closures; derivatives fall back to central
/// finite differences, so only orders up to two are supported.
pub struct CustomCoeffs {
    dim: usize,
    drift: Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>,
    diffusion: Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>,
    bounds: CoefficientBounds,
    time_homogeneous: bool,
}

impl CustomCoeffs {
    pub fn new(
        dim: usize,
        drift: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        diffusion: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
        bounds: CoefficientBounds,
        time_homogeneous: bool,
    ) -> Self {
        Self {
            dim,
            drift: Arc::new(drift),
            diffusion: Arc::new(diffusion),
            bounds,
            time_homogeneous,
        }
    }

    fn spatial_fd(
        &self,
        f: &dyn Fn(f64, &[f64], &mut [f64]),
        len: usize,
        t: f64,
        x: &[f64],
        nu: &[usize],
        out: &mut [f64],
    ) {
        const H: f64 = 1e-4;
        let total: usize = nu.iter().sum();
        let mut xs = x.to_vec();
        match total {
            0 => f(t, x, out),
            1 => {
                let axis = nu.iter().position(|&o| o == 1).unwrap();
                let mut hi = vec![0.0; len];
                let mut lo = vec![0.0; len];
                xs[axis] = x[axis] + H;
                f(t, &xs, &mut hi);
                xs[axis] = x[axis] - H;
                f(t, &xs, &mut lo);
                for i in 0..len {
                    out[i] = (hi[i] - lo[i]) / (2.0 * H);
                }
            }
            2 => {
                let mut hi = vec![0.0; len];
                let mut lo = vec![0.0; len];
                if let Some(axis) = nu.iter().position(|&o| o == 2) {
                    let mut mid = vec![0.0; len];
                    f(t, x, &mut mid);
                    xs[axis] = x[axis] + H;
                    f(t, &xs, &mut hi);
                    xs[axis] = x[axis] - H;
                    f(t, &xs, &mut lo);
                    for i in 0..len {
                        out[i] = (hi[i] - 2.0 * mid[i] + lo[i]) / (H * H);
                    }
                } else {
                    // Mixed second derivative via the four-point cross.
                    let ax: Vec<usize> = nu
                        .iter()
                        .enumerate()
                        .filter(|(_, &o)| o == 1)
                        .map(|(a, _)| a)
                        .collect();
                    let (u, v) = (ax[0], ax[1]);
                    let mut acc = vec![0.0; len];
                    for (su, sv, sign) in [
                        (1.0, 1.0, 1.0),
                        (1.0, -1.0, -1.0),
                        (-1.0, 1.0, -1.0),
                        (-1.0, -1.0, 1.0),
                    ] {
                        xs.copy_from_slice(x);
                        xs[u] += su * H;
                        xs[v] += sv * H;
                        f(t, &xs, &mut hi);
                        for i in 0..len {
                            acc[i] += sign * hi[i];
                        }
                    }
                    for i in 0..len {
                        out[i] = acc[i] / (4.0 * H * H);
                    }
                }
            }
            _ => panic!("custom coefficients support spatial derivatives up to order 2"),
        }
    }

    fn time_fd(
        &self,
        f: &dyn Fn(f64, &[f64], &mut [f64]),
        len: usize,
        l: usize,
        t: f64,
        x: &[f64],
        out: &mut [f64],
    ) {
        const H: f64 = 1e-4;
        let mut hi = vec![0.0; len];
        let mut lo = vec![0.0; len];
        f(t + H, x, &mut hi);
        f(t - H, x, &mut lo);
        match l {
            1 => {
                for i in 0..len {
                    out[i] = (hi[i] - lo[i]) / (2.0 * H);
                }
            }
            2 => {
                let mut mid = vec![0.0; len];
                f(t, x, &mut mid);
                for i in 0..len {
                    out[i] = (hi[i] - 2.0 * mid[i] + lo[i]) / (H * H);
                }
            }
            _ => panic!("time derivatives are defined for orders 1 and 2"),
        }
    }
}

impl Coefficients for CustomCoeffs {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, out)
    }

    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }

    fn drift_spatial_deriv(&self, t: f64, x: &[f64], nu: &[usize], out: &mut [f64]) {
        let f = self.drift.clone();
        self.spatial_fd(&*f, self.dim, t, x, nu, out)
    }

    fn diffusion_spatial_deriv(&self, t: f64, x: &[f64], nu: &[usize], out: &mut [f64]) {
        let f = self.diffusion.clone();
        self.spatial_fd(&*f, self.dim * self.dim, t, x, nu, out)
    }

    fn drift_time_deriv(&self, l: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let f = self.drift.clone();
        self.time_fd(&*f, self.dim, l, t, x, out)
    }

    fn diffusion_time_deriv(&self, l: usize, t: f64, x: &[f64], out: &mut [f64]) {
        let f = self.diffusion.clone();
        self.time_fd(&*f, self.dim * self.dim, l, t, x, out)
    }

    fn bounds(&self) -> CoefficientBounds {
        self.bounds
    }

    fn max_spatial_order(&self) -> usize {
        2
    }

    fn time_homogeneous(&self) -> bool {
        self.time_homogeneous
    }
}

// ---------------------------------------------------------------------------
// Innovation laws
// ---------------------------------------------------------------------------

/// Centred Gaussian innovations with covariance `sigma(t, x)`; the
/// mean-zero and covariance-consistency assumptions hold by construction.
pub struct GaussianInnovations {
    coeffs: Arc<dyn Coefficients>,
}

impl GaussianInnovations {
    pub fn new(coeffs: Arc<dyn Coefficients>) -> Self {
        Self { coeffs }
    }
}

impl Innovations for GaussianInnovations {
    fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    fn density(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        let d = self.coeffs.dim();
        if d == 1 {
            let mut s = [0.0];
            self.coeffs.diffusion(t, x, &mut s);
            let v = s[0];
            return (-0.5 * y[0] * y[0] / v).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        }
        let mut buf = vec![0.0; d * d];
        self.coeffs.diffusion(t, x, &mut buf);
        let sigma = DMatrix::from_row_slice(d, d, &buf);
        gaussian_density(&sigma, y)
    }

    fn psi(&self, y: &[f64]) -> f64 {
        let b = self.coeffs.bounds();
        let d = self.coeffs.dim() as i32;
        let norm2: f64 = y.iter().map(|v| v * v).sum();
        let c = (2.0 * std::f64::consts::PI * b.sigma_star).powi(-d).sqrt();
        c * (-0.5 * norm2 / b.sigma_star_star).exp() * (1.0 + norm2 * norm2)
    }

    fn is_gaussian(&self) -> bool {
        true
    }
}

/// Innovations given by an explicit density closure (used for non-Gaussian
/// chains and for deliberately broken test inputs).
pub struct CustomInnovations {
    dim: usize,
    density: Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>,
    psi: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl CustomInnovations {
    pub fn new(
        dim: usize,
        density: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        psi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            density: Arc::new(density),
            psi: Arc::new(psi),
        }
    }
}

impl Innovations for CustomInnovations {
    fn dim(&self) -> usize {
        self.dim
    }

    fn density(&self, t: f64, x: &[f64], y: &[f64]) -> f64 {
        (self.density)(t, x, y)
    }

    fn psi(&self, y: &[f64]) -> f64 {
        (self.psi)(y)
    }

    fn is_gaussian(&self) -> bool {
        false
    }
}

/// Density of the centred Gaussian with covariance `sigma` at `y`.
pub fn gaussian_density(sigma: &DMatrix<f64>, y: &[f64]) -> f64 {
    let d = sigma.nrows();
    let chol = sigma
        .clone()
        .cholesky()
        .expect("covariance must be positive definite");
    let yv = DVector::from_column_slice(y);
    let z = chol.solve(&yv);
    let quad: f64 = yv.dot(&z);
    let det = chol.l().diagonal().iter().map(|v| v * v).product::<f64>();
    (-0.5 * quad).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * det).sqrt()
}

// ---------------------------------------------------------------------------
// Innovation moments
// ---------------------------------------------------------------------------

/// Covariance of the innovation law at `(t, x)` by tensor Simpson
/// quadrature on `[-radius, radius]^d`.
///
/// The quadrature mass is returned alongside; a mass deficit beyond
/// `5e-3` means the truncated tail is not negligible and is reported as a
/// failure rather than silently absorbed.
pub fn innovation_covariance(model: &ModelSpec, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = model.dim();
    let b = model.bounds();
    let radius = 10.0 * b.sigma_star_star.sqrt() + 1.0;
    let points = if d == 1 { 401 } else { 101 };
    let (mean, cov, mass) = innovation_moments(model, t, x, radius, points)?;
    if (mass - 1.0).abs() > 5e-3 {
        return Err(Error::QuadratureFailure(format!(
            "innovation density mass {mass:.6} on the truncation box; tail not convergent"
        )));
    }
    let _ = mean;
    Ok(cov)
}

fn innovation_moments(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    radius: f64,
    points: usize,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    let d = model.dim();
    let h = 2.0 * radius / (points - 1) as f64;
    let w = simpson_weights(points, h)?;
    let coords: Vec<f64> = (0..points).map(|i| -radius + i as f64 * h).collect();
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    let mut mass = 0.0;
    let mut y = vec![0.0; d];
    let mut idx = vec![0usize; d];
    let total = points.pow(d as u32);
    for flat in 0..total {
        let mut rem = flat;
        for a in (0..d).rev() {
            idx[a] = rem % points;
            rem /= points;
        }
        let mut weight = 1.0;
        for a in 0..d {
            y[a] = coords[idx[a]];
            weight *= w[idx[a]];
        }
        let q = model.innovations.density(t, x, &y);
        mass += weight * q;
        for a in 0..d {
            mean[a] += weight * q * y[a];
            for bx in 0..d {
                cov[(a, bx)] += weight * q * y[a] * y[bx];
            }
        }
    }
    Ok((mean, cov, mass))
}

// ---------------------------------------------------------------------------
// Positive square root of the diffusion matrix
// ---------------------------------------------------------------------------

/// Symmetric positive square root by eigendecomposition; rejects non-SPD
/// input with the offending eigenvalue.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidArgument("matrix must be square".into()));
    }
    let sym = 0.5 * (m + m.transpose());
    let eig = nalgebra::SymmetricEigen::new(sym);
    if let Some(lam) = eig.eigenvalues.iter().find(|&&l| l <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "matrix is not positive definite (eigenvalue {lam:.3e})"
        )));
    }
    let sqrt_d = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * sqrt_d * eig.eigenvectors.transpose())
}

/// Diffusion factor `Lambda(t, x)` with `Lambda Lambda' = sigma(t, x)`.
pub fn diffusion_factor(model: &ModelSpec, t: f64, x: &[f64]) -> Result<DMatrix<f64>> {
    spd_sqrt(&model.sigma_matrix(t, x))
}

// ---------------------------------------------------------------------------
// Assumption checks
// ---------------------------------------------------------------------------

/// Where the assumptions are probed.
#[derive(Debug, Clone)]
pub struct SampleSpec {
    pub times: Vec<f64>,
    /// Per-axis spatial sample coordinates (tensorised).
    pub axis_points: Vec<f64>,
    /// Truncation radius for innovation integrals, in units of
    /// `sqrt(sigma_star_star)`.
    pub innovation_radius_sigmas: f64,
    pub innovation_points: usize,
}

impl SampleSpec {
    pub fn default_for_dim(dim: usize) -> Self {
        let times = (0..11).map(|i| i as f64 / 10.0).collect();
        let axis_points = if dim == 1 {
            (0..41).map(|i| -5.0 + 0.25 * i as f64).collect()
        } else {
            (0..9).map(|i| -5.0 + 1.25 * i as f64).collect()
        };
        Self {
            times,
            axis_points,
            innovation_radius_sigmas: 10.0,
            innovation_points: if dim == 1 { 201 } else { 81 },
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AssumptionCheck {
    pub id: &'static str,
    pub description: String,
    pub max_violation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct AssumptionReport {
    pub model: String,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Pinned tolerances for the assumption checks. The innovation-moment
/// tolerances absorb the truncated-tail quadrature error; the ellipticity
/// and boundedness checks are near-exact probes of declared constants.
pub mod tolerances {
    /// Mean-zero innovations.
    pub const MEAN_ZERO: f64 = 1e-6;
    /// Declared ellipticity interval (eigenvalue slack).
    pub const ELLIPTICITY: f64 = 1e-9;
    /// Pointwise envelope domination `q <= psi`.
    pub const ENVELOPE: f64 = 1e-10;
    /// Relative stability of the truncated `S`-th envelope moment under
    /// shrinking the truncation box.
    pub const MOMENT_TAIL: f64 = 1e-2;
    /// Coefficient/derivative boundedness against the declared constant.
    pub const BOUNDEDNESS: f64 = 1e-9;
    /// Entrywise innovation-covariance vs diffusion-coefficient match.
    pub const COVARIANCE_CONSISTENCY: f64 = 1e-6;
}

/// Measures every standing assumption on the sample grid and reports the
/// worst violation per check. Deterministic: same model and sample in,
/// same report out.
pub fn validate_assumptions(model: &ModelSpec, sample: &SampleSpec) -> Result<AssumptionReport> {
    let d = model.dim();
    let bounds = model.bounds();
    let radius = sample.innovation_radius_sigmas * bounds.sigma_star_star.sqrt() + 1.0;

    // Tensorise the spatial sample.
    let mut points: Vec<Vec<f64>> = vec![vec![]];
    for _ in 0..d {
        let mut next = Vec::with_capacity(points.len() * sample.axis_points.len());
        for p in &points {
            for &c in &sample.axis_points {
                let mut q = p.clone();
                q.push(c);
                next.push(q);
            }
        }
        points = next;
    }

    let mut mean_violation = 0.0f64;
    let mut cov_violation = 0.0f64;
    let mut ellipticity_violation = 0.0f64;
    let mut envelope_violation = 0.0f64;
    let mut bound_violation = 0.0f64;

    let mut sig_buf = vec![0.0; d * d];
    let mut vec_buf = vec![0.0; d];

    for &t in &sample.times {
        for x in &points {
            // A2: eigenvalues of sigma within the declared interval.
            model.coeffs.diffusion(t, x, &mut sig_buf);
            let sigma = DMatrix::from_row_slice(d, d, &sig_buf);
            let eig = nalgebra::SymmetricEigen::new(sigma.clone());
            for &lam in eig.eigenvalues.iter() {
                ellipticity_violation = ellipticity_violation
                    .max(bounds.sigma_star - lam)
                    .max(lam - bounds.sigma_star_star);
            }

            // B1-style boundedness probes: values plus first/second
            // spatial derivatives and the first time derivative.
            let mut probe = |vals: &[f64]| {
                for v in vals {
                    bound_violation = bound_violation.max(v.abs() - bounds.derivative_sup);
                }
            };
            model.coeffs.drift(t, x, &mut vec_buf);
            probe(&vec_buf);
            probe(&sig_buf);
            let mut nu = vec![0usize; d];
            for axis in 0..d {
                nu.fill(0);
                nu[axis] = 1;
                model.coeffs.drift_spatial_deriv(t, x, &nu, &mut vec_buf);
                probe(&vec_buf);
                model
                    .coeffs
                    .diffusion_spatial_deriv(t, x, &nu, &mut sig_buf);
                probe(&sig_buf);
                nu[axis] = 2;
                model.coeffs.drift_spatial_deriv(t, x, &nu, &mut vec_buf);
                probe(&vec_buf);
                model
                    .coeffs
                    .diffusion_spatial_deriv(t, x, &nu, &mut sig_buf);
                probe(&sig_buf);
            }
            model.coeffs.diffusion_time_deriv(1, t, x, &mut sig_buf);
            probe(&sig_buf);
        }
    }

    // Innovation moment checks on a thinner (t, x) subsample: these carry
    // a full tensor quadrature each.
    let moment_times = [sample.times[0], sample.times[sample.times.len() / 2]];
    let stride = (points.len() / 9).max(1);
    for &t in &moment_times {
        for x in points.iter().step_by(stride) {
            let (mean, cov, mass) =
                innovation_moments_with(model, t, x, radius, sample.innovation_points)?;
            if (mass - 1.0).abs() > 5e-3 {
                return Err(Error::QuadratureFailure(format!(
                    "innovation mass {mass:.6} at t={t}, x={x:?}; widen the truncation box"
                )));
            }
            for a in 0..d {
                mean_violation = mean_violation.max(mean[a].abs());
            }
            model.coeffs.diffusion(t, x, &mut sig_buf);
            for a in 0..d {
                for bx in 0..d {
                    cov_violation = cov_violation.max((cov[(a, bx)] - sig_buf[a * d + bx]).abs());
                }
            }
        }
    }

    // A3: pointwise envelope domination along the axes and diagonal.
    for &t in &moment_times {
        let x0 = vec![0.0; d];
        for i in 0..201 {
            let r = -10.0 + 0.1 * i as f64;
            let y = vec![r * radius / 10.0; d];
            let q = model.innovations.density(t, &x0, &y);
            let psi = model.innovations.psi(&y);
            envelope_violation = envelope_violation.max(q.abs() - psi);
        }
    }

    // A3 moment: truncated S-th moment of psi stable under box shrinkage.
    let s_exp = model.s_exponent();
    let moment = envelope_moment(model, radius, sample.innovation_points, s_exp)?;
    let moment_inner = envelope_moment(model, 0.8 * radius, sample.innovation_points, s_exp)?;
    let moment_rel = if moment > 0.0 {
        (moment - moment_inner).abs() / moment
    } else {
        f64::INFINITY
    };

    let checks = vec![
        AssumptionCheck {
            id: "mean-zero",
            description: "innovation mean vanishes".into(),
            max_violation: mean_violation,
            tolerance: tolerances::MEAN_ZERO,
            pass: mean_violation <= tolerances::MEAN_ZERO,
        },
        AssumptionCheck {
            id: "ellipticity",
            description: format!(
                "diffusion eigenvalues within [{}, {}]",
                bounds.sigma_star, bounds.sigma_star_star
            ),
            max_violation: ellipticity_violation.max(0.0),
            tolerance: tolerances::ELLIPTICITY,
            pass: ellipticity_violation <= tolerances::ELLIPTICITY,
        },
        AssumptionCheck {
            id: "envelope",
            description: "innovation density dominated by its envelope".into(),
            max_violation: envelope_violation.max(0.0),
            tolerance: tolerances::ENVELOPE,
            pass: envelope_violation <= tolerances::ENVELOPE,
        },
        AssumptionCheck {
            id: "envelope-moment",
            description: format!("order-{s_exp} envelope moment converged"),
            max_violation: moment_rel,
            tolerance: tolerances::MOMENT_TAIL,
            pass: moment_rel <= tolerances::MOMENT_TAIL,
        },
        AssumptionCheck {
            id: "boundedness",
            description: format!(
                "coefficients and derivatives bounded by {}",
                bounds.derivative_sup
            ),
            max_violation: bound_violation.max(0.0),
            tolerance: tolerances::BOUNDEDNESS,
            pass: bound_violation <= tolerances::BOUNDEDNESS,
        },
        AssumptionCheck {
            id: "covariance-consistency",
            description: "innovation covariance equals the diffusion coefficient".into(),
            max_violation: cov_violation,
            tolerance: tolerances::COVARIANCE_CONSISTENCY,
            pass: cov_violation <= tolerances::COVARIANCE_CONSISTENCY,
        },
    ];

    Ok(AssumptionReport {
        model: model.name.clone(),
        checks,
    })
}

fn innovation_moments_with(
    model: &ModelSpec,
    t: f64,
    x: &[f64],
    radius: f64,
    points: usize,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    innovation_moments(model, t, x, radius, points)
}

fn envelope_moment(model: &ModelSpec, radius: f64, points: usize, s_exp: u32) -> Result<f64> {
    let d = model.dim();
    let h = 2.0 * radius / (points - 1) as f64;
    let w = simpson_weights(points, h)?;
    let mut total = 0.0;
    let mut y = vec![0.0; d];
    let mut idx = vec![0usize; d];
    for flat in 0..points.pow(d as u32) {
        let mut rem = flat;
        for a in (0..d).rev() {
            idx[a] = rem % points;
            rem /= points;
        }
        let mut weight = 1.0;
        for a in 0..d {
            y[a] = -radius + idx[a] as f64 * h;
            weight *= w[idx[a]];
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += weight * norm.powi(s_exp as i32) * model.innovations.psi(&y);
    }
    Ok(total)
}
