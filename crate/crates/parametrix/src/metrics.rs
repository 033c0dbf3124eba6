//! Weights, decay envelopes, weighted sup-errors, and rate estimation.
//!
//! The convergence statements this crate verifies are all of the shape
//! "weighted difference bounded by constant times envelope". This module
//! owns the weight `Q_delta`, the normalized envelopes `phi`, `zeta`,
//! `xi` with their scale families, the weighted sup-error between two
//! density evaluators, and the least-squares machinery that turns error
//! sequences into empirical convergence rates and fitted constants.

use crate::error::{Error, Result};
use crate::quad::{gamma_one_plus_half, gauss_legendre_on};

/// Acceptance band for the empirical convergence slope of the rate study
/// (theoretical value -1/2; quadrature bias and preasymptotics widen it).
pub const RATE_SLOPE_BAND: (f64, f64) = (-0.8, -0.3);

// ---------------------------------------------------------------------------
// Polynomial weight
// ---------------------------------------------------------------------------

/// The polynomial weight `Q_delta(u) = delta^d (1 + ||u/delta||^{2S'-2})`,
/// validated once and evaluated allocation-free.
#[derive(Debug, Clone, Copy)]
pub struct WeightQ {
    delta: f64,
    dim: usize,
    delta_pow_d: f64,
    exponent: f64,
}

impl WeightQ {
    pub fn new(delta: f64, s_prime: u32, dim: usize) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight scale {delta} must be positive"
            )));
        }
        if s_prime < 2 {
            return Err(Error::InvalidArgument(format!(
                "weight smoothness index {s_prime} must be >= 2"
            )));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be >= 1".into()));
        }
        Ok(Self {
            delta,
            dim,
            delta_pow_d: delta.powi(dim as i32),
            exponent: (2 * s_prime - 2) as f64,
        })
    }

    #[inline]
    pub fn value(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dim);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.delta_pow_d * (1.0 + (norm / self.delta).powf(self.exponent))
    }
}

/// One-shot form of [`WeightQ`].
pub fn weight_q(delta: f64, u: &[f64], s_prime: u32, dim: usize) -> Result<f64> {
    Ok(WeightQ::new(delta, s_prime, dim)?.value(u))
}

// ---------------------------------------------------------------------------
// Normalized envelopes
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EnvelopeKind {
    /// Gaussian `exp(-C ||u||^2)`, normalizer `(pi/C)^{d/2}` in closed form.
    Phi { c: f64 },
    /// Reciprocal power `(1 + ||u||^q)^{-1}` with `q = S - 4`.
    Zeta { q: u32 },
    /// Reciprocal power `(1 + ||u||^q)^{-1}` with `q = 2 S' - 2`.
    Xi { q: u32 },
}

/// A normalized decay envelope in its scale family:
/// `value(u) = rho^{-d} shape(u/rho) / normalizer`.
///
/// Normalizers for the reciprocal-power shapes are computed once by radial
/// Gauss-Legendre quadrature and cached in the spec.
#[derive(Debug, Clone)]
pub struct EnvelopeSpec {
    pub kind: EnvelopeKind,
    pub scale: f64,
    pub dim: usize,
    normalizer: f64,
}

impl EnvelopeSpec {
    pub fn phi(c: f64, rho: f64, dim: usize) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Gaussian envelope decay {c} must be positive"
            )));
        }
        check_scale_dim(rho, dim)?;
        let normalizer = (std::f64::consts::PI / c).powi(dim as i32).sqrt();
        Ok(Self {
            kind: EnvelopeKind::Phi { c },
            scale: rho,
            dim,
            normalizer,
        })
    }

    /// The heavy-tailed envelope tied to the moment order `S = 2 d S' + 4`.
    pub fn zeta(s_prime: u32, rho: f64, dim: usize) -> Result<Self> {
        let s = 2 * dim as u32 * s_prime + 4;
        Self::zeta_from_moment_exponent(s, rho, dim)
    }

    /// As [`Self::zeta`] with the moment order `S` given directly.
    pub fn zeta_from_moment_exponent(s: u32, rho: f64, dim: usize) -> Result<Self> {
        check_scale_dim(rho, dim)?;
        if s < 4 || (s - 4) as usize <= dim {
            return Err(Error::InvalidArgument(format!(
                "zeta envelope with moment order {s} is not integrable in dimension {dim}"
            )));
        }
        let q = s - 4;
        Ok(Self {
            kind: EnvelopeKind::Zeta { q },
            scale: rho,
            dim,
            normalizer: reciprocal_power_normalizer(dim, q),
        })
    }

    pub fn xi(s_prime: u32, rho: f64, dim: usize) -> Result<Self> {
        check_scale_dim(rho, dim)?;
        if s_prime < 2 || (2 * s_prime - 2) as usize <= dim {
            return Err(Error::InvalidArgument(format!(
                "xi envelope with index {s_prime} is not integrable in dimension {dim}"
            )));
        }
        let q = 2 * s_prime - 2;
        Ok(Self {
            kind: EnvelopeKind::Xi { q },
            scale: rho,
            dim,
            normalizer: reciprocal_power_normalizer(dim, q),
        })
    }

    /// Same shape at a different scale, sharing the cached normalizer.
    pub fn with_scale(&self, rho: f64) -> Result<Self> {
        check_scale_dim(rho, self.dim)?;
        Ok(Self {
            scale: rho,
            ..self.clone()
        })
    }

    #[inline]
    fn shape(&self, scaled_norm: f64) -> f64 {
        match self.kind {
            EnvelopeKind::Phi { c } => (-c * scaled_norm * scaled_norm).exp(),
            EnvelopeKind::Zeta { q } | EnvelopeKind::Xi { q } => {
                1.0 / (1.0 + scaled_norm.powi(q as i32))
            }
        }
    }

    /// `rho^{-d} shape(u/rho) / normalizer`.
    pub fn value(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dim);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.value_at_radius(norm)
    }

    /// Radial form of [`Self::value`] (the shapes are isotropic).
    #[inline]
    pub fn value_at_radius(&self, norm: f64) -> f64 {
        self.scale.powi(-(self.dim as i32)) * self.shape(norm / self.scale) / self.normalizer
    }
}

fn check_scale_dim(rho: f64, dim: usize) -> Result<()> {
    if !(rho > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "envelope scale {rho} must be positive"
        )));
    }
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be >= 1".into()));
    }
    Ok(())
}

/// `int_{R^d} (1 + ||z||^q)^{-1} dz` by radial quadrature: the surface
/// measure of the unit sphere times two smooth Gauss-Legendre panels (the
/// outer one mapped in through `r -> 1/r`). Requires `q > d`.
fn reciprocal_power_normalizer(dim: usize, q: u32) -> f64 {
    let omega = match dim {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        d => 2.0 * std::f64::consts::PI.powf(d as f64 / 2.0) / gamma_one_plus_half(d - 2),
    };
    let rule = gauss_legendre_on(64, 0.0, 1.0);
    let qi = q as i32;
    let inner = rule.integrate(|r| r.powi(dim as i32 - 1) / (1.0 + r.powi(qi)));
    let outer = rule.integrate(|u| u.powi(qi - dim as i32 - 1) / (1.0 + u.powi(qi)));
    omega * (inner + outer)
}

// ---------------------------------------------------------------------------
// Weighted sup-error
// ---------------------------------------------------------------------------

/// `max over (x, y) pairs of Q_delta(y - x) |pA(x,y) - pB(x,y)|`, the
/// finite-sample surrogate for the weighted sup-norm distance between
/// transition densities. Rejects non-finite evaluator output.
pub fn weighted_sup_error(
    pa: impl Fn(&[f64], &[f64]) -> f64,
    pb: impl Fn(&[f64], &[f64]) -> f64,
    delta: f64,
    pairs: &[(Vec<f64>, Vec<f64>)],
    s_prime: u32,
    dim: usize,
) -> Result<f64> {
    let weight = WeightQ::new(delta, s_prime, dim)?;
    let mut best = 0.0f64;
    let mut diff = vec![0.0; dim];
    for (x, y) in pairs {
        let (a, b) = (pa(x, y), pb(x, y));
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::NonFinite(format!(
                "density evaluator returned {a} / {b} at x={x:?}, y={y:?}"
            )));
        }
        for i in 0..dim {
            diff[i] = y[i] - x[i];
        }
        best = best.max(weight.value(&diff) * (a - b).abs());
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Rate and constant fitting
// ---------------------------------------------------------------------------

/// Least-squares fit of `log(error)` against `log(n)`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RateReport {
    /// The fitted `(n, error)` points.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares on `(log n, log error)`; needs at least three
/// strictly positive points.
pub fn fit_rate(points: &[(f64, f64)]) -> Result<RateReport> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "rate fit needs >= 3 points, got {}",
            points.len()
        )));
    }
    for &(n, e) in points {
        if !(n > 0.0) || !(e > 0.0) || !e.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rate fit needs positive finite samples, got ({n}, {e})"
            )));
        }
    }
    let m = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - xbar).powi(2)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let sst: f64 = ys.iter().map(|y| (y - ybar).powi(2)).sum();
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let r_squared = if sst > 1e-30 { 1.0 - ssr / sst } else { 1.0 };
    Ok(RateReport {
        points: points.to_vec(),
        slope,
        intercept,
        r_squared,
    })
}

/// The least constant `C` with `|value| <= C * envelope` across the
/// sample: `max |value| / envelope`.
pub fn fit_envelope_constant(samples: &[(f64, f64)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "envelope fit needs at least one sample".into(),
        ));
    }
    let mut best = 0.0f64;
    for &(value, envelope) in samples {
        if !(envelope > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "envelope values must be positive, got {envelope}"
            )));
        }
        let ratio = value.abs() / envelope;
        if !ratio.is_finite() {
            return Err(Error::NonFinite(format!(
                "sample ratio {value} / {envelope}"
            )));
        }
        best = best.max(ratio);
    }
    Ok(best)
}

/// Scans decay constants `C` for the Gaussian envelope and returns the
/// `(C, C1)` pair minimizing the fitted constant `C1` over the samples
/// `(value, u, rho)`; the envelope is evaluated as `phi_{C, rho}(u)`.
pub fn fit_gaussian_envelope_pair(
    samples: &[(f64, Vec<f64>, f64)],
    dim: usize,
    c_grid: &[f64],
) -> Result<(f64, f64)> {
    if samples.is_empty() || c_grid.is_empty() {
        return Err(Error::InvalidArgument(
            "envelope pair fit needs samples and a C grid".into(),
        ));
    }
    let mut best: Option<(f64, f64)> = None;
    for &c in c_grid {
        let base = EnvelopeSpec::phi(c, 1.0, dim)?;
        let mut c1 = 0.0f64;
        for (value, u, rho) in samples {
            let env = base.with_scale(*rho)?.value(u);
            if !(env > 0.0) {
                return Err(Error::NonFinite(format!("envelope vanished at {u:?}")));
            }
            c1 = c1.max(value.abs() / env);
        }
        if best.is_none_or(|(_, b)| c1 < b) {
            best = Some((c, c1));
        }
    }
    Ok(best.unwrap())
}
