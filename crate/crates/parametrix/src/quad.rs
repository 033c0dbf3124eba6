//! Shared quadrature primitives.
//!
//! Everything downstream (coefficient integrals, space-time convolutions,
//! innovation moments) is built from three pieces: Gauss-Legendre rules,
//! Gauss-Jacobi rules absorbing a `(t-u)^{-alpha}` endpoint factor, and
//! uniform trapezoid/Simpson weights for tensor grids.

use crate::error::{Error, Result};

/// Nodes and weights of an `n`-point rule on `[a, b]`.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }
}

/// Gauss-Legendre nodes/weights on `[-1, 1]`, by Newton iteration on the
/// Legendre recurrence. Exact for polynomials of degree `2n - 1`.
pub fn gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1, "rule needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi-style initial guess, then Newton.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_and_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    Rule { nodes, weights }
}

fn legendre_and_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Gauss-Legendre rule mapped onto `[a, b]`.
pub fn gauss_legendre_on(n: usize, a: f64, b: f64) -> Rule {
    let base = gauss_legendre(n);
    affine_map(base, a, b)
}

/// The 16-point Gauss-Legendre rule on `[-1, 1]`, computed once. This is
/// the workhorse for coefficient time integrals.
pub fn gauss_legendre_16() -> &'static Rule {
    static RULE: std::sync::OnceLock<Rule> = std::sync::OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

fn affine_map(base: Rule, a: f64, b: f64) -> Rule {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    Rule {
        nodes: base.nodes.iter().map(|&x| c + h * x).collect(),
        weights: base.weights.iter().map(|&w| w * h).collect(),
    }
}

/// Gauss-Jacobi rule for `int_{-1}^{1} f(x) (1-x)^{-alpha} dx`
/// (`0 <= alpha < 1`), via Golub-Welsch on the monic Jacobi recurrence.
///
/// The weights absorb the singular factor, so `f` is evaluated bare.
pub fn gauss_jacobi_right(n: usize, alpha: f64) -> Result<Rule> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "singularity exponent {alpha} outside [0, 1)"
        )));
    }
    if alpha == 0.0 {
        return Ok(gauss_legendre(n));
    }
    let a = -alpha; // Jacobi exponent on (1 - x)
    let b = 0.0;
    let mu0 = 2f64.powf(a + 1.0) / (a + 1.0); // beta = 0 closed form
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n.saturating_sub(1)];
    for k in 0..n {
        let kf = k as f64;
        diag[k] = if k == 0 {
            (b - a) / (a + b + 2.0)
        } else {
            (b * b - a * a) / ((2.0 * kf + a + b) * (2.0 * kf + a + b + 2.0))
        };
        if k + 1 < n {
            let j = kf + 1.0;
            let beta = if k == 0 {
                4.0 * (1.0 + a) * (1.0 + b) / ((2.0 + a + b).powi(2) * (3.0 + a + b))
            } else {
                4.0 * j * (j + a) * (j + b) * (j + a + b)
                    / ((2.0 * j + a + b).powi(2)
                        * (2.0 * j + a + b + 1.0)
                        * (2.0 * j + a + b - 1.0))
            };
            off[k] = beta.sqrt();
        }
    }
    let mut m = nalgebra::DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        m[(k, k)] = diag[k];
        if k + 1 < n {
            m[(k, k + 1)] = off[k];
            m[(k + 1, k)] = off[k];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|j| {
            let node = eig.eigenvalues[j];
            let v0 = eig.eigenvectors[(0, j)];
            (node, mu0 * v0 * v0)
        })
        .collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0));
    Ok(Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

/// How the time integral deals with the `(t-u)^{-alpha}` factor carried by
/// the right factor of a space-time convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TimeRule {
    /// Substitute `t - u = v^{1/(1-alpha)}` and apply Gauss-Legendre in `v`.
    SubstitutionSqrt,
    /// Gauss-Jacobi weights absorbing the endpoint factor directly.
    GaussJacobiEndpoint,
}

/// Nodes/weights in `u` for `int_s^t g(u) du` where `g` behaves like
/// `(t-u)^{-alpha} x smooth` near `u = t`. The returned weights integrate
/// `g` itself (the singular factor stays inside `g`).
pub fn singular_time_rule(rule: TimeRule, n: usize, s: f64, t: f64, alpha: f64) -> Result<Rule> {
    if t <= s {
        return Err(Error::InvalidArgument(format!(
            "time interval [{s}, {t}] is empty"
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "singularity exponent {alpha} outside [0, 1)"
        )));
    }
    match rule {
        TimeRule::SubstitutionSqrt => {
            if alpha == 0.0 {
                return Ok(gauss_legendre_on(n, s, t));
            }
            // u = t - v^beta, du = beta v^{beta-1} dv; the Jacobian tames
            // the endpoint because beta(1-alpha) = 1.
            let beta = 1.0 / (1.0 - alpha);
            let vmax = (t - s).powf(1.0 / beta);
            let base = gauss_legendre_on(n, 0.0, vmax);
            let mut nodes = Vec::with_capacity(n);
            let mut weights = Vec::with_capacity(n);
            for (&v, &w) in base.nodes.iter().zip(&base.weights) {
                nodes.push(t - v.powf(beta));
                weights.push(w * beta * v.powf(beta - 1.0));
            }
            Ok(Rule { nodes, weights })
        }
        TimeRule::GaussJacobiEndpoint => {
            // Map [-1,1] with weight (1-x)^{-alpha} onto [s,t]; the factor
            // ((t-s)/2)^{-alpha} restores the unscaled singularity, and the
            // absorbed weight is divided back out so callers may evaluate
            // the full integrand including its singular factor.
            let gj = gauss_jacobi_right(n, alpha)?;
            let half = 0.5 * (t - s);
            let mut nodes = Vec::with_capacity(n);
            let mut weights = Vec::with_capacity(n);
            for (&x, &w) in gj.nodes.iter().zip(&gj.weights) {
                let u = s + half * (x + 1.0);
                let singular = (t - u).powf(-alpha);
                nodes.push(u);
                weights.push(w * half * half.powf(-alpha) / singular);
            }
            Ok(Rule { nodes, weights })
        }
    }
}

/// Composite trapezoid weights for `n` uniformly spaced nodes with step `h`.
pub fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    assert!(n >= 2);
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// Composite Simpson weights; requires an odd node count.
pub fn simpson_weights(n: usize, h: f64) -> Result<Vec<f64>> {
    if n < 3 || n % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "Simpson rule needs an odd node count >= 3, got {n}"
        )));
    }
    let mut w = vec![0.0; n];
    for i in 0..n - 2 {
        if i % 2 == 0 {
            w[i] += h / 3.0;
            w[i + 1] += 4.0 * h / 3.0;
            w[i + 2] += h / 3.0;
        }
    }
    Ok(w)
}

/// `Gamma(1 + r/2)` for the factorial decay of convolution-series tails;
/// exact at integer and half-integer arguments.
pub fn gamma_one_plus_half(r: usize) -> f64 {
    if r % 2 == 0 {
        (1..=r / 2).map(|k| k as f64).product()
    } else {
        let mut g = std::f64::consts::PI.sqrt();
        let mut x = 0.5;
        let target = 1.0 + r as f64 / 2.0;
        while x < target - 1e-9 {
            g *= x;
            x += 1.0;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_16_is_exact_to_degree_31() {
        let rule = gauss_legendre_on(16, 0.0, 1.0);
        // int_0^1 u^31 du = 1/32
        let got = rule.integrate(|u| u.powi(31));
        assert!((got - 1.0 / 32.0).abs() < 1e-15);
        let got = rule.integrate(|u| (1.0 + u).powi(31));
        let exact = (2f64.powi(32) - 1.0) / 32.0;
        assert!((got - exact).abs() / exact < 5e-14);
    }

    #[test]
    fn gauss_jacobi_matches_closed_forms() {
        let rule = gauss_jacobi_right(8, 0.5).unwrap();
        // int_{-1}^{1} (1-x)^{-1/2} dx = 2 sqrt(2)
        let total: f64 = rule.weights.iter().sum();
        assert!((total - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        // int_{-1}^{1} x (1-x)^{-1/2} dx = 2 sqrt(2)/3 by the substitution
        // 1 - x = s^2 (the measure concentrates at x = +1, mean 1/3).
        let got = rule.integrate(|x| x);
        let exact = 2.0 * 2f64.sqrt() / 3.0;
        assert!((got - exact).abs() < 1e-12, "{got} vs {exact}");
    }

    #[test]
    fn singular_rules_integrate_inverse_sqrt_to_two() {
        for rule in [TimeRule::SubstitutionSqrt, TimeRule::GaussJacobiEndpoint] {
            let r = singular_time_rule(rule, 16, 0.0, 1.0, 0.5).unwrap();
            let got = r.integrate(|u| (1.0 - u).powf(-0.5));
            assert!((got - 2.0).abs() < 1e-10, "{rule:?}: {got}");
        }
    }

    #[test]
    fn singular_rule_rejects_bad_arguments() {
        assert!(singular_time_rule(TimeRule::SubstitutionSqrt, 8, 1.0, 1.0, 0.5).is_err());
        assert!(singular_time_rule(TimeRule::SubstitutionSqrt, 8, 0.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn simpson_is_exact_on_cubics() {
        let n = 11;
        let h = 0.1;
        let w = simpson_weights(n, h).unwrap();
        let got: f64 = (0..n).map(|i| w[i] * (i as f64 * h).powi(3)).sum();
        assert!((got - 0.25).abs() < 1e-14);
        assert!(simpson_weights(4, 0.1).is_err());
    }

    #[test]
    fn trapezoid_nails_a_well_resolved_gaussian() {
        let n = 161;
        let h = 16.0 / (n - 1) as f64;
        let w = trapezoid_weights(n, h);
        let got: f64 = (0..n)
            .map(|i| {
                let x = -8.0 + i as f64 * h;
                w[i] * (-0.5 * x * x).exp()
            })
            .sum();
        assert!((got - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn gamma_half_integers() {
        assert!((gamma_one_plus_half(0) - 1.0).abs() < 1e-15);
        assert!((gamma_one_plus_half(2) - 1.0).abs() < 1e-15);
        assert!((gamma_one_plus_half(4) - 2.0).abs() < 1e-15);
        let g15 = 0.5 * std::f64::consts::PI.sqrt(); // Gamma(3/2)
        assert!((gamma_one_plus_half(1) - g15).abs() < 1e-15);
        let g25 = 1.5 * g15; // Gamma(5/2)
        assert!((gamma_one_plus_half(3) - g25).abs() < 1e-14);
    }
}
