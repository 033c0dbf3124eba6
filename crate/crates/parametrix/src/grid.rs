//! Uniform tensor grids and density fields living on them.
//!
//! All field computations in this crate stay on axis-aligned uniform grids:
//! trapezoid weights are spectrally accurate for the Gaussian-like
//! integrands that arise here, and uniformity keeps the cubic interpolation
//! used by scaled near-singular quadratures cheap and deterministic.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    dim: usize,
    min: Vec<f64>,
    step: Vec<f64>,
    shape: Vec<usize>,
}

impl SpatialGrid {
    /// Grid covering `center ± half_width` with `points` nodes per axis.
    pub fn centered(center: &[f64], half_width: &[f64], points: usize) -> Result<Self> {
        if center.is_empty() || center.len() != half_width.len() {
            return Err(Error::InvalidArgument(
                "grid center/half-width dimension mismatch".into(),
            ));
        }
        if points < 2 || points % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "points per axis must be odd and >= 3, got {points}"
            )));
        }
        if half_width.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("non-positive half-width".into()));
        }
        let dim = center.len();
        let min = center
            .iter()
            .zip(half_width)
            .map(|(&c, &w)| c - w)
            .collect();
        let step = half_width
            .iter()
            .map(|&w| 2.0 * w / (points - 1) as f64)
            .collect();
        Ok(Self {
            dim,
            min,
            step,
            shape: vec![points; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self) -> &[f64] {
        &self.step
    }

    pub fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        self.min[axis] + self.step[axis] * i as f64
    }

    /// Multi-index of a flat index (row-major, last axis fastest).
    pub fn unravel(&self, flat: usize, out: &mut [usize]) {
        let mut rem = flat;
        for axis in (0..self.dim).rev() {
            out[axis] = rem % self.shape[axis];
            rem /= self.shape[axis];
        }
    }

    pub fn node(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for axis in (0..self.dim).rev() {
            let i = rem % self.shape[axis];
            rem /= self.shape[axis];
            out[axis] = self.axis_coord(axis, i);
        }
    }

    pub fn node_vec(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.node(flat, &mut out);
        out
    }

    /// Flat index of the node nearest to `point` (clamped to the grid).
    pub fn nearest_flat(&self, point: &[f64]) -> usize {
        let mut flat = 0;
        for axis in 0..self.dim {
            let raw = (point[axis] - self.min[axis]) / self.step[axis];
            let i = raw.round().clamp(0.0, (self.shape[axis] - 1) as f64) as usize;
            flat = flat * self.shape[axis] + i;
        }
        flat
    }

    /// Tensor-product trapezoid weights (one weight per flat node).
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let axis_w: Vec<Vec<f64>> = (0..self.dim)
            .map(|a| crate::quad::trapezoid_weights(self.shape[a], self.step[a]))
            .collect();
        let mut out = vec![0.0; self.len()];
        let mut idx = vec![0usize; self.dim];
        for (flat, w) in out.iter_mut().enumerate() {
            self.unravel(flat, &mut idx);
            *w = (0..self.dim).map(|a| axis_w[a][idx[a]]).product();
        }
        out
    }

    /// Cubic (4-point Lagrange per axis) interpolation of `values` at
    /// `point`; the stencil is clamped near the boundary.
    pub fn interpolate(&self, values: &[f64], point: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.len());
        match self.dim {
            1 => {
                let (base, w) = self.axis_stencil(0, point[0]);
                (0..4).map(|a| w[a] * values[base + a]).sum()
            }
            2 => {
                let (b0, w0) = self.axis_stencil(0, point[0]);
                let (b1, w1) = self.axis_stencil(1, point[1]);
                let n1 = self.shape[1];
                let mut acc = 0.0;
                for a in 0..4 {
                    let row = (b0 + a) * n1 + b1;
                    let mut racc = 0.0;
                    for b in 0..4 {
                        racc += w1[b] * values[row + b];
                    }
                    acc += w0[a] * racc;
                }
                acc
            }
            _ => {
                // Rare path; recursive tensor product.
                self.interpolate_nd(values, point, 0, 0)
            }
        }
    }

    fn interpolate_nd(&self, values: &[f64], point: &[f64], axis: usize, offset: usize) -> f64 {
        let (base, w) = self.axis_stencil(axis, point[axis]);
        let stride: usize = self.shape[axis + 1..].iter().product();
        let mut acc = 0.0;
        for a in 0..4 {
            let off = offset + (base + a) * stride;
            let v = if axis + 1 == self.dim {
                values[off]
            } else {
                self.interpolate_nd(values, point, axis + 1, off)
            };
            acc += w[a] * v;
        }
        acc
    }

    /// Start index and Lagrange weights of the 4-point stencil along `axis`.
    fn axis_stencil(&self, axis: usize, x: f64) -> (usize, [f64; 4]) {
        let n = self.shape[axis];
        let raw = (x - self.min[axis]) / self.step[axis];
        let cell = (raw.floor() as isize).clamp(1, n as isize - 3) - 1;
        let base = cell as usize;
        // xi measured from the second stencil node in step units.
        let xi = raw - (base + 1) as f64;
        let w = [
            -xi * (xi - 1.0) * (xi - 2.0) / 6.0,
            (xi + 1.0) * (xi - 1.0) * (xi - 2.0) / 2.0,
            -(xi + 1.0) * xi * (xi - 2.0) / 2.0,
            (xi + 1.0) * xi * (xi - 1.0) / 6.0,
        ];
        (base, w)
    }
}

/// A scalar field sampled on a [`SpatialGrid`], typically a transition
/// density in its terminal argument for a fixed start point.
#[derive(Debug, Clone)]
pub struct DensityField {
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
    /// Start time of the transition the field describes.
    pub s: f64,
    /// Terminal time.
    pub t: f64,
    /// Start point.
    pub x: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: SpatialGrid, values: Vec<f64>, s: f64, t: f64, x: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        Self {
            grid,
            values,
            s,
            t,
            x,
        }
    }

    /// Trapezoid mass of the field over its grid.
    pub fn mass(&self) -> f64 {
        self.grid
            .trapezoid_weights()
            .iter()
            .zip(&self.values)
            .map(|(w, v)| w * v)
            .sum()
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn value_at(&self, point: &[f64]) -> f64 {
        self.grid.interpolate(&self.values, point)
    }

    /// CSV body (`y,value` in one dimension, `y1,..,yd,value` otherwise),
    /// with deterministic float formatting.
    pub fn to_csv(&self) -> String {
        let dim = self.grid.dim();
        let mut out = String::new();
        if dim == 1 {
            out.push_str("y,value\n");
        } else {
            for a in 0..dim {
                out.push_str(&format!("y{},", a + 1));
            }
            out.push_str("value\n");
        }
        let mut pt = vec![0.0; dim];
        for (flat, v) in self.values.iter().enumerate() {
            self.grid.node(flat, &mut pt);
            for c in &pt {
                out.push_str(&format!("{c:.12e},"));
            }
            out.push_str(&format!("{v:.12e}\n"));
        }
        out
    }
}
