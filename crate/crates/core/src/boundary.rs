//! Discretized boundary circle and spectral calculus on it.

use std::f64::consts::TAU;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier;

/// Mean magnitude (relative to the sup norm, plus one) above which the
/// antiderivative reports that a nonzero mean was projected out.
pub const MEAN_WARNING_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct GeometrySpec {
    n_nodes: usize,
    radius: f64,
}

/// Equispaced nodes on a circle centered at the origin, counterclockwise.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GeometrySpec", into = "GeometrySpec")]
pub struct BoundaryGeometry {
    n_nodes: usize,
    radius: f64,
    nodes: Vec<Complex64>,
    normals: Vec<Complex64>,
    weights: Vec<f64>,
}

impl TryFrom<GeometrySpec> for BoundaryGeometry {
    type Error = Error;

    fn try_from(spec: GeometrySpec) -> Result<Self> {
        Self::disk(spec.n_nodes, spec.radius)
    }
}

impl From<BoundaryGeometry> for GeometrySpec {
    fn from(g: BoundaryGeometry) -> Self {
        GeometrySpec {
            n_nodes: g.n_nodes,
            radius: g.radius,
        }
    }
}

impl PartialEq for BoundaryGeometry {
    fn eq(&self, other: &Self) -> bool {
        self.n_nodes == other.n_nodes && self.radius == other.radius
    }
}

impl BoundaryGeometry {
    pub fn disk(n_nodes: usize, radius: f64) -> Result<Self> {
        if n_nodes < 8 || !n_nodes.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "n_nodes must be a power of two and at least 8, got {n_nodes}"
            )));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::Parameter(format!("radius must be positive, got {radius}")));
        }
        let normals: Vec<Complex64> = (0..n_nodes)
            .map(|j| Complex64::from_polar(1.0, TAU * j as f64 / n_nodes as f64))
            .collect();
        let nodes = normals.iter().map(|nu| nu * radius).collect();
        let weights = vec![TAU * radius / n_nodes as f64; n_nodes];
        Ok(Self {
            n_nodes,
            radius,
            nodes,
            normals,
            weights,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn nodes(&self) -> &[Complex64] {
        &self.nodes
    }

    /// Outward unit normals as complex numbers.
    pub fn normals(&self) -> &[Complex64] {
        &self.normals
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn angle(&self, j: usize) -> f64 {
        TAU * j as f64 / self.n_nodes as f64
    }

    pub fn length(&self) -> f64 {
        TAU * self.radius
    }

    /// Largest mode `M` such that modes `-M..=M` are resolved without touching Nyquist.
    pub fn max_resolved_mode(&self) -> usize {
        self.n_nodes / 2 - 1
    }

    /// Samples `f` at the nodes.
    pub fn sample(&self, f: impl Fn(Complex64) -> Complex64) -> BoundaryFunction {
        BoundaryFunction::new(self.nodes.iter().map(|&z| f(z)).collect())
    }

    /// Samples the Fourier mode `e^{inθ}`.
    pub fn mode(&self, n: i64) -> BoundaryFunction {
        BoundaryFunction::new(
            (0..self.n_nodes)
                .map(|j| Complex64::from_polar(1.0, n as f64 * self.angle(j)))
                .collect(),
        )
    }

    /// Arclength integral by the trapezoidal rule.
    pub fn integrate(&self, f: &BoundaryFunction) -> Complex64 {
        f.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .sum()
    }

    /// Boundary L² norm.
    pub fn l2_norm(&self, f: &BoundaryFunction) -> f64 {
        f.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v.norm_sqr() * w)
            .sum::<f64>()
            .sqrt()
    }

    /// Arclength average.
    pub fn mean(&self, f: &BoundaryFunction) -> Complex64 {
        self.integrate(f) / self.length()
    }

    pub(crate) fn check(&self, f: &BoundaryFunction) -> Result<()> {
        if f.len() != self.n_nodes {
            return Err(Error::Shape {
                expected: self.n_nodes,
                got: f.len(),
            });
        }
        Ok(())
    }

    /// Spectral derivative with respect to arclength.
    pub fn tangential_derivative(&self, f: &BoundaryFunction) -> Result<BoundaryFunction> {
        self.check(f)?;
        let r = self.radius;
        let values = fourier::apply_multiplier(&f.values, |n, nyquist| {
            if nyquist {
                Complex64::default()
            } else {
                Complex64::new(0.0, n as f64 / r)
            }
        });
        Ok(BoundaryFunction::new(values))
    }

    /// Mean-zero arclength antiderivative. A nonzero input mean is projected
    /// out and reported.
    pub fn tangential_antiderivative(&self, f: &BoundaryFunction) -> Result<Antiderivative> {
        self.check(f)?;
        let r = self.radius;
        let mut c = fourier::coefficients(&f.values);
        let removed_mean = c[0];
        let scale = 1.0 + f.sup_norm();
        for (idx, ci) in c.iter_mut().enumerate() {
            let n = fourier::mode_of(idx, self.n_nodes);
            if n == 0 || fourier::is_nyquist(idx, self.n_nodes) {
                *ci = Complex64::default();
            } else {
                *ci /= Complex64::new(0.0, n as f64 / r);
            }
        }
        Ok(Antiderivative {
            function: BoundaryFunction::new(fourier::synthesize(&c)),
            removed_mean,
            mean_warning: removed_mean.norm() > MEAN_WARNING_TOL * scale,
        })
    }

    /// Fourier coefficients `c_n`, `f = Σ c_n e^{inθ}`, for modes `-max_mode..=max_mode`.
    pub fn mode_coefficients(&self, f: &BoundaryFunction, max_mode: usize) -> Result<Vec<Complex64>> {
        self.check(f)?;
        if max_mode > self.max_resolved_mode() {
            return Err(Error::Parameter(format!(
                "max_mode {max_mode} exceeds the {} resolved modes of {} nodes",
                self.max_resolved_mode(),
                self.n_nodes
            )));
        }
        let c = fourier::coefficients(&f.values);
        let m = max_mode as i64;
        Ok((-m..=m)
            .map(|n| c[fourier::index_of(n, self.n_nodes)])
            .collect())
    }

    /// Point values of `Σ c_n e^{inθ}` for modes `-M..=M`, `M = (len - 1) / 2`.
    pub fn synthesize_modes(&self, coeffs: &[Complex64]) -> Result<BoundaryFunction> {
        let max_mode = coeffs.len() / 2;
        if coeffs.len().is_multiple_of(2) || max_mode > self.max_resolved_mode() {
            return Err(Error::Parameter(format!(
                "cannot synthesize {} mode coefficients on {} nodes",
                coeffs.len(),
                self.n_nodes
            )));
        }
        let mut c = vec![Complex64::default(); self.n_nodes];
        for (i, &ci) in coeffs.iter().enumerate() {
            let n = i as i64 - max_mode as i64;
            c[fourier::index_of(n, self.n_nodes)] = ci;
        }
        Ok(BoundaryFunction::new(fourier::synthesize(&c)))
    }
}

/// Complex samples at the nodes of a [`BoundaryGeometry`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BoundaryFunction {
    values: Vec<Complex64>,
}

impl BoundaryFunction {
    pub fn new(values: Vec<Complex64>) -> Self {
        Self { values }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![Complex64::default(); n])
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn conj(&self) -> Self {
        Self::new(self.values.iter().map(|v| v.conj()).collect())
    }

    pub fn scale(&self, a: Complex64) -> Self {
        Self::new(self.values.iter().map(|v| v * a).collect())
    }

    /// Pointwise product.
    pub fn mul(&self, other: &Self) -> Self {
        Self::new(self.values.iter().zip(&other.values).map(|(a, b)| a * b).collect())
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Self) -> Self {
        Self::new(self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct Antiderivative {
    pub function: BoundaryFunction,
    /// Mean of the input, removed before integrating.
    pub removed_mean: Complex64,
    pub mean_warning: bool,
}
