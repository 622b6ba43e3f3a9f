//! Scattering transform: from boundary traces, and independently from the
//! potential by solving the direct problem in the plane.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::BoundaryGeometry;
use crate::cgo::{second_column_trace, CgoTrace, TraceSolver};
use crate::error::{Error, Result};
use crate::fourier::LinearConvolver;
use crate::gmres::{gmres_complex, SolverConfig};
use crate::io;
use crate::phantom::ConductivityField;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// `e(z, k) = exp(i(zk + z̄k̄))`, unimodular for all `z, k`.
pub fn plane_phase(z: Complex64, k: Complex64) -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * (z * k).re)
}

/// Square grid of spectral parameters, side `2^m`, nodes `h_k·(j - 2^{m-1}) + i·h_k·(r - 2^{m-1})`
/// so that `k = 0` is a node. Values outside `|k| ≤ R_k` are zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KGrid {
    pub m: u32,
    pub h_k: f64,
    #[serde(rename = "R_k")]
    pub r_k: f64,
}

impl KGrid {
    /// Default spacing puts the unpaired first row and column at `1.1·R_k`, outside the truncation disk.
    pub fn new(m: u32, r_k: f64, h_k: Option<f64>) -> Result<Self> {
        let side = 1usize << m.min(20);
        let grid = Self {
            m,
            h_k: h_k.unwrap_or(2.2 * r_k / side as f64),
            r_k,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=11).contains(&self.m) {
            return Err(Error::Parameter(format!("grid exponent m must lie in 2..=11, got {}", self.m)));
        }
        if !(self.r_k > 0.0 && self.r_k.is_finite() && self.h_k > 0.0 && self.h_k.is_finite()) {
            return Err(Error::Parameter("R_k and h_k must be positive".into()));
        }
        // the row and column at index 0 have no mirror image; they must carry zeros
        if (self.side() / 2) as f64 * self.h_k <= self.r_k {
            return Err(Error::Parameter(format!(
                "grid half-width {} must exceed R_k = {} so the grid is symmetric on its support",
                (self.side() / 2) as f64 * self.h_k,
                self.r_k
            )));
        }
        Ok(())
    }

    pub fn side(&self) -> usize {
        1 << self.m
    }

    pub fn len(&self) -> usize {
        self.side() * self.side()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn node(&self, idx: usize) -> Complex64 {
        let n = self.side();
        let half = (n / 2) as f64;
        Complex64::new(((idx % n) as f64 - half) * self.h_k, ((idx / n) as f64 - half) * self.h_k)
    }

    pub fn nodes(&self) -> Vec<Complex64> {
        (0..self.len()).map(|i| self.node(i)).collect()
    }

    pub fn origin(&self) -> usize {
        let n = self.side();
        (n / 2) * n + n / 2
    }

    pub fn in_support(&self, idx: usize) -> bool {
        self.node(idx).norm() <= self.r_k
    }

    /// Indices of the nodes inside the truncation disk, in row-major order.
    pub fn support(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.in_support(i)).collect()
    }

    /// Node of `k̄`.
    pub fn conj_index(&self, idx: usize) -> Option<usize> {
        let n = self.side();
        let (row, col) = (idx / n, idx % n);
        (row > 0).then(|| (n - row) * n + col)
    }

    /// Node of `-k̄`.
    pub fn neg_conj_index(&self, idx: usize) -> Option<usize> {
        let n = self.side();
        let (row, col) = (idx / n, idx % n);
        (col > 0).then(|| row * n + n - col)
    }

    /// Node of `-k`.
    pub fn neg_index(&self, idx: usize) -> Option<usize> {
        self.conj_index(idx).and_then(|j| self.neg_conj_index(j))
    }
}

/// Off-diagonal scattering data on a [`KGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct ScatteringGrid {
    pub grid: KGrid,
    pub s12: Vec<Complex64>,
    pub s21: Vec<Complex64>,
}

#[derive(Serialize, Deserialize)]
struct ScatteringSidecar {
    #[serde(flatten)]
    grid: KGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl ScatteringGrid {
    pub fn zeros(grid: KGrid) -> Self {
        Self {
            grid,
            s12: vec![Complex64::default(); grid.len()],
            s21: vec![Complex64::default(); grid.len()],
        }
    }

    /// Checks that the values vanish off the truncation disk, which makes the grid
    /// symmetric under `k ↦ k̄` and `k ↦ -k`.
    pub fn check_symmetric(&self) -> Result<()> {
        self.grid.validate()?;
        if self.s12.len() != self.grid.len() || self.s21.len() != self.grid.len() {
            return Err(Error::Shape {
                expected: self.grid.len(),
                got: self.s12.len().min(self.s21.len()),
            });
        }
        for i in 0..self.grid.len() {
            if !self.grid.in_support(i) && (self.s12[i] != Complex64::default() || self.s21[i] != Complex64::default()) {
                return Err(Error::Parameter(format!(
                    "scattering grid has a nonzero value at k = {} outside R_k",
                    self.grid.node(i)
                )));
            }
        }
        Ok(())
    }

    /// Largest `|S₁₂(k) - conj S₂₁(k̄)|`.
    pub fn conjugation_defect(&self) -> f64 {
        (0..self.grid.len())
            .filter_map(|i| self.grid.conj_index(i).map(|j| (self.s12[i] - self.s21[j].conj()).norm()))
            .fold(0.0, f64::max)
    }

    /// Writes `<stem>.bin` (S₁₂ block then S₂₁ block, each row-major with interleaved
    /// little-endian `f64` real and imaginary parts) and `<stem>.json` with `{m, h_k, R_k}`.
    pub fn write(&self, dir: &Path, stem: &str, config_hash: Option<&str>) -> Result<()> {
        let values: Vec<Complex64> = self.s12.iter().chain(&self.s21).copied().collect();
        io::write_complex_binary(&dir.join(format!("{stem}.bin")), &values)?;
        io::write_json(
            &dir.join(format!("{stem}.json")),
            &ScatteringSidecar {
                grid: self.grid,
                config_hash: config_hash.map(str::to_owned),
            },
        )
    }

    pub fn read(dir: &Path, stem: &str) -> Result<Self> {
        Ok(Self::read_with_hash(dir, stem)?.0)
    }

    /// Like [`ScatteringGrid::read`], also returning the recorded config hash.
    pub fn read_with_hash(dir: &Path, stem: &str) -> Result<(Self, Option<String>)> {
        let side: ScatteringSidecar = io::read_json(&dir.join(format!("{stem}.json")))?;
        side.grid.validate()?;
        let values = io::read_complex_binary(&dir.join(format!("{stem}.bin")))?;
        let n = side.grid.len();
        if values.len() != 2 * n {
            return Err(Error::Shape {
                expected: 2 * n,
                got: values.len(),
            });
        }
        let (s12, s21) = values.split_at(n);
        let grid = Self {
            grid: side.grid,
            s12: s12.to_vec(),
            s21: s21.to_vec(),
        };
        Ok((grid, side.config_hash))
    }
}

/// `S̃₂₁(k) = S₁₂(-k̄)`, `S̃₁₂(k) = S₂₁(-k̄)` on the same grid.
pub fn dual_scattering(grid: &ScatteringGrid) -> Result<ScatteringGrid> {
    grid.check_symmetric()?;
    let g = grid.grid;
    let pick = |src: &[Complex64], i: usize| g.neg_conj_index(i).map_or(Complex64::default(), |j| src[j]);
    Ok(ScatteringGrid {
        grid: g,
        s12: (0..g.len()).map(|i| pick(&grid.s21, i)).collect(),
        s21: (0..g.len()).map(|i| pick(&grid.s12, i)).collect(),
    })
}

/// `(S₁₂, S₂₁)(k)` by trapezoidal quadrature of the boundary formulas
/// `S₁₂ = (i/2π)∫ e^{-izk̄} ν ψ₁₂ ds` and `S₂₁ = -(i/2π)∫ e^{iz̄k̄} ν̄ ψ₂₁ ds`.
pub fn scattering_from_traces(
    geom: &BoundaryGeometry,
    trace: &CgoTrace,
    trace_at_conj_k: &CgoTrace,
) -> Result<(Complex64, Complex64)> {
    let k = trace.k;
    if (trace_at_conj_k.k - k.conj()).norm() > 1e-12 * (1.0 + k.norm()) {
        return Err(Error::Parameter(format!(
            "second trace is at {} but the conjugate of {k} is needed",
            trace_at_conj_k.k
        )));
    }
    geom.check(&trace.psi21)?;
    geom.check(&trace_at_conj_k.psi21)?;
    let psi12 = second_column_trace(trace_at_conj_k);
    let mut s12 = Complex64::default();
    let mut s21 = Complex64::default();
    for j in 0..geom.n_nodes() {
        let (z, nu, w) = (geom.nodes()[j], geom.normals()[j], geom.weights()[j]);
        s12 += (-I * z * k.conj()).exp() * nu * psi12.values()[j] * w;
        s21 += (I * z.conj() * k.conj()).exp() * nu.conj() * trace.psi21.values()[j] * w;
    }
    Ok((s12 * I / (2.0 * PI), -s21 * I / (2.0 * PI)))
}

/// Traces at every node of the truncation disk and the resulting scattering grid.
/// Traces are returned in the order of [`KGrid::support`].
pub fn scattering_grid(solver: &TraceSolver, grid: &KGrid) -> Result<(ScatteringGrid, Vec<CgoTrace>)> {
    grid.validate()?;
    let support = grid.support();
    let traces: Vec<CgoTrace> = support
        .par_iter()
        .map(|&i| solver.solve(grid.node(i)))
        .collect::<Result<_>>()?;
    let scattering = scattering_from_trace_set(solver.geometry(), grid, &traces)?;
    Ok((scattering, traces))
}

/// Assembles the grid from traces ordered as [`KGrid::support`].
pub fn scattering_from_trace_set(geom: &BoundaryGeometry, grid: &KGrid, traces: &[CgoTrace]) -> Result<ScatteringGrid> {
    let support = grid.support();
    if traces.len() != support.len() {
        return Err(Error::Shape {
            expected: support.len(),
            got: traces.len(),
        });
    }
    let mut position = vec![usize::MAX; grid.len()];
    for (p, &i) in support.iter().enumerate() {
        position[i] = p;
    }
    let values: Vec<(usize, (Complex64, Complex64))> = support
        .par_iter()
        .enumerate()
        .map(|(p, &i)| {
            let j = grid
                .conj_index(i)
                .filter(|&j| position[j] != usize::MAX)
                .ok_or_else(|| Error::Parameter(format!("no conjugate node for k = {}", grid.node(i))))?;
            Ok((i, scattering_from_traces(geom, &traces[p], &traces[position[j]])?))
        })
        .collect::<Result<_>>()?;
    let mut out = ScatteringGrid::zeros(*grid);
    for (i, (s12, s21)) in values {
        out.s12[i] = s12;
        out.s21[i] = s21;
    }
    Ok(out)
}

/// How `∂γ` is obtained for the potential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GradientSource {
    Exact,
    CentralDifference { step: f64 },
}

/// `q = -γ^{-1/2} ∂γ^{1/2} = -(γ_x - iγ_y)/(4γ)`.
#[derive(Clone, Debug)]
pub struct PotentialField {
    gamma: ConductivityField,
    gradient: GradientSource,
}

pub fn q_from_gamma(gamma: &ConductivityField, gradient: GradientSource) -> Result<PotentialField> {
    gamma.validate().map_err(|e| Error::Domain(e.to_string()))?;
    if gamma.lower_bound() <= 0.0 {
        return Err(Error::Domain("conductivity must be positive".into()));
    }
    if let GradientSource::CentralDifference { step } = gradient {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Parameter(format!("gradient step must be positive, got {step}")));
        }
    }
    Ok(PotentialField {
        gamma: gamma.clone(),
        gradient,
    })
}

impl PotentialField {
    pub fn value(&self, z: Complex64) -> Complex64 {
        let g = self.gamma.value(z);
        let grad = match self.gradient {
            GradientSource::Exact => self.gamma.gradient(z),
            GradientSource::CentralDifference { step } => {
                let dx = (self.gamma.value(z + step) - self.gamma.value(z - step)) / (2.0 * step);
                let dy = (self.gamma.value(z + I * step) - self.gamma.value(z - I * step)) / (2.0 * step);
                Complex64::new(dx, dy)
            }
        };
        -grad.conj() / (4.0 * g)
    }

    pub fn support_radius(&self) -> f64 {
        self.gamma.support_radius()
    }

    pub fn is_zero(&self) -> bool {
        self.gamma.is_unit()
    }
}

/// Direct-problem solver on a cell-centered square grid covering the support of `q`.
/// The solid Cauchy transforms are discrete linear convolutions (zero padding by 2).
pub struct AreaOracle {
    h: f64,
    centers: Vec<Complex64>,
    q: Vec<Complex64>,
    /// `∂̄⁻¹`, kernel `1/(πz)`.
    inv_dbar: LinearConvolver,
    /// `∂⁻¹`, kernel `1/(πz̄)`.
    inv_d: LinearConvolver,
    solver: SolverConfig,
}

#[derive(Clone, Copy, Debug)]
pub struct AreaScattering {
    pub s12: Complex64,
    pub s21: Complex64,
    pub iterations: usize,
}

impl AreaOracle {
    pub fn new(q: &PotentialField, resolution: usize, solver: SolverConfig) -> Result<Self> {
        if resolution < 4 || !resolution.is_power_of_two() {
            return Err(Error::Parameter(format!(
                "oracle resolution must be a power of two ≥ 4, got {resolution}"
            )));
        }
        solver.validate()?;
        let rho = q.support_radius().max(1e-3);
        let n = resolution;
        let h = 2.0 * rho / n as f64;
        let centers: Vec<Complex64> = (0..n * n)
            .map(|i| Complex64::new(-rho + ((i % n) as f64 + 0.5) * h, -rho + ((i / n) as f64 + 0.5) * h))
            .collect();
        let qv = centers.iter().map(|&z| q.value(z)).collect();
        let kernel = |conj: bool| {
            move |dx: i64, dy: i64| {
                if dx == 0 && dy == 0 {
                    Complex64::default()
                } else {
                    let w = Complex64::new(dx as f64 * h, dy as f64 * h);
                    h * h / (PI * if conj { w.conj() } else { w })
                }
            }
        };
        Ok(Self {
            h,
            centers,
            q: qv,
            inv_dbar: LinearConvolver::new(n, kernel(false)),
            inv_d: LinearConvolver::new(n, kernel(true)),
            solver,
        })
    }

    fn area(&self) -> f64 {
        self.h * self.h
    }

    /// `(m₁₁ - 1, m₂₁)` on the grid.
    pub fn first_column(&self, k: Complex64) -> Result<(Vec<Complex64>, Vec<Complex64>, usize)> {
        let len = self.q.len();
        let ep: Vec<Complex64> = self.centers.iter().map(|&z| plane_phase(z, k)).collect();
        // m₂₁ = e(z,-k) ∂⁻¹[e(·,k) q̄ m₁₁]
        let twisted = |f: &[Complex64]| -> Vec<Complex64> {
            let g: Vec<Complex64> = (0..len).map(|i| ep[i] * self.q[i].conj() * f[i]).collect();
            self.inv_d.convolve(&g).into_iter().zip(&ep).map(|(v, e)| v * e.conj()).collect()
        };
        let ones = vec![Complex64::new(1.0, 0.0); len];
        let mut rhs = vec![Complex64::default(); len];
        rhs.extend(twisted(&ones));
        let op = |x: &[Complex64]| -> Vec<Complex64> {
            let (u, v) = x.split_at(len);
            let qv: Vec<Complex64> = (0..len).map(|i| self.q[i] * v[i]).collect();
            let a = self.inv_dbar.convolve(&qv);
            let b = twisted(u);
            (0..len).map(|i| u[i] - a[i]).chain((0..len).map(|i| v[i] - b[i])).collect()
        };
        let (mut x, out) = gmres_complex(op, &rhs, &self.solver)?;
        let v = x.split_off(len);
        Ok((x, v, out.iterations))
    }

    /// `(m₁₂, m₂₂ - 1)` on the grid.
    pub fn second_column(&self, k: Complex64) -> Result<(Vec<Complex64>, Vec<Complex64>, usize)> {
        let len = self.q.len();
        let fp: Vec<Complex64> = self.centers.iter().map(|&z| plane_phase(z, k.conj())).collect();
        // m₁₂ = e(z,k̄) ∂̄⁻¹[e(·,-k̄) q m₂₂]
        let twisted = |f: &[Complex64]| -> Vec<Complex64> {
            let g: Vec<Complex64> = (0..len).map(|i| fp[i].conj() * self.q[i] * f[i]).collect();
            self.inv_dbar.convolve(&g).into_iter().zip(&fp).map(|(v, e)| v * e).collect()
        };
        let ones = vec![Complex64::new(1.0, 0.0); len];
        let mut rhs = twisted(&ones);
        rhs.extend(vec![Complex64::default(); len]);
        let op = |x: &[Complex64]| -> Vec<Complex64> {
            let (p, w) = x.split_at(len);
            let a = twisted(w);
            let qp: Vec<Complex64> = (0..len).map(|i| self.q[i].conj() * p[i]).collect();
            let b = self.inv_d.convolve(&qp);
            (0..len).map(|i| p[i] - a[i]).chain((0..len).map(|i| w[i] - b[i])).collect()
        };
        let (mut x, out) = gmres_complex(op, &rhs, &self.solver)?;
        let w = x.split_off(len);
        Ok((x, w, out.iterations))
    }

    /// `S₂₁ = -(i/π)∫ e(z,k) q̄ m₁₁ dμ` and `S₁₂ = (i/π)∫ e(z,-k̄) q m₂₂ dμ` by the midpoint rule.
    pub fn scattering(&self, k: Complex64) -> Result<AreaScattering> {
        let (u, _, it1) = self.first_column(k)?;
        let (_, w, it2) = self.second_column(k)?;
        let mut s12 = Complex64::default();
        let mut s21 = Complex64::default();
        for (i, &z) in self.centers.iter().enumerate() {
            s21 += plane_phase(z, k) * self.q[i].conj() * (1.0 + u[i]);
            s12 += plane_phase(z, -k.conj()) * self.q[i] * (1.0 + w[i]);
        }
        Ok(AreaScattering {
            s12: s12 * I * self.area() / PI,
            s21: -s21 * I * self.area() / PI,
            iterations: it1 + it2,
        })
    }

    /// `S₂₁` only (first column solve).
    pub fn scattering_s21(&self, k: Complex64) -> Result<Complex64> {
        let (u, _, _) = self.first_column(k)?;
        let s: Complex64 = self
            .centers
            .iter()
            .enumerate()
            .map(|(i, &z)| plane_phase(z, k) * self.q[i].conj() * (1.0 + u[i]))
            .sum();
        Ok(-s * I * self.area() / PI)
    }

    /// First-order term with `m = I`.
    pub fn born(&self, k: Complex64) -> (Complex64, Complex64) {
        let mut s12 = Complex64::default();
        let mut s21 = Complex64::default();
        for (i, &z) in self.centers.iter().enumerate() {
            s21 += plane_phase(z, k) * self.q[i].conj();
            s12 += plane_phase(z, -k.conj()) * self.q[i];
        }
        (s12 * I * self.area() / PI, -s21 * I * self.area() / PI)
    }

    /// `(ψ₁₁, ψ₂₁)(z, k)` at points outside the support of `q`, where both are
    /// given by the Cauchy integrals of the grid solution.
    pub fn first_column_trace(&self, k: Complex64, points: &[Complex64]) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
        let (u, v, _) = self.first_column(k)?;
        let a = self.area() / PI;
        let mut psi11 = Vec::with_capacity(points.len());
        let mut psi21 = Vec::with_capacity(points.len());
        for &z in points {
            let mut m11 = Complex64::new(1.0, 0.0);
            let mut m21 = Complex64::default();
            for (i, &w) in self.centers.iter().enumerate() {
                m11 += a * self.q[i] * v[i] / (z - w);
                m21 += a * plane_phase(w, k) * self.q[i].conj() * (1.0 + u[i]) / (z - w).conj();
            }
            m21 *= plane_phase(z, k).conj();
            let grow = (I * z * k).exp();
            psi11.push(m11 * grow);
            psi21.push(m21 * grow);
        }
        Ok((psi11, psi21))
    }
}

/// Convenience wrapper: builds an oracle and evaluates both entries at one `k`.
pub fn scattering_area_oracle(
    q: &PotentialField,
    k: Complex64,
    resolution: usize,
    solver: SolverConfig,
) -> Result<(Complex64, Complex64)> {
    if q.is_zero() {
        return Ok((Complex64::default(), Complex64::default()));
    }
    let s = AreaOracle::new(q, resolution, solver)?.scattering(k)?;
    Ok((s.s12, s.s21))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cgo::RegularizationConfig;
    use crate::dtn::dtn_unit;
    use proptest::prelude::*;

    fn bump(amplitude: f64) -> ConductivityField {
        ConductivityField::RadialBump {
            amplitude,
            support_radius: 0.8,
        }
    }

    #[test]
    fn grid_geometry() {
        let g = KGrid::new(4, 2.0, None).unwrap();
        assert_eq!(g.node(g.origin()), Complex64::default());
        for i in 0..g.len() {
            let k = g.node(i);
            match g.conj_index(i) {
                Some(j) => assert!((g.node(j) - k.conj()).norm() < 1e-12),
                None => assert!(!g.in_support(i)),
            }
            match g.neg_conj_index(i) {
                Some(j) => assert!((g.node(j) + k.conj()).norm() < 1e-12),
                None => assert!(!g.in_support(i)),
            }
        }
        assert!(KGrid::new(4, 2.0, Some(0.2)).is_err());
        let json = serde_json::to_value(g).unwrap();
        assert_eq!(json["R_k"], 2.0);
        assert_eq!(json["m"], 4);
    }

    #[test]
    fn unit_conductivity_scatters_nothing() {
        let geom = BoundaryGeometry::disk(32, 1.0).unwrap();
        let solver = TraceSolver::new(&dtn_unit(&geom, 15).unwrap(), RegularizationConfig::default()).unwrap();
        let grid = KGrid::new(3, 2.0, None).unwrap();
        let (s, traces) = scattering_grid(&solver, &grid).unwrap();
        assert_eq!(traces.len(), grid.support().len());
        assert!(s.s12.iter().chain(&s.s21).all(|v| v.norm() <= 1e-8));
        let q = q_from_gamma(&ConductivityField::Unit, GradientSource::Exact).unwrap();
        assert_eq!(q.value(Complex64::new(0.1, 0.2)), Complex64::default());
        let (a, b) = scattering_area_oracle(&q, Complex64::new(1.0, 0.0), 16, SolverConfig::default()).unwrap();
        assert_eq!((a, b), (Complex64::default(), Complex64::default()));
    }

    #[test]
    fn missing_conjugate_trace_is_rejected() {
        let geom = BoundaryGeometry::disk(16, 1.0).unwrap();
        let solver = TraceSolver::new(&dtn_unit(&geom, 7).unwrap(), RegularizationConfig::default()).unwrap();
        let a = solver.solve(Complex64::new(1.0, 1.0)).unwrap();
        assert!(matches!(scattering_from_traces(&geom, &a, &a), Err(Error::Parameter(_))));
    }

    #[test]
    fn radial_potential_matches_symbolic_derivative() {
        // γ = 1 + a·exp(1 - 1/(1-s²)), s = r/ρ, so γ'(r) = γ_bump'(s)/ρ, and q = -γ'(r) z̄ / (4rγ)
        let (a, rho) = (0.5, 0.8);
        let q = q_from_gamma(&bump(a), GradientSource::Exact).unwrap();
        for &(r, t) in &[(0.1, 0.3), (0.4, 2.0), (0.7, -1.2)] {
            let z = Complex64::from_polar(r, t);
            let s: f64 = r / rho;
            let b = (1.0 - 1.0 / (1.0 - s * s)).exp();
            let gamma = 1.0 + a * b;
            let dgamma = a * b * (-2.0 * s / (1.0 - s * s).powi(2)) / rho;
            let want = -dgamma * z.conj() / (4.0 * r * gamma);
            assert!((q.value(z) - want).norm() < 1e-13);
        }
    }

    #[test]
    fn central_difference_potential_is_second_order() {
        let exact = q_from_gamma(&bump(0.5), GradientSource::Exact).unwrap();
        let err = |step: f64| {
            let fd = q_from_gamma(&bump(0.5), GradientSource::CentralDifference { step }).unwrap();
            (0..50)
                .map(|i| Complex64::from_polar(0.75 * i as f64 / 50.0, 0.37 * i as f64))
                .map(|z| (fd.value(z) - exact.value(z)).norm())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(1e-3), err(5e-4));
        assert!((e1 / e2 - 4.0).abs() < 0.3, "ratio {}", e1 / e2);
    }

    #[test]
    fn nonpositive_conductivity_is_a_domain_error() {
        let bad = bump(-1.5);
        assert!(matches!(q_from_gamma(&bad, GradientSource::Exact), Err(Error::Domain(_))));
    }

    #[test]
    fn born_term_is_first_order() {
        let k = Complex64::new(1.0, 0.0);
        let cfg = SolverConfig {
            tol: 1e-13,
            ..SolverConfig::default()
        };
        let remainders: Vec<(f64, f64)> = [0.02, 0.01]
            .iter()
            .map(|&a| {
                let q = q_from_gamma(&bump(a), GradientSource::Exact).unwrap();
                let oracle = AreaOracle::new(&q, 32, cfg).unwrap();
                let full = oracle.scattering(k).unwrap();
                let (b12, b21) = oracle.born(k);
                ((full.s21 - b21).norm(), (full.s12 - b12).norm())
            })
            .collect();
        // m - I is off-diagonal to first order, so the remainder is in fact cubic
        for (r1, r2) in [(remainders[0].0, remainders[1].0), (remainders[0].1, remainders[1].1)] {
            assert!(r1 < 0.02 * 0.02 && r2 < 0.01 * 0.01);
            let order = (r1 / r2).log2();
            assert!((order - 3.0).abs() < 0.2, "observed order {order}");
        }
    }

    #[test]
    fn oracle_columns_are_conjugate_symmetric() {
        let q = q_from_gamma(&bump(0.5), GradientSource::Exact).unwrap();
        let oracle = AreaOracle::new(&q, 32, SolverConfig::default()).unwrap();
        let k = Complex64::new(0.7, -1.1);
        let at_k = oracle.scattering(k).unwrap();
        let at_conj = oracle.scattering(k.conj()).unwrap();
        assert!((at_k.s12 - at_conj.s21.conj()).norm() < 1e-7);
    }

    #[test]
    fn dual_of_zero_is_zero_and_dual_is_an_involution() {
        let grid = KGrid::new(4, 2.0, None).unwrap();
        let zero = ScatteringGrid::zeros(grid);
        assert_eq!(dual_scattering(&zero).unwrap(), zero);
        let mut s = ScatteringGrid::zeros(grid);
        for i in grid.support() {
            let k = grid.node(i);
            s.s12[i] = Complex64::new(k.re.sin(), k.im * k.re);
            s.s21[i] = Complex64::new(k.im.cos(), -k.re);
        }
        let d = dual_scattering(&s).unwrap();
        assert_eq!(d.s21[grid.origin()], s.s12[grid.origin()]);
        assert_eq!(dual_scattering(&d).unwrap(), s);
        s.s12[0] = Complex64::new(1.0, 0.0);
        assert!(dual_scattering(&s).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = KGrid::new(3, 1.0, None).unwrap();
        let mut s = ScatteringGrid::zeros(grid);
        s.s21[grid.origin()] = Complex64::new(0.25, -3.5);
        s.write(dir.path(), "scattering", Some("abc")).unwrap();
        let bytes = std::fs::read(dir.path().join("scattering.bin")).unwrap();
        assert_eq!(bytes.len(), 2 * 64 * 16);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("scattering.json")).unwrap()).unwrap();
        assert_eq!(side["m"], 3);
        assert_eq!(side["R_k"], 1.0);
        assert!(side["h_k"].is_number());
        assert_eq!(ScatteringGrid::read(dir.path(), "scattering").unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn plane_phase_is_unimodular_and_multiplicative(
            zr in -2.0f64..2.0, zi in -2.0f64..2.0, kr in -5.0f64..5.0, ki in -5.0f64..5.0,
        ) {
            let (z, k) = (Complex64::new(zr, zi), Complex64::new(kr, ki));
            prop_assert!((plane_phase(z, k).norm() - 1.0).abs() < 1e-12);
            prop_assert!((plane_phase(z, k) * plane_phase(z, -k) - 1.0).norm() < 1e-12);
            let direct = (I * (z * k + z.conj() * k.conj())).exp();
            prop_assert!((plane_phase(z, k) - direct).norm() < 1e-10);
        }
    }
}
