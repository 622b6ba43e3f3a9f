//! Dirichlet-to-Neumann maps in the boundary Fourier basis.
//!
//! A map with `max_mode = M` stores the `(2M+1)×(2M+1)` matrix `L` with
//! `Λ e^{inθ} = Σ_m L[m][n] e^{imθ}`, modes ordered `-M..=M`.

use std::f64::consts::TAU;

use faer::{Mat, Side};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{BoundaryFunction, BoundaryGeometry};
use crate::error::{Error, Result};
use crate::fem::{DirichletSolver, Mesh};
use crate::fourier;
use crate::phantom::ConductivityField;

/// Default tolerance for the structural invariants of analytically built maps.
pub const TOL_DTN: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct DtNMap {
    max_mode: usize,
    geometry: BoundaryGeometry,
    matrix: Vec<Complex64>,
    config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DtNMapFile {
    max_mode: usize,
    radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    n_nodes: Option<usize>,
    matrix: Vec<Vec<Complex64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

impl Serialize for DtNMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let dim = self.dim();
        DtNMapFile {
            max_mode: self.max_mode,
            radius: self.geometry.radius(),
            n_nodes: Some(self.geometry.n_nodes()),
            matrix: self.matrix.chunks(dim).map(|r| r.to_vec()).collect(),
            config_hash: self.config_hash.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DtNMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let file = DtNMapFile::deserialize(d)?;
        let n_nodes = file
            .n_nodes
            .unwrap_or_else(|| (2 * file.max_mode + 2).next_power_of_two().max(8));
        let geometry = BoundaryGeometry::disk(n_nodes, file.radius).map_err(serde::de::Error::custom)?;
        let dim = 2 * file.max_mode + 1;
        if file.matrix.len() != dim || file.matrix.iter().any(|r| r.len() != dim) {
            return Err(serde::de::Error::custom(format!(
                "DtN matrix must be {dim}×{dim} for max_mode {}",
                file.max_mode
            )));
        }
        let matrix = file.matrix.into_iter().flatten().collect();
        let mut map = DtNMap::new(geometry, file.max_mode, matrix).map_err(serde::de::Error::custom)?;
        map.config_hash = file.config_hash;
        Ok(map)
    }
}

/// Result of [`DtNMap::apply`].
#[derive(Clone, Debug)]
pub struct AppliedDtN {
    pub function: BoundaryFunction,
    /// L² norm (per unit length) of the input modes beyond `max_mode` that were dropped.
    pub truncated_norm: f64,
}

/// Structural diagnostics of a map.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DtNInvariants {
    pub mode0_column: f64,
    pub mode0_row: f64,
    /// Largest violation of `⟨Λf, g⟩ = ⟨f, Λg⟩` and of real-to-real mapping, entrywise.
    pub asymmetry: f64,
    /// Smallest eigenvalue of the quadratic form on the nonconstant modes.
    pub min_form_eigenvalue: f64,
}

impl DtNInvariants {
    pub fn holds(&self, tol: f64) -> bool {
        self.mode0_column <= tol && self.mode0_row <= tol && self.asymmetry <= tol && self.min_form_eigenvalue >= -tol
    }
}

impl DtNMap {
    pub fn new(geometry: BoundaryGeometry, max_mode: usize, matrix: Vec<Complex64>) -> Result<Self> {
        if max_mode == 0 || max_mode > geometry.max_resolved_mode() {
            return Err(Error::Parameter(format!(
                "max_mode must lie in 1..={} for {} nodes, got {max_mode}",
                geometry.max_resolved_mode(),
                geometry.n_nodes()
            )));
        }
        let dim = 2 * max_mode + 1;
        if matrix.len() != dim * dim {
            return Err(Error::Shape {
                expected: dim * dim,
                got: matrix.len(),
            });
        }
        if matrix.iter().any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::Numerical("DtN matrix has non-finite entries".into()));
        }
        Ok(Self {
            max_mode,
            geometry,
            matrix,
            config_hash: None,
        })
    }

    pub fn max_mode(&self) -> usize {
        self.max_mode
    }

    pub fn dim(&self) -> usize {
        2 * self.max_mode + 1
    }

    pub fn geometry(&self) -> &BoundaryGeometry {
        &self.geometry
    }

    pub fn radius(&self) -> f64 {
        self.geometry.radius()
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.config_hash.as_deref()
    }

    pub fn with_config_hash(mut self, hash: impl Into<String>) -> Self {
        self.config_hash = Some(hash.into());
        self
    }

    /// Same matrix attached to a different node count on the same circle.
    pub fn with_geometry(mut self, geometry: BoundaryGeometry) -> Result<Self> {
        if geometry.radius() != self.radius() {
            return Err(Error::Parameter(format!(
                "geometry radius {} differs from map radius {}",
                geometry.radius(),
                self.radius()
            )));
        }
        if self.max_mode > geometry.max_resolved_mode() {
            return Err(Error::Parameter(format!(
                "{} nodes cannot resolve max_mode {}",
                geometry.n_nodes(),
                self.max_mode
            )));
        }
        self.geometry = geometry;
        Ok(self)
    }

    fn index(&self, mode: i64) -> usize {
        (mode + self.max_mode as i64) as usize
    }

    /// Entry `L[m][n]` for signed modes.
    pub fn entry(&self, m: i64, n: i64) -> Complex64 {
        self.matrix[self.index(m) * self.dim() + self.index(n)]
    }

    pub fn matrix(&self) -> &[Complex64] {
        &self.matrix
    }

    /// `(m, n) ↦ L[m][n]` as a dense faer matrix.
    pub fn to_mat(&self) -> Mat<Complex64> {
        let dim = self.dim();
        Mat::from_fn(dim, dim, |i, j| self.matrix[i * dim + j])
    }

    /// Applies the map to point values. Modes above `max_mode` are dropped and reported.
    pub fn apply(&self, f: &BoundaryFunction) -> Result<AppliedDtN> {
        let geom = &self.geometry;
        geom.check(f)?;
        let n = geom.n_nodes();
        let c = fourier::coefficients(f.values());
        let m = self.max_mode as i64;
        let truncated_norm = c
            .iter()
            .enumerate()
            .filter(|&(idx, _)| fourier::mode_of(idx, n).abs() > m)
            .map(|(_, v)| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        let dim = self.dim();
        let input: Vec<Complex64> = (-m..=m).map(|k| c[fourier::index_of(k, n)]).collect();
        let out: Vec<Complex64> = (0..dim)
            .map(|i| (0..dim).map(|j| self.matrix[i * dim + j] * input[j]).sum())
            .collect();
        Ok(AppliedDtN {
            function: geom.synthesize_modes(&out)?,
            truncated_norm,
        })
    }

    /// Matrix of the map acting on point values at the geometry nodes
    /// (row-major, `n_nodes × n_nodes`), with the same truncation as [`apply`](Self::apply).
    pub fn point_matrix(&self) -> Vec<Complex64> {
        modes_to_points(self.geometry.n_nodes(), self.max_mode, &self.matrix)
    }

    /// Point-value matrix of `Λ ∂s⁻¹` (antiderivative with zero mean, then the map).
    pub fn point_matrix_after_antiderivative(&self) -> Vec<Complex64> {
        let dim = self.dim();
        let m = self.max_mode as i64;
        let r = self.radius();
        let mut scaled = self.matrix.clone();
        for i in 0..dim {
            for j in 0..dim {
                let mode = j as i64 - m;
                scaled[i * dim + j] = if mode == 0 {
                    Complex64::default()
                } else {
                    scaled[i * dim + j] / Complex64::new(0.0, mode as f64 / r)
                };
            }
        }
        modes_to_points(self.geometry.n_nodes(), self.max_mode, &scaled)
    }

    pub fn invariants(&self) -> DtNInvariants {
        let dim = self.dim();
        let m = self.max_mode as i64;
        let col0: f64 = (-m..=m).map(|i| self.entry(i, 0).norm_sqr()).sum::<f64>().sqrt();
        let row0: f64 = (-m..=m).map(|j| self.entry(0, j).norm_sqr()).sum::<f64>().sqrt();
        let mut asym: f64 = 0.0;
        for a in -m..=m {
            for b in -m..=m {
                let v = self.entry(a, b);
                asym = asym.max((v - self.entry(b, a).conj()).norm());
                asym = asym.max((v - self.entry(-a, -b).conj()).norm());
            }
        }
        // quadratic form restricted to nonzero modes
        let keep: Vec<usize> = (0..dim).filter(|&i| i != self.max_mode).collect();
        let h = Mat::<Complex64>::from_fn(keep.len(), keep.len(), |i, j| {
            let (a, b) = (keep[i], keep[j]);
            0.5 * (self.matrix[a * dim + b] + self.matrix[b * dim + a].conj())
        });
        let min_form_eigenvalue = h
            .self_adjoint_eigenvalues(Side::Lower)
            .map(|e| e.into_iter().fold(f64::INFINITY, f64::min))
            .unwrap_or(f64::NAN);
        DtNInvariants {
            mode0_column: col0,
            mode0_row: row0,
            asymmetry: asym,
            min_form_eigenvalue,
        }
    }

    /// Largest entrywise difference over modes `|n| ≤ max_mode` shared by both maps.
    pub fn max_entry_diff(&self, other: &DtNMap, max_mode: usize) -> f64 {
        let m = max_mode.min(self.max_mode).min(other.max_mode) as i64;
        let mut d: f64 = 0.0;
        for a in -m..=m {
            for b in -m..=m {
                d = d.max((self.entry(a, b) - other.entry(a, b)).norm());
            }
        }
        d
    }

    fn from_fn(geom: &BoundaryGeometry, max_mode: usize, f: impl Fn(i64, i64) -> Complex64) -> Result<Self> {
        let m = max_mode as i64;
        let matrix = (-m..=m).flat_map(|a| (-m..=m).map(move |b| (a, b))).map(|(a, b)| f(a, b)).collect();
        DtNMap::new(geom.clone(), max_mode, matrix)
    }
}

/// Point-value matrix (row-major `n × n`) of the operator with Fourier-basis
/// matrix `matrix` on modes `-max_mode..=max_mode`; other modes are annihilated.
pub(crate) fn modes_to_points(n: usize, max_mode: usize, matrix: &[Complex64]) -> Vec<Complex64> {
    let m = max_mode as i64;
    let dim = 2 * max_mode + 1;
    let inv = 1.0 / n as f64;
    let phase = |k: i64, l: usize| {
        Complex64::from_polar(1.0, TAU * ((k * l as i64).rem_euclid(n as i64)) as f64 / n as f64)
    };
    // (L · coefficient extraction)[i][l]
    let mut lc = vec![Complex64::default(); dim * n];
    for i in 0..dim {
        for l in 0..n {
            let mut acc = Complex64::default();
            for j in 0..dim {
                acc += matrix[i * dim + j] * phase(-(j as i64 - m), l);
            }
            lc[i * n + l] = acc * inv;
        }
    }
    let mut out = vec![Complex64::default(); n * n];
    for row in 0..n {
        for i in 0..dim {
            let s = phase(i as i64 - m, row);
            let src = &lc[i * n..(i + 1) * n];
            for (o, v) in out[row * n..(row + 1) * n].iter_mut().zip(src) {
                *o += s * v;
            }
        }
    }
    out
}

/// DtN map of the homogeneous disk: `|n| / radius` on mode `n`.
pub fn dtn_unit(geom: &BoundaryGeometry, max_mode: usize) -> Result<DtNMap> {
    let r = geom.radius();
    DtNMap::from_fn(geom, max_mode, |a, b| {
        if a == b {
            Complex64::new(a.unsigned_abs() as f64 / r, 0.0)
        } else {
            Complex64::default()
        }
    })
}

/// Options for the finite-element DtN map.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FemOptions {
    /// Number of rings in the disk mesh (the boundary carries `6·resolution` nodes).
    pub resolution: usize,
    /// Subtract the same-mesh error of the homogeneous problem, whose exact map is known.
    pub baseline_correction: bool,
}

impl Default for FemOptions {
    fn default() -> Self {
        Self {
            resolution: 128,
            baseline_correction: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FemDtN {
    pub map: DtNMap,
    /// Largest entrywise deviation of the uncorrected homogeneous map from `|n|/radius`
    /// on the same mesh, a proxy for the discretization error.
    pub discretization_estimate: f64,
}

/// Fourier-basis matrix `L[m][n] = g_m^H Σ g_n / (2π r)` from the Schur-complement
/// action `Σ` on real trigonometric data at equispaced nodes.
fn energy_matrix(solver: &DirichletSolver, radius: f64, max_mode: usize) -> Vec<Complex64> {
    let nb = solver.n_fixed();
    let m = max_mode;
    let theta = |j: usize| TAU * j as f64 / nb as f64;
    // columns: 1, cos θ, sin θ, cos 2θ, sin 2θ, ...
    let data = Mat::<f64>::from_fn(nb, 2 * m + 1, |j, c| {
        if c == 0 {
            1.0
        } else {
            let n = c.div_ceil(2) as f64;
            if c % 2 == 1 {
                (n * theta(j)).cos()
            } else {
                (n * theta(j)).sin()
            }
        }
    });
    let flux = solver.flux(&data);
    let mode_vec = |n: i64, src: &Mat<f64>| -> Vec<Complex64> {
        let k = n.unsigned_abs() as usize;
        (0..nb)
            .map(|j| {
                if k == 0 {
                    Complex64::new(src[(j, 0)], 0.0)
                } else {
                    let (c, s) = (src[(j, 2 * k - 1)], src[(j, 2 * k)]);
                    Complex64::new(c, n.signum() as f64 * s)
                }
            })
            .collect()
    };
    let mi = m as i64;
    let g: Vec<Vec<Complex64>> = (-mi..=mi).map(|n| mode_vec(n, &data)).collect();
    let sg: Vec<Vec<Complex64>> = (-mi..=mi).map(|n| mode_vec(n, &flux)).collect();
    let dim = 2 * m + 1;
    let scale = 1.0 / (TAU * radius);
    let mut out = vec![Complex64::default(); dim * dim];
    for a in 0..dim {
        for b in 0..dim {
            out[a * dim + b] = g[a].iter().zip(&sg[b]).map(|(x, y)| x.conj() * y).sum::<Complex64>() * scale;
        }
    }
    out
}

/// Finite-element DtN map of `gamma` on the disk of `geom`.
pub fn dtn_fem(gamma: &ConductivityField, geom: &BoundaryGeometry, max_mode: usize, opts: FemOptions) -> Result<FemDtN> {
    gamma.validate()?;
    if gamma.support_radius() >= geom.radius() {
        return Err(Error::Parameter(format!(
            "phantom support {} must lie inside the disk of radius {}",
            gamma.support_radius(),
            geom.radius()
        )));
    }
    let mesh = Mesh::disk(geom.radius(), opts.resolution)?;
    if max_mode >= mesh.outer.len() / 2 {
        return Err(Error::Parameter(format!(
            "mesh resolution {} puts {} nodes on the boundary, too few for max_mode {max_mode}",
            opts.resolution,
            mesh.outer.len()
        )));
    }
    let r = geom.radius();
    let (homogeneous, phantom) = rayon::join(
        || DirichletSolver::new(&mesh, &ConductivityField::Unit, None).map(|s| energy_matrix(&s, r, max_mode)),
        || {
            if gamma.is_unit() {
                Ok(None)
            } else {
                DirichletSolver::new(&mesh, gamma, None).map(|s| Some(energy_matrix(&s, r, max_mode)))
            }
        },
    );
    let homogeneous = homogeneous?;
    let phantom = phantom?.unwrap_or_else(|| homogeneous.clone());
    let exact = dtn_unit(geom, max_mode)?;
    let discretization_estimate = homogeneous
        .iter()
        .zip(exact.matrix())
        .map(|(a, b)| (a - b).norm())
        .fold(0.0, f64::max);
    let matrix = if opts.baseline_correction {
        phantom
            .iter()
            .zip(&homogeneous)
            .zip(exact.matrix())
            .map(|((p, h), e)| e + (p - h))
            .collect()
    } else {
        phantom
    };
    log::debug!(
        "dtn_fem: resolution {}, {} nodes, homogeneous deviation {:.3e}",
        opts.resolution,
        mesh.n_nodes(),
        discretization_estimate
    );
    Ok(FemDtN {
        map: DtNMap::new(geom.clone(), max_mode, matrix)?,
        discretization_estimate,
    })
}

/// Step size in `log r` for the radial Riccati integration.
const RADIAL_STEP: f64 = 2.5e-4;
const RADIAL_START: f64 = 1e-3;

/// `r Λ_n` for a rotationally symmetric conductivity, from the Riccati equation
/// `dw/dt = (γ² n² − w²)/γ` in `t = log r` for `w = r γ u'/u`.
fn radial_multiplier(profile: &impl Fn(f64) -> f64, n: u64, radius: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n2 = (n * n) as f64;
    let rhs = |t: f64, w: f64| {
        let g = profile(t.exp());
        (g * g * n2 - w * w) / g
    };
    let (t0, t1) = (RADIAL_START.min(radius / 2.0).ln(), radius.ln());
    let steps = ((t1 - t0) / RADIAL_STEP).ceil() as usize;
    let dt = (t1 - t0) / steps as f64;
    let mut w = profile(t0.exp()) * n as f64;
    for s in 0..steps {
        let t = t0 + s as f64 * dt;
        let k1 = rhs(t, w);
        let k2 = rhs(t + 0.5 * dt, w + 0.5 * dt * k1);
        let k3 = rhs(t + 0.5 * dt, w + 0.5 * dt * k2);
        let k4 = rhs(t + dt, w + dt * k3);
        w += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    w / profile(radius)
}

/// DtN map of a rotationally symmetric conductivity by ODE integration per mode.
/// The map is diagonal; it serves as a high-accuracy reference for radial phantoms.
pub fn dtn_radial(gamma: &ConductivityField, geom: &BoundaryGeometry, max_mode: usize) -> Result<DtNMap> {
    gamma.validate()?;
    let profile = gamma
        .radial_profile()
        .ok_or_else(|| Error::Parameter("radial DtN requires a rotationally symmetric conductivity".into()))?;
    let gamma_of_r = |r: f64| profile(r).0;
    let r = geom.radius();
    let values: Vec<f64> = (0..=max_mode as u64)
        .into_par_iter()
        .map(|n| radial_multiplier(&gamma_of_r, n, r) / r)
        .collect();
    DtNMap::from_fn(geom, max_mode, |a, b| {
        if a == b {
            Complex64::new(values[a.unsigned_abs() as usize], 0.0)
        } else {
            Complex64::default()
        }
    })
}

/// How [`extend_dtn`] solves the annulus problem.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum ExtensionMethod {
    /// Closed-form harmonic solve per mode; requires a homogeneous annulus.
    #[default]
    Analytic,
    /// P1 elements on a structured annulus mesh.
    Fem {
        layers: usize,
        angular: usize,
        baseline_correction: bool,
    },
}

impl ExtensionMethod {
    /// 16 layers by 128 angular nodes with baseline correction.
    pub fn fem_default() -> Self {
        ExtensionMethod::Fem {
            layers: 16,
            angular: 128,
            baseline_correction: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Extension {
    pub map: DtNMap,
    /// 2-norm condition number of the coupling system (analytic path) or of the
    /// inner-map block (FEM path).
    pub condition: f64,
}

/// Coupling systems with a condition number above this are rejected.
pub const EXTENSION_CONDITION_LIMIT: f64 = 1e12;

/// DtN map on the larger circle `outer_geom` from the map on an inner circle and
/// the conductivity of the annulus between them.
pub fn extend_dtn(
    inner: &DtNMap,
    gamma_annulus: &ConductivityField,
    outer_geom: &BoundaryGeometry,
    method: ExtensionMethod,
) -> Result<Extension> {
    let (r1, r2) = (inner.radius(), outer_geom.radius());
    if r2 <= r1 {
        return Err(Error::Parameter(format!(
            "outer radius {r2} must exceed the inner radius {r1}"
        )));
    }
    if inner.max_mode() > outer_geom.max_resolved_mode() {
        return Err(Error::Parameter(format!(
            "outer geometry with {} nodes cannot carry max_mode {}",
            outer_geom.n_nodes(),
            inner.max_mode()
        )));
    }
    gamma_annulus.validate()?;
    match method {
        ExtensionMethod::Analytic => {
            if !gamma_annulus.is_unit() {
                return Err(Error::Parameter(
                    "the analytic extension needs a homogeneous annulus; use the FEM method".into(),
                ));
            }
            extend_analytic(inner, outer_geom)
        }
        ExtensionMethod::Fem {
            layers,
            angular,
            baseline_correction,
        } => extend_fem(inner, gamma_annulus, outer_geom, layers, angular, baseline_correction),
    }
}

/// Radial derivatives of the annulus harmonic basis for mode `n`: returns
/// `(P, Q, P', Q')` with `u'(r1) = P x + Q f`, `u'(r2) = P' x + Q' f` for inner
/// value `x` and outer value `f`.
fn annulus_mode(n: u64, r1: f64, r2: f64) -> (f64, f64, f64, f64) {
    let lambda = (r2 / r1).ln();
    if n == 0 {
        let (a, b) = (1.0 / (r1 * lambda), 1.0 / (r2 * lambda));
        return (-a, a, -b, b);
    }
    let a = n as f64;
    let x = a * lambda;
    // overflow-free 1/sinh and coth
    let e = (-2.0 * x).exp();
    let csch = 2.0 * (-x).exp() / (1.0 - e);
    let coth = (1.0 + e) / (1.0 - e);
    (-(a / r1) * coth, (a / r1) * csch, -(a / r2) * csch, (a / r2) * coth)
}

fn extend_analytic(inner: &DtNMap, outer_geom: &BoundaryGeometry) -> Result<Extension> {
    let (r1, r2) = (inner.radius(), outer_geom.radius());
    let m = inner.max_mode() as i64;
    let dim = inner.dim();
    let coeffs: Vec<_> = (-m..=m).map(|n| annulus_mode(n.unsigned_abs(), r1, r2)).collect();
    // (L - diag P) x = diag(Q) f
    let a = Mat::<Complex64>::from_fn(dim, dim, |i, j| {
        let v = inner.matrix()[i * dim + j];
        if i == j {
            v - coeffs[i].0
        } else {
            v
        }
    });
    let sv = a
        .singular_values()
        .map_err(|e| Error::Numerical(format!("coupling SVD failed: {e:?}")))?;
    let condition = sv[0] / sv[sv.len() - 1];
    if !(condition < EXTENSION_CONDITION_LIMIT) {
        return Err(Error::Numerical(format!(
            "annulus coupling system is near-singular: condition number {condition:.3e}"
        )));
    }
    let rhs = Mat::<Complex64>::from_fn(dim, dim, |i, j| {
        if i == j {
            Complex64::new(coeffs[i].1, 0.0)
        } else {
            Complex64::default()
        }
    });
    use faer::linalg::solvers::Solve;
    let x = a.partial_piv_lu().solve(&rhs);
    let matrix = (0..dim)
        .flat_map(|i| (0..dim).map(move |j| (i, j)))
        .map(|(i, j)| {
            let diag = if i == j { coeffs[i].3 } else { 0.0 };
            coeffs[i].2 * x[(i, j)] + diag
        })
        .collect();
    Ok(Extension {
        map: DtNMap::new(outer_geom.clone(), inner.max_mode(), matrix)?,
        condition,
    })
}

/// Real symmetric matrix of `u ↦ ∫ Λu · v ds` on `n_in` equispaced nodes of the
/// inner circle; modes beyond the map are continued with `|n| / r`.
fn inner_coupling_block(inner: Option<&DtNMap>, radius: f64, n_in: usize) -> Mat<f64> {
    let top = (n_in / 2 - 1) as i64;
    let scale = TAU * radius / (n_in * n_in) as f64;
    // homogeneous (circulant) part
    let circ: Vec<f64> = (0..n_in)
        .map(|d| {
            (-top..=top)
                .map(|k| (k.unsigned_abs() as f64 / radius) * (TAU * (k * d as i64) as f64 / n_in as f64).cos())
                .sum::<f64>()
        })
        .collect();
    let mut b = Mat::<f64>::from_fn(n_in, n_in, |j, l| scale * circ[(j + n_in - l) % n_in]);
    if let Some(map) = inner {
        let m = map.max_mode() as i64;
        let dim = map.dim();
        let phase = |k: i64, l: usize| Complex64::from_polar(1.0, TAU * (k * l as i64).rem_euclid(n_in as i64) as f64 / n_in as f64);
        // E = L − diag(|n|/r); H[i][l] = Σ_n E[i][n] e^{-inθ_l}
        let mut h = vec![Complex64::default(); dim * n_in];
        for i in 0..dim {
            for jn in 0..dim {
                let mut e = map.matrix()[i * dim + jn];
                if i == jn {
                    e -= (jn as i64 - m).unsigned_abs() as f64 / radius;
                }
                if e == Complex64::default() {
                    continue;
                }
                for l in 0..n_in {
                    h[i * n_in + l] += e * phase(-(jn as i64 - m), l);
                }
            }
        }
        for j in 0..n_in {
            for i in 0..dim {
                let s = phase(i as i64 - m, j);
                for l in 0..n_in {
                    b[(j, l)] += scale * (s * h[i * n_in + l]).re;
                }
            }
        }
        // symmetrize
        for j in 0..n_in {
            for l in 0..j {
                let avg = 0.5 * (b[(j, l)] + b[(l, j)]);
                b[(j, l)] = avg;
                b[(l, j)] = avg;
            }
        }
    }
    b
}

fn extend_fem(
    inner: &DtNMap,
    gamma: &ConductivityField,
    outer_geom: &BoundaryGeometry,
    layers: usize,
    angular: usize,
    baseline_correction: bool,
) -> Result<Extension> {
    let (r1, r2) = (inner.radius(), outer_geom.radius());
    let m = inner.max_mode();
    if 2 * m + 2 > angular {
        return Err(Error::Parameter(format!(
            "annulus mesh with {angular} angular nodes cannot carry max_mode {m}"
        )));
    }
    if gamma.support_radius() > 0.0 && (gamma.inner_support_radius() <= r1 || gamma.support_radius() >= r2) {
        return Err(Error::Parameter(
            "annulus conductivity must equal one near both circles".into(),
        ));
    }
    let mesh = Mesh::annulus(r1, r2, layers, angular)?;
    let block = inner_coupling_block(Some(inner), r1, angular);
    let condition = {
        let sv = inner
            .to_mat()
            .singular_values()
            .map_err(|e| Error::Numerical(format!("inner map SVD failed: {e:?}")))?;
        let nonzero: Vec<f64> = sv.into_iter().filter(|&s| s > 0.0).collect();
        nonzero[0] / nonzero[nonzero.len() - 1]
    };
    let solve = |gamma: &ConductivityField, block: &Mat<f64>| -> Result<Vec<Complex64>> {
        let solver = DirichletSolver::new(&mesh, gamma, Some((&mesh.inner, block)))
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("{msg} (inner map condition {condition:.3e})")),
                other => other,
            })?;
        Ok(energy_matrix(&solver, r2, m))
    };
    let mut matrix = solve(gamma, &block)?;
    if baseline_correction {
        let unit_block = inner_coupling_block(None, r1, angular);
        let homogeneous = solve(&ConductivityField::Unit, &unit_block)?;
        let exact = dtn_unit(outer_geom, m)?;
        for ((v, h), e) in matrix.iter_mut().zip(&homogeneous).zip(exact.matrix()) {
            *v += e - h;
        }
    }
    Ok(Extension {
        map: DtNMap::new(outer_geom.clone(), m, matrix)?,
        condition,
    })
}

/// Quadratic form `⟨Λf, f⟩` for real point data `f`.
pub fn quadratic_form(map: &DtNMap, f: &BoundaryFunction) -> Result<f64> {
    let lf = map.apply(f)?.function;
    Ok(map.geometry().integrate(&lf.mul(&f.conj())).re)
}
