//! Boundary traces of the exponentially growing solutions.
//!
//! For each spectral parameter `k` the first column `(ψ₁₁, ψ₂₁)` on the
//! circle is the unique pair that satisfies the two projection equations
//! `K₁(k) h₁ = e^{izk}`, `K₂(k) h₂ = 0` and the boundary relation built from
//! the DtN map. All three are stacked into one least-squares problem.

use std::f64::consts::{PI, TAU};

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::boundary::{BoundaryFunction, BoundaryGeometry};
use crate::dtn::DtNMap;
use crate::error::{Error, Result};
use crate::fourier;

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Action of the principal-value Cauchy operator `(1/π) PV∫ f(ζ)/(ζ-z) dζ`
/// on `e^{inθ}` for a circle of any radius: `+i` for `n ≥ 0`, `-i` for `n < 0`.
/// The Nyquist mode is dropped.
pub fn cauchy_multiplier(mode: i64, nyquist: bool) -> Complex64 {
    if nyquist {
        Complex64::default()
    } else if mode >= 0 {
        I
    } else {
        -I
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerVariant {
    /// `S_k`.
    Plain,
    /// `S̄_k f = conj(S_k conj f)`.
    Conjugate,
}

/// Nyström matrix of the twisted single layer operator with kernel
/// `(1/π) e^{-ik(ζ-z)}/(ζ-z)`.
#[derive(Clone, Debug)]
pub struct TwistedLayerOperator {
    pub k: Complex64,
    pub variant: LayerVariant,
    /// Row-major `n × n`, acting on point values.
    pub matrix: Vec<Complex64>,
}

/// Smooth remainder `(1/π)(e^{-ik w} - 1)/w` with its limit `-ik/π` at `w = 0`.
fn smooth_kernel(k: Complex64, w: Complex64) -> Complex64 {
    let t = -I * k * w;
    let ratio = if t.norm() < 1e-6 {
        // (e^t - 1)/t
        1.0 + t / 2.0 + t * t / 6.0
    } else {
        (t.exp() - 1.0) / t
    };
    -I * k * ratio / PI
}

fn cauchy_matrix(n: usize) -> Vec<Complex64> {
    let c = fourier::circulant_column(n, cauchy_multiplier);
    let mut m = vec![Complex64::default(); n * n];
    for j in 0..n {
        for l in 0..n {
            m[j * n + l] = c[(j + n - l) % n];
        }
    }
    m
}

fn layer_matrix(geom: &BoundaryGeometry, k: Complex64, cauchy: &[Complex64]) -> Vec<Complex64> {
    let n = geom.n_nodes();
    let nodes = geom.nodes();
    let dtheta = TAU / n as f64;
    let mut m = cauchy.to_vec();
    for j in 0..n {
        for l in 0..n {
            // dζ = iζ dθ
            m[j * n + l] += smooth_kernel(k, nodes[l] - nodes[j]) * I * nodes[l] * dtheta;
        }
    }
    m
}

fn mat_vec(m: &[Complex64], x: &[Complex64]) -> Vec<Complex64> {
    let n = x.len();
    m.chunks(n).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

impl TwistedLayerOperator {
    pub fn new(geom: &BoundaryGeometry, k: Complex64, variant: LayerVariant) -> Self {
        let mut matrix = layer_matrix(geom, k, &cauchy_matrix(geom.n_nodes()));
        if variant == LayerVariant::Conjugate {
            matrix.iter_mut().for_each(|v| *v = v.conj());
        }
        Self { k, variant, matrix }
    }

    pub fn apply(&self, f: &BoundaryFunction) -> Result<BoundaryFunction> {
        let n = (self.matrix.len() as f64).sqrt() as usize;
        if f.len() != n {
            return Err(Error::Shape {
                expected: n,
                got: f.len(),
            });
        }
        Ok(BoundaryFunction::new(mat_vec(&self.matrix, f.values())))
    }
}

/// `S_k f` or `S̄_k f` on the circle.
pub fn single_layer(
    geom: &BoundaryGeometry,
    k: Complex64,
    variant: LayerVariant,
    f: &BoundaryFunction,
) -> Result<BoundaryFunction> {
    geom.check(f)?;
    TwistedLayerOperator::new(geom, k, variant).apply(f)
}

/// The two diagonal blocks `K₁ = (I - iS_k)/2` and `K₂ = (I + iS̄_k)/2`.
#[derive(Clone, Debug)]
pub struct KOperator {
    pub k: Complex64,
    pub first: Vec<Complex64>,
    pub second: Vec<Complex64>,
}

impl KOperator {
    pub fn apply(&self, h1: &BoundaryFunction, h2: &BoundaryFunction) -> (BoundaryFunction, BoundaryFunction) {
        (
            BoundaryFunction::new(mat_vec(&self.first, h1.values())),
            BoundaryFunction::new(mat_vec(&self.second, h2.values())),
        )
    }
}

fn k_blocks(n: usize, layer: &[Complex64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut first = vec![Complex64::default(); n * n];
    let mut second = vec![Complex64::default(); n * n];
    for j in 0..n {
        for l in 0..n {
            let id = if j == l { 1.0 } else { 0.0 };
            let s = layer[j * n + l];
            first[j * n + l] = 0.5 * (id - I * s);
            second[j * n + l] = 0.5 * (id + I * s.conj());
        }
    }
    (first, second)
}

pub fn assemble_k(geom: &BoundaryGeometry, k: Complex64) -> KOperator {
    let layer = layer_matrix(geom, k, &cauchy_matrix(geom.n_nodes()));
    let (first, second) = k_blocks(geom.n_nodes(), &layer);
    KOperator { k, first, second }
}

fn check_map(map: &DtNMap, geom: &BoundaryGeometry) -> Result<()> {
    if map.geometry() != geom {
        return Err(Error::Parameter(format!(
            "DtN map is sampled on {} nodes of radius {}, geometry has {} nodes of radius {}",
            map.geometry().n_nodes(),
            map.radius(),
            geom.n_nodes(),
            geom.radius()
        )));
    }
    Ok(())
}

/// `iΛ∂s⁻¹(νh₁ - ν̄h₂) - (νh₁ + ν̄h₂)`, zero exactly on Cauchy data of the first-order system.
pub fn boundary_relation_residual(
    map: &DtNMap,
    geom: &BoundaryGeometry,
    h1: &BoundaryFunction,
    h2: &BoundaryFunction,
) -> Result<BoundaryFunction> {
    check_map(map, geom)?;
    geom.check(h1)?;
    geom.check(h2)?;
    let nu = BoundaryFunction::new(geom.normals().to_vec());
    let a = nu.mul(h1);
    let b = nu.conj().mul(h2);
    let anti = geom.tangential_antiderivative(&a.sub(&b))?;
    if anti.mean_warning {
        log::warn!(
            "boundary relation input has nonzero mean {:.3e}; projected out",
            anti.removed_mean.norm()
        );
    }
    let lam = map.apply(&anti.function)?.function;
    Ok(lam.scale(I).sub(&a.add(&b)))
}

fn default_rel_cutoff() -> f64 {
    1e-10
}

fn default_residual_tol() -> f64 {
    1e-2
}

fn default_k_max() -> f64 {
    6.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizationConfig {
    /// Singular values below `rel_cutoff · σ_max` are discarded.
    #[serde(default = "default_rel_cutoff")]
    pub rel_cutoff: f64,
    /// Largest accepted relative residual of the stacked system.
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    #[serde(default = "default_k_max")]
    pub k_max: f64,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        Self {
            rel_cutoff: default_rel_cutoff(),
            residual_tol: default_residual_tol(),
            k_max: default_k_max(),
        }
    }
}

impl RegularizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_cutoff > 0.0 && self.rel_cutoff < 1.0) {
            return Err(Error::Config(format!("rel_cutoff must lie in (0, 1), got {}", self.rel_cutoff)));
        }
        if !(self.residual_tol > 0.0) {
            return Err(Error::Config("residual_tol must be positive".into()));
        }
        if !(self.k_max > 0.0 && self.k_max.is_finite()) {
            return Err(Error::Config("k_max must be positive".into()));
        }
        Ok(())
    }
}

/// First-column boundary trace at one `k` with solve diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CgoTrace {
    pub k: Complex64,
    pub psi11: BoundaryFunction,
    pub psi21: BoundaryFunction,
    /// `(‖K₁h₁ - e^{izk}‖ + ‖K₂h₂‖) / ‖e^{izk}‖` in boundary L².
    pub k_residual: f64,
    /// `‖boundary relation‖ / ‖νh₁ + ν̄h₂‖` in boundary L².
    pub relation_residual: f64,
    pub smallest_singular_value: f64,
    pub condition: f64,
    pub rank: usize,
}

/// Reusable solver: the boundary-relation rows do not depend on `k`.
#[derive(Clone, Debug)]
pub struct TraceSolver {
    geom: BoundaryGeometry,
    reg: RegularizationConfig,
    cauchy: Vec<Complex64>,
    /// `n × 2n` boundary-relation block, row-major.
    relation: Vec<Complex64>,
    /// Unit-norm row enforcing `∫(νh₁ - ν̄h₂) ds = 0`.
    mean_row: Vec<Complex64>,
}

/// Solution of one stacked system.
struct StackedSolution {
    h1: Vec<Complex64>,
    h2: Vec<Complex64>,
    residual: f64,
    smallest: f64,
    condition: f64,
    rank: usize,
}

impl TraceSolver {
    pub fn new(map: &DtNMap, reg: RegularizationConfig) -> Result<Self> {
        reg.validate()?;
        let geom = map.geometry().clone();
        let n = geom.n_nodes();
        let a = map.point_matrix_after_antiderivative();
        let nu = geom.normals();
        let mut relation = vec![Complex64::default(); n * 2 * n];
        for j in 0..n {
            for l in 0..n {
                let ia = I * a[j * n + l];
                let id = if j == l { 1.0 } else { 0.0 };
                relation[j * 2 * n + l] = (ia - id) * nu[l];
                relation[j * 2 * n + n + l] = (-ia - id) * nu[l].conj();
            }
        }
        let w = geom.weights();
        let mut mean_row: Vec<Complex64> = (0..n)
            .map(|l| nu[l] * w[l])
            .chain((0..n).map(|l| -nu[l].conj() * w[l]))
            .collect();
        let norm = mean_row.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        mean_row.iter_mut().for_each(|v| *v /= norm);
        Ok(Self {
            cauchy: cauchy_matrix(n),
            geom,
            reg,
            relation,
            mean_row,
        })
    }

    pub fn geometry(&self) -> &BoundaryGeometry {
        &self.geom
    }

    pub fn config(&self) -> &RegularizationConfig {
        &self.reg
    }

    fn check_k(&self, k: Complex64) -> Result<()> {
        if !(k.re.is_finite() && k.im.is_finite()) || k.norm() > self.reg.k_max {
            return Err(Error::Parameter(format!(
                "|k| = {:.4} exceeds k_max = {}",
                k.norm(),
                self.reg.k_max
            )));
        }
        Ok(())
    }

    /// Solves `K₁(k)h₁ = rhs1`, `K₂(k)h₂ = rhs2`, boundary relation, mean row.
    fn solve_stacked(&self, k: Complex64, rhs1: &[Complex64], rhs2: &[Complex64]) -> Result<StackedSolution> {
        let n = self.geom.n_nodes();
        let layer = layer_matrix(&self.geom, k, &self.cauchy);
        let (k1, k2) = k_blocks(n, &layer);
        let rows = 3 * n + 1;
        let a = Mat::<Complex64>::from_fn(rows, 2 * n, |r, c| {
            if r < n {
                if c < n {
                    k1[r * n + c]
                } else {
                    Complex64::default()
                }
            } else if r < 2 * n {
                if c >= n {
                    k2[(r - n) * n + c - n]
                } else {
                    Complex64::default()
                }
            } else if r < 3 * n {
                self.relation[(r - 2 * n) * 2 * n + c]
            } else {
                self.mean_row[c]
            }
        });
        let b: Vec<Complex64> = rhs1
            .iter()
            .chain(rhs2)
            .copied()
            .chain(std::iter::repeat_n(Complex64::default(), n + 1))
            .collect();
        let svd = a
            .thin_svd()
            .map_err(|e| Error::Numerical(format!("SVD of the trace system failed at k = {k}: {e:?}")))?;
        let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
        let sigma: Vec<f64> = (0..s.nrows()).map(|i| s[i].re).collect();
        let smax = sigma.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> = (0..sigma.len()).filter(|&i| sigma[i] > self.reg.rel_cutoff * smax).collect();
        let mut x = vec![Complex64::default(); 2 * n];
        for &i in &keep {
            let coef: Complex64 = (0..rows).map(|r| u[(r, i)].conj() * b[r]).sum::<Complex64>() / sigma[i];
            for (c, xc) in x.iter_mut().enumerate() {
                *xc += v[(c, i)] * coef;
            }
        }
        let smallest = keep.iter().map(|&i| sigma[i]).fold(f64::INFINITY, f64::min);
        let ax: Vec<Complex64> = (0..rows)
            .map(|r| (0..2 * n).map(|c| a[(r, c)] * x[c]).sum())
            .collect();
        let bnorm = b.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
        let rnorm = ax.iter().zip(&b).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt();
        let h2 = x.split_off(n);
        Ok(StackedSolution {
            h1: x,
            h2,
            residual: rnorm / bnorm.max(f64::MIN_POSITIVE),
            smallest,
            condition: smax / smallest,
            rank: keep.len(),
        })
    }

    fn diagnose(&self, k: Complex64, h1: &BoundaryFunction, h2: &BoundaryFunction) -> (f64, f64) {
        let n = self.geom.n_nodes();
        let layer = layer_matrix(&self.geom, k, &self.cauchy);
        let (k1, k2) = k_blocks(n, &layer);
        let exp = self.geom.sample(|z| (I * z * k).exp());
        let r1 = BoundaryFunction::new(mat_vec(&k1, h1.values())).sub(&exp);
        let r2 = BoundaryFunction::new(mat_vec(&k2, h2.values()));
        let k_res = (self.geom.l2_norm(&r1) + self.geom.l2_norm(&r2)) / self.geom.l2_norm(&exp);
        let rel: Vec<Complex64> = (0..n)
            .map(|j| {
                (0..n)
                    .map(|l| self.relation[j * 2 * n + l] * h1.values()[l] + self.relation[j * 2 * n + n + l] * h2.values()[l])
                    .sum()
            })
            .collect();
        let nu = BoundaryFunction::new(self.geom.normals().to_vec());
        let scale = self.geom.l2_norm(&nu.mul(h1).add(&nu.conj().mul(h2)));
        let rel_res = self.geom.l2_norm(&BoundaryFunction::new(rel)) / scale.max(f64::MIN_POSITIVE);
        (k_res, rel_res)
    }

    /// First-column trace `(ψ₁₁, ψ₂₁)(·, k)`.
    pub fn solve(&self, k: Complex64) -> Result<CgoTrace> {
        self.check_k(k)?;
        let n = self.geom.n_nodes();
        let exp: Vec<Complex64> = self.geom.nodes().iter().map(|&z| (I * z * k).exp()).collect();
        let sol = self.solve_stacked(k, &exp, &vec![Complex64::default(); n])?;
        if !(sol.residual <= self.reg.residual_tol) {
            return Err(Error::IllConditioned {
                k,
                residual: sol.residual,
                condition: sol.condition,
            });
        }
        let psi11 = BoundaryFunction::new(sol.h1);
        let psi21 = BoundaryFunction::new(sol.h2);
        let (k_residual, relation_residual) = self.diagnose(k, &psi11, &psi21);
        Ok(CgoTrace {
            k,
            psi11,
            psi21,
            k_residual,
            relation_residual,
            smallest_singular_value: sol.smallest,
            condition: sol.condition,
            rank: sol.rank,
        })
    }

    /// Second column `(ψ₁₂, ψ₂₂)(·, k)` from its own system
    /// `K₁(k̄)h₁ = 0`, `K₂(k̄)h₂ = e^{-iz̄k}`. Used as an oracle for the symmetry route.
    pub fn solve_second_column(&self, k: Complex64) -> Result<(BoundaryFunction, BoundaryFunction)> {
        self.check_k(k)?;
        let n = self.geom.n_nodes();
        let exp: Vec<Complex64> = self.geom.nodes().iter().map(|&z| (-I * z.conj() * k).exp()).collect();
        let sol = self.solve_stacked(k.conj(), &vec![Complex64::default(); n], &exp)?;
        if !(sol.residual <= self.reg.residual_tol) {
            return Err(Error::IllConditioned {
                k,
                residual: sol.residual,
                condition: sol.condition,
            });
        }
        Ok((BoundaryFunction::new(sol.h1), BoundaryFunction::new(sol.h2)))
    }
}

pub fn solve_cgo_trace(
    map: &DtNMap,
    geom: &BoundaryGeometry,
    k: Complex64,
    reg: RegularizationConfig,
) -> Result<CgoTrace> {
    check_map(map, geom)?;
    TraceSolver::new(map, reg)?.solve(k)
}

/// `ψ₁₂(·, k) = conj ψ₂₁(·, k̄)` from the trace solved at `k̄`.
pub fn second_column_trace(trace_at_conj_k: &CgoTrace) -> BoundaryFunction {
    trace_at_conj_k.psi21.conj()
}

/// `ψ₂₂(·, k) = conj ψ₁₁(·, k̄)`.
pub fn second_column_diagonal(trace_at_conj_k: &CgoTrace) -> BoundaryFunction {
    trace_at_conj_k.psi11.conj()
}

/// Exterior extension `v(z) = e^{izk}(1 + P₋[ψ₁₁ e^{-ikζ}](z))` at `|z| > R`, where `P₋`
/// continues the negative Fourier modes as the decaying holomorphic function outside the circle.
pub fn exterior_extension(geom: &BoundaryGeometry, trace: &CgoTrace, z: Complex64) -> Result<Complex64> {
    geom.check(&trace.psi11)?;
    let r = geom.radius();
    if z.norm() <= r {
        return Err(Error::Parameter(format!("exterior point {z} must lie outside radius {r}")));
    }
    let k = trace.k;
    let g: Vec<Complex64> = geom
        .nodes()
        .iter()
        .zip(trace.psi11.values())
        .map(|(&zeta, h)| h * (-I * k * zeta).exp())
        .collect();
    let n = geom.n_nodes();
    let c = fourier::coefficients(&g);
    let w = r / z;
    let mut tail = Complex64::default();
    let mut pw = Complex64::new(1.0, 0.0);
    for mode in 1..(n / 2) as i64 {
        pw *= w;
        tail += c[fourier::index_of(-mode, n)] * pw;
    }
    Ok((I * z * k).exp() * (1.0 + tail))
}

/// Largest deviation, relative to `sup|ψ₁₁|`, between `ψ₁₁` and the boundary limit
/// of [`exterior_extension`] extrapolated quadratically from normal distances `d, 2d, 3d`.
pub fn plemelj_defect(geom: &BoundaryGeometry, trace: &CgoTrace, d: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (j, (&nu, h)) in geom.normals().iter().zip(trace.psi11.values()).enumerate() {
        let z0 = geom.nodes()[j];
        let v = |t: f64| exterior_extension(geom, trace, z0 + nu * t);
        let limit = 3.0 * v(d)? - 3.0 * v(2.0 * d)? + v(3.0 * d)?;
        worst = worst.max((limit - h).norm());
    }
    Ok(worst / trace.psi11.sup_norm().max(f64::MIN_POSITIVE))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtn::dtn_unit;
    use proptest::prelude::*;

    fn unit_solver(n: usize) -> (BoundaryGeometry, TraceSolver) {
        let geom = BoundaryGeometry::disk(n, 1.0).unwrap();
        let map = dtn_unit(&geom, n / 2 - 1).unwrap();
        let solver = TraceSolver::new(&map, RegularizationConfig::default()).unwrap();
        (geom, solver)
    }

    /// `(1/π) PV∫ f(ζ)/(ζ-z) dζ` for `f = e^{inθ}` by subtracting `f(z)` and
    /// integrating the smooth remainder on a fine grid, plus `f(z)·iπ/π`.
    fn brute_force_pv(n: i64, theta0: f64) -> Complex64 {
        let fine = 4096;
        let z = Complex64::from_polar(1.0, theta0);
        let fz = Complex64::from_polar(1.0, n as f64 * theta0);
        let mut acc = Complex64::default();
        for j in 0..fine {
            let t = theta0 + TAU * j as f64 / fine as f64;
            let zeta = Complex64::from_polar(1.0, t);
            let dzeta = I * zeta * (TAU / fine as f64);
            let integrand = if j == 0 {
                // derivative of f with respect to ζ
                (I * n as f64 * fz) / (I * z)
            } else {
                (Complex64::from_polar(1.0, n as f64 * t) - fz) / (zeta - z)
            };
            acc += integrand * dzeta;
        }
        (acc + fz * I * PI) / PI
    }

    #[test]
    fn cauchy_multiplier_matches_principal_value_quadrature() {
        for n in [-5i64, -2, -1, 0, 1, 3, 7] {
            for theta0 in [0.0, 0.7, 2.9] {
                let pv = brute_force_pv(n, theta0);
                let fz = Complex64::from_polar(1.0, n as f64 * theta0);
                let want = cauchy_multiplier(n, false) * fz;
                assert!((pv - want).norm() < 1e-10, "mode {n}: {pv} vs {want}");
            }
        }
    }

    #[test]
    fn k_zero_layer_is_cauchy_operator() {
        let geom = BoundaryGeometry::disk(32, 1.0).unwrap();
        for n in [-3i64, 0, 1, 4] {
            let f = geom.mode(n);
            let s = single_layer(&geom, Complex64::default(), LayerVariant::Plain, &f).unwrap();
            let want = f.scale(cauchy_multiplier(n, false));
            assert!(s.max_abs_diff(&want) < 1e-12, "mode {n}");
        }
    }

    #[test]
    fn layer_self_convergence_at_generic_k() {
        let k = Complex64::new(1.0, 1.0);
        let coarse = BoundaryGeometry::disk(64, 1.0).unwrap();
        let fine = BoundaryGeometry::disk(256, 1.0).unwrap();
        let a = single_layer(&coarse, k, LayerVariant::Plain, &coarse.mode(1)).unwrap();
        let b = single_layer(&fine, k, LayerVariant::Plain, &fine.mode(1)).unwrap();
        for j in 0..64 {
            assert!((a.values()[j] - b.values()[4 * j]).norm() < 1e-8);
        }
    }

    #[test]
    fn k_fixes_plane_wave() {
        let geom = BoundaryGeometry::disk(64, 1.0).unwrap();
        for k in [Complex64::new(0.0, 0.0), Complex64::new(1.5, -0.7), Complex64::new(-2.0, 2.0)] {
            let kop = assemble_k(&geom, k);
            let e = geom.sample(|z| (I * z * k).exp());
            let (a, b) = kop.apply(&e, &BoundaryFunction::zeros(64));
            assert!(a.max_abs_diff(&e) < 1e-10 * e.sup_norm());
            assert!(b.sup_norm() == 0.0);
        }
    }

    #[test]
    fn k_zero_blocks_are_projections() {
        // (I - iS₀)/2 keeps modes n ≥ 0; (I + iS̄₀)/2 keeps modes n ≤ 0.
        let geom = BoundaryGeometry::disk(32, 1.0).unwrap();
        let kop = assemble_k(&geom, Complex64::default());
        for n in [-4i64, -1, 0, 2] {
            let f = geom.mode(n);
            let (a, b) = kop.apply(&f, &f);
            let keep1 = if n >= 0 { 1.0 } else { 0.0 };
            let keep2 = if n <= 0 { 1.0 } else { 0.0 };
            assert!(a.max_abs_diff(&f.scale(keep1.into())) < 1e-12);
            assert!(b.max_abs_diff(&f.scale(keep2.into())) < 1e-12);
        }
    }

    #[test]
    fn relation_vanishes_on_plane_wave_for_unit_conductivity() {
        let geom = BoundaryGeometry::disk(64, 1.0).unwrap();
        let map = dtn_unit(&geom, 31).unwrap();
        let k = Complex64::new(0.8, -1.3);
        let e = geom.sample(|z| (I * z * k).exp());
        let r = boundary_relation_residual(&map, &geom, &e, &BoundaryFunction::zeros(64)).unwrap();
        assert!(r.sup_norm() <= 1e-10 * e.sup_norm());
        let zero = BoundaryFunction::zeros(64);
        assert_eq!(boundary_relation_residual(&map, &geom, &zero, &zero).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn unit_conductivity_traces_are_plane_waves() {
        let (geom, solver) = unit_solver(64);
        for k in [
            Complex64::new(0.0, 0.0),
            Complex64::new(2.0, 0.0),
            Complex64::new(-1.0, 2.5),
            Complex64::new(0.3, -2.9),
        ] {
            let t = solver.solve(k).unwrap();
            let e = geom.sample(|z| (I * z * k).exp());
            assert!(t.psi11.max_abs_diff(&e) < 1e-6, "k = {k}");
            assert!(t.psi21.sup_norm() < 1e-6, "k = {k}");
            assert!(t.k_residual < 1e-8 && t.relation_residual < 1e-8);
            assert_eq!(t.rank, 128);
            assert!(plemelj_defect(&geom, &t, 1e-2).unwrap() < 1e-3);
        }
    }

    #[test]
    fn k_beyond_limit_is_rejected() {
        let (_, solver) = unit_solver(32);
        assert!(matches!(solver.solve(Complex64::new(7.0, 0.0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn trace_json_layout() {
        let (_, solver) = unit_solver(16);
        let t = solver.solve(Complex64::new(0.5, 0.25)).unwrap();
        let v: serde_json::Value = serde_json::to_value(&t).unwrap();
        assert_eq!(v["k"], serde_json::json!([0.5, 0.25]));
        assert_eq!(v["psi11"].as_array().unwrap().len(), 16);
        assert!(v["k_residual"].is_number());
        let back: CgoTrace = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn k_blocks_are_complex_linear(
            kr in -3.0f64..3.0, ki in -3.0f64..3.0,
            ar in -2.0f64..2.0, ai in -2.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let geom = BoundaryGeometry::disk(16, 1.0).unwrap();
            let kop = assemble_k(&geom, Complex64::new(kr, ki));
            let f = BoundaryFunction::new((0..16).map(|j| Complex64::new(((j as u64 * 7 + seed) % 11) as f64, (j % 3) as f64)).collect());
            let g = geom.mode(((seed % 7) as i64) - 3);
            let alpha = Complex64::new(ar, ai);
            let (l1, l2) = kop.apply(&f.scale(alpha).add(&g), &f.scale(alpha).add(&g));
            let (f1, f2) = kop.apply(&f, &f);
            let (g1, g2) = kop.apply(&g, &g);
            prop_assert!(l1.max_abs_diff(&f1.scale(alpha).add(&g1)) < 1e-12 * (1.0 + l1.sup_norm()));
            prop_assert!(l2.max_abs_diff(&f2.scale(alpha).add(&g2)) < 1e-12 * (1.0 + l2.sup_norm()));
        }
    }
}
