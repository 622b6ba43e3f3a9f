//! The ∂̄ equation in the spectral plane, solved for one point `z` at a time.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::LinearConvolver;
use crate::gmres::{gmres_complex, SolverConfig};
use crate::scatter::{plane_phase, KGrid, ScatteringGrid};

/// Samples of a function of `k` on a [`KGrid`], row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KGridField {
    pub grid: KGrid,
    pub values: Vec<Complex64>,
}

impl KGridField {
    pub fn new(grid: KGrid, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape {
                expected: grid.len(),
                got: values.len(),
            });
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: KGrid, f: impl Fn(Complex64) -> Complex64) -> Self {
        Self {
            grid,
            values: grid.nodes().into_iter().map(f).collect(),
        }
    }
}

/// The Cauchy transform `f ↦ (1/π)∫ f(k')/(k - k') dk'` on a fixed grid. The kernel
/// sample at `k = 0` is set to zero.
pub struct KPlaneCauchy {
    grid: KGrid,
    conv: LinearConvolver,
}

impl KPlaneCauchy {
    pub fn new(grid: KGrid) -> Self {
        let h = grid.h_k;
        let conv = LinearConvolver::new(grid.side(), move |dx, dy| {
            if dx == 0 && dy == 0 {
                Complex64::default()
            } else {
                h * h / (PI * Complex64::new(dx as f64 * h, dy as f64 * h))
            }
        });
        Self { grid, conv }
    }

    pub fn grid(&self) -> &KGrid {
        &self.grid
    }

    pub fn apply(&self, values: &[Complex64]) -> Vec<Complex64> {
        self.conv.convolve(values)
    }
}

pub fn cauchy_transform_k(field: &KGridField) -> KGridField {
    let op = KPlaneCauchy::new(field.grid);
    KGridField {
        grid: field.grid,
        values: op.apply(&field.values),
    }
}

/// Solution `m̃₊(z, ·)` with solver diagnostics.
#[derive(Clone, Debug)]
pub struct DbarSolution {
    pub z: Complex64,
    pub field: KGridField,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

/// Reusable per-grid state: the dual scattering data and the Cauchy transform.
pub struct DbarSolver {
    cauchy: KPlaneCauchy,
    s21_dual: Vec<Complex64>,
    config: SolverConfig,
}

impl DbarSolver {
    /// `s_dual` must be the dual grid; only its `S̃₂₁` block enters.
    pub fn new(s_dual: &ScatteringGrid, config: SolverConfig) -> Result<Self> {
        s_dual.check_symmetric()?;
        config.validate()?;
        Ok(Self {
            cauchy: KPlaneCauchy::new(s_dual.grid),
            s21_dual: s_dual.s21.clone(),
            config,
        })
    }

    /// `T(k) = e(z,-k) S̃₂₁(k)`.
    pub fn twisted_data(&self, z: Complex64) -> Vec<Complex64> {
        let grid = self.cauchy.grid();
        (0..grid.len())
            .map(|i| plane_phase(z, -grid.node(i)) * self.s21_dual[i])
            .collect()
    }

    /// Solves `w - C[T·conj(w)] = C[T]` for `w = m̃₊(z,·) - 1`.
    pub fn solve(&self, z: Complex64) -> Result<DbarSolution> {
        let t = self.twisted_data(z);
        let rhs = self.cauchy.apply(&t);
        let op = |w: &[Complex64]| -> Vec<Complex64> {
            let tw: Vec<Complex64> = w.iter().zip(&t).map(|(wi, ti)| ti * wi.conj()).collect();
            let c = self.cauchy.apply(&tw);
            w.iter().zip(&c).map(|(a, b)| a - b).collect()
        };
        let (w, out) = gmres_complex(op, &rhs, &self.config)?;
        Ok(DbarSolution {
            z,
            field: KGridField {
                grid: *self.cauchy.grid(),
                values: w.into_iter().map(|v| v + 1.0).collect(),
            },
            iterations: out.iterations,
            residual_history: out.history,
        })
    }

    /// One-term approximation `1 + C[T]`.
    pub fn born(&self, z: Complex64) -> KGridField {
        let rhs = self.cauchy.apply(&self.twisted_data(z));
        KGridField {
            grid: *self.cauchy.grid(),
            values: rhs.into_iter().map(|v| v + 1.0).collect(),
        }
    }
}

pub fn solve_dbar(s_dual: &ScatteringGrid, z: Complex64, solver: SolverConfig) -> Result<DbarSolution> {
    DbarSolver::new(s_dual, solver)?.solve(z)
}

/// The sample at `k = 0`.
pub fn evaluate_at_zero(field: &KGridField) -> Result<Complex64> {
    let grid = &field.grid;
    if field.values.len() != grid.len() {
        return Err(Error::Shape {
            expected: grid.len(),
            got: field.values.len(),
        });
    }
    let origin = grid.origin();
    if grid.node(origin) != Complex64::default() {
        return Err(Error::Parameter("grid has no node at k = 0".into()));
    }
    Ok(field.values[origin])
}

/// Centered-difference `∂f/∂k̄ = (∂_x + i∂_y) f / 2` at interior nodes (zero on the outer frame).
pub fn dbar_k_difference(field: &KGridField) -> Vec<Complex64> {
    let n = field.grid.side();
    let h = field.grid.h_k;
    let mut out = vec![Complex64::default(); n * n];
    for r in 1..n - 1 {
        for c in 1..n - 1 {
            let v = &field.values;
            let dx = (v[r * n + c + 1] - v[r * n + c - 1]) / (2.0 * h);
            let dy = (v[(r + 1) * n + c] - v[(r - 1) * n + c]) / (2.0 * h);
            out[r * n + c] = 0.5 * (dx + Complex64::new(0.0, 1.0) * dy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(m: u32, r_k: f64) -> KGrid {
        KGrid::new(m, r_k, None).unwrap()
    }

    fn smooth_scattering(g: KGrid, scale: f64) -> ScatteringGrid {
        let mut s = ScatteringGrid::zeros(g);
        for i in g.support() {
            let k = g.node(i);
            let envelope = crate::phantom::bump(k.norm() / g.r_k);
            s.s21[i] = scale * envelope * Complex64::new(0.6, 0.3 * k.re);
            s.s12[i] = scale * envelope * Complex64::new(-0.2 * k.im, 0.4);
        }
        s
    }

    #[test]
    fn zero_scattering_gives_one() {
        let g = grid(5, 3.0);
        let sol = solve_dbar(&ScatteringGrid::zeros(g), Complex64::new(0.3, 0.1), SolverConfig::default()).unwrap();
        assert!(sol.field.values.iter().all(|&v| v == Complex64::new(1.0, 0.0)));
        assert_eq!(evaluate_at_zero(&sol.field).unwrap(), Complex64::new(1.0, 0.0));
    }

    /// Area fraction of the cell of side `h` centered at `c` covered by the unit disk.
    fn disk_fraction(c: Complex64, h: f64) -> f64 {
        let (x0, y0, y1) = (c.re - h / 2.0, c.im - h / 2.0, c.im + h / 2.0);
        let samples = 400;
        let area: f64 = (0..samples)
            .map(|j| {
                let x: f64 = x0 + (j as f64 + 0.5) * h / samples as f64;
                let half = (1.0 - x * x).max(0.0).sqrt();
                (y1.min(half) - y0.max(-half)).max(0.0)
            })
            .sum::<f64>()
            * h
            / samples as f64;
        area / (h * h)
    }

    #[test]
    fn disk_indicator_transform() {
        // C[χ_{|k|<1}] = k̄ inside, 1/k outside; the indicator is sampled as cell area fractions
        let mut errs = Vec::new();
        for m in [6u32, 7] {
            let g = KGrid::new(m, 2.0, None).unwrap();
            let chi = KGridField::from_fn(g, |k| disk_fraction(k, g.h_k).into());
            let c = cauchy_transform_k(&chi);
            let mut err: f64 = 0.0;
            for i in 0..g.len() {
                let k = g.node(i);
                if (k.norm() - 1.0).abs() < 0.2 || k.norm() > 2.0 {
                    continue;
                }
                let want = if k.norm() < 1.0 { k.conj() } else { 1.0 / k };
                err = err.max((c.values[i] - want).norm());
            }
            errs.push((g.h_k, err));
        }
        let (h0, e0) = errs[0];
        let (_, e1) = errs[1];
        assert!(e0 < h0 * h0, "{errs:?}");
        assert!((e0 / e1).log2() > 1.7, "{errs:?}");
    }

    #[test]
    fn transform_inverts_dbar_k() {
        // f smooth with compact support: ∂k̄ C[f] = f at interior nodes to O(h²)
        let mut errs = Vec::new();
        for m in [6u32, 7] {
            let g = grid(m, 3.0);
            let f = KGridField::from_fn(g, |k| {
                Complex64::new(1.0, k.re) * crate::phantom::bump(k.norm() / 2.0)
            });
            let d = dbar_k_difference(&cauchy_transform_k(&f));
            let n = g.side();
            let err = (0..g.len())
                .filter(|&i| {
                    let (r, c) = (i / n, i % n);
                    r > 0 && c > 0 && r < n - 1 && c < n - 1 && g.node(i).norm() < 2.5
                })
                .map(|i| (d[i] - f.values[i]).norm())
                .fold(0.0, f64::max);
            errs.push((g.h_k, err));
        }
        let rate = (errs[0].1 / errs[1].1).log2();
        assert!(rate > 1.7, "{errs:?}");
    }

    #[test]
    fn solution_satisfies_difference_equation() {
        let g = grid(6, 3.0);
        let s = smooth_scattering(g, 0.3);
        let z = Complex64::new(0.2, -0.4);
        let cfg = SolverConfig {
            tol: 1e-10,
            ..SolverConfig::default()
        };
        let solver = DbarSolver::new(&s, cfg).unwrap();
        let sol = solver.solve(z).unwrap();
        let t = solver.twisted_data(z);
        let d = dbar_k_difference(&sol.field);
        let n = g.side();
        let worst = (0..g.len())
            .filter(|&i| {
                let (r, c) = (i / n, i % n);
                r > 0 && c > 0 && r < n - 1 && c < n - 1
            })
            .map(|i| (d[i] - t[i] * sol.field.values[i].conj()).norm())
            .fold(0.0, f64::max);
        let h2 = g.h_k * g.h_k;
        assert!(worst < h2 + 1e-8, "residual {worst} vs h² = {h2}");
    }

    #[test]
    fn one_term_approximation_is_second_order_accurate() {
        let g = grid(5, 3.0);
        let z = Complex64::new(0.1, 0.2);
        let cfg = SolverConfig {
            tol: 1e-12,
            ..SolverConfig::default()
        };
        let dev = |alpha: f64| {
            let solver = DbarSolver::new(&smooth_scattering(g, alpha), cfg).unwrap();
            let full = solver.solve(z).unwrap().field;
            let born = solver.born(z);
            full.values.iter().zip(&born.values).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
        };
        let (d1, d2) = (dev(0.02), dev(0.01));
        assert!((d1 / d2 - 4.0).abs() < 0.4, "{d1} {d2}");
    }

    #[test]
    fn evaluation_at_zero() {
        let g = grid(4, 2.0);
        let ones = KGridField::from_fn(g, |_| Complex64::new(1.0, 0.0));
        assert_eq!(evaluate_at_zero(&ones).unwrap(), Complex64::new(1.0, 0.0));
        let z = Complex64::new(0.4, -0.3);
        let phase = KGridField::from_fn(g, |k| plane_phase(z, -k));
        assert_eq!(evaluate_at_zero(&phase).unwrap(), Complex64::new(1.0, 0.0));
        let bad = KGridField {
            grid: g,
            values: vec![Complex64::default(); 3],
        };
        assert!(evaluate_at_zero(&bad).is_err());
    }

    #[test]
    fn value_at_zero_converges_under_refinement() {
        // fixed continuous data on three grids with R_k fixed; differences shrink like h²
        let z = Complex64::new(0.25, 0.0);
        let cfg = SolverConfig {
            tol: 1e-12,
            ..SolverConfig::default()
        };
        let values: Vec<(f64, Complex64)> = [5u32, 6, 7]
            .iter()
            .map(|&m| {
                let g = grid(m, 3.0);
                let sol = solve_dbar(&smooth_scattering(g, 0.5), z, cfg).unwrap();
                (g.h_k, evaluate_at_zero(&sol.field).unwrap())
            })
            .collect();
        let d1 = (values[0].1 - values[1].1).norm();
        let d2 = (values[1].1 - values[2].1).norm();
        assert!(d1 / d2 > 3.0, "{values:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn solve_is_real_homogeneous_to_first_order(alpha in 0.05f64..0.2, zr in -0.5f64..0.5, zi in -0.5f64..0.5) {
            let g = grid(4, 2.0);
            let z = Complex64::new(zr, zi);
            let cfg = SolverConfig { tol: 1e-12, ..SolverConfig::default() };
            let base = DbarSolver::new(&smooth_scattering(g, 0.01), cfg).unwrap().solve(z).unwrap().field;
            let scaled = DbarSolver::new(&smooth_scattering(g, 0.01 * alpha), cfg).unwrap().solve(z).unwrap().field;
            for (a, b) in base.values.iter().zip(&scaled.values) {
                // m̃₊ - 1 scales by α up to O(α·0.01²)
                prop_assert!(((b - 1.0) - alpha * (a - 1.0)).norm() < 1e-3 * alpha);
            }
        }
    }
}
