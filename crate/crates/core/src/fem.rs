//! Piecewise-linear finite elements for `∇·(γ∇u) = 0` on disks and annuli.

use std::f64::consts::TAU;

use faer::linalg::solvers::{Solve, SolveLstsq};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::phantom::ConductivityField;

#[derive(Clone, Debug)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    /// Counterclockwise vertex triples.
    pub triangles: Vec<[usize; 3]>,
    /// Nodes on the outer circle, counterclockwise from angle 0, equispaced.
    pub outer: Vec<usize>,
    /// Nodes on the inner circle of an annulus (empty for a disk), same layout.
    pub inner: Vec<usize>,
    /// Typical edge length near the outer circle.
    pub h: f64,
}

fn signed_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl Mesh {
    /// Concentric-ring disk mesh: ring `j` has radius `radius·j/rings` and `6j` nodes,
    /// so the outer circle carries `6·rings` nodes.
    pub fn disk(radius: f64, rings: usize) -> Result<Self> {
        if rings < 2 {
            return Err(Error::Parameter(format!("mesh resolution must be at least 2, got {rings}")));
        }
        let start = |j: usize| if j == 0 { 0 } else { 1 + 3 * j * (j - 1) };
        let count = |j: usize| if j == 0 { 1 } else { 6 * j };
        let mut nodes = Vec::with_capacity(start(rings + 1));
        nodes.push([0.0, 0.0]);
        for j in 1..=rings {
            let r = radius * j as f64 / rings as f64;
            let n = count(j);
            for i in 0..n {
                let t = TAU * i as f64 / n as f64;
                nodes.push([r * t.cos(), r * t.sin()]);
            }
        }
        let mut triangles = Vec::with_capacity(6 * rings * rings);
        for o in 0..6 {
            triangles.push([0, start(1) + o, start(1) + (o + 1) % 6]);
        }
        for j in 1..rings {
            let (a, b) = (count(j), count(j + 1));
            let (sa, sb) = (start(j), start(j + 1));
            let (mut i, mut o) = (0, 0);
            while i < a || o < b {
                let next_in = (i + 1) as f64 / a as f64;
                let next_out = (o + 1) as f64 / b as f64;
                if i < a && (o == b || next_in <= next_out) {
                    triangles.push([sa + i, sa + (i + 1) % a, sb + o % b]);
                    i += 1;
                } else {
                    triangles.push([sa + i % a, sb + o, sb + (o + 1) % b]);
                    o += 1;
                }
            }
        }
        let outer = (start(rings)..start(rings) + count(rings)).collect();
        let mut mesh = Self {
            nodes,
            triangles,
            outer,
            inner: Vec::new(),
            h: radius / rings as f64,
        };
        mesh.orient();
        Ok(mesh)
    }

    /// Structured annulus mesh with `angular` nodes on every ring and `layers`
    /// radial cells.
    pub fn annulus(inner_radius: f64, outer_radius: f64, layers: usize, angular: usize) -> Result<Self> {
        if !(0.0 < inner_radius && inner_radius < outer_radius) {
            return Err(Error::Parameter(format!(
                "annulus needs 0 < inner radius < outer radius, got {inner_radius}, {outer_radius}"
            )));
        }
        if layers < 1 || angular < 8 {
            return Err(Error::Parameter("annulus mesh too coarse".into()));
        }
        let id = |i: usize, j: usize| i * angular + j % angular;
        let mut nodes = Vec::with_capacity((layers + 1) * angular);
        for i in 0..=layers {
            let r = inner_radius + (outer_radius - inner_radius) * i as f64 / layers as f64;
            for j in 0..angular {
                let t = TAU * j as f64 / angular as f64;
                nodes.push([r * t.cos(), r * t.sin()]);
            }
        }
        let mut triangles = Vec::with_capacity(2 * layers * angular);
        for i in 0..layers {
            for j in 0..angular {
                let (a, b, c, d) = (id(i, j), id(i, j + 1), id(i + 1, j + 1), id(i + 1, j));
                if (i + j) % 2 == 0 {
                    triangles.push([a, b, c]);
                    triangles.push([a, c, d]);
                } else {
                    triangles.push([a, b, d]);
                    triangles.push([b, c, d]);
                }
            }
        }
        let mut mesh = Self {
            nodes,
            triangles,
            outer: (layers * angular..(layers + 1) * angular).collect(),
            inner: (0..angular).collect(),
            h: TAU * outer_radius / angular as f64,
        };
        mesh.orient();
        Ok(mesh)
    }

    fn orient(&mut self) {
        for t in &mut self.triangles {
            let [a, b, c] = *t;
            if signed_area(self.nodes[a], self.nodes[b], self.nodes[c]) < 0.0 {
                t.swap(1, 2);
            }
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|&[a, b, c]| signed_area(self.nodes[a], self.nodes[b], self.nodes[c]))
            .sum()
    }

    /// Stiffness matrix entries of `∫ γ ∇φ_i·∇φ_j`, duplicates not yet summed.
    /// γ is integrated with the edge-midpoint rule, exact for quadratics.
    pub fn stiffness_triplets(&self, gamma: &ConductivityField) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(9 * self.triangles.len());
        for &tri in &self.triangles {
            let p = tri.map(|i| self.nodes[i]);
            let area = signed_area(p[0], p[1], p[2]);
            let mid = |a: [f64; 2], b: [f64; 2]| Complex64::new(0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]));
            let g = (gamma.value(mid(p[0], p[1])) + gamma.value(mid(p[1], p[2])) + gamma.value(mid(p[2], p[0]))) / 3.0;
            // ∇φ_i = perp(opposite edge) / (2·area)
            let grads: [[f64; 2]; 3] = std::array::from_fn(|i| {
                let (b, c) = (p[(i + 1) % 3], p[(i + 2) % 3]);
                [(b[1] - c[1]) / (2.0 * area), (c[0] - b[0]) / (2.0 * area)]
            });
            for i in 0..3 {
                for j in 0..3 {
                    let v = g * area * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                    out.push((tri[i], tri[j], v));
                }
            }
        }
        out
    }
}

/// Sparse matrix in compressed-row form with summed duplicates.
#[derive(Clone, Debug)]
pub(crate) struct CsrMatrix {
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub(crate) fn from_triplets(n: usize, mut trip: Vec<(usize, usize, f64)>) -> Self {
        trip.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_start = vec![0; n + 1];
        let mut cols = Vec::with_capacity(trip.len() / 2);
        let mut vals: Vec<f64> = Vec::with_capacity(trip.len() / 2);
        let mut last = None;
        for (r, c, v) in trip {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_start[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n {
            row_start[r + 1] += row_start[r];
        }
        Self { row_start, cols, vals }
    }

    pub(crate) fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_start[r]..self.row_start[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub(crate) fn n_rows(&self) -> usize {
        self.row_start.len() - 1
    }
}

/// Dirichlet solver with the outer-circle nodes prescribed. Optionally adds a
/// dense symmetric block over a set of free nodes (a Robin-type coupling).
pub struct DirichletSolver {
    stiffness: CsrMatrix,
    fixed: Vec<usize>,
    /// Position of each node among the free unknowns, `usize::MAX` for fixed nodes.
    free_pos: Vec<usize>,
    free: Vec<usize>,
    llt: faer::sparse::linalg::solvers::Llt<usize, f64>,
}

impl DirichletSolver {
    pub fn new(
        mesh: &Mesh,
        gamma: &ConductivityField,
        coupling: Option<(&[usize], &Mat<f64>)>,
    ) -> Result<Self> {
        let n = mesh.n_nodes();
        let stiffness = CsrMatrix::from_triplets(n, mesh.stiffness_triplets(gamma));
        let fixed = mesh.outer.clone();
        let mut free_pos = vec![0usize; n];
        for &f in &fixed {
            free_pos[f] = usize::MAX;
        }
        let mut free = Vec::with_capacity(n - fixed.len());
        for (i, pos) in free_pos.iter_mut().enumerate() {
            if *pos != usize::MAX {
                *pos = free.len();
                free.push(i);
            }
        }
        let mut trip = Vec::with_capacity(stiffness.vals.len());
        for (fi, &node) in free.iter().enumerate() {
            for (c, v) in stiffness.row(node) {
                let fc = free_pos[c];
                if fc != usize::MAX {
                    trip.push(Triplet::new(fi, fc, v));
                }
            }
        }
        if let Some((nodes, block)) = coupling {
            for (a, &na) in nodes.iter().enumerate() {
                for (b, &nb) in nodes.iter().enumerate() {
                    let (pa, pb) = (free_pos[na], free_pos[nb]);
                    if pa == usize::MAX || pb == usize::MAX {
                        return Err(Error::Parameter("coupling block touches prescribed nodes".into()));
                    }
                    trip.push(Triplet::new(pa, pb, block[(a, b)]));
                }
            }
        }
        let k_ff = SparseColMat::<usize, f64>::try_new_from_triplets(free.len(), free.len(), &trip)
            .map_err(|e| Error::Numerical(format!("stiffness assembly failed: {e:?}")))?;
        let llt = k_ff.sp_cholesky(Side::Lower).map_err(|e| {
            Error::Numerical(format!(
                "stiffness matrix on {} free nodes is not positive definite: {e:?}",
                free.len()
            ))
        })?;
        Ok(Self {
            stiffness,
            fixed,
            free_pos,
            free,
            llt,
        })
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed.len()
    }

    /// Discrete solutions for the given outer-node data (one column per data set).
    pub fn solve(&self, data: &Mat<f64>) -> Mat<f64> {
        let n = self.stiffness.n_rows();
        let cols = data.ncols();
        let mut rhs = Mat::<f64>::zeros(self.free.len(), cols);
        let mut fixed_pos = vec![usize::MAX; n];
        for (k, &f) in self.fixed.iter().enumerate() {
            fixed_pos[f] = k;
        }
        for (fi, &node) in self.free.iter().enumerate() {
            for (c, v) in self.stiffness.row(node) {
                let k = fixed_pos[c];
                if k != usize::MAX {
                    for col in 0..cols {
                        rhs[(fi, col)] -= v * data[(k, col)];
                    }
                }
            }
        }
        let u_free = self.llt.solve(&rhs);
        Mat::from_fn(n, cols, |i, col| {
            let p = self.free_pos[i];
            if p == usize::MAX {
                data[(fixed_pos[i], col)]
            } else {
                u_free[(p, col)]
            }
        })
    }

    /// Discrete boundary flux `(K u)` restricted to the outer nodes: the
    /// Schur-complement action on the data.
    pub fn flux(&self, data: &Mat<f64>) -> Mat<f64> {
        let u = self.solve(data);
        Mat::from_fn(self.fixed.len(), data.ncols(), |k, col| {
            self.stiffness.row(self.fixed[k]).map(|(c, v)| v * u[(c, col)]).sum()
        })
    }
}

/// Gradient `∂x u + i ∂y u` at `targets` from a local quadratic least-squares fit
/// over nodes within `patch_radius`.
pub fn recover_gradient(mesh: &Mesh, u: &[f64], targets: &[usize], patch_radius: f64) -> Result<Vec<Complex64>> {
    // bucket nodes on a coarse grid for neighbor lookup
    let cell = patch_radius;
    let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
    for (i, p) in mesh.nodes.iter().enumerate() {
        let key = ((p[0] / cell).floor() as i64, (p[1] / cell).floor() as i64);
        buckets.entry(key).or_default().push(i);
    }
    let mut out = Vec::with_capacity(targets.len());
    for &t in targets {
        let c = mesh.nodes[t];
        let key = ((c[0] / cell).floor() as i64, (c[1] / cell).floor() as i64);
        let mut patch = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(b) = buckets.get(&(key.0 + dx, key.1 + dy)) {
                    for &i in b {
                        let p = mesh.nodes[i];
                        if (p[0] - c[0]).hypot(p[1] - c[1]) <= patch_radius {
                            patch.push(i);
                        }
                    }
                }
            }
        }
        if patch.len() < 6 {
            return Err(Error::Numerical(format!(
                "gradient patch at node {t} has only {} nodes",
                patch.len()
            )));
        }
        let s = patch_radius;
        let a = Mat::<f64>::from_fn(patch.len(), 6, |row, col| {
            let p = mesh.nodes[patch[row]];
            let (x, y) = ((p[0] - c[0]) / s, (p[1] - c[1]) / s);
            [1.0, x, y, x * x, x * y, y * y][col]
        });
        let b = Mat::<f64>::from_fn(patch.len(), 1, |row, _| u[patch[row]]);
        let coef = a.qr().solve_lstsq(&b);
        out.push(Complex64::new(coef[(1, 0)] / s, coef[(2, 0)] / s));
    }
    Ok(out)
}
