//! Pointwise recovery of the conductivity from the ∂̄ solutions and error metrics.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dbar::{evaluate_at_zero, DbarSolver};
use crate::error::{Error, Result};
use crate::gmres::SolverConfig;
use crate::io;
use crate::phantom::ConductivityField;
use crate::scatter::ScatteringGrid;

/// How `γ(z)` is read off `m̃₊(z, 0)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaRule {
    /// `γ = (Re m̃₊(z,0))²`, i.e. `Re m̃₊(z,0) = γ^{1/2}`.
    #[default]
    SquaredRealPart,
    /// `γ = Re m̃₊(z,0)`.
    RealPart,
}

impl GammaRule {
    pub fn apply(self, m_at_zero: Complex64) -> f64 {
        match self {
            GammaRule::SquaredRealPart => m_at_zero.re * m_at_zero.re,
            GammaRule::RealPart => m_at_zero.re,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GammaRule::SquaredRealPart => "squared-real-part",
            GammaRule::RealPart => "real-part",
        }
    }
}

pub const DEFAULT_GAMMA_MIN_CLAMP: f64 = 1e-3;

/// Square evaluation grid: cell centers of a `side × side` partition of
/// `[-radius, radius]²`, restricted to the open disk of that radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZGrid {
    pub side: usize,
    pub radius: f64,
}

impl ZGrid {
    pub fn validate(&self) -> Result<()> {
        if self.side < 2 || !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::Parameter(format!(
                "z-grid needs side ≥ 2 and positive radius, got {} and {}",
                self.side, self.radius
            )));
        }
        Ok(())
    }

    pub fn nodes(&self) -> Vec<Complex64> {
        let h = 2.0 * self.radius / self.side as f64;
        (0..self.side * self.side)
            .map(|i| {
                Complex64::new(
                    -self.radius + ((i % self.side) as f64 + 0.5) * h,
                    -self.radius + ((i / self.side) as f64 + 0.5) * h,
                )
            })
            .filter(|z| z.norm() < self.radius)
            .collect()
    }
}

/// Reconstruction at one point.
#[derive(Clone, Copy, Debug)]
pub struct PointRecon {
    pub gamma: f64,
    pub m_at_zero: Complex64,
    pub clamped: bool,
    pub iterations: usize,
}

pub fn reconstruct_point_with(solver: &DbarSolver, z: Complex64, rule: GammaRule, clamp: f64) -> Result<PointRecon> {
    let sol = solver.solve(z)?;
    let m = evaluate_at_zero(&sol.field)?;
    let raw = rule.apply(m);
    let clamped = !(raw >= clamp);
    Ok(PointRecon {
        gamma: if clamped { clamp } else { raw },
        m_at_zero: m,
        clamped,
        iterations: sol.iterations,
    })
}

pub fn reconstruct_point(
    s_dual: &ScatteringGrid,
    z: Complex64,
    solver: SolverConfig,
    rule: GammaRule,
) -> Result<PointRecon> {
    reconstruct_point_with(&DbarSolver::new(s_dual, solver)?, z, rule, DEFAULT_GAMMA_MIN_CLAMP)
}

/// Per-node results. Failed nodes carry `NaN` values and an error message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconImage {
    pub z_nodes: Vec<Complex64>,
    pub gamma_values: Vec<f64>,
    /// `m̃₊(z, 0)` per node, from which every rule can be re-evaluated.
    pub m_at_zero: Vec<Complex64>,
    pub imag_residuals: Vec<f64>,
    pub clamped: Vec<bool>,
    pub failures: Vec<Option<String>>,
    pub rule: GammaRule,
    pub metadata: serde_json::Value,
}

pub fn reconstruct_grid(
    s_dual: &ScatteringGrid,
    z_grid: &ZGrid,
    solver: SolverConfig,
    rule: GammaRule,
    clamp: f64,
) -> Result<ReconImage> {
    z_grid.validate()?;
    let dbar = DbarSolver::new(s_dual, solver)?;
    let nodes = z_grid.nodes();
    let results: Vec<Result<PointRecon>> = nodes
        .par_iter()
        .map(|&z| reconstruct_point_with(&dbar, z, rule, clamp))
        .collect();
    let mut image = ReconImage {
        z_nodes: nodes,
        gamma_values: Vec::with_capacity(results.len()),
        m_at_zero: Vec::with_capacity(results.len()),
        imag_residuals: Vec::with_capacity(results.len()),
        clamped: Vec::with_capacity(results.len()),
        failures: Vec::with_capacity(results.len()),
        rule,
        metadata: serde_json::Value::Null,
    };
    for r in results {
        match r {
            Ok(p) => {
                image.gamma_values.push(p.gamma);
                image.m_at_zero.push(p.m_at_zero);
                image.imag_residuals.push(p.m_at_zero.im.abs());
                image.clamped.push(p.clamped);
                image.failures.push(None);
            }
            Err(e) => {
                log::warn!("reconstruction failed at a node: {e}");
                image.gamma_values.push(f64::NAN);
                image.m_at_zero.push(Complex64::new(f64::NAN, f64::NAN));
                image.imag_residuals.push(f64::NAN);
                image.clamped.push(false);
                image.failures.push(Some(e.to_string()));
            }
        }
    }
    Ok(image)
}

impl ReconImage {
    /// Same image under a different rule, without re-solving.
    pub fn with_rule(&self, rule: GammaRule, clamp: f64) -> ReconImage {
        let mut out = self.clone();
        out.rule = rule;
        for (i, m) in self.m_at_zero.iter().enumerate() {
            if self.failures[i].is_none() {
                let raw = rule.apply(*m);
                out.clamped[i] = !(raw >= clamp);
                out.gamma_values[i] = if out.clamped[i] { clamp } else { raw };
            }
        }
        out
    }

    /// `x,y,gamma,imag_residual` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,gamma,imag_residual\n");
        for (z, (g, r)) in self.z_nodes.iter().zip(self.gamma_values.iter().zip(&self.imag_residuals)) {
            let _ = writeln!(s, "{:.17e},{:.17e},{:.17e},{:.17e}", z.re, z.im, g, r);
        }
        s
    }

    /// `<stem>.csv`, `<stem>.bin` (rows of `x, y, gamma, imag_residual` as little-endian `f64`)
    /// and `<stem>.json` with the full image including metadata.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        let flat: Vec<f64> = self
            .z_nodes
            .iter()
            .enumerate()
            .flat_map(|(i, z)| [z.re, z.im, self.gamma_values[i], self.imag_residuals[i]])
            .collect();
        io::write_real_binary(&dir.join(format!("{stem}.bin")), &flat)?;
        io::write_json(&dir.join(format!("{stem}.json")), self)
    }

    /// Largest ring-wise standard deviation over mean, rings being nodes of equal `|z|`.
    pub fn ring_asymmetry(&self) -> f64 {
        let mut rings: Vec<(f64, Vec<f64>)> = Vec::new();
        for (z, &g) in self.z_nodes.iter().zip(&self.gamma_values) {
            if !g.is_finite() {
                continue;
            }
            let r = z.norm();
            match rings.iter_mut().find(|(rr, _)| (rr - r).abs() < 1e-9 * (1.0 + r)) {
                Some((_, v)) => v.push(g),
                None => rings.push((r, vec![g])),
            }
        }
        rings
            .iter()
            .filter(|(_, v)| v.len() > 1)
            .map(|(_, v)| {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
                var.sqrt() / mean.abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMetrics {
    pub relative_l2: f64,
    pub relative_linf: f64,
    pub max_imag_residual: f64,
    /// Largest `|Im m̃₊(z,0)| / |Re m̃₊(z,0)|`.
    pub max_imag_ratio: f64,
    /// Largest `|Im m̃₊(z,0)| / γ_rec(z)`.
    pub max_imag_over_gamma: f64,
    pub ring_asymmetry: f64,
    pub clamped_fraction: f64,
    pub failed_nodes: usize,
}

pub fn compare_fields(recon: &ReconImage, truth: &ConductivityField) -> FieldMetrics {
    let mut num2 = 0.0;
    let mut den2 = 0.0;
    let mut num_inf: f64 = 0.0;
    let mut den_inf: f64 = 0.0;
    let mut max_imag: f64 = 0.0;
    let mut max_ratio: f64 = 0.0;
    let mut max_over_gamma: f64 = 0.0;
    let mut failed = 0;
    for (i, z) in recon.z_nodes.iter().enumerate() {
        if recon.failures[i].is_some() {
            failed += 1;
            continue;
        }
        let t = truth.value(*z);
        let d = recon.gamma_values[i] - t;
        num2 += d * d;
        den2 += t * t;
        num_inf = num_inf.max(d.abs());
        den_inf = den_inf.max(t.abs());
        max_imag = max_imag.max(recon.imag_residuals[i]);
        max_ratio = max_ratio.max(recon.m_at_zero[i].im.abs() / recon.m_at_zero[i].re.abs());
        max_over_gamma = max_over_gamma.max(recon.m_at_zero[i].im.abs() / recon.gamma_values[i].abs());
    }
    let n = recon.z_nodes.len().max(1) as f64;
    FieldMetrics {
        relative_l2: (num2 / den2).sqrt(),
        relative_linf: num_inf / den_inf,
        max_imag_residual: max_imag,
        max_imag_ratio: max_ratio,
        max_imag_over_gamma: max_over_gamma,
        ring_asymmetry: recon.ring_asymmetry(),
        clamped_fraction: recon.clamped.iter().filter(|&&c| c).count() as f64 / n,
        failed_nodes: failed,
    }
}
