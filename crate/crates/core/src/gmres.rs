//! Restarted GMRES for real linear systems given as a matrix-free operator.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iter() -> usize {
    500
}

fn default_restart() -> usize {
    60
}

/// Stopping rule for the iterative solves, `{"tol", "max_iter", "restart"}` in JSON.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Relative residual `‖b - Ax‖ / ‖b‖` at which to stop.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Cap on the total number of operator applications.
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Krylov dimension between restarts.
    #[serde(default = "default_restart")]
    pub restart: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: default_tol(),
            max_iter: default_max_iter(),
            restart: default_restart(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(Error::Config(format!("solver tol must lie in (0, 1), got {}", self.tol)));
        }
        if self.max_iter == 0 || self.restart == 0 {
            return Err(Error::Config("max_iter and restart must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct GmresOutcome {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Relative residual after each inner iteration.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Solves `A x = b` from `x = 0`. Fails with [`Error::NoConvergence`] when the
/// relative residual is still above `config.tol` after `config.max_iter` iterations.
pub fn gmres(apply: impl Fn(&[f64]) -> Vec<f64>, b: &[f64], config: &SolverConfig) -> Result<GmresOutcome> {
    let n = b.len();
    let bnorm = norm(b);
    let mut x = vec![0.0; n];
    let mut history = Vec::new();
    if bnorm == 0.0 {
        return Ok(GmresOutcome {
            x,
            iterations: 0,
            history,
        });
    }
    let m = config.restart.min(n.max(1));
    let mut iterations = 0;
    loop {
        let ax = apply(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(p, q)| p - q).collect();
        let beta = norm(&r);
        if beta / bnorm <= config.tol {
            history.push(beta / bnorm);
            return Ok(GmresOutcome {
                x,
                iterations,
                history,
            });
        }
        if iterations >= config.max_iter {
            return Err(Error::NoConvergence {
                iterations,
                residual: beta / bnorm,
                history,
            });
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        // Hessenberg columns after rotation, stored column-wise
        let mut h: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut cs: Vec<(f64, f64)> = Vec::with_capacity(m);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        for j in 0..m {
            let mut w = apply(&basis[j]);
            let mut col = vec![0.0; j + 2];
            // modified Gram-Schmidt, twice for stability
            for _ in 0..2 {
                for (i, v) in basis.iter().enumerate() {
                    let c = dot(&w, v);
                    col[i] += c;
                    w.iter_mut().zip(v).for_each(|(wi, vi)| *wi -= c * vi);
                }
            }
            let wn = norm(&w);
            col[j + 1] = wn;
            for (i, &(c, s)) in cs.iter().enumerate() {
                let (a, b) = (col[i], col[i + 1]);
                col[i] = c * a + s * b;
                col[i + 1] = -s * a + c * b;
            }
            let (a, b) = (col[j], col[j + 1]);
            let rho = a.hypot(b);
            let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (a / rho, b / rho) };
            col[j] = rho;
            col[j + 1] = 0.0;
            g[j + 1] = -s * g[j];
            g[j] *= c;
            cs.push((c, s));
            h.push(col);
            used = j + 1;
            iterations += 1;
            let rel = g[j + 1].abs() / bnorm;
            history.push(rel);
            if rel <= config.tol || iterations >= config.max_iter || wn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / wn).collect());
        }
        // back substitution on the triangular factor
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let mut s = g[i];
            for (k, yk) in y.iter().enumerate().skip(i + 1) {
                s -= h[k][i] * yk;
            }
            y[i] = s / h[i][i];
        }
        for (k, yk) in y.iter().enumerate() {
            x.iter_mut().zip(&basis[k]).for_each(|(xi, vi)| *xi += yk * vi);
        }
    }
}

/// GMRES for a real-linear operator on complex vectors, realified with
/// interleaved real and imaginary parts.
pub fn gmres_complex(
    apply: impl Fn(&[Complex64]) -> Vec<Complex64>,
    b: &[Complex64],
    config: &SolverConfig,
) -> Result<(Vec<Complex64>, GmresOutcome)> {
    let to_complex = |x: &[f64]| -> Vec<Complex64> { x.chunks(2).map(|p| Complex64::new(p[0], p[1])).collect() };
    let to_real = |z: &[Complex64]| -> Vec<f64> { z.iter().flat_map(|v| [v.re, v.im]).collect() };
    let out = gmres(|x| to_real(&apply(&to_complex(x))), &to_real(b), config)?;
    Ok((to_complex(&out.x), out))
}
