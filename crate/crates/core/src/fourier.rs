//! FFT helpers shared by the boundary calculus and the planar convolution solvers.
//!
//! One-dimensional coefficients follow the convention
//! `c_n = (1/N) Σ_j f_j e^{-i n θ_j}` with `θ_j = 2π j / N`, stored in FFT
//! order (modes `0, 1, …, N/2-1, -N/2, …, -1`). Mode `-N/2` is the Nyquist
//! mode.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Signed Fourier mode stored at FFT index `index`.
pub(crate) fn mode_of(index: usize, n: usize) -> i64 {
    if index < n / 2 {
        index as i64
    } else {
        index as i64 - n as i64
    }
}

/// FFT index holding signed mode `mode` (which must satisfy `-n/2 <= mode < n/2`).
pub(crate) fn index_of(mode: i64, n: usize) -> usize {
    mode.rem_euclid(n as i64) as usize
}

pub(crate) fn is_nyquist(index: usize, n: usize) -> bool {
    n.is_multiple_of(2) && index == n / 2
}

pub(crate) fn coefficients(values: &[Complex64]) -> Vec<Complex64> {
    let n = values.len();
    let mut buf = values.to_vec();
    plan(n, false).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf.iter_mut().for_each(|c| *c *= scale);
    buf
}

pub(crate) fn synthesize(coeffs: &[Complex64]) -> Vec<Complex64> {
    let mut buf = coeffs.to_vec();
    plan(buf.len(), true).process(&mut buf);
    buf
}

/// Applies a Fourier multiplier to point samples.
pub(crate) fn apply_multiplier(
    values: &[Complex64],
    mut multiplier: impl FnMut(i64, bool) -> Complex64,
) -> Vec<Complex64> {
    let n = values.len();
    let mut c = coefficients(values);
    for (idx, ci) in c.iter_mut().enumerate() {
        *ci *= multiplier(mode_of(idx, n), is_nyquist(idx, n));
    }
    synthesize(&c)
}

/// First column `c` of the circulant point-value matrix `A[j][l] = c[(j - l) mod n]`
/// of a Fourier multiplier.
pub(crate) fn circulant_column(n: usize, mut multiplier: impl FnMut(i64, bool) -> Complex64) -> Vec<Complex64> {
    let m: Vec<Complex64> = (0..n).map(|idx| multiplier(mode_of(idx, n), is_nyquist(idx, n))).collect();
    let scale = 1.0 / n as f64;
    synthesize(&m).into_iter().map(|v| v * scale).collect()
}

/// Two-dimensional FFT on a square `n × n` row-major array.
pub(crate) struct Fft2 {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            n,
            forward: plan(n, false),
            inverse: plan(n, true),
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(data.len(), n * n);
        let fft = if inverse { &self.inverse } else { &self.forward };
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        fft.process_with_scratch(data, &mut scratch);
        transpose_in_place(data, n);
        fft.process_with_scratch(data, &mut scratch);
        transpose_in_place(data, n);
    }

    pub(crate) fn forward(&self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// Unnormalized inverse transform.
    pub(crate) fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, true);
    }
}

fn transpose_in_place(data: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            data.swap(i * n + j, j * n + i);
        }
    }
}

/// Linear (non-periodic) discrete convolution on an `n × n` grid,
/// `out[p] = Σ_q K(p - q) f[q]`, realized by zero padding to `2n × 2n`.
pub(crate) struct LinearConvolver {
    n: usize,
    fft: Fft2,
    kernel_hat: Vec<Complex64>,
}

impl LinearConvolver {
    /// `kernel(dx, dy)` is evaluated at integer offsets `-(n-1) ..= n-1`.
    pub(crate) fn new(n: usize, kernel: impl Fn(i64, i64) -> Complex64) -> Self {
        let m = 2 * n;
        let mut k = vec![Complex64::default(); m * m];
        let span = n as i64 - 1;
        for dy in -span..=span {
            for dx in -span..=span {
                let row = dy.rem_euclid(m as i64) as usize;
                let col = dx.rem_euclid(m as i64) as usize;
                k[row * m + col] = kernel(dx, dy);
            }
        }
        let fft = Fft2::new(m);
        fft.forward(&mut k);
        let scale = 1.0 / (m * m) as f64;
        k.iter_mut().for_each(|v| *v *= scale);
        Self {
            n,
            fft,
            kernel_hat: k,
        }
    }

    pub(crate) fn convolve(&self, input: &[Complex64]) -> Vec<Complex64> {
        let n = self.n;
        let m = 2 * n;
        assert_eq!(input.len(), n * n);
        let mut buf = vec![Complex64::default(); m * m];
        for row in 0..n {
            buf[row * m..row * m + n].copy_from_slice(&input[row * n..row * n + n]);
        }
        self.fft.forward(&mut buf);
        buf.iter_mut()
            .zip(&self.kernel_hat)
            .for_each(|(b, k)| *b *= k);
        self.fft.inverse(&mut buf);
        let mut out = Vec::with_capacity(n * n);
        for row in 0..n {
            out.extend_from_slice(&buf[row * m..row * m + n]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_index_roundtrip() {
        for n in [8usize, 16, 64] {
            for idx in 0..n {
                assert_eq!(index_of(mode_of(idx, n), n), idx);
            }
            assert_eq!(mode_of(n / 2, n), -(n as i64) / 2);
        }
    }

    #[test]
    fn coefficients_of_single_mode() {
        let n = 16;
        let f: Vec<_> = (0..n)
            .map(|j| Complex64::from_polar(1.0, 3.0 * std::f64::consts::TAU * j as f64 / n as f64))
            .collect();
        let c = coefficients(&f);
        for (idx, ci) in c.iter().enumerate() {
            let want = if mode_of(idx, n) == 3 { 1.0 } else { 0.0 };
            assert!((ci - want).norm() < 1e-14);
        }
        let back = synthesize(&c);
        for (a, b) in back.iter().zip(&f) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    #[test]
    fn linear_convolution_matches_direct_sum() {
        let n = 6;
        let kernel = |dx: i64, dy: i64| Complex64::new(dx as f64 + 0.5, (dy * dy) as f64 - 1.0);
        let input: Vec<Complex64> = (0..n * n)
            .map(|i| Complex64::new((i % 5) as f64, (i % 3) as f64 - 1.0))
            .collect();
        let conv = LinearConvolver::new(n, kernel);
        let fast = conv.convolve(&input);
        for py in 0..n {
            for px in 0..n {
                let mut acc = Complex64::default();
                for qy in 0..n {
                    for qx in 0..n {
                        acc += kernel(px as i64 - qx as i64, py as i64 - qy as i64) * input[qy * n + qx];
                    }
                }
                assert!((acc - fast[py * n + px]).norm() < 1e-10);
            }
        }
    }
}
