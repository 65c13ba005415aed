//! Periodic grids and the spectral transform machinery bound to them.
//!
//! Points are stored row-major with the last axis fastest. Spectral
//! coefficients are Fourier-series coefficients `c_m` such that
//! `f(x) = sum_m c_m exp(i xi_m . x)` with `xi_m = (2 pi / L) m`, i.e. the
//! forward DFT divided by `N^d`.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Geometry of a periodic box `[0, L)^d` sampled with `N` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub n: usize,
    pub length: f64,
    pub dealias_fraction: f64,
}

impl Grid {
    pub const DEFAULT_DEALIAS: f64 = 2.0 / 3.0;

    pub fn new(dim: usize, n: usize) -> Result<Self> {
        Self::with_box(dim, n, 2.0 * std::f64::consts::PI, Self::DEFAULT_DEALIAS)
    }

    pub fn with_box(dim: usize, n: usize, length: f64, dealias_fraction: f64) -> Result<Self> {
        let grid = Grid {
            dim,
            n,
            length,
            dealias_fraction,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(invalid(format!("dimension {} not in 1..=3", self.dim)));
        }
        if self.n < 8 || self.n % 2 != 0 {
            return Err(invalid(format!("N = {} must be even and >= 8", self.n)));
        }
        if !(self.length.is_finite() && self.length > 0.0) {
            return Err(invalid(format!("box length {} must be positive", self.length)));
        }
        if !(self.dealias_fraction > 0.0 && self.dealias_fraction <= 1.0) {
            return Err(invalid(format!(
                "dealias fraction {} not in (0, 1]",
                self.dealias_fraction
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.n as f64
    }

    /// Volume of the box, `L^d`.
    pub fn volume(&self) -> f64 {
        self.length.powi(self.dim as i32)
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Fundamental wavenumber `2 pi / L`.
    pub fn wavenumber_unit(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.length
    }

    /// Largest retained integer mode per axis after dealiasing.
    pub fn dealias_cutoff(&self) -> f64 {
        self.dealias_fraction * (self.n / 2) as f64
    }

    /// Multi-index of a flat offset (unused trailing axes are zero).
    pub fn unravel(&self, mut idx: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        for axis in (0..self.dim).rev() {
            out[axis] = idx % self.n;
            idx /= self.n;
        }
        out
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        multi[..self.dim]
            .iter()
            .fold(0usize, |acc, &i| acc * self.n + i)
    }

    /// Physical coordinates of grid point `idx`.
    pub fn point(&self, idx: usize) -> [f64; 3] {
        let h = self.spacing();
        let m = self.unravel(idx);
        let mut x = [0.0; 3];
        for axis in 0..self.dim {
            x[axis] = m[axis] as f64 * h;
        }
        x
    }

    /// Signed integer mode of a spectral flat index.
    pub fn mode(&self, idx: usize) -> [i64; 3] {
        let m = self.unravel(idx);
        let half = (self.n / 2) as i64;
        let mut k = [0i64; 3];
        for axis in 0..self.dim {
            let i = m[axis] as i64;
            k[axis] = if i < half { i } else { i - self.n as i64 };
        }
        k
    }

    /// Flat spectral index of an integer mode, if representable.
    pub fn mode_index(&self, mode: &[i64]) -> Option<usize> {
        let half = (self.n / 2) as i64;
        let mut multi = [0usize; 3];
        for axis in 0..self.dim {
            let k = mode[axis];
            if k < -half || k >= half {
                return None;
            }
            multi[axis] = if k >= 0 { k as usize } else { (k + self.n as i64) as usize };
        }
        Some(self.ravel(&multi))
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{} on L = {}", self.n, self.dim, self.length)
    }
}

/// A grid together with FFT plans and precomputed spectral tables.
pub struct Domain<T: Real> {
    grid: Grid,
    forward: Arc<dyn Fft<T>>,
    inverse: Arc<dyn Fft<T>>,
    modes: Vec<[i64; 3]>,
    wavevectors: Vec<[T; 3]>,
    retained: Vec<bool>,
    nyquist: Vec<[bool; 3]>,
}

impl<T: Real> fmt::Debug for Domain<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Domain").field("grid", &self.grid).finish()
    }
}

impl<T: Real> Domain<T> {
    pub fn new(grid: Grid) -> Result<Arc<Self>> {
        grid.validate()?;
        let mut planner = FftPlanner::<T>::new();
        let forward = planner.plan_fft_forward(grid.n);
        let inverse = planner.plan_fft_inverse(grid.n);
        let unit = grid.wavenumber_unit();
        let cutoff = grid.dealias_cutoff();
        let half = (grid.n / 2) as i64;
        let len = grid.len();
        let mut modes = Vec::with_capacity(len);
        let mut wavevectors = Vec::with_capacity(len);
        let mut retained = Vec::with_capacity(len);
        let mut nyquist = Vec::with_capacity(len);
        for idx in 0..len {
            let m = grid.mode(idx);
            let mut xi = [T::zero(); 3];
            let mut keep = true;
            let mut nyq = [false; 3];
            for axis in 0..grid.dim {
                xi[axis] = T::lit(unit * m[axis] as f64);
                if (m[axis].abs() as f64) > cutoff + 1e-12 {
                    keep = false;
                }
                nyq[axis] = m[axis] == -half;
            }
            modes.push(m);
            wavevectors.push(xi);
            retained.push(keep);
            nyquist.push(nyq);
        }
        Ok(Arc::new(Domain {
            grid,
            forward,
            inverse,
            modes,
            wavevectors,
            retained,
            nyquist,
        }))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn mode(&self, idx: usize) -> [i64; 3] {
        self.modes[idx]
    }

    pub fn wavevector(&self, idx: usize) -> [T; 3] {
        self.wavevectors[idx]
    }

    pub fn wavenumber_sq(&self, idx: usize) -> T {
        let xi = &self.wavevectors[idx];
        xi[..self.grid.dim].iter().fold(T::zero(), |acc, &v| acc + v * v)
    }

    /// Whether the mode survives the dealiasing filter.
    pub fn is_retained(&self, idx: usize) -> bool {
        self.retained[idx]
    }

    /// Whether the mode sits on the Nyquist plane of `axis`.
    pub fn is_nyquist(&self, idx: usize, axis: usize) -> bool {
        self.nyquist[idx][axis]
    }

    /// Forward transform of real samples into Fourier-series coefficients.
    pub fn forward(&self, values: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.forward_in_place(&mut buf);
        buf
    }

    pub fn forward_in_place(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.len());
        self.transform(buf, &self.forward);
        let scale = T::one() / T::lit(self.len() as f64);
        for c in buf.iter_mut() {
            *c = *c * scale;
        }
    }

    /// Inverse transform; returns the real part of the synthesized samples.
    pub fn inverse(&self, coeffs: &[Complex<T>]) -> Vec<T> {
        let mut buf = coeffs.to_vec();
        self.inverse_in_place(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }

    pub fn inverse_in_place(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.len());
        self.transform(buf, &self.inverse);
    }

    fn transform(&self, buf: &mut [Complex<T>], plan: &Arc<dyn Fft<T>>) {
        let n = self.grid.n;
        let dim = self.grid.dim;
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); plan.get_inplace_scratch_len()];
        // Last axis is contiguous: one batched call.
        plan.process_with_scratch(buf, &mut scratch);
        if dim == 1 {
            return;
        }
        let mut line = vec![Complex::new(T::zero(), T::zero()); n];
        for axis in 0..dim - 1 {
            let stride = n.pow((dim - 1 - axis) as u32);
            let block = stride * n;
            for base in (0..buf.len()).step_by(block) {
                for offset in 0..stride {
                    let start = base + offset;
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = buf[start + j * stride];
                    }
                    plan.process_with_scratch(&mut line, &mut scratch);
                    for (j, value) in line.iter().enumerate() {
                        buf[start + j * stride] = *value;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(4, 16).is_err());
        assert!(Grid::new(2, 7).is_err());
        assert!(Grid::new(2, 6).is_err());
        assert!(Grid::with_box(2, 16, 1.0, 0.0).is_err());
        assert!(Grid::with_box(2, 16, -1.0, 0.5).is_err());
        assert!(Grid::new(3, 8).is_ok());
    }

    #[test]
    fn mode_index_round_trip() {
        let grid = Grid::new(3, 8).unwrap();
        for idx in 0..grid.len() {
            let m = grid.mode(idx);
            assert_eq!(grid.mode_index(&m), Some(idx));
        }
        assert_eq!(grid.mode_index(&[4, 0, 0]), None);
    }

    #[test]
    fn forward_of_single_exponential() {
        let grid = Grid::new(2, 8).unwrap();
        let domain = Domain::<f64>::new(grid).unwrap();
        let values: Vec<f64> = (0..grid.len())
            .map(|i| {
                let x = grid.point(i);
                (2.0 * x[0] - x[1]).cos()
            })
            .collect();
        let coeffs = domain.forward(&values);
        for (idx, c) in coeffs.iter().enumerate() {
            let m = grid.mode(idx);
            let expected = if (m[0] == 2 && m[1] == -1) || (m[0] == -2 && m[1] == 1) {
                0.5
            } else {
                0.0
            };
            assert!((c.re - expected).abs() < 1e-14 && c.im.abs() < 1e-14, "{m:?} {c}");
        }
    }
}
