//! Scalar and vector fields on a periodic grid with a lazily synchronized
//! physical/spectral pair of representations.

use std::sync::{Arc, OnceLock};

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::grid::{Domain, Grid};
use crate::scalar::Real;

/// Real scalar field. Immutable once built; whichever representation is
/// missing is computed on first access.
#[derive(Clone)]
pub struct ScalarField<T: Real> {
    domain: Arc<Domain<T>>,
    values: OnceLock<Vec<T>>,
    spectral: OnceLock<Vec<Complex<T>>>,
}

impl<T: Real> std::fmt::Debug for ScalarField<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarField")
            .field("grid", self.domain.grid())
            .finish_non_exhaustive()
    }
}

fn check_len<T: Real>(domain: &Domain<T>, len: usize) -> Result<()> {
    if len != domain.len() {
        return Err(Error::GridMismatch(format!(
            "expected {} samples for grid {}, got {len}",
            domain.len(),
            domain.grid()
        )));
    }
    Ok(())
}

impl<T: Real> ScalarField<T> {
    pub fn from_values(domain: &Arc<Domain<T>>, values: Vec<T>) -> Result<Self> {
        check_len(domain, values.len())?;
        Ok(Self::from_values_unchecked(domain, values))
    }

    pub(crate) fn from_values_unchecked(domain: &Arc<Domain<T>>, values: Vec<T>) -> Self {
        let cell = OnceLock::new();
        let _ = cell.set(values);
        ScalarField {
            domain: Arc::clone(domain),
            values: cell,
            spectral: OnceLock::new(),
        }
    }

    /// Builds a field from Fourier-series coefficients. The caller is
    /// responsible for Hermitian symmetry; the physical samples keep only
    /// the real part.
    pub fn from_spectral(domain: &Arc<Domain<T>>, coeffs: Vec<Complex<T>>) -> Result<Self> {
        check_len(domain, coeffs.len())?;
        Ok(Self::from_spectral_unchecked(domain, coeffs))
    }

    pub(crate) fn from_spectral_unchecked(domain: &Arc<Domain<T>>, coeffs: Vec<Complex<T>>) -> Self {
        let cell = OnceLock::new();
        let _ = cell.set(coeffs);
        ScalarField {
            domain: Arc::clone(domain),
            values: OnceLock::new(),
            spectral: cell,
        }
    }

    /// Samples `f` at the grid points.
    pub fn from_fn(domain: &Arc<Domain<T>>, f: impl Fn(&[f64]) -> f64) -> Self {
        let grid = *domain.grid();
        let values = (0..grid.len())
            .map(|idx| T::lit(f(&grid.point(idx)[..grid.dim])))
            .collect();
        Self::from_values_unchecked(domain, values)
    }

    pub fn zeros(domain: &Arc<Domain<T>>) -> Self {
        Self::from_values_unchecked(domain, vec![T::zero(); domain.len()])
    }

    pub fn constant(domain: &Arc<Domain<T>>, c: T) -> Self {
        Self::from_values_unchecked(domain, vec![c; domain.len()])
    }

    /// Field with a single real Fourier pair `amplitude * cos(k.x)`.
    pub fn cosine_mode(domain: &Arc<Domain<T>>, mode: &[i64], amplitude: f64) -> Self {
        let unit = domain.grid().wavenumber_unit();
        let dim = domain.dim();
        Self::from_fn(domain, |x| {
            let phase: f64 = (0..dim).map(|a| unit * mode[a] as f64 * x[a]).sum();
            amplitude * phase.cos()
        })
    }

    pub fn domain(&self) -> &Arc<Domain<T>> {
        &self.domain
    }

    pub fn grid(&self) -> &Grid {
        self.domain.grid()
    }

    pub fn values(&self) -> &[T] {
        self.values.get_or_init(|| {
            let coeffs = self
                .spectral
                .get()
                .expect("field holds at least one representation");
            self.domain.inverse(coeffs)
        })
    }

    pub fn spectral(&self) -> &[Complex<T>] {
        self.spectral.get_or_init(|| {
            let values = self
                .values
                .get()
                .expect("field holds at least one representation");
            self.domain.forward(values)
        })
    }

    pub fn into_values(self) -> Vec<T> {
        self.values();
        self.values.into_inner().expect("initialized above")
    }

    pub fn same_grid(&self, other: &Self) -> Result<()> {
        if self.grid() != other.grid() {
            return Err(Error::GridMismatch(format!("{} vs {}", self.grid(), other.grid())));
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        if let Some(pos) = self.values().iter().position(|v| !v.is_finite()) {
            return Err(Error::RejectedInput(format!("non-finite sample at index {pos}")));
        }
        Ok(())
    }

    /// Quadrature `L^p` norm; `p = f64::INFINITY` gives the grid maximum.
    pub fn lp_norm(&self, p: f64) -> Result<T> {
        if !(p >= 1.0) {
            return Err(Error::InvalidParameter(format!("L^p exponent {p} must be >= 1")));
        }
        self.ensure_finite()?;
        let values = self.values();
        if p.is_infinite() {
            return Ok(values.iter().fold(T::zero(), |m, v| m.max(v.abs())));
        }
        let cell = T::lit(self.grid().cell_volume());
        if p == 2.0 {
            let sum: T = values.iter().map(|&v| v * v).sum();
            return Ok((sum * cell).sqrt());
        }
        let pt = T::lit(p);
        let sum: T = values.iter().map(|v| v.abs().powf(pt)).sum();
        Ok((sum * cell).powf(T::one() / pt))
    }

    pub fn l2_norm(&self) -> T {
        let cell = T::lit(self.grid().cell_volume());
        let sum: T = self.values().iter().map(|&v| v * v).sum();
        (sum * cell).sqrt()
    }

    /// `( sum_xi <xi>^{2s} |f^(xi)|^2 )^{1/2}` with `f^` normalized so
    /// that Parseval holds against the quadrature `L^2` norm.
    pub fn sobolev_norm(&self, s: f64) -> Result<T> {
        if !s.is_finite() {
            return Err(Error::InvalidParameter(format!("Sobolev order {s} is not finite")));
        }
        self.ensure_finite()?;
        Ok(self.sobolev_norm_unchecked(s))
    }

    pub(crate) fn sobolev_norm_unchecked(&self, s: f64) -> T {
        let coeffs = self.spectral();
        let volume = T::lit(self.grid().volume());
        let st = T::lit(s);
        let sum: T = coeffs
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let weight = (T::one() + self.domain.wavenumber_sq(idx)).powf(st);
                weight * c.norm_sqr()
            })
            .sum();
        (sum * volume).sqrt()
    }

    /// Spectral gradient `i xi_j f^`; Nyquist planes are dropped for odd
    /// derivatives.
    pub fn gradient(&self) -> VectorField<T> {
        let coeffs = self.spectral();
        let dim = self.domain.dim();
        let components = (0..dim)
            .map(|axis| {
                let out: Vec<Complex<T>> = coeffs
                    .iter()
                    .enumerate()
                    .map(|(idx, &c)| {
                        if self.domain.is_nyquist(idx, axis) {
                            Complex::new(T::zero(), T::zero())
                        } else {
                            c * Complex::new(T::zero(), self.domain.wavevector(idx)[axis])
                        }
                    })
                    .collect();
                Self::from_spectral_unchecked(&self.domain, out)
            })
            .collect();
        VectorField { components }
    }

    pub fn laplacian(&self) -> Self {
        let out = self
            .spectral()
            .iter()
            .enumerate()
            .map(|(idx, &c)| c * (-self.domain.wavenumber_sq(idx)))
            .collect();
        Self::from_spectral_unchecked(&self.domain, out)
    }

    /// Zeroes every coefficient with some `|m_j|` above the dealias cutoff.
    pub fn dealias(&self) -> Self {
        let out = self
            .spectral()
            .iter()
            .enumerate()
            .map(|(idx, &c)| {
                if self.domain.is_retained(idx) {
                    c
                } else {
                    Complex::new(T::zero(), T::zero())
                }
            })
            .collect();
        Self::from_spectral_unchecked(&self.domain, out)
    }

    /// Per-mode energies `|f^(xi)|^2`; they sum to `||f||_{L^2}^2`.
    pub fn fourier_energy_profile(&self) -> ModeMap<T> {
        let volume = T::lit(self.grid().volume());
        let values = self.spectral().iter().map(|c| c.norm_sqr() * volume).collect();
        ModeMap {
            domain: Arc::clone(&self.domain),
            values,
        }
    }

    /// Quadrature inner product `<f, g>`.
    pub fn inner(&self, other: &Self) -> T {
        let cell = T::lit(self.grid().cell_volume());
        let sum: T = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&a, &b)| a * b)
            .sum();
        sum * cell
    }

    pub fn integral(&self) -> T {
        let cell = T::lit(self.grid().cell_volume());
        self.values().iter().copied().sum::<T>() * cell
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_values_unchecked(&self.domain, self.values().iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, a: T) -> Self {
        self.map(|v| v * a)
    }

    /// `a * self + b * other`.
    pub fn axpby(&self, a: T, other: &Self, b: T) -> Self {
        let values = self
            .values()
            .iter()
            .zip(other.values())
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Self::from_values_unchecked(&self.domain, values)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpby(T::one(), other, -T::one())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.values()
            .iter()
            .zip(other.values())
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Exact trigonometric interpolation at an arbitrary point.
    pub fn evaluate(&self, point: &[f64]) -> T {
        let grid = self.grid();
        let unit = grid.wavenumber_unit();
        let mut acc = 0.0;
        for (idx, c) in self.spectral().iter().enumerate() {
            let m = grid.mode(idx);
            let phase: f64 = (0..grid.dim).map(|a| unit * m[a] as f64 * point[a]).sum();
            acc += c.re.as_f64() * phase.cos() - c.im.as_f64() * phase.sin();
        }
        T::lit(acc)
    }
}

/// A `d`-component vector field; every component lives on the same grid.
#[derive(Clone, Debug)]
pub struct VectorField<T: Real> {
    components: Vec<ScalarField<T>>,
}

impl<T: Real> VectorField<T> {
    pub fn new(components: Vec<ScalarField<T>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidParameter("vector field needs components".into()))?;
        if components.len() != first.grid().dim {
            return Err(Error::GridMismatch(format!(
                "{} components for a {}-dimensional grid",
                components.len(),
                first.grid().dim
            )));
        }
        for c in &components[1..] {
            first.same_grid(c)?;
        }
        Ok(VectorField { components })
    }

    pub fn zeros(domain: &Arc<Domain<T>>) -> Self {
        VectorField {
            components: (0..domain.dim()).map(|_| ScalarField::zeros(domain)).collect(),
        }
    }

    pub fn from_fn(domain: &Arc<Domain<T>>, f: impl Fn(&[f64]) -> [f64; 3]) -> Self {
        let grid = *domain.grid();
        let samples: Vec<[f64; 3]> = (0..grid.len()).map(|i| f(&grid.point(i)[..grid.dim])).collect();
        let components = (0..grid.dim)
            .map(|axis| {
                ScalarField::from_values_unchecked(
                    domain,
                    samples.iter().map(|s| T::lit(s[axis])).collect(),
                )
            })
            .collect();
        VectorField { components }
    }

    pub fn components(&self) -> &[ScalarField<T>] {
        &self.components
    }

    pub fn component(&self, axis: usize) -> &ScalarField<T> {
        &self.components[axis]
    }

    pub fn domain(&self) -> &Arc<Domain<T>> {
        self.components[0].domain()
    }

    pub fn grid(&self) -> &Grid {
        self.components[0].grid()
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn same_grid(&self, other: &Self) -> Result<()> {
        self.components[0].same_grid(&other.components[0])
    }

    pub fn divergence(&self) -> ScalarField<T> {
        let domain = self.domain();
        let mut out = vec![Complex::new(T::zero(), T::zero()); domain.len()];
        for (axis, comp) in self.components.iter().enumerate() {
            for (idx, &c) in comp.spectral().iter().enumerate() {
                if !domain.is_nyquist(idx, axis) {
                    out[idx] = out[idx] + c * Complex::new(T::zero(), domain.wavevector(idx)[axis]);
                }
            }
        }
        ScalarField::from_spectral_unchecked(domain, out)
    }

    /// `max_xi |xi . u^(xi)|` in Parseval-normalized units.
    pub fn max_spectral_divergence(&self) -> T {
        let domain = self.domain();
        let scale = T::lit(domain.grid().volume().sqrt());
        (0..domain.len())
            .map(|idx| {
                let xi = domain.wavevector(idx);
                let mut acc = Complex::new(T::zero(), T::zero());
                for (axis, comp) in self.components.iter().enumerate() {
                    if !domain.is_nyquist(idx, axis) {
                        acc = acc + comp.spectral()[idx] * xi[axis];
                    }
                }
                acc.norm() * scale
            })
            .fold(T::zero(), T::max)
    }

    /// Divergence relative to `max_xi |xi| |u^(xi)|`; zero for a zero field.
    pub fn relative_divergence(&self) -> T {
        let domain = self.domain();
        let scale = T::lit(domain.grid().volume().sqrt());
        let reference = (0..domain.len())
            .map(|idx| {
                let amp: T = self
                    .components
                    .iter()
                    .map(|c| c.spectral()[idx].norm_sqr())
                    .sum::<T>()
                    .sqrt();
                amp * domain.wavenumber_sq(idx).sqrt() * scale
            })
            .fold(T::zero(), T::max);
        if reference == T::zero() {
            return T::zero();
        }
        self.max_spectral_divergence() / reference
    }

    pub fn l2_norm(&self) -> T {
        self.components
            .iter()
            .map(|c| {
                let n = c.l2_norm();
                n * n
            })
            .sum::<T>()
            .sqrt()
    }

    /// `max_x |u(x)|`.
    pub fn max_magnitude(&self) -> T {
        let len = self.domain().len();
        (0..len)
            .map(|i| {
                self.components
                    .iter()
                    .map(|c| c.values()[i] * c.values()[i])
                    .sum::<T>()
                    .sqrt()
            })
            .fold(T::zero(), T::max)
    }

    pub fn sobolev_norm(&self, s: f64) -> Result<T> {
        let mut sum = T::zero();
        for c in &self.components {
            let n = c.sobolev_norm(s)?;
            sum = sum + n * n;
        }
        Ok(sum.sqrt())
    }

    pub fn map_components(&self, f: impl Fn(&ScalarField<T>) -> ScalarField<T>) -> Self {
        VectorField {
            components: self.components.iter().map(f).collect(),
        }
    }

    pub fn scale(&self, a: T) -> Self {
        self.map_components(|c| c.scale(a))
    }

    pub fn axpby(&self, a: T, other: &Self, b: T) -> Self {
        VectorField {
            components: self
                .components
                .iter()
                .zip(&other.components)
                .map(|(x, y)| x.axpby(a, y, b))
                .collect(),
        }
    }

    pub fn dealias(&self) -> Self {
        self.map_components(ScalarField::dealias)
    }

    /// Pointwise `u . grad f`, computed pseudo-spectrally.
    pub fn advect(&self, f: &ScalarField<T>) -> ScalarField<T> {
        let grad = f.gradient();
        let len = self.domain().len();
        let mut out = vec![T::zero(); len];
        for (u, g) in self.components.iter().zip(grad.components()) {
            for ((o, &a), &b) in out.iter_mut().zip(u.values()).zip(g.values()) {
                *o = *o + a * b;
            }
        }
        ScalarField::from_values_unchecked(self.domain(), out)
    }
}

/// A real value attached to every spectral mode of a domain.
#[derive(Clone, Debug)]
pub struct ModeMap<T: Real> {
    domain: Arc<Domain<T>>,
    values: Vec<T>,
}

impl<T: Real> ModeMap<T> {
    pub fn new(domain: &Arc<Domain<T>>, values: Vec<T>) -> Result<Self> {
        check_len(domain, values.len())?;
        Ok(ModeMap {
            domain: Arc::clone(domain),
            values,
        })
    }

    pub fn from_fn(domain: &Arc<Domain<T>>, f: impl Fn(&[i64], &[T]) -> T) -> Self {
        let dim = domain.dim();
        let values = (0..domain.len())
            .map(|idx| f(&domain.mode(idx)[..dim], &domain.wavevector(idx)[..dim]))
            .collect();
        ModeMap {
            domain: Arc::clone(domain),
            values,
        }
    }

    pub fn zeros(domain: &Arc<Domain<T>>) -> Self {
        ModeMap {
            domain: Arc::clone(domain),
            values: vec![T::zero(); domain.len()],
        }
    }

    pub fn domain(&self) -> &Arc<Domain<T>> {
        &self.domain
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn get(&self, mode: &[i64]) -> Option<T> {
        self.domain.grid().mode_index(mode).map(|i| self.values[i])
    }

    pub fn total(&self) -> T {
        self.values.iter().copied().sum()
    }

    /// `sum_xi a(xi) psi(xi)`.
    pub fn pair(&self, other: &Self) -> T {
        self.values.iter().zip(&other.values).map(|(&a, &b)| a * b).sum()
    }

    /// Running ensemble accumulation: `self += other`.
    pub fn accumulate(&mut self, other: &Self) {
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        ModeMap {
            domain: Arc::clone(&self.domain),
            values: self.values.iter().map(|&v| v * s).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn domain(dim: usize, n: usize) -> Arc<Domain<f64>> {
        Domain::new(Grid::new(dim, n).unwrap()).unwrap()
    }

    #[test]
    fn zero_field_norms() {
        let d = domain(2, 16);
        let f = ScalarField::zeros(&d);
        assert_eq!(f.lp_norm(2.0).unwrap(), 0.0);
        assert_eq!(f.lp_norm(f64::INFINITY).unwrap(), 0.0);
        assert_eq!(f.sobolev_norm(1.3).unwrap(), 0.0);
        assert!(f.fourier_energy_profile().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_field_l2_is_box_side() {
        let d = domain(2, 16);
        let f = ScalarField::constant(&d, 1.0);
        assert!((f.lp_norm(2.0).unwrap() - 2.0 * PI).abs() < 1e-12);
        let grad = f.gradient();
        for c in grad.components() {
            assert!(c.values().iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn sine_l2_matches_fine_quadrature() {
        // Oracle: midpoint rule on a 4000x4000 sampling of sin^2.
        let m = 4000;
        let h = 2.0 * PI / m as f64;
        let line: f64 = (0..m).map(|i| ((i as f64 + 0.5) * h).sin().powi(2) * h).sum();
        let oracle = (line * 2.0 * PI).sqrt();
        assert!((oracle - (2.0 * PI * PI).sqrt()).abs() < 1e-9);

        let d = domain(2, 32);
        let f = ScalarField::from_fn(&d, |x| x[0].sin());
        let got = f.lp_norm(2.0).unwrap();
        assert!((got - 4.442882938158366).abs() < 1e-12, "{got}");
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn non_finite_rejected() {
        let d = domain(1, 8);
        let mut v = vec![0.0; 8];
        v[3] = f64::NAN;
        let f = ScalarField::from_values(&d, v).unwrap();
        assert!(matches!(f.lp_norm(2.0), Err(Error::RejectedInput(_))));
        assert!(matches!(f.sobolev_norm(0.0), Err(Error::RejectedInput(_))));
        assert!(f.lp_norm(0.5).is_err());
    }

    #[test]
    fn sobolev_single_unit_mode() {
        let d = domain(2, 16);
        let mut coeffs = vec![Complex::new(0.0, 0.0); d.len()];
        // unit spectral mass: |f^|^2 = |c|^2 L^d = 1 at one mode
        let idx = d.grid().mode_index(&[1, 0]).unwrap();
        coeffs[idx] = Complex::new(1.0 / d.grid().volume().sqrt(), 0.0);
        let f = ScalarField::from_spectral(&d, coeffs).unwrap();
        assert!((f.sobolev_norm(1.0).unwrap() - 2f64.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn sobolev_ratio_for_sine() {
        // Lattice-sum oracle: sin(x1) puts pi^2 at each of +-e1.
        let oracle = |s: f64| (2.0 * 2f64.powf(s) * PI * PI).sqrt();
        let d = domain(2, 16);
        let f = ScalarField::from_fn(&d, |x| x[0].sin());
        let a = f.sobolev_norm(-0.5).unwrap();
        let b = f.sobolev_norm(0.0).unwrap();
        assert!((a - oracle(-0.5)).abs() < 1e-12);
        assert!((b - oracle(0.0)).abs() < 1e-12);
        assert!((a / b - 2f64.powf(-0.25)).abs() < 1e-13);
        assert!(((a / b).powi(2) - 2f64.powf(-0.5)).abs() < 1e-13);
    }

    #[test]
    fn gradient_of_sine() {
        let d = domain(2, 16);
        let f = ScalarField::from_fn(&d, |x| x[0].sin());
        let g = f.gradient();
        let expected = ScalarField::from_fn(&d, |x| x[0].cos());
        assert!(g.component(0).max_abs_diff(&expected) < 1e-13);
        assert!(g.component(1).values().iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn gradient_parseval() {
        let d = domain(2, 16);
        let f = ScalarField::from_fn(&d, |x| (2.0 * x[0] + x[1]).sin() + 0.3 * (x[1] * 3.0).cos());
        let g = f.gradient();
        let quad = g.components().iter().map(|c| c.l2_norm().powi(2)).sum::<f64>();
        let spectral: f64 = f
            .fourier_energy_profile()
            .values()
            .iter()
            .enumerate()
            .map(|(i, a)| d.wavenumber_sq(i) * a)
            .sum();
        assert!((quad - spectral).abs() < 1e-10 * spectral);
    }

    #[test]
    fn dealias_keeps_band_limited_field() {
        let d = domain(2, 16);
        let f = ScalarField::from_fn(&d, |x| x[0].sin() * (2.0 * x[1]).cos());
        assert!(f.dealias().max_abs_diff(&f) < 1e-13);
        let rough = ScalarField::from_fn(&d, |x| (7.0 * x[0]).sin());
        assert!(rough.dealias().l2_norm() < 1e-12);
    }

    #[test]
    fn sine_profile_split_between_two_modes() {
        let d = domain(2, 16);
        let f = ScalarField::from_fn(&d, |x| x[0].sin());
        let p = f.fourier_energy_profile();
        let a = p.get(&[1, 0]).unwrap();
        let b = p.get(&[-1, 0]).unwrap();
        assert!((a - PI * PI).abs() < 1e-12 && (a - b).abs() < 1e-12);
        assert!((p.total() - a - b).abs() < 1e-12);
    }

    #[test]
    fn evaluate_matches_samples_and_shifts() {
        let d = domain(2, 16);
        let f = ScalarField::from_fn(&d, |x| x[0].sin() + (x[1] * 2.0).cos());
        let p = [0.3, 1.7];
        assert!((f.evaluate(&p) - (0.3f64.sin() + 3.4f64.cos())).abs() < 1e-12);
    }

    #[test]
    fn three_dimensional_round_trip() {
        let d = domain(3, 8);
        let f = ScalarField::from_fn(&d, |x| (x[0] + 2.0 * x[2]).sin() * x[1].cos());
        let back = ScalarField::from_spectral(&d, f.spectral().to_vec()).unwrap();
        assert!(back.max_abs_diff(&f) < 1e-13);
    }
}
