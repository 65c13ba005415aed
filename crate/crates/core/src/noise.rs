//! Kraichnan transport noise on the torus.
//!
//! The noise is `W_t(x) = sum_j sigma_j(x) W^j_t` with real modes
//! `sigma_j = theta_k e_k cos(k.x)` or `theta_k e_k sin(k.x)`, one pair per
//! lattice vector `0 < |m| <= K` and per unit polarization `e_k` orthogonal to
//! `k`. Amplitudes follow `theta_k^2 = Z_K <k>^{-(d + 2 alpha)}` and `Z_K` is
//! fixed so that `Q_K(0) = sum_j sigma_j(x) (x) sigma_j(x) = 2 I_d` holds
//! exactly for the truncated sum.

use std::sync::Arc;

use num_complex::Complex;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::Domain;
use crate::scalar::Real;

pub type Matrix<T> = [[T; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dim: usize,
    pub alpha: f64,
    /// Integer mode cutoff `K`.
    pub cutoff: usize,
    pub length: f64,
}

impl NoiseSpec {
    pub fn new(dim: usize, alpha: f64, cutoff: usize) -> Result<Self> {
        let spec = NoiseSpec {
            dim,
            alpha,
            cutoff,
            length: 2.0 * std::f64::consts::PI,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(invalid(format!("alpha = {} must lie in (0, 1/2)", self.alpha)));
        }
        if self.cutoff < 1 {
            return Err(invalid("mode cutoff K must be >= 1"));
        }
        if !(2..=3).contains(&self.dim) {
            return Err(invalid(format!(
                "no divergence-free transport noise in dimension {}",
                self.dim
            )));
        }
        if !(self.length > 0.0) {
            return Err(invalid("box length must be positive"));
        }
        Ok(())
    }

    /// Cameron–Martin Sobolev order `d/2 + alpha`.
    pub fn cameron_martin_order(&self) -> f64 {
        self.dim as f64 / 2.0 + self.alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Cos,
    Sin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseMode<T> {
    /// Integer lattice vector `m`; the wavevector is `(2 pi / L) m`.
    pub lattice: [i64; 3],
    pub wavevector: [T; 3],
    pub polarization: [T; 3],
    pub amplitude: T,
    pub phase: Phase,
}

/// Finite Kraichnan basis. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct NoiseBasis<T: Real> {
    spec: NoiseSpec,
    modes: Vec<NoiseMode<T>>,
    normalization: T,
}

fn bracket(k_sq: f64) -> f64 {
    (1.0 + k_sq).sqrt()
}

fn polarizations(dim: usize, k: [f64; 3]) -> Vec<[f64; 3]> {
    let norm = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    let unit = [k[0] / norm, k[1] / norm, k[2] / norm];
    if dim == 2 {
        return vec![[-unit[1], unit[0], 0.0]];
    }
    // Gram–Schmidt against the first coordinate axis not parallel to k.
    let axis = (0..3)
        .find(|&a| unit[a].abs() < 1.0 - 1e-12)
        .expect("some axis is not parallel to k");
    let mut e1 = [0.0; 3];
    e1[axis] = 1.0;
    let dot = unit[axis];
    for i in 0..3 {
        e1[i] -= dot * unit[i];
    }
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    for v in e1.iter_mut() {
        *v /= n1;
    }
    let e2 = [
        unit[1] * e1[2] - unit[2] * e1[1],
        unit[2] * e1[0] - unit[0] * e1[2],
        unit[0] * e1[1] - unit[1] * e1[0],
    ];
    vec![e1, e2]
}

impl<T: Real> NoiseBasis<T> {
    /// Builds the truncated basis and its normalization `Z_K`.
    pub fn build(spec: NoiseSpec) -> Result<Self> {
        spec.validate()?;
        let dim = spec.dim;
        let kmax = spec.cutoff as i64;
        let unit = 2.0 * std::f64::consts::PI / spec.length;
        let exponent = dim as f64 + 2.0 * spec.alpha;

        let mut lattice = Vec::new();
        let range = |active: bool| if active { -kmax..=kmax } else { 0..=0 };
        for a in range(true) {
            for b in range(dim >= 2) {
                for c in range(dim >= 3) {
                    let norm_sq = a * a + b * b + c * c;
                    if norm_sq > 0 && norm_sq <= kmax * kmax {
                        lattice.push([a, b, c]);
                    }
                }
            }
        }

        // Unnormalized Q(0): sum over lattice vectors and polarizations.
        let mut q0 = [[0.0f64; 3]; 3];
        let mut raw = Vec::new();
        for m in &lattice {
            let k = [unit * m[0] as f64, unit * m[1] as f64, unit * m[2] as f64];
            let k_sq = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
            let weight = bracket(k_sq).powf(-exponent);
            for e in polarizations(dim, k) {
                for i in 0..3 {
                    for j in 0..3 {
                        q0[i][j] += weight * e[i] * e[j];
                    }
                }
                raw.push((*m, k, e, weight));
            }
        }
        let trace: f64 = (0..dim).map(|i| q0[i][i]).sum();
        let normalization = 2.0 * dim as f64 / trace;

        let mut modes = Vec::with_capacity(2 * raw.len());
        for (m, k, e, weight) in raw {
            let amplitude = T::lit((normalization * weight).sqrt());
            for phase in [Phase::Cos, Phase::Sin] {
                modes.push(NoiseMode {
                    lattice: m,
                    wavevector: k.map(T::lit),
                    polarization: e.map(T::lit),
                    amplitude,
                    phase,
                });
            }
        }
        Ok(NoiseBasis {
            spec,
            modes,
            normalization: T::lit(normalization),
        })
    }

    pub fn spec(&self) -> &NoiseSpec {
        &self.spec
    }

    pub fn modes(&self) -> &[NoiseMode<T>] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    /// `Z_K`.
    pub fn normalization(&self) -> T {
        self.normalization
    }

    /// `Q(z) = sum_modes sigma(x) (x) sigma(x + z)` (independent of `x`).
    pub fn covariance_eval(&self, z: &[T]) -> Matrix<T> {
        let dim = self.spec.dim;
        let mut q = [[T::zero(); 3]; 3];
        for mode in self.modes.iter().filter(|m| m.phase == Phase::Cos) {
            let phase = (0..dim).fold(T::zero(), |acc, a| acc + mode.wavevector[a] * z[a]);
            let w = mode.amplitude * mode.amplitude * phase.cos();
            for i in 0..dim {
                for j in 0..dim {
                    q[i][j] = q[i][j] + w * mode.polarization[i] * mode.polarization[j];
                }
            }
        }
        q
    }

    /// Largest `|k . e_k|` over the basis.
    pub fn max_transversality_defect(&self) -> T {
        self.modes
            .iter()
            .map(|m| {
                (0..3)
                    .fold(T::zero(), |acc, a| acc + m.wavevector[a] * m.polarization[a])
                    .abs()
            })
            .fold(T::zero(), T::max)
    }

    /// Checks that every mode is representable without touching the
    /// Nyquist plane of `domain`.
    pub fn check_resolution(&self, domain: &Domain<T>) -> Result<()> {
        let grid = domain.grid();
        if grid.dim != self.spec.dim {
            return Err(Error::GridMismatch(format!(
                "noise in dimension {} on a {}-dimensional grid",
                self.spec.dim, grid.dim
            )));
        }
        if (grid.length - self.spec.length).abs() > 1e-12 * grid.length {
            return Err(Error::GridMismatch(format!(
                "noise box {} differs from grid box {}",
                self.spec.length, grid.length
            )));
        }
        if self.spec.cutoff >= grid.n / 2 {
            return Err(invalid(format!(
                "noise cutoff K = {} reaches the grid Nyquist mode N/2 = {}",
                self.spec.cutoff,
                grid.n / 2
            )));
        }
        Ok(())
    }

    /// Precomputes the spectral slots each mode writes to on `domain`.
    pub fn layout(&self, domain: &Domain<T>) -> Result<SpectralLayout> {
        self.check_resolution(domain)?;
        let grid = domain.grid();
        let slots = self
            .modes
            .iter()
            .map(|m| {
                let neg = [-m.lattice[0], -m.lattice[1], -m.lattice[2]];
                let plus = grid.mode_index(&m.lattice).expect("checked resolution");
                let minus = grid.mode_index(&neg).expect("checked resolution");
                (plus, minus)
            })
            .collect();
        Ok(SpectralLayout { slots })
    }

    /// Adds `sum_j c_j sigma_j` to per-component spectral buffers.
    pub fn accumulate_spectral(
        &self,
        layout: &SpectralLayout,
        coefficients: &[T],
        out: &mut [Vec<Complex<T>>],
    ) {
        let half = T::lit(0.5);
        for ((mode, &(plus, minus)), &c) in self.modes.iter().zip(&layout.slots).zip(coefficients) {
            if c == T::zero() {
                continue;
            }
            let a = c * mode.amplitude * half;
            // cos -> (a, a); sin -> (-i a, +i a)
            let (cp, cm) = match mode.phase {
                Phase::Cos => (Complex::new(a, T::zero()), Complex::new(a, T::zero())),
                Phase::Sin => (Complex::new(T::zero(), -a), Complex::new(T::zero(), a)),
            };
            for (axis, buf) in out.iter_mut().enumerate() {
                let e = mode.polarization[axis];
                buf[plus] = buf[plus] + cp * e;
                buf[minus] = buf[minus] + cm * e;
            }
        }
    }

    /// The field `sum_j c_j sigma_j` on `domain`.
    pub fn assemble(&self, domain: &Arc<Domain<T>>, coefficients: &[T]) -> Result<VectorField<T>> {
        if coefficients.len() != self.len() {
            return Err(invalid(format!(
                "{} coefficients for {} modes",
                coefficients.len(),
                self.len()
            )));
        }
        let layout = self.layout(domain)?;
        let mut bufs = vec![vec![Complex::new(T::zero(), T::zero()); domain.len()]; self.dim()];
        self.accumulate_spectral(&layout, coefficients, &mut bufs);
        VectorField::new(
            bufs.into_iter()
                .map(|b| ScalarField::from_spectral_unchecked(domain, b))
                .collect(),
        )
    }

    /// One mode as a vector field.
    pub fn mode_field(&self, domain: &Arc<Domain<T>>, j: usize) -> Result<VectorField<T>> {
        let mut c = vec![T::zero(); self.len()];
        c[j] = T::one();
        self.assemble(domain, &c)
    }

    /// Exact pointwise value of `sum_j c_j sigma_j(x)`.
    pub fn evaluate_at(&self, coefficients: &[T], point: &[T], table: &mut PhaseTable<T>) -> [T; 3] {
        table.fill(point, self.spec.cutoff, self.spec.dim, T::lit(2.0 * std::f64::consts::PI / self.spec.length));
        let mut out = [T::zero(); 3];
        for (mode, &c) in self.modes.iter().zip(coefficients) {
            if c == T::zero() {
                continue;
            }
            let e = table.exp(&mode.lattice, self.spec.dim);
            let s = match mode.phase {
                Phase::Cos => e.re,
                Phase::Sin => e.im,
            } * c
                * mode.amplitude;
            for (axis, o) in out.iter_mut().enumerate().take(self.spec.dim) {
                *o = *o + s * mode.polarization[axis];
            }
        }
        out
    }

    /// Mode coefficients of the minimal-norm representation of a field in
    /// the span of the basis. Each distinct function appears twice (at `m`
    /// and `-m`) and the weight is split evenly between the two copies.
    pub fn project(&self, domain: &Arc<Domain<T>>, g: &VectorField<T>) -> Result<Vec<T>> {
        let layout = self.layout(domain)?;
        let half = T::lit(0.5);
        Ok(self
            .modes
            .iter()
            .zip(&layout.slots)
            .map(|(mode, &(plus, _))| {
                // <g, sigma> / ||sigma||^2 with ||sigma||^2 = theta^2 L^d / 2
                let mut proj = Complex::new(T::zero(), T::zero());
                for axis in 0..self.dim() {
                    proj = proj + g.component(axis).spectral()[plus] * mode.polarization[axis];
                }
                let full = match mode.phase {
                    Phase::Cos => proj.re * T::lit(2.0),
                    Phase::Sin => -proj.im * T::lit(2.0),
                } / mode.amplitude;
                full * half
            })
            .collect())
    }

    /// Ratio `||g||^2_{H_0} / ||g||^2_{H^{d/2+alpha}}` for fields in the
    /// span of the basis: `1 / (Z_K L^d)`.
    pub fn cameron_martin_scale(&self) -> T {
        T::one() / (self.normalization * T::lit(self.spec.length.powi(self.spec.dim as i32)))
    }

    pub fn manifest(&self) -> BasisManifest {
        BasisManifest {
            d: self.spec.dim,
            alpha: self.spec.alpha,
            k: self.spec.cutoff,
            l: self.spec.length,
            z_k: self.normalization.as_f64(),
            modes: self
                .modes
                .iter()
                .map(|m| ManifestMode {
                    lattice: m.lattice[..self.spec.dim].to_vec(),
                    polarization: m.polarization[..self.spec.dim].iter().map(|v| v.as_f64()).collect(),
                    amplitude: m.amplitude.as_f64(),
                    phase: m.phase,
                })
                .collect(),
        }
    }
}

/// Spectral indices `(m, -m)` for every basis mode on a particular domain.
#[derive(Debug, Clone)]
pub struct SpectralLayout {
    slots: Vec<(usize, usize)>,
}

/// Scratch table of `exp(i m unit x_a)` for `|m| <= K`, per axis.
#[derive(Debug, Clone, Default)]
pub struct PhaseTable<T> {
    cutoff: usize,
    table: Vec<Complex<T>>,
}

impl<T: Real> PhaseTable<T> {
    pub fn new() -> Self {
        PhaseTable {
            cutoff: 0,
            table: Vec::new(),
        }
    }

    fn fill(&mut self, point: &[T], cutoff: usize, dim: usize, unit: T) {
        let width = 2 * cutoff + 1;
        self.cutoff = cutoff;
        self.table.resize(3 * width, Complex::new(T::one(), T::zero()));
        for axis in 0..dim {
            let base = Complex::new((unit * point[axis]).cos(), (unit * point[axis]).sin());
            let row = &mut self.table[axis * width..(axis + 1) * width];
            row[cutoff] = Complex::new(T::one(), T::zero());
            for m in 1..=cutoff {
                let next = row[cutoff + m - 1] * base;
                row[cutoff + m] = next;
                row[cutoff - m] = next.conj();
            }
        }
    }

    fn exp(&self, m: &[i64; 3], dim: usize) -> Complex<T> {
        let width = 2 * self.cutoff + 1;
        let mut acc = Complex::new(T::one(), T::zero());
        for axis in 0..dim {
            acc = acc * self.table[axis * width + (m[axis] + self.cutoff as i64) as usize];
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMode {
    pub lattice: Vec<i64>,
    pub polarization: Vec<f64>,
    pub amplitude: f64,
    pub phase: Phase,
}

/// JSON manifest `{d, alpha, K, L, Z_K, modes}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisManifest {
    pub d: usize,
    pub alpha: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "Z_K")]
    pub z_k: f64,
    pub modes: Vec<ManifestMode>,
}

/// One Brownian increment of the noise field.
#[derive(Debug, Clone)]
pub struct NoiseIncrement<T: Real> {
    pub field: VectorField<T>,
    pub coefficients: Vec<T>,
    pub dt: T,
}

/// Draws i.i.d. `N(0, dt)` coefficients, one per mode.
pub fn sample_coefficients<T: Real, R: Rng + ?Sized>(modes: usize, dt: T, rng: &mut R, out: &mut Vec<T>) {
    let sd = dt.sqrt();
    out.clear();
    out.extend((0..modes).map(|_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z) * sd
    }));
}

pub fn sample_increment<T: Real, R: Rng + ?Sized>(
    basis: &NoiseBasis<T>,
    domain: &Arc<Domain<T>>,
    dt: T,
    rng: &mut R,
) -> Result<NoiseIncrement<T>> {
    if !(dt > T::zero()) {
        return Err(invalid(format!("time step {dt} must be positive")));
    }
    let mut coefficients = Vec::new();
    sample_coefficients(basis.len(), dt, rng, &mut coefficients);
    let field = basis.assemble(domain, &coefficients)?;
    Ok(NoiseIncrement {
        field,
        coefficients,
        dt,
    })
}

/// Per-step Brownian coefficients `Delta W^j_n` of one noise path.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath<T> {
    dt: T,
    modes: usize,
    steps: usize,
    data: Vec<T>,
}

impl<T: Real> NoisePath<T> {
    pub fn sample<R: Rng + ?Sized>(modes: usize, dt: T, steps: usize, rng: &mut R) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(invalid(format!("time step {dt} must be positive")));
        }
        let sd = dt.sqrt();
        let data = (0..modes * steps)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::lit(z) * sd
            })
            .collect();
        Ok(NoisePath { dt, modes, steps, data })
    }

    pub fn from_parts(dt: T, modes: usize, steps: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != modes * steps {
            return Err(Error::Format(format!(
                "{} coefficients for {steps} steps of {modes} modes",
                data.len()
            )));
        }
        Ok(NoisePath { dt, modes, steps, data })
    }

    pub fn zeros(modes: usize, dt: T, steps: usize) -> Self {
        NoisePath {
            dt,
            modes,
            steps,
            data: vec![T::zero(); modes * steps],
        }
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Coefficients `Delta W^j_n` of step `n`.
    pub fn step(&self, n: usize) -> &[T] {
        &self.data[n * self.modes..(n + 1) * self.modes]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Sums consecutive groups of `factor` increments: the same Brownian
    /// path seen at step `factor * dt`.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps() % factor != 0 {
            return Err(invalid(format!(
                "cannot coarsen {} steps by {factor}",
                self.steps()
            )));
        }
        let steps = self.steps() / factor;
        let mut data = vec![T::zero(); steps * self.modes];
        for n in 0..self.steps() {
            let row = &mut data[(n / factor) * self.modes..(n / factor + 1) * self.modes];
            for (acc, &v) in row.iter_mut().zip(self.step(n)) {
                *acc = *acc + v;
            }
        }
        Ok(NoisePath {
            dt: self.dt * T::lit(factor as f64),
            modes: self.modes,
            steps,
            data,
        })
    }

    /// `W^j(t_b) - W^j(t_a)` for step indices `a <= b`.
    pub fn increment_between(&self, a: usize, b: usize) -> Vec<T> {
        let mut out = vec![T::zero(); self.modes];
        for n in a..b {
            for (acc, &v) in out.iter_mut().zip(self.step(n)) {
                *acc = *acc + v;
            }
        }
        out
    }
}

/// `( int_0^T ||g_t||^2_{H^{d/2+alpha}} dt )^{1/2}` by trapezoidal
/// quadrature over the supplied time slices.
pub fn cameron_martin_norm<T: Real>(times: &[f64], slices: &[VectorField<T>], spec: &NoiseSpec) -> Result<T> {
    const TOLERANCE: f64 = 1e-8;
    if times.len() != slices.len() || times.len() < 2 {
        return Err(invalid("need at least two matching time slices"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("time slices must be strictly increasing"));
    }
    let order = spec.cameron_martin_order();
    let mut sq = Vec::with_capacity(slices.len());
    for g in slices {
        let div = g.relative_divergence().as_f64();
        if div > TOLERANCE {
            return Err(Error::NotSolenoidal {
                max_divergence: div,
                tolerance: TOLERANCE,
            });
        }
        let n = g.sobolev_norm(order)?;
        sq.push(n * n);
    }
    let mut total = T::zero();
    for i in 0..times.len() - 1 {
        let h = T::lit(times[i + 1] - times[i]);
        total = total + T::lit(0.5) * h * (sq[i] + sq[i + 1]);
    }
    Ok(total.sqrt())
}
