//! Test drifts, time modulation, mollification and the regime classifier.

use std::path::PathBuf;
use std::sync::Arc;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::Domain;
use crate::scalar::Real;

/// Scalar time modulation `f(t)` multiplying a spatial field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum TimeProfile {
    Constant,
    /// `t / horizon`.
    Ramp { horizon: f64 },
    /// `sin(pi t / horizon)`.
    HalfSine { horizon: f64 },
    /// Smooth compactly supported bump on `(0, horizon)` with peak 1.
    Bump { horizon: f64 },
    /// `1 + depth * sin(2 pi frequency t)`.
    Sinusoid { frequency: f64, depth: f64 },
    /// Piecewise-linear interpolation, held constant outside the table.
    Table { times: Vec<f64>, factors: Vec<f64> },
}

impl TimeProfile {
    pub fn validate(&self) -> Result<()> {
        match self {
            TimeProfile::Constant => Ok(()),
            TimeProfile::Ramp { horizon } | TimeProfile::HalfSine { horizon } | TimeProfile::Bump { horizon } => {
                if horizon.is_finite() && *horizon > 0.0 {
                    Ok(())
                } else {
                    Err(invalid(format!("profile horizon {horizon} must be positive")))
                }
            }
            TimeProfile::Sinusoid { frequency, depth } => {
                if frequency.is_finite() && depth.is_finite() {
                    Ok(())
                } else {
                    Err(invalid("sinusoid parameters must be finite"))
                }
            }
            TimeProfile::Table { times, factors } => {
                if times.is_empty() || times.len() != factors.len() {
                    return Err(invalid("schedule needs matching, non-empty times and factors"));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(invalid("schedule times must increase"));
                }
                if times.iter().chain(factors).any(|v| !v.is_finite()) {
                    return Err(invalid("schedule entries must be finite"));
                }
                Ok(())
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, TimeProfile::Constant)
    }

    pub fn value(&self, t: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            TimeProfile::Constant => 1.0,
            TimeProfile::Ramp { horizon } => t / horizon,
            TimeProfile::HalfSine { horizon } => (PI * t / horizon).sin(),
            TimeProfile::Bump { horizon } => {
                let s = 2.0 * t / horizon - 1.0;
                if s.abs() >= 1.0 {
                    0.0
                } else {
                    (1.0 - 1.0 / (1.0 - s * s)).exp()
                }
            }
            TimeProfile::Sinusoid { frequency, depth } => 1.0 + depth * (2.0 * PI * frequency * t).sin(),
            TimeProfile::Table { times, factors } => {
                let last = times.len() - 1;
                if t <= times[0] {
                    return factors[0];
                }
                if t >= times[last] {
                    return factors[last];
                }
                let i = times.partition_point(|&s| s <= t) - 1;
                let w = (t - times[i]) / (times[i + 1] - times[i]);
                factors[i] * (1.0 - w) + factors[i + 1] * w
            }
        }
    }

    /// `int_0^T |f(t)| dt` by composite midpoint quadrature.
    pub fn abs_integral(&self, horizon: f64) -> f64 {
        if self.is_constant() {
            return horizon;
        }
        let n = 4096;
        let h = horizon / n as f64;
        (0..n).map(|i| self.value((i as f64 + 0.5) * h).abs() * h).sum()
    }

    /// `int_0^T f(t)^2 dt`.
    pub fn square_integral(&self, horizon: f64) -> f64 {
        if self.is_constant() {
            return horizon;
        }
        let n = 4096;
        let h = horizon / n as f64;
        (0..n).map(|i| self.value((i as f64 + 0.5) * h).powi(2) * h).sum()
    }

    /// `sup_{[0, T]} |f|` on a fine sampling grid (endpoints included).
    pub fn sup_abs(&self, horizon: f64) -> f64 {
        if self.is_constant() {
            return 1.0;
        }
        let n = 4096;
        (0..=n)
            .map(|i| self.value(horizon * i as f64 / n as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// A velocity `u(t, x) = sum_i f_i(t) v_i(x)`.
#[derive(Debug, Clone)]
pub struct Velocity<T: Real> {
    domain: Arc<Domain<T>>,
    terms: Vec<(VectorField<T>, TimeProfile)>,
    steady: Option<VectorField<T>>,
}

impl<T: Real> Velocity<T> {
    pub fn new(domain: &Arc<Domain<T>>, terms: Vec<(VectorField<T>, TimeProfile)>) -> Result<Self> {
        for (v, p) in &terms {
            if v.grid() != domain.grid() {
                return Err(Error::GridMismatch(format!("velocity term on {} vs {}", v.grid(), domain.grid())));
            }
            p.validate()?;
        }
        let steady = if terms.iter().all(|(_, p)| p.is_constant()) {
            let mut sum = VectorField::zeros(domain);
            for (v, _) in &terms {
                sum = sum.axpby(T::one(), v, T::one());
            }
            Some(sum)
        } else {
            None
        };
        Ok(Velocity {
            domain: Arc::clone(domain),
            terms,
            steady,
        })
    }

    pub fn zero(domain: &Arc<Domain<T>>) -> Self {
        Velocity {
            domain: Arc::clone(domain),
            terms: Vec::new(),
            steady: Some(VectorField::zeros(domain)),
        }
    }

    pub fn stationary(field: VectorField<T>) -> Self {
        let domain = Arc::clone(field.domain());
        Velocity {
            domain,
            terms: vec![(field.clone(), TimeProfile::Constant)],
            steady: Some(field),
        }
    }

    pub fn domain(&self) -> &Arc<Domain<T>> {
        &self.domain
    }

    pub fn terms(&self) -> &[(VectorField<T>, TimeProfile)] {
        &self.terms
    }

    pub fn is_steady(&self) -> bool {
        self.steady.is_some()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// `u(t, .)`.
    pub fn at(&self, t: f64) -> VectorField<T> {
        if let Some(s) = &self.steady {
            return s.clone();
        }
        let mut sum = VectorField::zeros(&self.domain);
        for (v, p) in &self.terms {
            sum = sum.axpby(T::one(), v, T::lit(p.value(t)));
        }
        sum
    }

    /// Sum of two velocities (e.g. drift plus control).
    pub fn plus(&self, other: &Velocity<T>) -> Result<Self> {
        let mut terms = self.terms.clone();
        terms.extend(other.terms.iter().cloned());
        Velocity::new(&self.domain, terms)
    }

    pub fn scaled(&self, a: T) -> Self {
        let terms = self.terms.iter().map(|(v, p)| (v.scale(a), p.clone())).collect();
        Velocity::new(&self.domain, terms).expect("same grid and profiles")
    }

    pub fn mollified(&self, delta: f64) -> Result<Self> {
        let mut terms = Vec::with_capacity(self.terms.len());
        for (v, p) in &self.terms {
            terms.push((mollify(v, delta)?, p.clone()));
        }
        Velocity::new(&self.domain, terms)
    }

    /// Upper bound for `sup_{t <= T} max_x |u(t, x)|`.
    pub fn speed_bound(&self, horizon: f64) -> T {
        if let Some(s) = &self.steady {
            return s.max_magnitude();
        }
        self.terms
            .iter()
            .map(|(v, p)| v.max_magnitude() * T::lit(p.sup_abs(horizon)))
            .fold(T::zero(), |a, b| a + b)
    }

    /// Upper bound for `int_0^T ||div u(t)||_{L^inf} dt`.
    pub fn divergence_l1_linf(&self, horizon: f64) -> T {
        if let Some(s) = &self.steady {
            return max_abs(&s.divergence()) * T::lit(horizon);
        }
        self.terms
            .iter()
            .map(|(v, p)| max_abs(&v.divergence()) * T::lit(p.abs_integral(horizon)))
            .fold(T::zero(), |a, b| a + b)
    }

    /// Largest relative spectral divergence over the terms.
    pub fn relative_divergence(&self) -> T {
        self.terms
            .iter()
            .map(|(v, _)| v.relative_divergence())
            .fold(T::zero(), T::max)
    }
}

fn max_abs<T: Real>(f: &ScalarField<T>) -> T {
    f.values().iter().fold(T::zero(), |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriftKind {
    Zero,
    Constant {
        velocity: Vec<f64>,
    },
    /// `a (sin(k x_2), 0, ..)`.
    Shear {
        amplitude: f64,
        wavenumber: i64,
    },
    /// Cellular flow `(-d_2 psi, d_1 psi)` with `psi = a/k sin(k x_1) sin(k x_2)`
    /// scaled so that `cellular(1, 1)` has stream function `sin x_1 sin x_2`.
    Cellular {
        amplitude: f64,
        wavenumber: i64,
    },
    /// Smooth compressible drift `a (sin(k x_1), 0, ..)`.
    Compressible {
        amplitude: f64,
        wavenumber: i64,
    },
    /// Divergence-free random Fourier series with power-law coefficients.
    Rough {
        q_target: f64,
        #[serde(default)]
        spectral_slope: Option<f64>,
        seed: u64,
        #[serde(default = "unit")]
        amplitude: f64,
    },
    User {
        file: PathBuf,
    },
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    #[serde(flatten)]
    pub kind: DriftKind,
    #[serde(default = "steady")]
    pub time_dependence: TimeProfile,
}

fn steady() -> TimeProfile {
    TimeProfile::Constant
}

impl DriftSpec {
    pub fn new(kind: DriftKind) -> Self {
        DriftSpec {
            kind,
            time_dependence: TimeProfile::Constant,
        }
    }

    pub fn zero() -> Self {
        Self::new(DriftKind::Zero)
    }

    pub fn cellular(amplitude: f64, wavenumber: i64) -> Self {
        Self::new(DriftKind::Cellular { amplitude, wavenumber })
    }

    pub fn shear(amplitude: f64, wavenumber: i64) -> Self {
        Self::new(DriftKind::Shear { amplitude, wavenumber })
    }

    pub fn constant(velocity: Vec<f64>) -> Self {
        Self::new(DriftKind::Constant { velocity })
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        self.time_dependence.validate()?;
        let finite = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(invalid(format!("{what} must be finite")))
            }
        };
        match &self.kind {
            DriftKind::Zero | DriftKind::User { .. } => Ok(()),
            DriftKind::Constant { velocity } => {
                if velocity.len() != dim {
                    return Err(invalid(format!("constant drift has {} components in dimension {dim}", velocity.len())));
                }
                velocity.iter().try_for_each(|&v| finite(v, "velocity"))
            }
            DriftKind::Shear { amplitude, .. } | DriftKind::Compressible { amplitude, .. } => {
                finite(*amplitude, "amplitude")?;
                if dim < 2 && matches!(self.kind, DriftKind::Shear { .. }) {
                    return Err(invalid("shear drift needs d >= 2"));
                }
                Ok(())
            }
            DriftKind::Cellular { amplitude, .. } => {
                finite(*amplitude, "amplitude")?;
                if dim < 2 {
                    return Err(invalid("cellular drift needs d >= 2"));
                }
                Ok(())
            }
            DriftKind::Rough {
                q_target,
                spectral_slope,
                amplitude,
                ..
            } => {
                if !(*q_target >= 1.0 && *q_target <= 2.0) {
                    return Err(invalid(format!("rough drift needs 1 <= q_target <= 2, got {q_target}")));
                }
                if let Some(s) = spectral_slope {
                    finite(*s, "spectral slope")?;
                }
                finite(*amplitude, "amplitude")?;
                if dim < 2 {
                    return Err(invalid("divergence-free rough drift needs d >= 2"));
                }
                Ok(())
            }
        }
    }

    /// Whether the spatial field is divergence-free by construction.
    pub fn is_solenoidal(&self) -> bool {
        !matches!(self.kind, DriftKind::Compressible { .. } | DriftKind::User { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftMetadata {
    /// Exponent used for the Sobolev norm below.
    pub q: f64,
    /// `(||b||_q^q + ||grad b||_q^q)^{1/q}` by grid quadrature.
    pub w1q_norm: f64,
    pub div_linf: f64,
    pub l2_norm: f64,
    pub max_speed: f64,
    /// Coefficient decay exponent (rough drifts only).
    pub spectral_slope: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Drift<T: Real> {
    pub spec: DriftSpec,
    pub velocity: Velocity<T>,
    pub metadata: DriftMetadata,
}

/// Exponent `gamma` with `|b^(k)| ~ <k>^{-gamma}` that puts `b` right at the
/// edge of `H^beta`, `beta = 1 + d/2 - d/q`.
pub fn marginal_slope(dim: usize, q: f64) -> f64 {
    let d = dim as f64;
    let beta = 1.0 + d / 2.0 - d / q;
    beta + d / 2.0
}

pub fn synthesize_drift<T: Real>(spec: &DriftSpec, domain: &Arc<Domain<T>>) -> Result<Drift<T>> {
    let dim = domain.dim();
    spec.validate(dim)?;
    let mut q = 2.0;
    let mut slope = None;
    let field = match &spec.kind {
        DriftKind::Zero => VectorField::zeros(domain),
        DriftKind::Constant { velocity } => {
            let v = velocity.clone();
            VectorField::from_fn(domain, move |_| {
                let mut out = [0.0; 3];
                out[..v.len()].copy_from_slice(&v);
                out
            })
        }
        &DriftKind::Shear { amplitude, wavenumber } => {
            let k = wavenumber as f64;
            VectorField::from_fn(domain, move |x| [amplitude * (k * x[1]).sin(), 0.0, 0.0])
        }
        &DriftKind::Cellular { amplitude, wavenumber } => {
            // psi = a/k sin(k x1) sin(k x2): u = (-d2 psi, d1 psi)
            let k = wavenumber as f64;
            VectorField::from_fn(domain, move |x| {
                [
                    -amplitude * (k * x[0]).sin() * (k * x[1]).cos(),
                    amplitude * (k * x[0]).cos() * (k * x[1]).sin(),
                    0.0,
                ]
            })
        }
        &DriftKind::Compressible { amplitude, wavenumber } => {
            let k = wavenumber as f64;
            VectorField::from_fn(domain, move |x| [amplitude * (k * x[0]).sin(), 0.0, 0.0])
        }
        &DriftKind::Rough {
            q_target,
            spectral_slope,
            seed,
            amplitude,
        } => {
            q = q_target;
            let gamma = spectral_slope.unwrap_or_else(|| marginal_slope(dim, q_target));
            slope = Some(gamma);
            rough_field(domain, gamma, seed, amplitude)
        }
        DriftKind::User { file } => {
            if !file.exists() {
                return Err(Error::InvalidParameter(format!("drift file {} not found", file.display())));
            }
            crate::io::read_vector_field(file, domain)?
        }
    };
    field.components().iter().try_for_each(ScalarField::ensure_finite)?;
    let metadata = DriftMetadata {
        q,
        w1q_norm: w1q_norm(&field, q)?.as_f64(),
        div_linf: max_abs(&field.divergence()).as_f64(),
        l2_norm: field.l2_norm().as_f64(),
        max_speed: field.max_magnitude().as_f64(),
        spectral_slope: slope,
    };
    let velocity = Velocity::new(domain, vec![(field, spec.time_dependence.clone())])?;
    Ok(Drift {
        spec: spec.clone(),
        velocity,
        metadata,
    })
}

fn rough_field<T: Real>(domain: &Arc<Domain<T>>, gamma: f64, seed: u64, amplitude: f64) -> VectorField<T> {
    let dim = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // White noise in physical space keeps Hermitian symmetry automatic.
    let spectra: Vec<Vec<Complex<T>>> = (0..dim)
        .map(|_| {
            let white: Vec<T> = (0..domain.len())
                .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
                .collect();
            domain.forward(&white)
        })
        .collect();
    let mut out = vec![vec![Complex::new(T::zero(), T::zero()); domain.len()]; dim];
    for idx in 0..domain.len() {
        let k2 = domain.wavenumber_sq(idx);
        if k2 == T::zero() || !domain.is_retained(idx) || (0..dim).any(|a| domain.is_nyquist(idx, a)) {
            continue;
        }
        let xi = domain.wavevector(idx);
        let weight = (T::one() + k2).powf(T::lit(-gamma / 2.0));
        // Leray projection removes the longitudinal part.
        let mut dot = Complex::new(T::zero(), T::zero());
        for a in 0..dim {
            dot = dot + spectra[a][idx] * xi[a];
        }
        for a in 0..dim {
            out[a][idx] = (spectra[a][idx] - dot * (xi[a] / k2)) * weight;
        }
    }
    let raw = VectorField::new(
        out.into_iter()
            .map(|c| ScalarField::from_spectral_unchecked(domain, c))
            .collect(),
    )
    .expect("dim components");
    let peak = raw.max_magnitude();
    if peak == T::zero() {
        return raw;
    }
    raw.scale(T::lit(amplitude) / peak)
}

/// `(||b||_q^q + sum_ij ||d_i b_j||_q^q)^{1/q}`.
pub fn w1q_norm<T: Real>(b: &VectorField<T>, q: f64) -> Result<T> {
    let qt = T::lit(q);
    let mut total = T::zero();
    for comp in b.components() {
        total = total + comp.lp_norm(q)?.powf(qt);
        for d in comp.gradient().components() {
            total = total + d.lp_norm(q)?.powf(qt);
        }
    }
    Ok(total.powf(T::one() / qt))
}

/// Gaussian spectral filter `exp(-delta^2 |xi|^2 / 2)` applied componentwise.
pub fn mollify<T: Real>(b: &VectorField<T>, delta: f64) -> Result<VectorField<T>> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(invalid(format!("mollification scale {delta} must be >= 0")));
    }
    if delta == 0.0 {
        return Ok(b.clone());
    }
    let domain = Arc::clone(b.domain());
    let half_d2 = T::lit(delta * delta / 2.0);
    Ok(b.map_components(|c| {
        let out = c
            .spectral()
            .iter()
            .enumerate()
            .map(|(idx, &v)| v * (-half_d2 * domain.wavenumber_sq(idx)).exp())
            .collect();
        ScalarField::from_spectral_unchecked(&domain, out)
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeMargins {
    /// `1 - (1/p + 1/q)`; uniqueness iff `>= 0`.
    pub dl_unique: f64,
    /// `(d-1)/(d p) + 1/q - 1`; non-uniqueness window iff `> 0`.
    pub nonunique_weak: f64,
    /// `q - d/(2(1-alpha))`; must be `> 0`.
    pub noise_lower: f64,
    /// `2 - q`; must be `>= 0`.
    pub noise_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub dl_unique: bool,
    pub nonunique_weak: bool,
    pub noise_wellposed: bool,
    pub margins: RegimeMargins,
    /// Side conditions the classifier does not evaluate.
    pub unchecked: Vec<String>,
}

pub fn check_regime(p: f64, q: f64, dim: usize, alpha: f64) -> Result<RegimeReport> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(invalid(format!("alpha = {alpha} must lie in (0, 1/2)")));
    }
    if !(p >= 1.0) || !(q >= 1.0) {
        return Err(invalid(format!("exponents p = {p}, q = {q} must be >= 1")));
    }
    if !(1..=3).contains(&dim) {
        return Err(invalid(format!("dimension {dim} not in 1..=3")));
    }
    let d = dim as f64;
    let inv = |x: f64| if x.is_infinite() { 0.0 } else { 1.0 / x };
    let margins = RegimeMargins {
        dl_unique: 1.0 - (inv(p) + inv(q)),
        nonunique_weak: (d - 1.0) / d * inv(p) + inv(q) - 1.0,
        noise_lower: q - d / (2.0 * (1.0 - alpha)),
        noise_upper: 2.0 - q,
    };
    Ok(RegimeReport {
        dl_unique: margins.dl_unique >= 0.0,
        nonunique_weak: margins.nonunique_weak > 0.0,
        noise_wellposed: margins.noise_lower > 0.0 && margins.noise_upper >= 0.0,
        margins,
        unchecked: vec![format!("b in L^inf_t L^{{(p-1)/p}}_x integrability (p = {p})")],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::Rng;

    fn domain(n: usize) -> Arc<Domain<f64>> {
        Domain::new(Grid::new(2, n).unwrap()).unwrap()
    }

    #[test]
    fn zero_drift_has_zero_metadata() {
        let d = synthesize_drift(&DriftSpec::zero(), &domain(16)).unwrap();
        let m = &d.metadata;
        assert_eq!((m.w1q_norm, m.div_linf, m.l2_norm, m.max_speed), (0.0, 0.0, 0.0, 0.0));
        assert!(d.velocity.at(0.3).l2_norm() == 0.0);
    }

    #[test]
    fn shear_matches_formula() {
        let dom = domain(16);
        let d = synthesize_drift(&DriftSpec::shear(1.0, 1), &dom).unwrap();
        let b = d.velocity.at(0.0);
        let expected = ScalarField::from_fn(&dom, |x| x[1].sin());
        assert!(b.component(0).max_abs_diff(&expected) < 1e-15);
        assert!(d.metadata.div_linf < 1e-14);
    }

    #[test]
    fn cellular_is_divergence_free() {
        let dom = domain(32);
        let d = synthesize_drift(&DriftSpec::cellular(1.0, 1), &dom).unwrap();
        assert!(d.metadata.div_linf <= 1e-10);
        // Oracle: (-d2 psi, d1 psi) for psi = sin x1 sin x2, by hand.
        let b = d.velocity.at(0.0);
        let u = ScalarField::from_fn(&dom, |x| -x[0].sin() * x[1].cos());
        assert!(b.component(0).max_abs_diff(&u) < 1e-15);
    }

    #[test]
    fn rough_drift_is_solenoidal_and_reproducible() {
        let dom = domain(32);
        let spec = DriftSpec::new(DriftKind::Rough {
            q_target: 1.2,
            spectral_slope: None,
            seed: 9,
            amplitude: 1.0,
        });
        let a = synthesize_drift(&spec, &dom).unwrap();
        let b = synthesize_drift(&spec, &dom).unwrap();
        let (va, vb) = (a.velocity.at(0.0), b.velocity.at(0.0));
        assert_eq!(va.component(0).values(), vb.component(0).values());
        assert!(va.relative_divergence() < 1e-10);
        assert!((va.max_magnitude() - 1.0).abs() < 1e-12);
        assert!(a.metadata.w1q_norm.is_finite() && a.metadata.w1q_norm > 0.0);
        assert_eq!(a.metadata.spectral_slope, Some(marginal_slope(2, 1.2)));
    }

    #[test]
    fn rough_drift_outside_regime_rejected() {
        let spec = DriftSpec::new(DriftKind::Rough {
            q_target: 3.0,
            spectral_slope: None,
            seed: 0,
            amplitude: 1.0,
        });
        assert!(synthesize_drift::<f64>(&spec, &domain(16)).is_err());
    }

    #[test]
    fn user_drift_requires_file() {
        let spec = DriftSpec::new(DriftKind::User {
            file: "/nonexistent/b.bin".into(),
        });
        assert!(synthesize_drift::<f64>(&spec, &domain(16)).is_err());
    }

    #[test]
    fn mollify_identity_and_single_mode() {
        let dom = domain(16);
        let b = synthesize_drift(&DriftSpec::shear(1.0, 1), &dom).unwrap().velocity.at(0.0);
        let same = mollify(&b, 0.0).unwrap();
        assert_eq!(same.component(0).values(), b.component(0).values());
        let m = mollify(&b, 1.0).unwrap();
        let ratio = m.l2_norm() / b.l2_norm();
        assert!((ratio - (-0.5f64).exp()).abs() < 1e-14);
        assert!((ratio - 0.6065306597126334).abs() < 1e-14);
        assert!(mollify(&b, -1.0).is_err());
    }

    #[test]
    fn mollify_is_monotone_and_solenoidal() {
        let dom = domain(32);
        let spec = DriftSpec::new(DriftKind::Rough {
            q_target: 1.5,
            spectral_slope: Some(1.0),
            seed: 4,
            amplitude: 1.0,
        });
        let b = synthesize_drift(&spec, &dom).unwrap().velocity.at(0.0);
        let mut prev = b.l2_norm();
        for delta in [0.05, 0.1, 0.3, 1.0] {
            let m = mollify(&b, delta).unwrap();
            assert!(m.l2_norm() <= prev);
            assert!(m.max_spectral_divergence() <= 1e-12 * b.l2_norm());
            prev = m.l2_norm();
        }
    }

    #[test]
    fn regime_examples() {
        let r = check_regime(2.0, 2.0, 2, 0.25).unwrap();
        assert!(r.dl_unique);
        let r = check_regime(2.0, 1.2, 2, 0.1).unwrap();
        assert!(r.nonunique_weak && r.noise_wellposed);
        assert!((r.margins.nonunique_weak - (0.25 + 1.0 / 1.2 - 1.0)).abs() < 1e-15);
        let r = check_regime(1.0, f64::INFINITY, 2, 0.25).unwrap();
        assert!(r.dl_unique);
        assert_eq!(r.margins.dl_unique, 0.0);
        assert!(check_regime(2.0, 2.0, 2, 0.5).is_err());
    }

    #[test]
    fn regime_booleans_follow_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let p = if rng.random_bool(0.05) { f64::INFINITY } else { rng.random_range(1.0..8.0) };
            let q = if rng.random_bool(0.05) { f64::INFINITY } else { rng.random_range(1.0..4.0) };
            let d = rng.random_range(1..=3);
            let alpha = rng.random_range(1e-6..0.5);
            let r = check_regime(p, q, d, alpha).unwrap();
            assert_eq!(r.dl_unique, r.margins.dl_unique >= 0.0);
            assert_eq!(r.nonunique_weak, r.margins.nonunique_weak > 0.0);
            assert_eq!(r.noise_wellposed, r.margins.noise_lower > 0.0 && r.margins.noise_upper >= 0.0);
        }
    }

    #[test]
    fn profiles() {
        let bump = TimeProfile::Bump { horizon: 1.0 };
        assert_eq!(bump.value(0.0), 0.0);
        assert!((bump.value(0.5) - 1.0).abs() < 1e-15);
        let table = TimeProfile::Table {
            times: vec![0.0, 1.0],
            factors: vec![1.0, 3.0],
        };
        assert!((table.value(0.25) - 1.5).abs() < 1e-15);
        assert!((TimeProfile::HalfSine { horizon: 1.0 }.abs_integral(1.0) - 2.0 / std::f64::consts::PI).abs() < 1e-6);
        assert!(TimeProfile::Table { times: vec![1.0, 0.0], factors: vec![1.0, 1.0] }.validate().is_err());
    }

    #[test]
    fn modulated_velocity_scales_in_time() {
        let dom = domain(16);
        let mut spec = DriftSpec::shear(1.0, 1);
        spec.time_dependence = TimeProfile::Ramp { horizon: 2.0 };
        let d = synthesize_drift(&spec, &dom).unwrap();
        assert!(!d.velocity.is_steady());
        let half = d.velocity.at(1.0);
        assert!((half.max_magnitude() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn compressible_divergence_bound() {
        let dom = domain(16);
        let d = synthesize_drift(
            &DriftSpec::new(DriftKind::Compressible {
                amplitude: 0.5,
                wavenumber: 1,
            }),
            &dom,
        )
        .unwrap();
        assert!((d.metadata.div_linf - 0.5).abs() < 1e-12);
        assert!((d.velocity.divergence_l1_linf(2.0) - 1.0).abs() < 1e-12);
    }
}
