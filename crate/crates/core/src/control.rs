//! Finite control dictionaries: divergence-free low Fourier modes times a
//! few scalar time profiles, priced in the Cameron–Martin norm of the noise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::drift::{TimeProfile, Velocity};
use crate::error::{invalid, Error, Result};
use crate::field::VectorField;
use crate::grid::Domain;
use crate::noise::{NoiseBasis, Phase};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Constant,
    Linear,
    HalfSine,
    Bump,
}

impl ProfileKind {
    pub fn profile(self, horizon: f64) -> TimeProfile {
        match self {
            ProfileKind::Constant => TimeProfile::Constant,
            ProfileKind::Linear => TimeProfile::Ramp { horizon },
            ProfileKind::HalfSine => TimeProfile::HalfSine { horizon },
            ProfileKind::Bump => TimeProfile::Bump { horizon },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlMode {
    pub lattice: Vec<i64>,
    pub phase: Phase,
    /// Which of the two transverse directions in three dimensions.
    #[serde(default)]
    pub polarization: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSpec {
    pub modes: Vec<ControlMode>,
    pub profiles: Vec<ProfileKind>,
    /// Admitted controls satisfy `1/2 ||g||^2_{L^2_t H_0} <= budget`.
    pub budget: f64,
}

pub const MAX_SPATIAL_MODES: usize = 8;
pub const MAX_PROFILES: usize = 4;

impl ControlSpec {
    /// The first `count` entries of a fixed list of low modes, each with a
    /// cosine and a sine copy (so `count <= 4`).
    pub fn low_modes(dim: usize, count: usize, profiles: Vec<ProfileKind>, budget: f64) -> Result<Self> {
        let lattice: &[&[i64]] = match dim {
            2 => &[&[1, 0], &[0, 1], &[1, 1], &[1, -1]],
            3 => &[&[1, 0, 0], &[0, 1, 0], &[0, 0, 1], &[1, 1, 0]],
            _ => return Err(invalid(format!("dimension {dim} has no control dictionary"))),
        };
        if count == 0 || count > lattice.len() {
            return Err(invalid(format!("low_modes takes 1..={} lattice vectors", lattice.len())));
        }
        let modes = lattice[..count]
            .iter()
            .flat_map(|m| {
                [Phase::Cos, Phase::Sin].map(|phase| ControlMode {
                    lattice: m.to_vec(),
                    phase,
                    polarization: 0,
                })
            })
            .collect();
        let spec = ControlSpec { modes, profiles, budget };
        spec.validate(dim)?;
        Ok(spec)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.modes.is_empty() || self.modes.len() > MAX_SPATIAL_MODES {
            return Err(invalid(format!(
                "{} spatial modes; the dictionary takes 1..={MAX_SPATIAL_MODES}",
                self.modes.len()
            )));
        }
        if self.profiles.is_empty() || self.profiles.len() > MAX_PROFILES {
            return Err(invalid(format!(
                "{} time profiles; the dictionary takes 1..={MAX_PROFILES}",
                self.profiles.len()
            )));
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return Err(invalid(format!("budget = {} must be positive", self.budget)));
        }
        for (i, p) in self.profiles.iter().enumerate() {
            if self.profiles[..i].contains(p) {
                return Err(invalid(format!("profile {p:?} listed twice")));
            }
        }
        for (i, m) in self.modes.iter().enumerate() {
            if m.lattice.len() != dim || m.lattice.iter().all(|&c| c == 0) {
                return Err(invalid(format!("control mode {:?} is not a nonzero {dim}-vector", m.lattice)));
            }
            if m.polarization >= dim - 1 {
                return Err(invalid(format!("polarization {} out of range in d = {dim}", m.polarization)));
            }
            let neg: Vec<i64> = m.lattice.iter().map(|c| -c).collect();
            if self.modes[..i]
                .iter()
                .any(|o| (o.lattice == m.lattice || o.lattice == neg) && o.phase == m.phase && o.polarization == m.polarization)
            {
                return Err(invalid(format!("control mode {:?} ({:?}) listed twice", m.lattice, m.phase)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.modes.len() * self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn polarization(m: &[f64; 3], dim: usize, which: usize) -> [f64; 3] {
    let norm = |v: [f64; 3]| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let cross = |a: [f64; 3], b: [f64; 3]| [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    if dim == 2 {
        return norm([-m[1], m[0], 0.0]);
    }
    let axis = (0..3).min_by(|&i, &j| m[i].abs().total_cmp(&m[j].abs())).unwrap();
    let mut a = [0.0; 3];
    a[axis] = 1.0;
    let e1 = norm(cross(*m, a));
    if which == 0 {
        e1
    } else {
        norm(cross(*m, e1))
    }
}

/// A [`ControlSpec`] realized on a grid.
#[derive(Debug, Clone)]
pub struct ControlDictionary<T: Real> {
    spec: ControlSpec,
    horizon: f64,
    domain: Arc<Domain<T>>,
    basis: Arc<NoiseBasis<T>>,
    fields: Vec<VectorField<T>>,
    /// `||phi_i||^2_{H_0}`.
    weights: Vec<f64>,
    /// `int_0^T p_j p_k dt`.
    gram: Vec<Vec<f64>>,
    /// Noise coefficients of each spatial field.
    coefficients: Vec<Vec<T>>,
}

impl<T: Real> ControlDictionary<T> {
    pub fn build(spec: &ControlSpec, domain: &Arc<Domain<T>>, basis: &Arc<NoiseBasis<T>>, horizon: f64) -> Result<Self> {
        let dim = domain.dim();
        spec.validate(dim)?;
        if basis.dim() != dim {
            return Err(Error::GridMismatch(format!("noise in d = {}, grid in d = {dim}", basis.dim())));
        }
        let cutoff = basis.spec().cutoff as f64;
        let unit = domain.grid().wavenumber_unit();
        let order = basis.spec().cameron_martin_order();
        let scale = basis.cameron_martin_scale().as_f64();
        let mut fields = Vec::new();
        let mut weights = Vec::new();
        let mut coefficients = Vec::new();
        for mode in &spec.modes {
            let mut m = [0.0; 3];
            for (i, &c) in mode.lattice.iter().enumerate() {
                m[i] = c as f64;
            }
            if (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt() > cutoff {
                return Err(invalid(format!(
                    "control mode {:?} lies outside the noise range |m| <= {cutoff}",
                    mode.lattice
                )));
            }
            let e = polarization(&m, dim, mode.polarization);
            let phase = mode.phase;
            let field = VectorField::from_fn(domain, move |x| {
                let arg = unit * (0..dim).map(|i| m[i] * x[i]).sum::<f64>();
                let s = match phase {
                    Phase::Cos => arg.cos(),
                    Phase::Sin => arg.sin(),
                };
                [s * e[0], s * e[1], s * e[2]]
            });
            weights.push(scale * field.sobolev_norm(order)?.as_f64().powi(2));
            coefficients.push(basis.project(domain, &field)?);
            fields.push(field);
        }
        let profiles: Vec<TimeProfile> = spec.profiles.iter().map(|p| p.profile(horizon)).collect();
        let gram = profiles
            .iter()
            .map(|p| profiles.iter().map(|q| simpson(|t| p.value(t) * q.value(t), horizon)).collect())
            .collect();
        Ok(ControlDictionary {
            spec: spec.clone(),
            horizon,
            domain: domain.clone(),
            basis: basis.clone(),
            fields,
            weights,
            gram,
            coefficients,
        })
    }

    pub fn spec(&self) -> &ControlSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn domain(&self) -> &Arc<Domain<T>> {
        &self.domain
    }

    pub fn basis(&self) -> &Arc<NoiseBasis<T>> {
        &self.basis
    }

    pub fn spatial_fields(&self) -> &[VectorField<T>] {
        &self.fields
    }

    fn check_len(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.len() {
            return Err(invalid(format!(
                "{} control parameters for a dictionary of {}",
                theta.len(),
                self.len()
            )));
        }
        Ok(())
    }

    /// `1/2 ||g(theta)||^2_{L^2_t H_0}`; parameters are mode-major.
    pub fn cost(&self, theta: &[f64]) -> Result<f64> {
        self.check_len(theta)?;
        let np = self.spec.profiles.len();
        let mut total = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let c = &theta[i * np..(i + 1) * np];
            let mut q = 0.0;
            for j in 0..np {
                for k in 0..np {
                    q += c[j] * self.gram[j][k] * c[k];
                }
            }
            total += w * q;
        }
        Ok(0.5 * total)
    }

    pub fn admits(&self, theta: &[f64]) -> Result<bool> {
        Ok(self.cost(theta)? <= self.spec.budget * (1.0 + 1e-12))
    }

    pub fn ensure_admitted(&self, theta: &[f64]) -> Result<()> {
        let cost = self.cost(theta)?;
        if cost > self.spec.budget * (1.0 + 1e-12) {
            return Err(Error::OutsideBudget {
                cost,
                budget: self.spec.budget,
            });
        }
        Ok(())
    }

    pub fn velocity(&self, theta: &[f64]) -> Result<Velocity<T>> {
        self.check_len(theta)?;
        let np = self.spec.profiles.len();
        let mut terms = Vec::new();
        for (j, p) in self.spec.profiles.iter().enumerate() {
            let mut field = VectorField::zeros(&self.domain);
            let mut any = false;
            for (i, phi) in self.fields.iter().enumerate() {
                let c = theta[i * np + j];
                if c != 0.0 {
                    field = field.axpby(T::one(), phi, T::lit(c));
                    any = true;
                }
            }
            if any {
                terms.push((field, p.profile(self.horizon)));
            }
        }
        if terms.is_empty() {
            return Ok(Velocity::zero(&self.domain));
        }
        Velocity::new(&self.domain, terms)
    }

    /// Noise coefficients `h(t)` with `g(theta)(t) = sum_k h_k(t) sigma_k`.
    pub fn noise_coefficients(&self, theta: &[f64], t: f64) -> Result<Vec<T>> {
        self.check_len(theta)?;
        let np = self.spec.profiles.len();
        let factors: Vec<f64> = self.spec.profiles.iter().map(|p| p.profile(self.horizon).value(t)).collect();
        let mut h = vec![T::zero(); self.basis.len()];
        for (i, coeffs) in self.coefficients.iter().enumerate() {
            let a: f64 = (0..np).map(|j| theta[i * np + j] * factors[j]).sum();
            if a == 0.0 {
                continue;
            }
            for (hk, ck) in h.iter_mut().zip(coeffs) {
                *hk = *hk + T::lit(a) * *ck;
            }
        }
        Ok(h)
    }
}

fn simpson(f: impl Fn(f64) -> f64, horizon: f64) -> f64 {
    const PANELS: usize = 2048;
    let h = horizon / PANELS as f64;
    let mut s = f(0.0) + f(horizon);
    for i in 1..PANELS {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    s * h / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::noise::{cameron_martin_norm, NoiseSpec};

    fn setup() -> (Arc<Domain<f64>>, Arc<NoiseBasis<f64>>) {
        let d = Domain::new(Grid::new(2, 16).unwrap()).unwrap();
        let b = Arc::new(NoiseBasis::build(NoiseSpec::new(2, 0.25, 4).unwrap()).unwrap());
        (d, b)
    }

    #[test]
    fn dictionary_size_limits() {
        assert!(ControlSpec::low_modes(2, 4, vec![ProfileKind::Constant], 1.0).is_ok());
        assert!(ControlSpec::low_modes(2, 5, vec![ProfileKind::Constant], 1.0).is_err());
        let mut spec = ControlSpec::low_modes(2, 1, vec![ProfileKind::Constant, ProfileKind::Constant], 1.0);
        assert!(spec.is_err());
        spec = ControlSpec::low_modes(2, 1, vec![ProfileKind::Bump], 1.0);
        let mut spec = spec.unwrap();
        spec.modes.push(ControlMode {
            lattice: vec![-1, 0],
            phase: Phase::Cos,
            polarization: 0,
        });
        assert!(spec.validate(2).is_err());
    }

    #[test]
    fn fields_are_solenoidal_and_in_noise_range() {
        let (d, basis) = setup();
        let spec = ControlSpec::low_modes(2, 4, vec![ProfileKind::Constant], 10.0).unwrap();
        let dict = ControlDictionary::build(&spec, &d, &basis, 1.0).unwrap();
        for (phi, h) in dict.fields.iter().zip(&dict.coefficients) {
            assert!(phi.relative_divergence() < 1e-12);
            let back = basis.assemble(&d, h).unwrap();
            for (a, b) in back.components().iter().zip(phi.components()) {
                assert!(a.max_abs_diff(b) < 1e-12);
            }
            // the coefficient norm is the Cameron-Martin norm
            let hh: f64 = h.iter().map(|v| v * v).sum();
            let w = basis.cameron_martin_scale() * phi.sobolev_norm(basis.spec().cameron_martin_order()).unwrap().powi(2);
            assert!((hh - w).abs() < 1e-10 * w, "{hh} vs {w}");
        }
        let far = ControlSpec {
            modes: vec![ControlMode {
                lattice: vec![5, 0],
                phase: Phase::Cos,
                polarization: 0,
            }],
            profiles: vec![ProfileKind::Constant],
            budget: 1.0,
        };
        assert!(ControlDictionary::build(&far, &d, &basis, 1.0).is_err());
    }

    #[test]
    fn cost_matches_quadrature_of_the_velocity() {
        let (d, basis) = setup();
        let profiles = vec![ProfileKind::Constant, ProfileKind::Linear, ProfileKind::HalfSine, ProfileKind::Bump];
        let spec = ControlSpec::low_modes(2, 2, profiles, 10.0).unwrap();
        let dict = ControlDictionary::build(&spec, &d, &basis, 1.0).unwrap();
        let theta: Vec<f64> = (0..dict.len()).map(|i| 0.1 * (i as f64 - 3.5)).collect();
        let v = dict.velocity(&theta).unwrap();
        let times: Vec<f64> = (0..=2000).map(|i| i as f64 / 2000.0).collect();
        let slices: Vec<_> = times.iter().map(|&t| v.at(t)).collect();
        let cm = cameron_martin_norm(&times, &slices, basis.spec()).unwrap();
        let expected = 0.5 * basis.cameron_martin_scale() * cm * cm;
        let cost = dict.cost(&theta).unwrap();
        assert!((cost - expected).abs() < 1e-5 * expected, "{cost} vs {expected}");
        for t in [0.0, 0.3, 0.9] {
            let h = dict.noise_coefficients(&theta, t).unwrap();
            let back = basis.assemble(&d, &h).unwrap();
            for (a, b) in back.components().iter().zip(v.at(t).components()) {
                assert!(a.max_abs_diff(b) < 1e-12);
            }
        }
        assert_eq!(dict.cost(&vec![0.0; dict.len()]).unwrap(), 0.0);
        assert!(dict.velocity(&vec![0.0; dict.len()]).unwrap().is_zero());
    }

    #[test]
    fn budget_is_enforced() {
        let (d, basis) = setup();
        let spec = ControlSpec::low_modes(2, 1, vec![ProfileKind::Constant], 0.01).unwrap();
        let dict = ControlDictionary::build(&spec, &d, &basis, 1.0).unwrap();
        assert!(dict.ensure_admitted(&[0.0, 0.0]).is_ok());
        assert!(matches!(dict.ensure_admitted(&[10.0, 0.0]), Err(Error::OutsideBudget { .. })));
    }
}
