//! Time integration of
//!
//! ```text
//! d rho + (b + g) . grad rho dt + eps sum_k sigma_k . grad rho dW^k = (1 + kappa) eps^2 Lap rho dt
//! ```
//!
//! in Itô form (Euler–Maruyama), in Stratonovich form (Heun, no Itô
//! corrector) and with a semi-Lagrangian transport step. The spectral
//! schemes keep `rho` as Fourier coefficients and dealias every transport
//! product; diffusion goes through an exact integrating factor unless the
//! explicit mode is requested.

use std::sync::Arc;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::drift::Velocity;
use crate::error::{invalid, Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::Domain;
use crate::interp::PeriodicCubic;
use crate::noise::{sample_coefficients, NoiseBasis, NoisePath, SpectralLayout};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ItoEuler,
    StratMidpoint,
    SemiLagrangian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diffusion {
    /// `exp(-nu |xi|^2 dt)` applied after the transport update.
    #[default]
    IntegratingFactor,
    /// Forward Euler on the Laplacian (subject to `nu |xi|^2 dt <= 2`).
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub kappa: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub scheme: Scheme,
    pub seed: u64,
    pub record_every: usize,
    #[serde(default)]
    pub diffusion: Diffusion,
    /// Bound on `dt * max|b + g| * max|xi|` for the spectral schemes.
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    /// Work limit of the Stratonovich step. `1` selects Heun's method;
    /// anything larger solves the implicit midpoint system (which conserves
    /// the L^2 norm of the Galerkin system exactly) by GMRES with at most
    /// this many Krylov iterations.
    #[serde(default = "default_corrector_passes")]
    pub corrector_passes: usize,
}

fn default_cfl() -> f64 {
    1.0
}

fn default_corrector_passes() -> usize {
    200
}

/// Relative residual at which the midpoint solve stops.
const CORRECTOR_TOLERANCE: f64 = 1e-13;

/// Krylov subspace size before GMRES restarts.
const GMRES_RESTART: usize = 40;

impl SolverConfig {
    pub fn new(epsilon: f64, dt: f64, horizon: f64, scheme: Scheme) -> Self {
        SolverConfig {
            epsilon,
            kappa: 0.0,
            dt,
            horizon,
            scheme,
            seed: 0,
            record_every: 1,
            diffusion: Diffusion::IntegratingFactor,
            cfl: default_cfl(),
            corrector_passes: default_corrector_passes(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_record_every(mut self, record_every: usize) -> Self {
        self.record_every = record_every;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon <= 1.0) {
            return Err(invalid(format!("epsilon = {} must lie in [0, 1]", self.epsilon)));
        }
        if !(self.kappa >= 0.0 && self.kappa < 1.0) {
            return Err(invalid(format!("kappa = {} must lie in [0, 1)", self.kappa)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid(format!("T = {} must be positive", self.horizon)));
        }
        if self.record_every == 0 {
            return Err(invalid("record_every must be >= 1"));
        }
        if !(self.cfl > 0.0) {
            return Err(invalid("CFL bound must be positive"));
        }
        if self.corrector_passes == 0 {
            return Err(invalid("corrector_passes must be >= 1"));
        }
        self.steps().map(|_| ())
    }

    /// Number of steps; `T / dt` must be an integer up to rounding.
    pub fn steps(&self) -> Result<usize> {
        let ratio = self.horizon / self.dt;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio.max(1.0) {
            return Err(invalid(format!(
                "T = {} is not an integer multiple of dt = {}",
                self.horizon, self.dt
            )));
        }
        Ok(steps as usize)
    }

    /// Total diffusivity `(1 + kappa) eps^2` of the Itô form.
    pub fn ito_diffusivity(&self) -> f64 {
        (1.0 + self.kappa) * self.epsilon * self.epsilon
    }

    fn explicit_diffusivity(&self) -> f64 {
        match self.scheme {
            Scheme::ItoEuler => self.ito_diffusivity(),
            // The Stratonovich forms carry only the extra kappa part.
            Scheme::StratMidpoint | Scheme::SemiLagrangian => self.kappa * self.epsilon * self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Solver,
    Characteristics,
    StochasticFlow,
}

#[derive(Debug, Clone)]
pub struct Snapshot<T: Real> {
    pub time: f64,
    pub step: usize,
    pub field: ScalarField<T>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TerminalDiagnostics {
    pub steps: usize,
    pub initial_l2: f64,
    pub final_l2: f64,
    pub max_l2: f64,
    /// `exp(||div(b + g)||_{L^1 L^inf}) ||rho_0||_{L^2}`.
    pub gronwall_bound: f64,
    pub initial_mean: f64,
    pub final_mean: f64,
}

/// Snapshots plus everything needed to replay them.
#[derive(Debug, Clone)]
pub struct Trajectory<T: Real> {
    pub config: SolverConfig,
    pub origin: Origin,
    pub drift_id: String,
    pub control_id: Option<String>,
    pub snapshots: Vec<Snapshot<T>>,
    /// Per-step Brownian coefficients; `None` only for deterministic
    /// reference trajectories.
    pub noise: Option<NoisePath<T>>,
    pub diagnostics: TerminalDiagnostics,
}

impl<T: Real> Trajectory<T> {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn initial(&self) -> &ScalarField<T> {
        &self.snapshots[0].field
    }

    pub fn terminal(&self) -> &ScalarField<T> {
        &self.snapshots[self.snapshots.len() - 1].field
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn domain(&self) -> &Arc<Domain<T>> {
        self.snapshots[0].field.domain()
    }

    pub fn fields(&self) -> impl Iterator<Item = &ScalarField<T>> {
        self.snapshots.iter().map(|s| &s.field)
    }
}

/// Reusable integrator for one configuration. Holds scratch buffers, so a
/// stepper serves one trajectory at a time; clone it for parallel paths.
#[derive(Clone)]
pub struct Stepper<T: Real> {
    domain: Arc<Domain<T>>,
    cfg: SolverConfig,
    velocity: Velocity<T>,
    steady: Option<Vec<Vec<T>>>,
    noise: Option<(Arc<NoiseBasis<T>>, SpectralLayout)>,
    gronwall_exponent: f64,
    /// Spectral diffusion factor per mode (multiplier or explicit rate).
    diffusion: Vec<T>,
    derivative: Vec<Vec<Complex<T>>>,
    interp: PeriodicCubic,
    smooth_interp: PeriodicCubic,
    grad: Vec<Complex<T>>,
    prod: Vec<Complex<T>>,
    disp: Vec<Vec<T>>,
    disp_next: Vec<Vec<T>>,
    noise_buf: Vec<Vec<Complex<T>>>,
}

impl<T: Real> std::fmt::Debug for Stepper<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stepper").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl<T: Real> Stepper<T> {
    /// `velocity` is the full transport velocity `b + g`.
    pub fn new(velocity: &Velocity<T>, basis: Option<&Arc<NoiseBasis<T>>>, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let domain = Arc::clone(velocity.domain());
        let grid = *domain.grid();
        let noise = match basis {
            Some(b) => Some((Arc::clone(b), b.layout(&domain)?)),
            None if cfg.epsilon > 0.0 => {
                return Err(invalid("epsilon > 0 needs a noise basis"));
            }
            None => None,
        };

        let kmax = grid.wavenumber_unit() * grid.dealias_cutoff() * (grid.dim as f64).sqrt();
        if cfg.scheme != Scheme::SemiLagrangian {
            let speed = velocity.speed_bound(cfg.horizon).as_f64();
            let courant = cfg.dt * speed * kmax;
            if courant > cfg.cfl {
                return Err(Error::Stability(format!(
                    "dt * max|b+g| * max|xi| = {courant:.3e} exceeds {}",
                    cfg.cfl
                )));
            }
        }
        let nu = cfg.explicit_diffusivity();
        if cfg.diffusion == Diffusion::Explicit {
            let top = (0..domain.len())
                .map(|i| domain.wavenumber_sq(i).as_f64())
                .fold(0.0, f64::max);
            if nu * top * cfg.dt > 2.0 {
                return Err(Error::Stability(format!(
                    "explicit diffusion: nu |xi|^2 dt = {:.3e} exceeds 2",
                    nu * top * cfg.dt
                )));
            }
        }
        let diffusion = (0..domain.len())
            .map(|i| {
                let rate = nu * domain.wavenumber_sq(i).as_f64() * cfg.dt;
                T::lit(match cfg.diffusion {
                    Diffusion::IntegratingFactor => (-rate).exp(),
                    Diffusion::Explicit => rate,
                })
            })
            .collect();
        let derivative = (0..grid.dim)
            .map(|axis| {
                (0..domain.len())
                    .map(|i| {
                        if domain.is_nyquist(i, axis) {
                            Complex::new(T::zero(), T::zero())
                        } else {
                            Complex::new(T::zero(), domain.wavevector(i)[axis])
                        }
                    })
                    .collect()
            })
            .collect();
        let steady = velocity.is_steady().then(|| {
            let v = velocity.at(0.0);
            v.components().iter().map(|c| c.values().to_vec()).collect()
        });
        let len = domain.len();
        let zero_c = Complex::new(T::zero(), T::zero());
        Ok(Stepper {
            gronwall_exponent: velocity.divergence_l1_linf(cfg.horizon).as_f64(),
            velocity: velocity.clone(),
            steady,
            noise,
            diffusion,
            derivative,
            interp: PeriodicCubic::monotone(grid),
            smooth_interp: PeriodicCubic::new(grid),
            grad: vec![zero_c; len],
            prod: vec![zero_c; len],
            disp: vec![vec![T::zero(); len]; grid.dim],
            disp_next: vec![vec![T::zero(); len]; grid.dim],
            noise_buf: vec![vec![zero_c; len]; grid.dim],
            cfg: *cfg,
            domain,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn domain(&self) -> &Arc<Domain<T>> {
        &self.domain
    }

    pub fn modes(&self) -> usize {
        self.noise.as_ref().map_or(0, |(b, _)| b.len())
    }

    /// `exp(||div(b + g)||_{L^1 L^inf})`.
    pub fn gronwall_factor(&self) -> f64 {
        self.gronwall_exponent.exp()
    }

    /// Samples the Brownian path of `cfg.seed`.
    pub fn sample_path(&self) -> Result<NoisePath<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.sample_path_with(&mut rng)
    }

    pub fn sample_path_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<NoisePath<T>> {
        let steps = self.cfg.steps()?;
        let dt = T::lit(self.cfg.dt);
        if self.modes() == 0 {
            return Ok(NoisePath::zeros(0, dt, steps));
        }
        NoisePath::sample(self.modes(), dt, steps, rng)
    }

    /// `out = dt u(t) + eps dW` on the grid.
    fn displacement(&mut self, t: f64, dw: &[T], next: bool) {
        let dt = T::lit(self.cfg.dt);
        let eps = T::lit(self.cfg.epsilon);
        let out = if next { &mut self.disp_next } else { &mut self.disp };
        for o in out.iter_mut() {
            o.fill(T::zero());
        }
        if let Some(steady) = &self.steady {
            if !self.velocity.is_zero() {
                for (o, v) in out.iter_mut().zip(steady) {
                    for (a, &b) in o.iter_mut().zip(v) {
                        *a = dt * b;
                    }
                }
            }
        } else {
            for (field, profile) in self.velocity.terms() {
                let f = dt * T::lit(profile.value(t));
                for (o, c) in out.iter_mut().zip(field.components()) {
                    for (a, &b) in o.iter_mut().zip(c.values()) {
                        *a = *a + f * b;
                    }
                }
            }
        }
        if let Some((basis, layout)) = &self.noise {
            if self.cfg.epsilon > 0.0 && dw.iter().any(|&c| c != T::zero()) {
                let zero = Complex::new(T::zero(), T::zero());
                for b in self.noise_buf.iter_mut() {
                    b.fill(zero);
                }
                basis.accumulate_spectral(layout, dw, &mut self.noise_buf);
                for (o, buf) in out.iter_mut().zip(self.noise_buf.iter_mut()) {
                    self.domain.inverse_in_place(buf);
                    for (a, c) in o.iter_mut().zip(buf.iter()) {
                        *a = *a + eps * c.re;
                    }
                }
            }
        }
    }

    /// `out = P[disp . grad rho]` in spectral space.
    fn transport(&mut self, rho_hat: &[Complex<T>], next: bool, out: &mut [Complex<T>]) {
        let disp = if next { &self.disp_next } else { &self.disp };
        let zero = Complex::new(T::zero(), T::zero());
        self.prod.fill(zero);
        for (axis, d) in disp.iter().enumerate() {
            for ((g, &r), &k) in self.grad.iter_mut().zip(rho_hat).zip(&self.derivative[axis]) {
                *g = r * k;
            }
            self.domain.inverse_in_place(&mut self.grad);
            for ((p, g), &u) in self.prod.iter_mut().zip(&self.grad).zip(d) {
                p.re = p.re + u * g.re;
            }
        }
        self.domain.forward_in_place(&mut self.prod);
        for (idx, (o, &p)) in out.iter_mut().zip(&self.prod).enumerate() {
            *o = if self.domain.is_retained(idx) { p } else { zero };
        }
    }

    fn apply_diffusion(&self, rho_hat: &mut [Complex<T>], before: Option<&[Complex<T>]>) {
        match self.cfg.diffusion {
            Diffusion::IntegratingFactor => {
                for (r, &f) in rho_hat.iter_mut().zip(&self.diffusion) {
                    *r = *r * f;
                }
            }
            Diffusion::Explicit => {
                let base = before.expect("explicit diffusion needs the old state");
                for ((r, &b), &rate) in rho_hat.iter_mut().zip(base).zip(&self.diffusion) {
                    *r = *r - b * rate;
                }
            }
        }
    }

    fn heun(&mut self, rho_hat: &[Complex<T>]) -> Vec<Complex<T>> {
        let zero = Complex::new(T::zero(), T::zero());
        let half = T::lit(0.5);
        let mut adv = vec![zero; rho_hat.len()];
        self.transport(rho_hat, false, &mut adv);
        let average: Vec<_> = rho_hat.iter().zip(&adv).map(|(&r, &a)| r - a * half).collect();
        self.transport(&average, false, &mut adv);
        rho_hat.iter().zip(&adv).map(|(&r, &a)| r - a).collect()
    }

    /// Solves `(I + A/2) x = (I - A/2) rho` with `A = P[D . grad]` by
    /// restarted GMRES. A plain fixed-point iteration only converges while
    /// `||A|| < 2`, which large noise increments at fine resolution break.
    fn midpoint_solve(&mut self, rho_hat: &[Complex<T>]) -> Vec<Complex<T>> {
        let len = rho_hat.len();
        let zero = Complex::new(T::zero(), T::zero());
        let half = T::lit(0.5);
        let mut work = vec![zero; len];
        self.transport(rho_hat, false, &mut work);
        let rhs: Vec<_> = rho_hat.iter().zip(&work).map(|(&r, &a)| r - a * half).collect();
        // initial guess: explicit Euler
        let mut x: Vec<_> = rho_hat.iter().zip(&work).map(|(&r, &a)| r - a).collect();
        let norm = |v: &[Complex<T>]| v.iter().map(|c| c.norm_sqr()).sum::<T>().sqrt();
        let target = T::lit(CORRECTOR_TOLERANCE) * norm(&rhs).max(T::min_positive_value());
        let mut budget = self.cfg.corrector_passes;
        let apply = |me: &mut Self, v: &[Complex<T>], out: &mut Vec<Complex<T>>| {
            me.transport(v, false, out);
            for (o, &vi) in out.iter_mut().zip(v) {
                *o = vi + *o * half;
            }
        };
        while budget > 0 {
            let mut r = vec![zero; len];
            apply(self, &x, &mut r);
            for (ri, &bi) in r.iter_mut().zip(&rhs) {
                *ri = bi - *ri;
            }
            let beta = norm(&r);
            if beta <= target {
                break;
            }
            let m = GMRES_RESTART.min(budget);
            let mut basis: Vec<Vec<Complex<T>>> = Vec::with_capacity(m + 1);
            basis.push(r.iter().map(|&c| c / beta).collect());
            let mut h = vec![vec![zero; m]; m + 1];
            let mut cs = vec![zero; m];
            let mut sn = vec![zero; m];
            let mut g = vec![zero; m + 1];
            g[0] = Complex::new(beta, T::zero());
            let mut used = 0;
            for j in 0..m {
                budget -= 1;
                let mut w = vec![zero; len];
                apply(self, &basis[j], &mut w);
                for (i, v) in basis.iter().enumerate() {
                    let hij: Complex<T> = v.iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
                    h[i][j] = hij;
                    for (wk, &vk) in w.iter_mut().zip(v) {
                        *wk = *wk - hij * vk;
                    }
                }
                let hn = norm(&w);
                h[j + 1][j] = Complex::new(hn, T::zero());
                for i in 0..j {
                    let t = cs[i].conj() * h[i][j] + sn[i].conj() * h[i + 1][j];
                    h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                    h[i][j] = t;
                }
                let (a, b) = (h[j][j], h[j + 1][j]);
                let r = (a.norm_sqr() + b.norm_sqr()).sqrt();
                if r == T::zero() {
                    used = j;
                    break;
                }
                cs[j] = a / r;
                sn[j] = b / r;
                h[j][j] = Complex::new(r, T::zero());
                h[j + 1][j] = zero;
                g[j + 1] = -sn[j] * g[j];
                g[j] = cs[j].conj() * g[j];
                used = j + 1;
                if g[j + 1].norm() <= target || hn == T::zero() {
                    break;
                }
                basis.push(w.iter().map(|&c| c / hn).collect());
            }
            let mut y = vec![zero; used];
            for i in (0..used).rev() {
                let mut acc = g[i];
                for k in i + 1..used {
                    acc = acc - h[i][k] * y[k];
                }
                y[i] = acc / h[i][i];
            }
            for (yi, v) in y.iter().zip(&basis) {
                for (xk, &vk) in x.iter_mut().zip(v) {
                    *xk = *xk + *yi * vk;
                }
            }
            if used == 0 {
                break;
            }
        }
        x
    }

    /// Advances the spectral state by one step starting at time `t`.
    pub fn step_spectral(&mut self, rho_hat: &mut Vec<Complex<T>>, t: f64, dw: &[T]) -> Result<()> {
        if dw.len() != self.modes() {
            return Err(Error::MissingNoiseLog(format!(
                "{} coefficients supplied for {} modes",
                dw.len(),
                self.modes()
            )));
        }
        let needs_transport = !self.velocity.is_zero() || (self.cfg.epsilon > 0.0 && self.modes() > 0);
        let zero = Complex::new(T::zero(), T::zero());
        match self.cfg.scheme {
            Scheme::ItoEuler => {
                let old = (self.cfg.diffusion == Diffusion::Explicit).then(|| rho_hat.clone());
                if needs_transport {
                    self.displacement(t, dw, false);
                    let mut adv = vec![zero; rho_hat.len()];
                    self.transport(rho_hat, false, &mut adv);
                    for (r, a) in rho_hat.iter_mut().zip(&adv) {
                        *r = *r - *a;
                    }
                }
                self.apply_diffusion(rho_hat, old.as_deref());
            }
            Scheme::StratMidpoint => {
                let old = (self.cfg.diffusion == Diffusion::Explicit).then(|| rho_hat.clone());
                if needs_transport {
                    self.displacement(t, dw, false);
                    if !self.velocity.is_steady() {
                        // transport at the midpoint uses the averaged velocity
                        self.displacement(t + self.cfg.dt, dw, true);
                        let half = T::lit(0.5);
                        for (a, b) in self.disp.iter_mut().zip(&self.disp_next) {
                            for (x, &y) in a.iter_mut().zip(b) {
                                *x = half * (*x + y);
                            }
                        }
                    }
                    let current = if self.cfg.corrector_passes == 1 {
                        self.heun(rho_hat)
                    } else {
                        self.midpoint_solve(rho_hat)
                    };
                    if !current.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
                        return Err(Error::BlowUp {
                            time: t + self.cfg.dt,
                            reason: "corrector produced non-finite values".into(),
                        });
                    }
                    *rho_hat = current;
                }
                self.apply_diffusion(rho_hat, old.as_deref());
            }
            Scheme::SemiLagrangian => {
                let old = (self.cfg.diffusion == Diffusion::Explicit).then(|| rho_hat.clone());
                if needs_transport {
                    let values = self.domain.inverse(rho_hat);
                    let next = self.semi_lagrangian(&values, t, dw);
                    *rho_hat = self.domain.forward(&next);
                }
                if self.cfg.kappa > 0.0 && self.cfg.epsilon > 0.0 {
                    self.apply_diffusion(rho_hat, old.as_deref());
                }
            }
        }
        Ok(())
    }

    /// Pull-back along the midpoint foot point `x - D(x - D(x)/2)`.
    fn semi_lagrangian(&mut self, values: &[T], t: f64, dw: &[T]) -> Vec<T> {
        self.displacement(t + 0.5 * self.cfg.dt, dw, false);
        let grid = *self.domain.grid();
        let dim = grid.dim;
        let half = T::lit(0.5);
        let mut out = vec![T::zero(); values.len()];
        for (idx, o) in out.iter_mut().enumerate() {
            let x = grid.point(idx);
            let mut mid = [T::zero(); 3];
            for a in 0..dim {
                mid[a] = T::lit(x[a]) - half * self.disp[a][idx];
            }
            let mut foot = [T::zero(); 3];
            for a in 0..dim {
                foot[a] = T::lit(x[a]) - self.smooth_interp.sample(&self.disp[a], &mid[..dim]);
            }
            *o = self.interp.sample(values, &foot[..dim]);
        }
        out
    }

    /// Runs the full horizon along `path`.
    pub fn run(&mut self, rho0: &ScalarField<T>, path: &NoisePath<T>) -> Result<Trajectory<T>> {
        if rho0.grid() != self.domain.grid() {
            return Err(Error::GridMismatch(format!("rho_0 on {} vs {}", rho0.grid(), self.domain.grid())));
        }
        rho0.ensure_finite()?;
        let steps = self.cfg.steps()?;
        if path.steps() != steps || path.modes() != self.modes() {
            return Err(Error::MissingNoiseLog(format!(
                "path has {} steps x {} modes, run needs {steps} x {}",
                path.steps(),
                path.modes(),
                self.modes()
            )));
        }
        if (path.dt().as_f64() - self.cfg.dt).abs() > 1e-12 * self.cfg.dt {
            return Err(invalid(format!("path dt {} differs from dt {}", path.dt(), self.cfg.dt)));
        }
        let volume = T::lit(self.domain.grid().volume());
        let energy = |hat: &[Complex<T>]| (hat.iter().map(|c| c.norm_sqr()).sum::<T>() * volume).sqrt();
        let mut rho_hat = rho0.spectral().to_vec();
        let initial_l2 = energy(&rho_hat).as_f64();
        let limit = 10.0 * self.gronwall_factor() * initial_l2;
        let mut max_l2 = initial_l2;
        let mut snapshots = vec![Snapshot {
            time: 0.0,
            step: 0,
            field: rho0.clone(),
        }];
        for n in 0..steps {
            let t = n as f64 * self.cfg.dt;
            self.step_spectral(&mut rho_hat, t, path.step(n))
                .map_err(|e| Error::StepFailed {
                    time: t,
                    source: Box::new(e),
                })?;
            let l2 = energy(&rho_hat).as_f64();
            if !l2.is_finite() || l2 > limit.max(f64::MIN_POSITIVE) && l2 > initial_l2 * (1.0 + 1e-12) {
                let time = t + self.cfg.dt;
                return Err(Error::StepFailed {
                    time,
                    source: Box::new(Error::BlowUp {
                        time,
                        reason: format!("||rho||_L2 = {l2:.3e} exceeds 10x Gronwall bound {:.3e}", limit / 10.0),
                    }),
                });
            }
            max_l2 = max_l2.max(l2);
            if (n + 1) % self.cfg.record_every == 0 || n + 1 == steps {
                snapshots.push(Snapshot {
                    time: (n + 1) as f64 * self.cfg.dt,
                    step: n + 1,
                    field: ScalarField::from_spectral_unchecked(&self.domain, rho_hat.clone()),
                });
            }
        }
        let last = &snapshots[snapshots.len() - 1].field;
        let diagnostics = TerminalDiagnostics {
            steps,
            initial_l2,
            final_l2: last.l2_norm().as_f64(),
            max_l2,
            gronwall_bound: self.gronwall_factor() * initial_l2,
            initial_mean: rho0.integral().as_f64(),
            final_mean: last.integral().as_f64(),
        };
        Ok(Trajectory {
            config: self.cfg,
            origin: Origin::Solver,
            drift_id: String::new(),
            control_id: None,
            snapshots,
            noise: Some(path.clone()),
            diagnostics,
        })
    }
}

fn combined<T: Real>(b: &Velocity<T>, g: Option<&Velocity<T>>) -> Result<Velocity<T>> {
    match g {
        Some(g) if !g.is_zero() => b.plus(g),
        _ => Ok(b.clone()),
    }
}

/// Integrates from `rho0` with the Brownian path drawn from `cfg.seed`.
pub fn evolve<T: Real>(
    rho0: &ScalarField<T>,
    b: &Velocity<T>,
    g: Option<&Velocity<T>>,
    basis: Option<&Arc<NoiseBasis<T>>>,
    cfg: &SolverConfig,
) -> Result<Trajectory<T>> {
    let mut stepper = Stepper::new(&combined(b, g)?, basis, cfg)?;
    let path = stepper.sample_path()?;
    stepper.run(rho0, &path)
}

/// Integrates along a given Brownian path (e.g. a coarsened fine path).
pub fn evolve_on_path<T: Real>(
    rho0: &ScalarField<T>,
    b: &Velocity<T>,
    g: Option<&Velocity<T>>,
    basis: Option<&Arc<NoiseBasis<T>>>,
    cfg: &SolverConfig,
    path: &NoisePath<T>,
) -> Result<Trajectory<T>> {
    Stepper::new(&combined(b, g)?, basis, cfg)?.run(rho0, path)
}

fn single_step<T: Real, R: Rng + ?Sized>(
    scheme: Scheme,
    rho: &ScalarField<T>,
    b: &Velocity<T>,
    g: Option<&Velocity<T>>,
    basis: Option<&Arc<NoiseBasis<T>>>,
    cfg: &SolverConfig,
    t: f64,
    rng: &mut R,
) -> Result<(ScalarField<T>, Vec<T>)> {
    let mut cfg = *cfg;
    cfg.scheme = scheme;
    cfg.horizon = cfg.dt;
    let mut stepper = Stepper::new(&combined(b, g)?, basis, &cfg)?;
    let mut dw = Vec::new();
    if stepper.modes() > 0 {
        sample_coefficients(stepper.modes(), T::lit(cfg.dt), rng, &mut dw);
    }
    let mut hat = rho.spectral().to_vec();
    stepper.step_spectral(&mut hat, t, &dw)?;
    let out = ScalarField::from_spectral_unchecked(rho.domain(), hat);
    out.ensure_finite().map_err(|_| Error::BlowUp {
        time: t + cfg.dt,
        reason: "non-finite field".into(),
    })?;
    Ok((out, dw))
}

/// One Euler–Maruyama step; returns the new field and the coefficients used.
pub fn step_ito<T: Real, R: Rng + ?Sized>(
    rho: &ScalarField<T>,
    b: &Velocity<T>,
    g: Option<&Velocity<T>>,
    basis: Option<&Arc<NoiseBasis<T>>>,
    cfg: &SolverConfig,
    t: f64,
    rng: &mut R,
) -> Result<(ScalarField<T>, Vec<T>)> {
    single_step(Scheme::ItoEuler, rho, b, g, basis, cfg, t, rng)
}

/// One Heun step of the Stratonovich form.
pub fn step_stratonovich<T: Real, R: Rng + ?Sized>(
    rho: &ScalarField<T>,
    b: &Velocity<T>,
    g: Option<&Velocity<T>>,
    basis: Option<&Arc<NoiseBasis<T>>>,
    cfg: &SolverConfig,
    t: f64,
    rng: &mut R,
) -> Result<(ScalarField<T>, Vec<T>)> {
    single_step(Scheme::StratMidpoint, rho, b, g, basis, cfg, t, rng)
}

/// Residual of the weak (Itô) formulation against a test function `phi`,
/// one value per snapshot. Integrals use left-point sums over the snapshot
/// intervals and the logged noise coefficients.
pub fn weak_residual<T: Real>(
    traj: &Trajectory<T>,
    b: &Velocity<T>,
    g: Option<&Velocity<T>>,
    basis: Option<&Arc<NoiseBasis<T>>>,
    phi: &ScalarField<T>,
) -> Result<Vec<(f64, T)>> {
    let cfg = &traj.config;
    let velocity = combined(b, g)?;
    let domain = traj.domain();
    let eps = T::lit(cfg.epsilon);
    let noisy = cfg.epsilon > 0.0 && basis.is_some();
    let path = match (&traj.noise, noisy) {
        (Some(p), _) => Some(p),
        (None, true) => return Err(Error::MissingNoiseLog("trajectory carries no coefficient log".into())),
        (None, false) => None,
    };
    let grad_phi = phi.gradient();
    let lap_phi = phi.laplacian();
    let nu = T::lit(cfg.ito_diffusivity());
    let base = traj.initial().inner(phi);
    let mut accumulated = T::zero();
    let mut out = vec![(0.0, T::zero())];
    for w in traj.snapshots.windows(2) {
        let (a, z) = (&w[0], &w[1]);
        let dt = T::lit(z.time - a.time);
        let rho = &a.field;
        let u = velocity.at(a.time);
        let mut inc = dt * transport_pairing(&u, rho, &grad_phi, phi);
        if noisy {
            if let (Some(path), Some(basis)) = (path, basis) {
                let dw = path.increment_between(a.step, z.step);
                let field = basis.assemble(domain, &dw)?;
                inc = inc + eps * transport_pairing(&field, rho, &grad_phi, phi);
            }
        }
        inc = inc + nu * dt * rho.inner(&lap_phi);
        accumulated = accumulated + inc;
        out.push((z.time, z.field.inner(phi) - base - accumulated));
    }
    Ok(out)
}

/// `<u rho, grad phi> + <div(u) rho, phi>`.
fn transport_pairing<T: Real>(u: &VectorField<T>, rho: &ScalarField<T>, grad_phi: &VectorField<T>, phi: &ScalarField<T>) -> T {
    let cell = T::lit(rho.grid().cell_volume());
    let div = u.divergence();
    let r = rho.values();
    let mut sum = T::zero();
    for i in 0..r.len() {
        let mut flux = T::zero();
        for (c, gp) in u.components().iter().zip(grad_phi.components()) {
            flux = flux + c.values()[i] * gp.values()[i];
        }
        sum = sum + r[i] * (flux + div.values()[i] * phi.values()[i]);
    }
    sum * cell
}
