//! Monte-Carlo drivers: zero-noise convergence, tail probabilities with and
//! without a Girsanov tilt, the dictionary rate function, the variational
//! Laplace estimator and the dissipation tail check.
//!
//! Path `i` of every ensemble draws its Brownian increments from ChaCha8
//! stream `i` of the master seed, so ensembles at different epsilon or
//! under different controls share common random numbers.

use std::io::Write;
use std::sync::{Arc, Mutex};

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlDictionary;
use crate::diagnostics::{dissipation_measure, path_distance, Metric, MetricOptions, Partition};
use crate::drift::Velocity;
use crate::error::{invalid, Error, Result};
use crate::field::ScalarField;
use crate::noise::NoiseBasis;
use crate::reference::{renormalized_reference, ReferenceConfig};
use crate::scalar::Real;
use crate::solver::{SolverConfig, Stepper, Trajectory};

/// Everything an ensemble needs besides epsilon and the control.
#[derive(Debug, Clone)]
pub struct Ensemble<T: Real> {
    pub rho0: ScalarField<T>,
    pub b: Velocity<T>,
    pub basis: Arc<NoiseBasis<T>>,
    /// Scheme, step, horizon and recording; `epsilon` and `seed` are
    /// overridden per run.
    pub cfg: SolverConfig,
    pub master_seed: u64,
}

pub fn path_rng(master: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(path);
    rng
}

impl<T: Real> Ensemble<T> {
    fn config(&self, epsilon: f64) -> SolverConfig {
        let mut cfg = self.cfg;
        cfg.epsilon = epsilon;
        cfg.seed = self.master_seed;
        cfg
    }

    /// Runs `m` paths under drift `b + g` and maps each trajectory through
    /// `f`. Results come back in path order.
    pub fn map_paths<R: Send>(
        &self,
        epsilon: f64,
        g: Option<&Velocity<T>>,
        m: usize,
        f: impl Fn(usize, &Trajectory<T>) -> Result<R> + Sync,
    ) -> Result<Vec<R>> {
        let velocity = match g {
            Some(g) if !g.is_zero() => self.b.plus(g)?,
            _ => self.b.clone(),
        };
        let cfg = self.config(epsilon);
        let stepper = Stepper::new(&velocity, Some(&self.basis), &cfg)?;
        (0..m)
            .into_par_iter()
            .map_init(
                || stepper.clone(),
                |st, i| {
                    let mut rng = path_rng(self.master_seed, i as u64);
                    let path = st.sample_path_with(&mut rng)?;
                    let traj = st.run(&self.rho0, &path)?;
                    f(i, &traj)
                },
            )
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("empty sample"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Stability("non-finite value in sample".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Ok(Summary {
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            mean,
            stderr: (var / n).sqrt(),
            count: values.len(),
        })
    }
}

/// One-sided 95% upper bound on a probability after zero hits in `m`
/// independent trials.
pub fn zero_hit_bound(m: usize) -> f64 {
    1.0 - 0.05f64.powf(1.0 / m as f64)
}

fn check_decreasing(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid("epsilon grid is empty"));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) || grid.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(invalid(format!("epsilon grid {grid:?} must be strictly decreasing in (0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub epsilon: f64,
    #[serde(flatten)]
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub metric: Metric,
    pub rows: Vec<ConvergenceRow>,
    /// Medians strictly decrease along the grid.
    pub monotone: bool,
    pub final_over_initial: f64,
    pub reference_not_cauchy: bool,
}

/// Distribution of `d(rho^eps, rho_ref)` over `m` paths per epsilon.
pub fn zero_noise_study<T: Real>(
    ens: &Ensemble<T>,
    eps_grid: &[f64],
    m: usize,
    metric: Metric,
    opts: &MetricOptions,
    schedule: &[f64],
    ode_dt: f64,
) -> Result<ConvergenceReport> {
    check_decreasing(eps_grid)?;
    if m == 0 {
        return Err(invalid("need at least one path"));
    }
    let reference = renormalized_reference(
        &ens.rho0,
        &ens.b,
        None,
        schedule,
        &ReferenceConfig::matching(&ens.cfg, ode_dt),
    )?;
    let mut rows = Vec::new();
    for &eps in eps_grid {
        let d = ens.map_paths(eps, None, m, |_, traj| {
            Ok(path_distance(traj, &reference.trajectory, metric, opts)?.value)
        })?;
        rows.push(ConvergenceRow {
            epsilon: eps,
            summary: Summary::of(&d)?,
        });
    }
    let medians: Vec<f64> = rows.iter().map(|r| r.summary.median).collect();
    Ok(ConvergenceReport {
        metric,
        monotone: medians.windows(2).all(|w| w[1] < w[0]),
        final_over_initial: medians[medians.len() - 1] / medians[0],
        rows,
        reference_not_cauchy: reference.not_cauchy,
    })
}

/// A control from a dictionary, with its noise coefficients tabulated on
/// the solver's time grid.
pub struct Tilt<'a, T: Real> {
    pub dictionary: &'a ControlDictionary<T>,
    pub theta: Vec<f64>,
    table: Vec<Vec<T>>,
    velocity: Velocity<T>,
}

impl<'a, T: Real> Tilt<'a, T> {
    pub fn new(dictionary: &'a ControlDictionary<T>, theta: &[f64], cfg: &SolverConfig) -> Result<Self> {
        dictionary.ensure_admitted(theta)?;
        let steps = cfg.steps()?;
        let table = (0..steps)
            .map(|n| dictionary.noise_coefficients(theta, n as f64 * cfg.dt))
            .collect::<Result<_>>()?;
        Ok(Tilt {
            dictionary,
            theta: theta.to_vec(),
            table,
            velocity: dictionary.velocity(theta)?,
        })
    }

    pub fn velocity(&self) -> &Velocity<T> {
        &self.velocity
    }

    /// `log dP/dQ = -(1/eps) sum h_n . dW_n - (1/(2 eps^2)) sum |h_n|^2 dt`
    /// evaluated on the logged increments of a tilted run.
    pub fn log_likelihood_ratio(&self, traj: &Trajectory<T>) -> Result<f64> {
        if self.velocity.is_zero() {
            return Ok(0.0);
        }
        let eps = traj.config.epsilon;
        if !(eps > 0.0) {
            return Err(invalid("a nonzero tilt needs epsilon > 0"));
        }
        let path = traj
            .noise
            .as_ref()
            .ok_or_else(|| Error::MissingNoiseLog("the likelihood ratio needs the increments".into()))?;
        if path.steps() != self.table.len() || path.modes() != self.dictionary.basis().len() {
            return Err(Error::MissingNoiseLog("logged path does not match the control table".into()));
        }
        let dt = traj.config.dt;
        let mut linear = 0.0;
        let mut quadratic = 0.0;
        for (n, h) in self.table.iter().enumerate() {
            for (hk, wk) in h.iter().zip(path.step(n)) {
                linear += (*hk * *wk).as_f64();
                quadratic += hk.as_f64().powi(2);
            }
        }
        Ok(-linear / eps - 0.5 * quadratic * dt / (eps * eps))
    }

    /// `(1/2) sum |h_n|^2 dt`, the left-point Cameron–Martin cost.
    pub fn discrete_cost(&self, dt: f64) -> f64 {
        0.5 * dt
            * self
                .table
                .iter()
                .flat_map(|h| h.iter().map(|v| v.as_f64().powi(2)))
                .sum::<f64>()
    }
}

/// One path under drift `b + g(theta)` with the Brownian path of
/// `cfg.seed`, plus the log-likelihood ratio that reweights it to the
/// untilted law.
pub fn girsanov_tilted_sampler<T: Real>(
    rho0: &ScalarField<T>,
    b: &Velocity<T>,
    dictionary: &ControlDictionary<T>,
    theta: &[f64],
    cfg: &SolverConfig,
) -> Result<(Trajectory<T>, f64)> {
    let tilt = Tilt::new(dictionary, theta, cfg)?;
    let traj = crate::solver::evolve(rho0, b, Some(tilt.velocity()), Some(dictionary.basis()), cfg)?;
    let log_ratio = tilt.log_likelihood_ratio(&traj)?;
    Ok((traj, log_ratio))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Naive,
    Tilted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub epsilon: f64,
    pub p_hat: f64,
    pub stderr: f64,
    /// Absent when there were no hits.
    pub eps2_log_p: Option<f64>,
    /// Effective sample size; `m` for the naive estimator.
    pub n_eff: f64,
    pub hits: usize,
    pub paths: usize,
    /// 95% upper bound reported instead of a zero estimate.
    pub upper_bound: Option<f64>,
}

impl TailRow {
    fn naive(epsilon: f64, hits: &[bool]) -> Self {
        let m = hits.len();
        let k = hits.iter().filter(|&&h| h).count();
        let p = k as f64 / m as f64;
        TailRow {
            epsilon,
            p_hat: p,
            stderr: (p * (1.0 - p) / m as f64).sqrt(),
            eps2_log_p: (k > 0).then(|| epsilon * epsilon * p.ln()),
            n_eff: m as f64,
            hits: k,
            paths: m,
            upper_bound: (k == 0).then(|| zero_hit_bound(m)),
        }
    }

    /// Self-normalized importance sampling.
    fn tilted(epsilon: f64, hits: &[bool], log_w: &[f64]) -> Self {
        let m = hits.len();
        let k = hits.iter().filter(|&&h| h).count();
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let sum: f64 = w.iter().sum();
        let sum_sq: f64 = w.iter().map(|v| v * v).sum();
        let p = w.iter().zip(hits).filter(|(_, &h)| h).map(|(v, _)| v).sum::<f64>() / sum;
        let var = w
            .iter()
            .zip(hits)
            .map(|(v, &h)| v * v * (if h { 1.0 } else { 0.0 } - p).powi(2))
            .sum::<f64>()
            / (sum * sum);
        TailRow {
            epsilon,
            p_hat: p,
            stderr: var.sqrt(),
            eps2_log_p: (k > 0 && p > 0.0).then(|| epsilon * epsilon * p.ln()),
            n_eff: sum * sum / sum_sq,
            hits: k,
            paths: m,
            upper_bound: (k == 0).then(|| zero_hit_bound(m)),
        }
    }

    pub fn zero_hits(&self) -> bool {
        self.hits == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailEstimate {
    pub estimator: Estimator,
    pub tilt: Option<Vec<f64>>,
    pub rows: Vec<TailRow>,
    pub flags: Vec<String>,
}

impl TailEstimate {
    fn new(estimator: Estimator, tilt: Option<Vec<f64>>, rows: Vec<TailRow>) -> Self {
        let flags = rows
            .iter()
            .filter(|r| r.zero_hits())
            .map(|r| {
                format!(
                    "epsilon = {}: no hits in {} paths, p < {:.3e} at 95%; use a tilt",
                    r.epsilon,
                    r.paths,
                    r.upper_bound.unwrap_or(1.0)
                )
            })
            .collect();
        TailEstimate {
            estimator,
            tilt,
            rows,
            flags,
        }
    }

    pub fn p_non_increasing(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].p_hat <= w[0].p_hat)
    }

    /// `eps^2 log p_hat` is defined on every row and non-increasing along
    /// the (decreasing) grid.
    pub fn speed_non_increasing(&self) -> bool {
        let s: Option<Vec<f64>> = self.rows.iter().map(|r| r.eps2_log_p).collect();
        s.is_some_and(|s| s.windows(2).all(|w| w[1] <= w[0]))
    }
}

pub type Event<'a, T> = dyn Fn(&Trajectory<T>) -> Result<bool> + Sync + 'a;

/// Probability of `event` per epsilon, naive or (with `tilt`) importance
/// sampled under drift `b + g(theta)`.
pub fn ldp_tail_estimate<T: Real>(
    ens: &Ensemble<T>,
    event: &Event<'_, T>,
    eps_grid: &[f64],
    m: usize,
    tilt: Option<(&ControlDictionary<T>, &[f64])>,
) -> Result<TailEstimate> {
    check_decreasing(eps_grid)?;
    if m == 0 {
        return Err(invalid("need at least one path"));
    }
    let tilt = tilt.map(|(d, theta)| Tilt::new(d, theta, &ens.cfg)).transpose()?;
    let mut rows = Vec::new();
    for &eps in eps_grid {
        match &tilt {
            None => {
                let hits = ens.map_paths(eps, None, m, |_, traj| event(traj))?;
                rows.push(TailRow::naive(eps, &hits));
            }
            Some(tilt) => {
                let out = ens.map_paths(eps, Some(tilt.velocity()), m, |_, traj| {
                    Ok((event(traj)?, tilt.log_likelihood_ratio(traj)?))
                })?;
                let (hits, log_w): (Vec<bool>, Vec<f64>) = out.into_iter().unzip();
                rows.push(TailRow::tilted(eps, &hits, &log_w));
            }
        }
    }
    Ok(match tilt {
        None => TailEstimate::new(Estimator::Naive, None, rows),
        Some(t) => TailEstimate::new(Estimator::Tilted, Some(t.theta.clone()), rows),
    })
}

/// `sup_t ||a_t - b_t||_{H^s}` for trajectories on the same time grid.
pub fn sup_sobolev_distance<T: Real>(a: &Trajectory<T>, b: &Trajectory<T>, s: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid("trajectories have different snapshot counts"));
    }
    let mut sup = 0.0f64;
    for (x, y) in a.fields().zip(b.fields()) {
        sup = sup.max(x.sub(y).sobolev_norm(s)?.as_f64());
    }
    Ok(sup)
}

/// `{ sup_t ||rho_t - ref_t||_{H^{-1}} >= delta }`.
pub fn deviation_event<'a, T: Real>(reference: &'a Trajectory<T>, delta: f64) -> impl Fn(&Trajectory<T>) -> Result<bool> + Sync + 'a {
    move |traj| Ok(sup_sobolev_distance(traj, reference, -1.0)? >= delta)
}

/// A control that steers the noise-free path to `sup_t ||rho - ref||_{H^s}
/// = level`: the dictionary axis with the largest deviation per unit cost,
/// rescaled by bisection. The returned parameters are admitted.
pub fn steer_toward<T: Real>(
    ens: &Ensemble<T>,
    dict: &ControlDictionary<T>,
    reference: &Trajectory<T>,
    s: f64,
    level: f64,
) -> Result<Vec<f64>> {
    const BISECTIONS: usize = 40;
    if !(level > 0.0) {
        return Err(invalid("steering level must be positive"));
    }
    let scales = unit_scales(dict)?;
    let deviation = |theta: &[f64]| -> Result<f64> {
        let g = dict.velocity(theta)?;
        let out = ens.map_paths(0.0, Some(&g), 1, |_, traj| sup_sobolev_distance(traj, reference, s))?;
        Ok(out[0])
    };
    let axis = |i: usize, c: f64| -> Vec<f64> {
        let mut theta = vec![0.0; dict.len()];
        theta[i] = c * scales[i];
        theta
    };
    // unit cost along every axis is 1/2
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..dict.len() {
        let dev = deviation(&axis(i, 1.0))?;
        if dev > best.1 {
            best = (i, dev);
        }
    }
    let c_max = (2.0 * dict.spec().budget).sqrt();
    if deviation(&axis(best.0, c_max))? < level {
        return Err(Error::OutsideBudget {
            cost: f64::INFINITY,
            budget: dict.spec().budget,
        });
    }
    let (mut lo, mut hi) = (0.0, c_max);
    for _ in 0..BISECTIONS {
        let mid = 0.5 * (lo + hi);
        if deviation(&axis(best.0, mid))? < level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(axis(best.0, hi))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_evaluations: usize,
    /// Initial simplex edge in units where the cost is `|u|^2 / 2`.
    pub initial_step: f64,
    /// Nelder-Mead restarts from the incumbent with a shrunken simplex.
    pub restarts: usize,
    pub sd_tolerance: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            max_evaluations: 2000,
            initial_step: 0.5,
            restarts: 3,
            sd_tolerance: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Incumbent {
    objective: f64,
    u: Vec<f64>,
    evaluations: usize,
    failures: usize,
}

/// Objective over normalized coordinates `u` (cost `~ |u|^2 / 2`), with a
/// record of the best point seen.
struct Problem<'a> {
    eval: &'a (dyn Fn(&[f64]) -> Result<f64> + Sync),
    best: Mutex<Incumbent>,
    limit: usize,
}

impl CostFunction for Problem<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        {
            let best = self.best.lock().unwrap();
            if best.evaluations >= self.limit {
                // out of budget: report a value that never wins
                return Ok(f64::MAX);
            }
        }
        let value = (self.eval)(u);
        let mut best = self.best.lock().unwrap();
        best.evaluations += 1;
        let value = match value {
            Ok(v) if v.is_finite() => v,
            _ => {
                best.failures += 1;
                f64::MAX
            }
        };
        if value < best.objective {
            best.objective = value;
            best.u = u.clone();
        }
        Ok(value)
    }
}

/// Derivative-free minimization starting from the origin, which is always
/// evaluated first.
fn minimize(dim: usize, eval: &(dyn Fn(&[f64]) -> Result<f64> + Sync), opts: &OptimizerOptions) -> Result<Incumbent> {
    let origin = vec![0.0; dim];
    let problem = Problem {
        eval,
        best: Mutex::new(Incumbent {
            objective: f64::INFINITY,
            u: origin.clone(),
            evaluations: 0,
            failures: 0,
        }),
        limit: opts.max_evaluations.max(1),
    };
    problem.cost(&origin).map_err(|e| invalid(e.to_string()))?;
    let mut step = opts.initial_step;
    for _ in 0..=opts.restarts {
        let (start, done) = {
            let best = problem.best.lock().unwrap();
            (best.u.clone(), best.evaluations >= problem.limit)
        };
        if done || dim == 0 {
            break;
        }
        let mut simplex = vec![start.clone()];
        for i in 0..dim {
            let mut p = start.clone();
            p[i] += step;
            simplex.push(p);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(opts.sd_tolerance)
            .map_err(|e| invalid(e.to_string()))?;
        let problem_ref = &problem;
        Executor::new(ProblemRef(problem_ref), solver)
            .configure(|s| s.max_iters(opts.max_evaluations as u64))
            .run()
            .map_err(|e| Error::Stability(format!("optimizer failed: {e}")))?;
        step *= 0.3;
    }
    Ok(problem.best.into_inner().unwrap())
}

struct ProblemRef<'a, 'b>(&'a Problem<'b>);

impl CostFunction for ProblemRef<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        self.0.cost(u)
    }
}

/// Map from normalized coordinates to dictionary parameters: `theta_i =
/// u_i / sqrt(2 cost(e_i))`, so the cost is `|u|^2 / 2` along each axis.
fn unit_scales<T: Real>(dict: &ControlDictionary<T>) -> Result<Vec<f64>> {
    (0..dict.len())
        .map(|i| {
            let mut e = vec![0.0; dict.len()];
            e[i] = 1.0;
            Ok(1.0 / (2.0 * dict.cost(&e)?).sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateOptions {
    /// Weight of the squared residual in the objective.
    pub penalty: f64,
    /// Residual below which the target counts as reproduced.
    pub tolerance: f64,
    /// RK4 step of the controlled characteristics.
    pub ode_dt: f64,
    pub metric: MetricOptions,
    pub optimizer: OptimizerOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFunctionReport {
    /// `1/2 ||g*||^2`.
    pub value: f64,
    pub theta: Vec<f64>,
    /// `d_scriptE(rho^{rho_0, g*}, rho_target)`.
    pub residual: f64,
    pub objective: f64,
    pub residual_at_zero: f64,
    pub evaluations: usize,
    pub failed_evaluations: usize,
    /// Residual within tolerance.
    pub converged: bool,
}

/// Minimizes `1/2 ||g(theta)||^2 + penalty d_scriptE(rho^{rho_0, g(theta)},
/// target)^2` over the dictionary. Controlled paths are characteristics of
/// `b + g(theta)` on the target's snapshot grid.
pub fn rate_function_eval<T: Real>(
    target: &Trajectory<T>,
    rho0: &ScalarField<T>,
    b: &Velocity<T>,
    dict: &ControlDictionary<T>,
    opts: &RateOptions,
) -> Result<RateFunctionReport> {
    if !(opts.penalty > 0.0 && opts.tolerance >= 0.0) {
        return Err(invalid("penalty must be positive and tolerance non-negative"));
    }
    let rc = ReferenceConfig {
        horizon: target.config.horizon,
        dt: target.config.dt,
        record_every: target.config.record_every,
        ode_dt: opts.ode_dt,
    };
    let forward = |theta: &[f64]| -> Result<f64> {
        let g = dict.velocity(theta)?;
        let sol = renormalized_reference(rho0, b, Some(&g), &[0.0], &rc)?;
        Ok(path_distance(&sol.trajectory, target, Metric::DScriptE, &opts.metric)?.value)
    };
    let scales = unit_scales(dict)?;
    let to_theta = |u: &[f64]| -> Vec<f64> { u.iter().zip(&scales).map(|(a, s)| a * s).collect() };
    let budget = dict.spec().budget;
    let objective = |u: &[f64]| -> Result<f64> {
        let theta = to_theta(u);
        let cost = dict.cost(&theta)?;
        if cost > budget {
            return Ok(1e6 * (1.0 + cost));
        }
        let r = forward(&theta)?;
        Ok(cost + opts.penalty * r * r)
    };
    let residual_at_zero = forward(&vec![0.0; dict.len()])?;
    if residual_at_zero == 0.0 {
        // the objective is non-negative, so g = 0 is already optimal
        return Ok(RateFunctionReport {
            value: 0.0,
            theta: vec![0.0; dict.len()],
            residual: 0.0,
            objective: 0.0,
            residual_at_zero,
            evaluations: 1,
            failed_evaluations: 0,
            converged: true,
        });
    }
    let best = minimize(dict.len(), &objective, &opts.optimizer)?;
    let theta = to_theta(&best.u);
    let residual = forward(&theta)?;
    Ok(RateFunctionReport {
        value: dict.cost(&theta)?,
        theta,
        residual,
        objective: best.objective,
        residual_at_zero,
        evaluations: best.evaluations,
        failed_evaluations: best.failures,
        converged: residual <= opts.tolerance,
    })
}

/// A functional on trajectories with a declared bound `|h| <= bound`.
pub struct BoundedFunctional<'a, T: Real> {
    pub bound: f64,
    pub h: Box<dyn Fn(&Trajectory<T>) -> Result<f64> + Sync + 'a>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceEstimate {
    pub epsilon: f64,
    /// `-eps^2 log E exp(-h / eps^2)` under the untilted law.
    pub lhs: f64,
    pub lhs_stderr: f64,
    /// Dictionary infimum of `E[1/2 ||g||^2 + h(rho^{eps, g})]`.
    pub rhs: f64,
    pub rhs_stderr: f64,
    pub theta: Vec<f64>,
    pub ess: f64,
    pub degenerate: bool,
    pub evaluations: usize,
}

impl LaplaceEstimate {
    pub fn gap(&self) -> f64 {
        self.rhs - self.lhs
    }

    pub fn combined_stderr(&self) -> f64 {
        self.lhs_stderr.hypot(self.rhs_stderr)
    }
}

/// Mean that is exact for constant samples.
fn shifted_mean(values: &[f64]) -> f64 {
    let base = values.iter().cloned().fold(f64::INFINITY, f64::min);
    base + values.iter().map(|v| v - base).sum::<f64>() / values.len() as f64
}

/// Both sides of the variational representation at one epsilon. The
/// right-hand side uses the same `m` Brownian paths for every candidate.
pub fn variational_laplace<T: Real>(
    ens: &Ensemble<T>,
    h: &BoundedFunctional<'_, T>,
    epsilon: f64,
    dict: &ControlDictionary<T>,
    m: usize,
    optimizer: &OptimizerOptions,
) -> Result<LaplaceEstimate> {
    const MIN_ESS: f64 = 10.0;
    if !(epsilon > 0.0) || m < 2 {
        return Err(invalid("need epsilon > 0 and at least two paths"));
    }
    if !(dict.spec().budget > 2.0 * h.bound) {
        return Err(invalid(format!(
            "budget {} must exceed twice the bound {} of h",
            dict.spec().budget,
            h.bound
        )));
    }
    let check = |v: f64| -> Result<f64> {
        if v.is_finite() && v.abs() <= h.bound * (1.0 + 1e-12) {
            Ok(v)
        } else {
            Err(invalid(format!("h = {v} exceeds its declared bound {}", h.bound)))
        }
    };
    let eps2 = epsilon * epsilon;
    let values = ens.map_paths(epsilon, None, m, |_, traj| check((h.h)(traj)?))?;
    let low = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = values.iter().map(|v| (-(v - low) / eps2).exp()).collect();
    let mean_w = w.iter().sum::<f64>() / m as f64;
    let var_w = w.iter().map(|x| (x - mean_w).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    let lhs = low - eps2 * mean_w.ln();
    let lhs_stderr = eps2 * (var_w / m as f64).sqrt() / mean_w;
    let ess = w.iter().sum::<f64>().powi(2) / w.iter().map(|x| x * x).sum::<f64>();

    let scales = unit_scales(dict)?;
    let to_theta = |u: &[f64]| -> Vec<f64> { u.iter().zip(&scales).map(|(a, s)| a * s).collect() };
    let sample = |theta: &[f64]| -> Result<Vec<f64>> {
        let g = dict.velocity(theta)?;
        ens.map_paths(epsilon, Some(&g), m, |_, traj| check((h.h)(traj)?))
    };
    let budget = dict.spec().budget;
    let objective = |u: &[f64]| -> Result<f64> {
        let theta = to_theta(u);
        let cost = dict.cost(&theta)?;
        if cost > budget {
            return Ok(1e6 * (1.0 + cost));
        }
        Ok(cost + shifted_mean(&sample(&theta)?))
    };
    let best = minimize(dict.len(), &objective, optimizer)?;
    let theta = to_theta(&best.u);
    let hv = sample(&theta)?;
    let rhs = dict.cost(&theta)? + shifted_mean(&hv);
    let rhs_stderr = Summary::of(&hv)?.stderr;
    Ok(LaplaceEstimate {
        epsilon,
        lhs,
        lhs_stderr,
        rhs,
        rhs_stderr,
        theta,
        ess,
        degenerate: ess < MIN_ESS,
        evaluations: best.evaluations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationLdpReport {
    pub delta: f64,
    pub tail: TailEstimate,
    pub p_non_increasing: bool,
    pub floor_at_smallest: bool,
    /// `eps^2 log p_hat` keeps decreasing or the smallest epsilon hits the
    /// zero-hit floor.
    pub consistent_with_infinite_rate: bool,
}

/// Tail of the total dissipation, `P{ D^eps(total) >= delta }`, with the
/// dissipation recomputed from every recorded step.
pub fn dissipation_ldp_check<T: Real>(
    ens: &Ensemble<T>,
    eps_grid: &[f64],
    m: usize,
    delta: f64,
    partition: Partition,
) -> Result<DissipationLdpReport> {
    check_decreasing(eps_grid)?;
    let mut ens = ens.clone();
    ens.cfg.record_every = 1;
    let basis = ens.basis.clone();
    let b = ens.b.clone();
    let event = move |traj: &Trajectory<T>| -> Result<bool> {
        Ok(dissipation_measure(traj, &b, None, Some(&basis), partition)?.total >= delta)
    };
    let tail = ldp_tail_estimate(&ens, &event, eps_grid, m, None)?;
    let last = tail.rows.last().expect("grid is non-empty");
    let floor_at_smallest = last.zero_hits();
    let strictly_down = {
        let s: Option<Vec<f64>> = tail.rows.iter().map(|r| r.eps2_log_p).collect();
        s.is_some_and(|s| s.windows(2).all(|w| w[1] < w[0]))
    };
    Ok(DissipationLdpReport {
        delta,
        p_non_increasing: tail.p_non_increasing(),
        floor_at_smallest,
        consistent_with_infinite_rate: strictly_down || floor_at_smallest,
        tail,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "snake_case")]
pub enum ReportBody {
    ZeroNoise(ConvergenceReport),
    LdpTail(TailEstimate),
    RateFunction(RateFunctionReport),
    Variational { estimates: Vec<LaplaceEstimate> },
    DissipationLdp(DissipationLdpReport),
    Evolve(crate::solver::TerminalDiagnostics),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub master_seed: u64,
    /// How per-path seeds derive from the master seed.
    pub seeding: String,
    pub body: ReportBody,
    pub flags: Vec<String>,
}

pub const SEEDING: &str = "chacha8(master_seed), stream = path index";

impl ExperimentReport {
    pub fn new(config_hash: impl Into<String>, master_seed: u64, body: ReportBody) -> Self {
        let flags = match &body {
            ReportBody::LdpTail(t) => t.flags.clone(),
            ReportBody::DissipationLdp(d) => d.tail.flags.clone(),
            ReportBody::RateFunction(r) if !r.converged => {
                vec![format!("residual {:.3e} above tolerance; best found reported", r.residual)]
            }
            ReportBody::Variational { estimates } => estimates
                .iter()
                .filter(|e| e.degenerate)
                .map(|e| format!("epsilon = {}: effective sample size {:.1} < 10", e.epsilon, e.ess))
                .collect(),
            ReportBody::ZeroNoise(c) if c.reference_not_cauchy => vec!["reference not Cauchy under mollification".into()],
            _ => Vec::new(),
        };
        ExperimentReport {
            config_hash: config_hash.into(),
            master_seed,
            seeding: SEEDING.into(),
            body,
            flags,
        }
    }

    /// Flat table: one row per epsilon for the ensemble experiments.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let hash = self.config_hash.as_str();
        match &self.body {
            ReportBody::ZeroNoise(c) => {
                w.write_record(["config_hash", "epsilon", "median", "q1", "q3", "mean", "stderr", "paths"])
                    .map_err(fmt)?;
                for r in &c.rows {
                    let s = &r.summary;
                    w.write_record([
                        hash.to_string(),
                        r.epsilon.to_string(),
                        s.median.to_string(),
                        s.q1.to_string(),
                        s.q3.to_string(),
                        s.mean.to_string(),
                        s.stderr.to_string(),
                        s.count.to_string(),
                    ])
                    .map_err(fmt)?;
                }
            }
            ReportBody::LdpTail(t) => write_tail(&mut w, hash, t)?,
            ReportBody::DissipationLdp(d) => write_tail(&mut w, hash, &d.tail)?,
            ReportBody::RateFunction(r) => {
                w.write_record(["config_hash", "value", "residual", "objective", "residual_at_zero", "converged", "theta"])
                    .map_err(fmt)?;
                let theta: Vec<String> = r.theta.iter().map(|v| v.to_string()).collect();
                w.write_record([
                    hash.to_string(),
                    r.value.to_string(),
                    r.residual.to_string(),
                    r.objective.to_string(),
                    r.residual_at_zero.to_string(),
                    r.converged.to_string(),
                    theta.join(";"),
                ])
                .map_err(fmt)?;
            }
            ReportBody::Variational { estimates } => {
                w.write_record(["config_hash", "epsilon", "lhs", "lhs_stderr", "rhs", "rhs_stderr", "gap", "ess"])
                    .map_err(fmt)?;
                for e in estimates {
                    w.write_record([
                        hash.to_string(),
                        e.epsilon.to_string(),
                        e.lhs.to_string(),
                        e.lhs_stderr.to_string(),
                        e.rhs.to_string(),
                        e.rhs_stderr.to_string(),
                        e.gap().to_string(),
                        e.ess.to_string(),
                    ])
                    .map_err(fmt)?;
                }
            }
            ReportBody::Evolve(d) => {
                w.write_record(["config_hash", "quantity", "value"]).map_err(fmt)?;
                for (q, v) in [
                    ("initial_l2", d.initial_l2),
                    ("final_l2", d.final_l2),
                    ("max_l2", d.max_l2),
                    ("gronwall_bound", d.gronwall_bound),
                    ("initial_mean", d.initial_mean),
                    ("final_mean", d.final_mean),
                ] {
                    w.write_record([hash, q, &v.to_string()]).map_err(fmt)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn write_tail<W: Write>(w: &mut csv::Writer<W>, hash: &str, t: &TailEstimate) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record([
        "config_hash",
        "epsilon",
        "p_hat",
        "stderr",
        "eps2_log_p",
        "n_eff",
        "hits",
        "paths",
        "upper_bound",
        "estimator",
    ])
    .map_err(fmt)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let estimator = match t.estimator {
        Estimator::Naive => "naive",
        Estimator::Tilted => "tilted",
    };
    for r in &t.rows {
        w.write_record([
            hash.to_string(),
            r.epsilon.to_string(),
            r.p_hat.to_string(),
            r.stderr.to_string(),
            opt(r.eps2_log_p),
            r.n_eff.to_string(),
            r.hits.to_string(),
            r.paths.to_string(),
            opt(r.upper_bound),
            estimator.to_string(),
        ])
        .map_err(fmt)?;
    }
    Ok(())
}
