//! Oracle solutions built from characteristics rather than from the
//! spectral discretization.
//!
//! Both oracles pull back: the value at `x` and time `t` is `rho_0(X(t, x))`
//! where `X(t, .)` is the backward foot-point map. Each snapshot is
//! integrated from its own time all the way back to zero; composing maps
//! segment by segment would be cheaper but piles up interpolation error.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drift::Velocity;
use crate::error::{invalid, Error, Result};
use crate::field::ScalarField;
use crate::grid::{Domain, Grid};
use crate::interp::PeriodicCubic;
use crate::noise::{NoiseBasis, NoisePath, PhaseTable};
use crate::scalar::Real;
use crate::solver::{Origin, Snapshot, SolverConfig, TerminalDiagnostics, Trajectory};

/// Backward foot points `X(t, x)` at the snapshot times.
#[derive(Debug, Clone)]
pub struct FlowMap<T: Real> {
    grid: Grid,
    times: Vec<f64>,
    /// `feet[j][axis][idx]`, unwrapped (not reduced modulo `L`).
    feet: Vec<Vec<Vec<T>>>,
}

impl<T: Real> FlowMap<T> {
    fn identity(grid: Grid) -> Self {
        let feet = (0..grid.dim)
            .map(|a| (0..grid.len()).map(|i| T::lit(grid.point(i)[a])).collect())
            .collect();
        FlowMap {
            grid,
            times: vec![0.0],
            feet: vec![feet],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Foot point of grid node `idx` at snapshot `j`.
    pub fn foot(&self, j: usize, idx: usize) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for (axis, o) in out.iter_mut().enumerate().take(self.grid.dim) {
            *o = self.feet[j][axis][idx];
        }
        out
    }

    /// Periodic displacement `X(t_j, x) - x`, per axis.
    pub fn displacement(&self, j: usize) -> Vec<Vec<T>> {
        (0..self.grid.dim)
            .map(|a| {
                self.feet[j][a]
                    .iter()
                    .enumerate()
                    .map(|(i, &f)| f - T::lit(self.grid.point(i)[a]))
                    .collect()
            })
            .collect()
    }

    /// `det(dX/dx)` at snapshot `j`, from spectral derivatives of the
    /// displacement.
    pub fn jacobian(&self, domain: &Arc<Domain<T>>, j: usize) -> Result<ScalarField<T>> {
        if domain.grid() != &self.grid {
            return Err(Error::GridMismatch(format!("flow on {} vs {}", self.grid, domain.grid())));
        }
        let dim = self.grid.dim;
        let grads: Vec<_> = self
            .displacement(j)
            .into_iter()
            .map(|d| ScalarField::from_values_unchecked(domain, d).gradient())
            .collect();
        let mut m = vec![vec![Vec::new(); dim]; dim];
        for a in 0..dim {
            for b in 0..dim {
                let id = if a == b { T::one() } else { T::zero() };
                m[a][b] = grads[a].component(b).values().iter().map(|&v| v + id).collect::<Vec<T>>();
            }
        }
        let det = (0..self.grid.len())
            .map(|i| match dim {
                1 => m[0][0][i],
                2 => m[0][0][i] * m[1][1][i] - m[0][1][i] * m[1][0][i],
                _ => {
                    m[0][0][i] * (m[1][1][i] * m[2][2][i] - m[1][2][i] * m[2][1][i])
                        - m[0][1][i] * (m[1][0][i] * m[2][2][i] - m[1][2][i] * m[2][0][i])
                        + m[0][2][i] * (m[1][0][i] * m[2][1][i] - m[1][1][i] * m[2][0][i])
                }
            })
            .collect();
        Ok(ScalarField::from_values_unchecked(domain, det))
    }

    /// Integrates the foot points of snapshot `j` forward with `velocity`
    /// and returns the largest distance to the starting node, in grid units.
    pub fn round_trip_error(&self, velocity: &Velocity<T>, j: usize, ode_dt: f64) -> Result<f64> {
        let field = PointVelocity::new(velocity);
        let t_end = self.times[j];
        let steps = segment_steps(t_end, ode_dt)?;
        let h = t_end / steps as f64;
        let dim = self.grid.dim;
        let worst = (0..self.grid.len())
            .into_par_iter()
            .map(|idx| {
                let mut y = self.foot(j, idx);
                for s in 0..steps {
                    y = rk4(&field, s as f64 * h, h, y, dim);
                }
                let x = self.grid.point(idx);
                (0..dim)
                    .map(|a| (y[a].as_f64() - x[a]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .reduce(|| 0.0, f64::max);
        Ok(worst / self.grid.spacing())
    }
}

/// Drift evaluation at arbitrary points by cubic interpolation of each term.
struct PointVelocity<'a, T: Real> {
    velocity: &'a Velocity<T>,
    interp: PeriodicCubic,
    dim: usize,
}

impl<'a, T: Real> PointVelocity<'a, T> {
    fn new(velocity: &'a Velocity<T>) -> Self {
        let grid = *velocity.domain().grid();
        PointVelocity {
            velocity,
            interp: PeriodicCubic::new(grid),
            dim: grid.dim,
        }
    }

    fn eval(&self, t: f64, y: &[T; 3]) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for (field, profile) in self.velocity.terms() {
            let f = T::lit(profile.value(t));
            if f == T::zero() {
                continue;
            }
            for (axis, o) in out.iter_mut().enumerate().take(self.dim) {
                *o = *o + f * self.interp.sample(field.component(axis).values(), &y[..self.dim]);
            }
        }
        out
    }
}

fn axpy<T: Real>(y: &[T; 3], a: T, k: &[T; 3], dim: usize) -> [T; 3] {
    let mut out = *y;
    for i in 0..dim {
        out[i] = y[i] + a * k[i];
    }
    out
}

/// One classical RK4 step of `dy/dt = u(t, y)` with signed step `h`.
fn rk4<T: Real>(u: &PointVelocity<'_, T>, t: f64, h: f64, y: [T; 3], dim: usize) -> [T; 3] {
    let ht = T::lit(h);
    let half = T::lit(0.5 * h);
    let k1 = u.eval(t, &y);
    let k2 = u.eval(t + 0.5 * h, &axpy(&y, half, &k1, dim));
    let k3 = u.eval(t + 0.5 * h, &axpy(&y, half, &k2, dim));
    let k4 = u.eval(t + h, &axpy(&y, ht, &k3, dim));
    let sixth = ht / T::lit(6.0);
    let mut out = y;
    for i in 0..dim {
        out[i] = y[i] + sixth * (k1[i] + T::lit(2.0) * (k2[i] + k3[i]) + k4[i]);
    }
    out
}

fn segment_steps(length: f64, ode_dt: f64) -> Result<usize> {
    if !(ode_dt > 0.0) || !ode_dt.is_finite() {
        return Err(invalid(format!("ode_dt = {ode_dt} must be positive")));
    }
    Ok(((length / ode_dt) - 1e-9).ceil().max(1.0) as usize)
}

fn transpose<T: Real>(points: Vec<[T; 3]>, dim: usize) -> Vec<Vec<T>> {
    (0..dim).map(|a| points.iter().map(|p| p[a]).collect()).collect()
}

fn pull_back<T: Real>(domain: &Arc<Domain<T>>, rho0: &ScalarField<T>, feet: &[Vec<T>]) -> ScalarField<T> {
    let dim = domain.dim();
    let interp = PeriodicCubic::new(*domain.grid());
    let values = rho0.values();
    let out: Vec<T> = (0..domain.len())
        .into_par_iter()
        .map(|i| {
            let mut p = [T::zero(); 3];
            for a in 0..dim {
                p[a] = feet[a][i];
            }
            interp.sample(values, &p[..dim])
        })
        .collect();
    ScalarField::from_values_unchecked(domain, out)
}

fn snapshot_times(horizon: f64, dt: f64, record_every: usize) -> Result<Vec<(f64, usize)>> {
    if !(horizon > 0.0) || !(dt > 0.0) || record_every == 0 {
        return Err(invalid("horizon, dt and record_every must be positive"));
    }
    let steps = (horizon / dt).round() as usize;
    if steps == 0 || ((steps as f64) * dt - horizon).abs() > 1e-9 * horizon {
        return Err(invalid(format!("T = {horizon} is not a multiple of dt = {dt}")));
    }
    let mut out = vec![(0.0, 0)];
    for n in 1..=steps {
        if n % record_every == 0 || n == steps {
            out.push((n as f64 * dt, n));
        }
    }
    Ok(out)
}

fn diagnostics<T: Real>(snaps: &[Snapshot<T>]) -> TerminalDiagnostics {
    let l2: Vec<f64> = snaps.iter().map(|s| s.field.l2_norm().as_f64()).collect();
    TerminalDiagnostics {
        steps: snaps.last().map_or(0, |s| s.step),
        initial_l2: l2[0],
        final_l2: l2[l2.len() - 1],
        max_l2: l2.iter().cloned().fold(0.0, f64::max),
        gronwall_bound: l2[0],
        initial_mean: snaps[0].field.integral().as_f64(),
        final_mean: snaps[snaps.len() - 1].field.integral().as_f64(),
    }
}

/// Deterministic characteristics of one (already mollified) velocity.
fn characteristics<T: Real>(
    rho0: &ScalarField<T>,
    velocity: &Velocity<T>,
    times: &[(f64, usize)],
    ode_dt: f64,
) -> Result<(Vec<Snapshot<T>>, FlowMap<T>)> {
    let domain = rho0.domain();
    let grid = *domain.grid();
    let dim = grid.dim;
    let field = PointVelocity::new(velocity);
    let mut flow = FlowMap::identity(grid);
    let mut snaps = vec![Snapshot {
        time: 0.0,
        step: 0,
        field: rho0.clone(),
    }];
    for &(t1, step) in &times[1..] {
        let steps = segment_steps(t1, ode_dt)?;
        let h = t1 / steps as f64;
        let feet: Vec<[T; 3]> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let p = grid.point(i);
                let mut y = [T::lit(p[0]), T::lit(p[1]), T::lit(p[2])];
                if !velocity.is_zero() {
                    for s in 0..steps {
                        y = rk4(&field, t1 - s as f64 * h, -h, y, dim);
                    }
                }
                y
            })
            .collect();
        let feet = transpose(feet, dim);
        snaps.push(Snapshot {
            time: t1,
            step,
            field: pull_back(domain, rho0, &feet),
        });
        flow.times.push(t1);
        flow.feet.push(feet);
    }
    Ok((snaps, flow))
}

/// Output of [`renormalized_reference`].
#[derive(Debug, Clone)]
pub struct ReferenceSolution<T: Real> {
    /// Trajectory for the last (finest) mollification scale.
    pub trajectory: Trajectory<T>,
    pub flow: FlowMap<T>,
    pub deltas: Vec<f64>,
    /// `sup_t ||rho^{delta_i} - rho^{delta_{i+1}}||_{L^2}` for consecutive scales.
    pub cauchy_increments: Vec<f64>,
    /// Set when the increments fail to decrease along the schedule.
    pub not_cauchy: bool,
}

/// Parameters of a characteristics run that the trajectory records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Snapshot spacing.
    pub dt: f64,
    pub record_every: usize,
    /// RK4 step of the characteristic ODE.
    pub ode_dt: f64,
}

impl ReferenceConfig {
    pub fn matching(cfg: &SolverConfig, ode_dt: f64) -> Self {
        ReferenceConfig {
            horizon: cfg.horizon,
            dt: cfg.dt,
            record_every: cfg.record_every,
            ode_dt,
        }
    }
}

/// Renormalized solution as the limit of mollified-drift characteristics.
///
/// Each `delta` of the (strictly decreasing) schedule is solved in turn;
/// the returned trajectory belongs to the last one.
pub fn renormalized_reference<T: Real>(
    rho0: &ScalarField<T>,
    b: &Velocity<T>,
    g: Option<&Velocity<T>>,
    schedule: &[f64],
    rc: &ReferenceConfig,
) -> Result<ReferenceSolution<T>> {
    if schedule.is_empty() {
        return Err(invalid("mollification schedule is empty"));
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) || schedule.iter().any(|&d| !(d >= 0.0)) {
        return Err(invalid(format!("schedule {schedule:?} must be non-negative and strictly decreasing")));
    }
    if rho0.grid() != b.domain().grid() {
        return Err(Error::GridMismatch(format!("rho_0 on {} vs drift on {}", rho0.grid(), b.domain().grid())));
    }
    rho0.ensure_finite()?;
    let velocity = match g {
        Some(g) if !g.is_zero() => b.plus(g)?,
        _ => b.clone(),
    };
    let times = snapshot_times(rc.horizon, rc.dt, rc.record_every)?;
    let mut previous: Option<Vec<Snapshot<T>>> = None;
    let mut increments = Vec::new();
    let mut last = None;
    for &delta in schedule {
        let u = velocity.mollified(delta)?;
        let (snaps, flow) = characteristics(rho0, &u, &times, rc.ode_dt)?;
        if let Some(prev) = &previous {
            let gap = prev
                .iter()
                .zip(&snaps)
                .map(|(a, b)| a.field.sub(&b.field).l2_norm().as_f64())
                .fold(0.0, f64::max);
            increments.push(gap);
        }
        previous = Some(snaps.clone());
        last = Some((snaps, flow));
    }
    let (snapshots, flow) = last.expect("schedule non-empty");
    let not_cauchy = increments.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-9) + 1e-14);
    let mut cfg = SolverConfig::new(0.0, rc.dt, rc.horizon, crate::solver::Scheme::StratMidpoint);
    cfg.record_every = rc.record_every;
    let diagnostics = diagnostics(&snapshots);
    Ok(ReferenceSolution {
        trajectory: Trajectory {
            config: cfg,
            origin: Origin::Characteristics,
            drift_id: String::new(),
            control_id: None,
            snapshots,
            noise: None,
            diagnostics,
        },
        flow,
        deltas: schedule.to_vec(),
        cauchy_increments: increments,
        not_cauchy,
    })
}

/// Pathwise solution for smooth truncated noise: `rho_0` composed with the
/// inverse stochastic flow of `dX = (b + g) dt + eps o dW`, driven by the
/// coefficient log of `traj`.
///
/// Each step is inverted by a Heun step with the increment negated; the
/// noise is evaluated exactly at the off-grid points. `ode_dt` must be an
/// integer multiple of the trajectory step (the log is coarsened to it).
pub fn stochastic_flow_oracle<T: Real>(
    rho0: &ScalarField<T>,
    b: &Velocity<T>,
    g: Option<&Velocity<T>>,
    basis: &Arc<NoiseBasis<T>>,
    traj: &Trajectory<T>,
    ode_dt: f64,
) -> Result<Trajectory<T>> {
    let path = traj
        .noise
        .as_ref()
        .ok_or_else(|| Error::MissingNoiseLog("trajectory carries no coefficient log".into()))?;
    let cfg = traj.config;
    let steps = cfg.steps()?;
    if path.steps() != steps || path.modes() != basis.len() {
        return Err(Error::MissingNoiseLog(format!(
            "log has {} steps x {} modes, expected {steps} x {}",
            path.steps(),
            path.modes(),
            basis.len()
        )));
    }
    let factor = (ode_dt / cfg.dt).round() as usize;
    if factor == 0 || (factor as f64 * cfg.dt - ode_dt).abs() > 1e-9 * ode_dt {
        return Err(invalid(format!("ode_dt = {ode_dt} is not a multiple of the step {}", cfg.dt)));
    }
    if traj.snapshots.iter().any(|s| s.step % factor != 0) {
        return Err(invalid("snapshot steps must fall on the coarsened grid"));
    }
    let coarse: NoisePath<T> = if factor == 1 { path.clone() } else { path.coarsen(factor)? };
    let domain = rho0.domain();
    basis.check_resolution(domain)?;
    let grid = *domain.grid();
    let dim = grid.dim;
    let velocity = match g {
        Some(g) if !g.is_zero() => b.plus(g)?,
        _ => b.clone(),
    };
    let field = PointVelocity::new(&velocity);
    let eps = T::lit(cfg.epsilon);
    let h = factor as f64 * cfg.dt;

    // D_n(y) = u(t, y) h + eps dW_n(y)
    let displacement = |n: usize, t: f64, y: &[T; 3], table: &mut PhaseTable<T>| -> [T; 3] {
        let u = field.eval(t, y);
        let w = if cfg.epsilon > 0.0 {
            basis.evaluate_at(coarse.step(n), &y[..dim], table)
        } else {
            [T::zero(); 3]
        };
        let mut out = [T::zero(); 3];
        for a in 0..dim {
            out[a] = u[a] * T::lit(h) + eps * w[a];
        }
        out
    };

    let mut snapshots = vec![Snapshot {
        time: 0.0,
        step: 0,
        field: rho0.clone(),
    }];
    for snap in &traj.snapshots[1..] {
        let last = snap.step / factor;
        let feet: Vec<[T; 3]> = (0..grid.len())
            .into_par_iter()
            .map_init(PhaseTable::new, |table, i| {
                let p = grid.point(i);
                let mut y = [T::lit(p[0]), T::lit(p[1]), T::lit(p[2])];
                for n in (0..last).rev() {
                    let d1 = displacement(n, (n + 1) as f64 * h, &y, table);
                    let pred = axpy(&y, -T::one(), &d1, dim);
                    let d2 = displacement(n, n as f64 * h, &pred, table);
                    for a in 0..dim {
                        y[a] = y[a] - T::lit(0.5) * (d1[a] + d2[a]);
                    }
                }
                y
            })
            .collect();
        snapshots.push(Snapshot {
            time: snap.time,
            step: snap.step,
            field: pull_back(domain, rho0, &transpose(feet, dim)),
        });
    }
    let diagnostics = diagnostics(&snapshots);
    Ok(Trajectory {
        config: cfg,
        origin: Origin::StochasticFlow,
        drift_id: traj.drift_id.clone(),
        control_id: traj.control_id.clone(),
        snapshots,
        noise: Some(path.clone()),
        diagnostics,
    })
}

/// `sup_t ||a_t - b_t||_{L^2}` over snapshots with matching times.
pub fn sup_l2_gap<T: Real>(a: &Trajectory<T>, b: &Trajectory<T>) -> Result<f64> {
    if a.len() != b.len() || a.snapshots.iter().zip(&b.snapshots).any(|(x, y)| (x.time - y.time).abs() > 1e-12) {
        return Err(invalid("trajectories have different snapshot times"));
    }
    Ok(a
        .snapshots
        .iter()
        .zip(&b.snapshots)
        .map(|(x, y)| x.field.sub(&y.field).l2_norm().as_f64())
        .fold(0.0, f64::max))
}
