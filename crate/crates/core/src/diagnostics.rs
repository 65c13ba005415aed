//! Post-processing of trajectories: norm ledgers, the coarse dissipation
//! measure, the noise-weighted Sobolev functional, Fourier-layer transfer
//! and the two path-space distances.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::drift::Velocity;
use crate::error::{invalid, Error, Result};
use crate::field::{ModeMap, ScalarField};
use crate::grid::Domain;
use crate::noise::{NoiseBasis, Phase};
use crate::scalar::Real;
use crate::solver::Trajectory;

/// One row of a long-format report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub time: f64,
    pub quantity: String,
    pub value: f64,
}

pub fn write_long_csv<W: Write>(rows: &[LongRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_long_csv<R: std::io::Read>(input: R) -> Result<Vec<LongRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub time: f64,
    pub l2_sq: f64,
    /// `(p, ||rho||_{L^p})`, `p = inf` encoded as `f64::INFINITY`.
    pub lp: Vec<(f64, f64)>,
    /// `(s, ||rho||_{H^s})`.
    pub hs: Vec<(f64, f64)>,
    /// Running sum of `eps int dW . grad |rho|^2` over the snapshot
    /// intervals; minus this is the martingale part of `d ||rho||^2`.
    pub martingale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub entries: Vec<LedgerEntry>,
}

impl EnergyLedger {
    pub fn rows(&self) -> Vec<LongRow> {
        let mut rows = Vec::new();
        for e in &self.entries {
            let mut push = |q: String, v: f64| {
                rows.push(LongRow {
                    time: e.time,
                    quantity: q,
                    value: v,
                })
            };
            push("l2_sq".into(), e.l2_sq);
            for &(p, v) in &e.lp {
                push(format!("lp_{p}"), v);
            }
            for &(s, v) in &e.hs {
                push(format!("hs_{s}"), v);
            }
            push("martingale".into(), e.martingale);
        }
        rows
    }
}

/// `eps int dW . grad(rho^2)` for one interval.
fn martingale_increment<T: Real>(
    rho: &ScalarField<T>,
    basis: &NoiseBasis<T>,
    domain: &Arc<Domain<T>>,
    dw: &[T],
    epsilon: f64,
) -> Result<f64> {
    let sq = rho.map(|v| v * v);
    let grad = sq.gradient();
    let field = basis.assemble(domain, dw)?;
    let cell = domain.grid().cell_volume();
    let mut sum = 0.0;
    for (w, g) in field.components().iter().zip(grad.components()) {
        sum += w.values().iter().zip(g.values()).map(|(a, b)| (*a * *b).as_f64()).sum::<f64>();
    }
    Ok(epsilon * sum * cell)
}

pub fn energy_ledger<T: Real>(
    traj: &Trajectory<T>,
    basis: Option<&Arc<NoiseBasis<T>>>,
    p_list: &[f64],
    s_list: &[f64],
) -> Result<EnergyLedger> {
    let eps = traj.config.epsilon;
    let domain = traj.domain();
    let mut martingale = 0.0;
    let mut entries = Vec::with_capacity(traj.len());
    for (i, snap) in traj.snapshots.iter().enumerate() {
        if i > 0 && eps > 0.0 {
            if let (Some(path), Some(basis)) = (&traj.noise, basis) {
                let prev = &traj.snapshots[i - 1];
                let dw = path.increment_between(prev.step, snap.step);
                martingale += martingale_increment(&prev.field, basis, domain, &dw, eps)?;
            }
        }
        let f = &snap.field;
        let lp = p_list
            .iter()
            .map(|&p| Ok((p, f.lp_norm(p)?.as_f64())))
            .collect::<Result<Vec<_>>>()?;
        let hs = s_list
            .iter()
            .map(|&s| Ok((s, f.sobolev_norm(s)?.as_f64())))
            .collect::<Result<Vec<_>>>()?;
        entries.push(LedgerEntry {
            time: snap.time,
            l2_sq: f.sobolev_norm(0.0)?.as_f64().powi(2),
            lp,
            hs,
            martingale,
        });
    }
    Ok(EnergyLedger { entries })
}

/// Coarse space-time cells used to test the dissipation density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub time_bins: usize,
    /// Hat functions per spatial axis.
    pub blocks: usize,
}

impl Default for Partition {
    fn default() -> Self {
        Partition {
            time_bins: 16,
            blocks: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationEstimate {
    pub partition: Partition,
    pub dim: usize,
    pub horizon: f64,
    /// Cell values, time-major then block index (row-major over axes).
    pub cells: Vec<f64>,
    pub total: f64,
    /// `sum |cell|`; equals `total` when no cell is negative.
    pub total_variation: f64,
    pub worst_cell: f64,
    pub negative: bool,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub martingale: f64,
}

impl DissipationEstimate {
    /// `|total - (||rho_0||^2 - ||rho_T||^2 - M)|`.
    pub fn ledger_defect(&self) -> f64 {
        (self.total - (self.initial_energy - self.final_energy - self.martingale)).abs()
    }

    pub fn blocks_per_bin(&self) -> usize {
        self.partition.blocks.pow(self.dim as u32)
    }

    pub fn rows(&self) -> Vec<LongRow> {
        let per = self.blocks_per_bin();
        let width = self.horizon / self.partition.time_bins as f64;
        let mut rows: Vec<LongRow> = self
            .cells
            .iter()
            .enumerate()
            .map(|(i, &v)| LongRow {
                time: (i / per) as f64 * width + 0.5 * width,
                quantity: format!("cell_{}", i % per),
                value: v,
            })
            .collect();
        for (q, v) in [
            ("total", self.total),
            ("total_variation", self.total_variation),
            ("worst_cell", self.worst_cell),
            ("martingale", self.martingale),
        ] {
            rows.push(LongRow {
                time: self.horizon,
                quantity: q.into(),
                value: v,
            });
        }
        rows
    }
}

/// Periodic tent functions, one per block and axis; they sum to one.
fn hat_weights(n: usize, length: f64, blocks: usize) -> Vec<Vec<f64>> {
    let h = length / n as f64;
    let width = length / blocks as f64;
    (0..blocks)
        .map(|b| {
            let c = (b as f64 + 0.5) * width;
            (0..n)
                .map(|i| {
                    let x = i as f64 * h;
                    let mut r = (x - c).rem_euclid(length);
                    if r > length / 2.0 {
                        r = length - r;
                    }
                    (1.0 - r / width).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Tests the discrete local energy balance
///
/// ```text
/// D_j = |rho_j|^2 - |rho_{j+1}|^2 - dt u . grad|rho_j|^2
///       - eps dW_j . grad|rho_j|^2 + (1 + kappa) eps^2 dt Lap|rho_j|^2
/// ```
///
/// against tensorized (time bin) x (spatial hat) functions. Snapshot
/// intervals are the time steps, so trajectories recorded every step give
/// the sharpest cells.
pub fn dissipation_measure<T: Real>(
    traj: &Trajectory<T>,
    b: &Velocity<T>,
    g: Option<&Velocity<T>>,
    basis: Option<&Arc<NoiseBasis<T>>>,
    partition: Partition,
) -> Result<DissipationEstimate> {
    const DIV_TOLERANCE: f64 = 1e-8;
    if partition.time_bins == 0 || partition.blocks == 0 {
        return Err(invalid("partition needs at least one bin and one block"));
    }
    let velocity = match g {
        Some(g) if !g.is_zero() => b.plus(g)?,
        _ => b.clone(),
    };
    let div = velocity.relative_divergence().as_f64();
    if div > DIV_TOLERANCE {
        return Err(Error::NotSolenoidal {
            max_divergence: div,
            tolerance: DIV_TOLERANCE,
        });
    }
    let cfg = &traj.config;
    let eps = cfg.epsilon;
    let noisy = eps > 0.0 && basis.is_some();
    if noisy && traj.noise.is_none() {
        return Err(Error::MissingNoiseLog("dissipation needs the coefficient log".into()));
    }
    let domain = traj.domain();
    let grid = *domain.grid();
    let dim = grid.dim;
    let hats = hat_weights(grid.n, grid.length, partition.blocks);
    let per_bin = partition.blocks.pow(dim as u32);
    let mut cells = vec![0.0; partition.time_bins * per_bin];
    let nu = cfg.ito_diffusivity();
    let cell_volume = grid.cell_volume();
    let horizon = traj.snapshots.last().map_or(cfg.horizon, |s| s.time);
    let mut martingale = 0.0;

    for w in traj.snapshots.windows(2) {
        let (a, z) = (&w[0], &w[1]);
        let dt = z.time - a.time;
        let f = a.field.map(|v| v * v);
        let grad = f.gradient();
        let lap = f.laplacian();
        let u = velocity.at(a.time);
        let noise = match (noisy, &traj.noise, basis) {
            (true, Some(path), Some(basis)) => Some(basis.assemble(domain, &path.increment_between(a.step, z.step))?),
            _ => None,
        };
        let fz = z.field.values();
        let mut density = vec![0.0; grid.len()];
        let mut m_inc = 0.0;
        for (i, d) in density.iter_mut().enumerate() {
            let fa = f.values()[i].as_f64();
            let mut adv = 0.0;
            for (c, gc) in u.components().iter().zip(grad.components()) {
                adv += (c.values()[i] * gc.values()[i]).as_f64();
            }
            let mut stoch = 0.0;
            if let Some(n) = &noise {
                for (c, gc) in n.components().iter().zip(grad.components()) {
                    stoch += (c.values()[i] * gc.values()[i]).as_f64();
                }
            }
            let zv = fz[i].as_f64();
            *d = fa - zv * zv - dt * adv - eps * stoch + nu * dt * lap.values()[i].as_f64();
            m_inc += eps * stoch;
        }
        martingale += m_inc * cell_volume;
        let bin = (((a.time / horizon) * partition.time_bins as f64).floor() as usize).min(partition.time_bins - 1);
        let row = &mut cells[bin * per_bin..(bin + 1) * per_bin];
        for (idx, &d) in density.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let m = grid.unravel(idx);
            // accumulate over the (at most 2 per axis) hats touching this node
            let mut stack = vec![(0usize, 1.0f64)];
            for axis in 0..dim {
                let mut next = Vec::with_capacity(stack.len() * 2);
                for &(flat, wgt) in &stack {
                    for (bk, hat) in hats.iter().enumerate() {
                        let h = hat[m[axis]];
                        if h > 0.0 {
                            next.push((flat * partition.blocks + bk, wgt * h));
                        }
                    }
                }
                stack = next;
            }
            for (flat, wgt) in stack {
                row[flat] += wgt * d * cell_volume;
            }
        }
    }
    let total: f64 = cells.iter().sum();
    let total_variation = cells.iter().map(|c| c.abs()).sum();
    let worst_cell = cells.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0);
    let scale = traj.initial().l2_norm().as_f64().powi(2);
    Ok(DissipationEstimate {
        partition,
        dim,
        horizon,
        negative: worst_cell < -1e-12 * scale.max(f64::MIN_POSITIVE),
        cells,
        total,
        total_variation,
        worst_cell,
        initial_energy: scale,
        final_energy: traj.terminal().l2_norm().as_f64().powi(2),
        martingale,
    })
}

/// `eps^2 int_0^T ||rho_s||^2_{H^{1 - alpha - delta}} ds` by the
/// trapezoidal rule over the snapshots.
pub fn regularization_functional<T: Real>(traj: &Trajectory<T>, epsilon: f64, alpha: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < alpha) {
        return Err(invalid(format!("delta = {delta} must lie in (0, alpha = {alpha})")));
    }
    let s = 1.0 - alpha - delta;
    let values: Vec<f64> = traj
        .fields()
        .map(|f| f.sobolev_norm(s).map(|v| v.as_f64().powi(2)))
        .collect::<Result<_>>()?;
    let times = traj.times();
    let integral: f64 = (0..values.len().saturating_sub(1))
        .map(|i| 0.5 * (times[i + 1] - times[i]) * (values[i] + values[i + 1]))
        .sum();
    Ok(epsilon * epsilon * integral)
}

/// A lattice point with its physical wavevector.
#[derive(Debug, Clone, Copy)]
pub struct LatticePoint {
    pub mode: [i64; 3],
    pub xi: [f64; 3],
}

fn norm_sq(v: &[f64; 3]) -> f64 {
    v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
}

/// `|P^perp_v w|^2 = |w|^2 - (v . w)^2 / |v|^2`.
fn transverse_sq(v: &[f64; 3], w: &[f64; 3]) -> f64 {
    let vv = norm_sq(v);
    let vw = v[0] * w[0] + v[1] * w[1] + v[2] * w[2];
    (norm_sq(w) - vw * vw / vv).max(0.0)
}

/// Double sum `sum_{xi != eta} |P^perp_{xi - eta} xi|^2 a(xi) (psi(eta) -
/// psi(xi)) weight(xi - eta)` over an explicit lattice.
pub fn lattice_transfer(
    lattice: &[LatticePoint],
    a: &[f64],
    psi: &[f64],
    weight: impl Fn(&[i64; 3], &[f64; 3]) -> f64,
) -> Result<f64> {
    if a.len() != lattice.len() || psi.len() != lattice.len() {
        return Err(Error::GridMismatch(format!(
            "lattice of {} points, a has {}, psi has {}",
            lattice.len(),
            a.len(),
            psi.len()
        )));
    }
    let mut sum = 0.0;
    for (i, p) in lattice.iter().enumerate() {
        if a[i] == 0.0 {
            continue;
        }
        for (j, q) in lattice.iter().enumerate() {
            if i == j {
                continue;
            }
            let dm = [p.mode[0] - q.mode[0], p.mode[1] - q.mode[1], p.mode[2] - q.mode[2]];
            let dv = [p.xi[0] - q.xi[0], p.xi[1] - q.xi[1], p.xi[2] - q.xi[2]];
            let w = weight(&dm, &dv);
            if w == 0.0 {
                continue;
            }
            sum += transverse_sq(&dv, &p.xi) * a[i] * (psi[j] - psi[i]) * w;
        }
    }
    Ok(sum)
}

fn lattice_of<T: Real>(domain: &Domain<T>) -> Vec<LatticePoint> {
    (0..domain.len())
        .map(|idx| {
            let w = domain.wavevector(idx);
            LatticePoint {
                mode: domain.mode(idx),
                xi: [w[0].as_f64(), w[1].as_f64(), w[2].as_f64()],
            }
        })
        .collect()
}

fn check_maps<T: Real>(a: &ModeMap<T>, psi: &ModeMap<T>) -> Result<()> {
    if a.domain().grid() != psi.domain().grid() {
        return Err(Error::GridMismatch(format!(
            "a on {} vs psi on {}",
            a.domain().grid(),
            psi.domain().grid()
        )));
    }
    Ok(())
}

fn as_f64<T: Real>(m: &ModeMap<T>) -> Vec<f64> {
    m.values().iter().map(|v| v.as_f64()).collect()
}

/// Transfer kernel with the continuum weight
/// `(2 pi)^{-d/2} <xi - eta>^{-(d + 2 alpha)}` over every grid mode.
pub fn kernel_transfer<T: Real>(a: &ModeMap<T>, psi: &ModeMap<T>, alpha: f64) -> Result<f64> {
    check_maps(a, psi)?;
    let dim = a.domain().dim() as f64;
    let pre = (2.0 * std::f64::consts::PI).powf(-dim / 2.0);
    lattice_transfer(&lattice_of(a.domain()), &as_f64(a), &as_f64(psi), |_, dv| {
        pre * (1.0 + norm_sq(dv)).powf(-(dim + 2.0 * alpha) / 2.0)
    })
}

/// Second-moment generator of the dealiased Itô system without drift:
///
/// ```text
/// sum_xi sum_k theta_k^2 |P^perp_k xi|^2 a(xi) (psi(xi + k) 1[xi + k kept] - psi(xi))
/// ```
///
/// over retained `xi` and noise lattice vectors `k`. Energy pushed past the
/// dealiasing cutoff is lost rather than transferred, which is what the
/// solver does, so `d/dt sum a psi = eps^2 kernel_transfer_torus(a, psi)`
/// holds for the ensemble mode energies `a` up to time-step error.
pub fn kernel_transfer_torus<T: Real>(a: &ModeMap<T>, psi: &ModeMap<T>, basis: &NoiseBasis<T>) -> Result<f64> {
    check_maps(a, psi)?;
    let domain = a.domain();
    basis.check_resolution(domain)?;
    let grid = domain.grid();
    let unit = grid.wavenumber_unit();
    // both polarizations of a 3D wavevector share one amplitude, so one
    // Cos entry per lattice vector carries theta_k^2
    let mut lattice: Vec<([i64; 3], f64)> = Vec::new();
    for mode in basis.modes() {
        if mode.phase == Phase::Cos && !lattice.iter().any(|(m, _)| *m == mode.lattice) {
            lattice.push((mode.lattice, mode.amplitude.as_f64().powi(2)));
        }
    }
    let a = as_f64(a);
    let psi = as_f64(psi);
    let mut sum = 0.0;
    for (idx, &ai) in a.iter().enumerate() {
        if ai == 0.0 || !domain.is_retained(idx) {
            continue;
        }
        let m = domain.mode(idx);
        let xi = [m[0] as f64 * unit, m[1] as f64 * unit, m[2] as f64 * unit];
        for (k, w) in &lattice {
            let kv = [k[0] as f64 * unit, k[1] as f64 * unit, k[2] as f64 * unit];
            let eta = [m[0] + k[0], m[1] + k[1], m[2] + k[2]];
            let gain = match grid.mode_index(&eta[..grid.dim]) {
                Some(j) if domain.is_retained(j) => psi[j],
                _ => 0.0,
            };
            sum += w * transverse_sq(&kv, &xi) * ai * (gain - psi[idx]);
        }
    }
    Ok(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Weak-type distance: truncated negative-Sobolev series plus a
    /// low-mode dictionary probe.
    DE,
    /// `sup_t ||.||_{L^2} + sup_t ||.||_{L^p}`.
    DScriptE,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    pub p: f64,
    pub n_max: usize,
    /// Dictionary modes satisfy `|k| <= dictionary_radius`.
    pub dictionary_radius: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            p: 4.0,
            n_max: 8,
            dictionary_radius: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathDistance {
    pub value: f64,
    /// Set when snapshot times differed and nearest snapshots were paired.
    pub resampled: bool,
}

/// Cosine and sine of every lattice mode with `0 < |k| <= radius`, one per
/// `{k, -k}` pair, plus the constant.
pub fn weak_dictionary<T: Real>(domain: &Arc<Domain<T>>, radius: f64) -> Vec<ScalarField<T>> {
    let dim = domain.dim();
    let r = radius.floor() as i64;
    let mut out = vec![ScalarField::constant(domain, T::one())];
    let range = |axis: usize| if axis < dim { -r..=r } else { 0..=0 };
    for a in range(0) {
        for b in range(1) {
            for c in range(2) {
                let m = [a, b, c];
                let first = m.iter().find(|&&v| v != 0);
                if first.is_none_or(|&v| v < 0) || ((a * a + b * b + c * c) as f64).sqrt() > radius {
                    continue;
                }
                let unit = domain.grid().wavenumber_unit();
                let phase = move |x: &[f64]| unit * (0..dim).map(|i| m[i] as f64 * x[i]).sum::<f64>();
                out.push(ScalarField::from_fn(domain, move |x| phase(x).cos()));
                out.push(ScalarField::from_fn(domain, move |x| phase(x).sin()));
            }
        }
    }
    out
}

fn pair_snapshots<'a, T: Real>(
    a: &'a Trajectory<T>,
    b: &'a Trajectory<T>,
) -> Result<(Vec<(&'a ScalarField<T>, &'a ScalarField<T>)>, bool)> {
    if a.domain().grid() != b.domain().grid() {
        return Err(Error::GridMismatch(format!("{} vs {}", a.domain().grid(), b.domain().grid())));
    }
    let same = a.len() == b.len() && a.snapshots.iter().zip(&b.snapshots).all(|(x, y)| (x.time - y.time).abs() < 1e-12);
    if same {
        return Ok((a.fields().zip(b.fields()).collect(), false));
    }
    let pairs = a
        .snapshots
        .iter()
        .map(|s| {
            let nearest = b
                .snapshots
                .iter()
                .min_by(|x, y| (x.time - s.time).abs().total_cmp(&(y.time - s.time).abs()))
                .expect("trajectory has snapshots");
            (&s.field, &nearest.field)
        })
        .collect();
    Ok((pairs, true))
}

pub fn path_distance<T: Real>(
    a: &Trajectory<T>,
    b: &Trajectory<T>,
    metric: Metric,
    opts: &MetricOptions,
) -> Result<PathDistance> {
    let (pairs, resampled) = pair_snapshots(a, b)?;
    let diffs: Vec<ScalarField<T>> = pairs.iter().map(|(x, y)| x.sub(y)).collect();
    let value = match metric {
        Metric::DScriptE => {
            let mut l2 = 0.0f64;
            let mut lp = 0.0f64;
            for d in &diffs {
                l2 = l2.max(d.l2_norm().as_f64());
                lp = lp.max(d.lp_norm(opts.p)?.as_f64());
            }
            l2 + lp
        }
        Metric::DE => {
            let mut series = 0.0;
            for n in 1..=opts.n_max {
                let s = -1.0 / n as f64;
                let mut sup = 0.0f64;
                for d in &diffs {
                    sup = sup.max(d.sobolev_norm(s)?.as_f64());
                }
                series += 0.5f64.powi(n as i32) * sup.min(1.0);
            }
            let dictionary = weak_dictionary(a.domain(), opts.dictionary_radius);
            let mut probe = 0.0f64;
            for d in &diffs {
                for phi in &dictionary {
                    probe = probe.max(d.inner(phi).abs().as_f64());
                }
            }
            series + probe
        }
    };
    Ok(PathDistance { value, resampled })
}
