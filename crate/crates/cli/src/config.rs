//! Run configuration: one TOML document, one experiment.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use ktl_core::control::{ControlSpec, ProfileKind};
use ktl_core::diagnostics::{Metric, MetricOptions, Partition};
use ktl_core::drift::DriftSpec;
use ktl_core::experiments::OptimizerOptions;
use ktl_core::noise::{NoiseSpec, Phase};
use ktl_core::solver::{Diffusion, Scheme, SolverConfig};
use ktl_core::Grid;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Root of the output tree; the run lands in `<out>/<hash>/`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub grid: GridBlock,
    pub noise: NoiseBlock,
    #[serde(default = "DriftSpec::zero")]
    pub drift: DriftSpec,
    pub initial: Initial,
    pub solver: SolverBlock,
    pub experiment: Experiment,
    /// Dotted key -> list of values; expands into one child config per
    /// point of the Cartesian product.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub dim: usize,
    pub n: usize,
    #[serde(default = "two_pi")]
    pub length: f64,
}

fn two_pi() -> f64 {
    2.0 * std::f64::consts::PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBlock {
    pub alpha: f64,
    pub cutoff: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Initial {
    Constant { value: f64 },
    /// Sum of `amplitude * cos|sin(mode . x)`.
    Fourier { terms: Vec<FourierTerm> },
    /// A scalar snapshot written by `ktl` (or anything using its format).
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FourierTerm {
    pub amplitude: f64,
    pub mode: Vec<i64>,
    #[serde(default = "cos")]
    pub phase: Phase,
}

fn cos() -> Phase {
    Phase::Cos
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverBlock {
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub kappa: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "ito")]
    pub scheme: Scheme,
    #[serde(default = "one")]
    pub record_every: usize,
    #[serde(default)]
    pub diffusion: Diffusion,
}

fn ito() -> Scheme {
    Scheme::ItoEuler
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBlock {
    /// Number of low lattice vectors (each contributes a cosine and a sine).
    pub modes: usize,
    pub profiles: Vec<ProfileKind>,
    pub budget: f64,
}

impl ControlBlock {
    pub fn spec(&self, dim: usize) -> ktl_core::Result<ControlSpec> {
        ControlSpec::low_modes(dim, self.modes, self.profiles.clone(), self.budget)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TiltBlock {
    pub control: ControlBlock,
    /// Deviation the noise-free tilted path is steered to.
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Functional {
    Constant { value: f64 },
    /// `min(cap, d(rho, rho_ref))` for the chosen metric.
    Distance {
        metric: Metric,
        #[serde(default = "unit")]
        cap: f64,
    },
    /// `min(cap, sup_t ||rho - rho_ref||_{H^s})`.
    Sobolev {
        #[serde(default = "minus_one")]
        s: f64,
        #[serde(default = "unit")]
        cap: f64,
    },
}

fn unit() -> f64 {
    1.0
}

fn minus_one() -> f64 {
    -1.0
}

fn default_ode_dt() -> f64 {
    5e-3
}

fn default_schedule() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    Evolve {
        #[serde(default = "yes")]
        save_fields: bool,
    },
    ZeroNoise {
        epsilons: Vec<f64>,
        paths: usize,
        metric: Metric,
        #[serde(default)]
        metric_options: MetricOptions,
        #[serde(default = "default_schedule")]
        schedule: Vec<f64>,
        #[serde(default = "default_ode_dt")]
        ode_dt: f64,
    },
    LdpTail {
        epsilons: Vec<f64>,
        paths: usize,
        /// Threshold on `sup_t ||rho - rho_ref||_{H^s}`.
        delta: f64,
        #[serde(default = "minus_one")]
        s: f64,
        #[serde(default = "default_ode_dt")]
        ode_dt: f64,
        #[serde(default)]
        tilt: Option<TiltBlock>,
    },
    RateFn {
        control: ControlBlock,
        /// The target is the controlled characteristics of `b + g(theta)`.
        target_theta: Vec<f64>,
        penalty: f64,
        tolerance: f64,
        #[serde(default = "default_ode_dt")]
        ode_dt: f64,
        #[serde(default)]
        optimizer: OptimizerOptions,
    },
    Variational {
        epsilons: Vec<f64>,
        paths: usize,
        control: ControlBlock,
        functional: Functional,
        #[serde(default = "default_ode_dt")]
        ode_dt: f64,
        #[serde(default)]
        optimizer: OptimizerOptions,
    },
    DissipationLdp {
        epsilons: Vec<f64>,
        paths: usize,
        /// Threshold as a fraction of `||rho_0||^2_{L^2}`.
        delta_fraction: f64,
        #[serde(default)]
        partition: Partition,
    },
}

fn yes() -> bool {
    true
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Evolve { .. } => "evolve",
            Experiment::ZeroNoise { .. } => "zero_noise",
            Experiment::LdpTail { .. } => "ldp_tail",
            Experiment::RateFn { .. } => "rate_fn",
            Experiment::Variational { .. } => "variational",
            Experiment::DissipationLdp { .. } => "dissipation_ldp",
        }
    }
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::Schema(msg.into())
}

fn check_epsilons(eps: &[f64]) -> Result<(), CliError> {
    if eps.is_empty() || eps.windows(2).any(|w| w[1] >= w[0]) || eps.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(schema(format!("epsilons {eps:?} must be strictly decreasing in (0, 1]")));
    }
    Ok(())
}

fn check_paths(paths: usize) -> Result<(), CliError> {
    if paths == 0 {
        return Err(schema("paths must be at least 1"));
    }
    Ok(())
}

fn check_positive(v: f64, what: &str) -> Result<(), CliError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(schema(format!("{what} = {v} must be positive")));
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| schema(e.to_string()))
    }

    pub fn grid(&self) -> ktl_core::Result<Grid> {
        Grid::with_box(self.grid.dim, self.grid.n, self.grid.length, Grid::DEFAULT_DEALIAS)
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec {
            dim: self.grid.dim,
            alpha: self.noise.alpha,
            cutoff: self.noise.cutoff,
            length: self.grid.length,
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.solver;
        let mut cfg = SolverConfig::new(s.epsilon, s.dt, s.horizon, s.scheme)
            .with_kappa(s.kappa)
            .with_record_every(s.record_every)
            .with_seed(self.seed);
        cfg.diffusion = s.diffusion;
        cfg
    }

    /// Every range check that can run before any field is allocated.
    pub fn validate(&self) -> Result<(), CliError> {
        let core = |e: ktl_core::Error| schema(e.to_string());
        if self.grid.n < 4 || self.grid.n > 1024 {
            return Err(schema(format!("grid.n = {} outside 4..=1024", self.grid.n)));
        }
        self.grid().map_err(core)?;
        let noise = self.noise_spec();
        noise.validate().map_err(core)?;
        // the solver refuses this too, but only after building the basis
        if 3 * noise.cutoff >= self.grid.n {
            return Err(schema(format!(
                "noise.cutoff = {} is not resolved on N = {} (need 3K < N)",
                noise.cutoff, self.grid.n
            )));
        }
        self.drift.validate(self.grid.dim).map_err(core)?;
        self.solver_config().validate().map_err(core)?;
        self.solver_config().steps().map_err(core)?;
        match &self.initial {
            Initial::Constant { value } if !value.is_finite() => return Err(schema("initial value must be finite")),
            Initial::Fourier { terms } => {
                if terms.is_empty() {
                    return Err(schema("initial.terms is empty"));
                }
                for t in terms {
                    if t.mode.len() != self.grid.dim || !t.amplitude.is_finite() {
                        return Err(schema(format!("initial term {:?} does not fit dimension {}", t.mode, self.grid.dim)));
                    }
                }
            }
            _ => {}
        }
        let dim = self.grid.dim;
        match &self.experiment {
            Experiment::Evolve { .. } => {}
            Experiment::ZeroNoise {
                epsilons,
                paths,
                schedule,
                ode_dt,
                metric_options,
                ..
            } => {
                check_epsilons(epsilons)?;
                check_paths(*paths)?;
                check_positive(*ode_dt, "ode_dt")?;
                check_positive(metric_options.p, "metric_options.p")?;
                if schedule.is_empty() || schedule.iter().any(|d| !(*d >= 0.0)) {
                    return Err(schema("schedule must list non-negative mollification widths"));
                }
            }
            Experiment::LdpTail {
                epsilons,
                paths,
                delta,
                ode_dt,
                tilt,
                ..
            } => {
                check_epsilons(epsilons)?;
                check_paths(*paths)?;
                check_positive(*delta, "delta")?;
                check_positive(*ode_dt, "ode_dt")?;
                if let Some(t) = tilt {
                    t.control.spec(dim).map_err(core)?;
                    check_positive(t.level, "tilt.level")?;
                }
            }
            Experiment::RateFn {
                control,
                target_theta,
                penalty,
                tolerance,
                ode_dt,
                ..
            } => {
                let spec = control.spec(dim).map_err(core)?;
                let len = spec.modes.len() * spec.profiles.len();
                if target_theta.len() != len {
                    return Err(schema(format!("target_theta has {} entries, the dictionary {len}", target_theta.len())));
                }
                check_positive(*penalty, "penalty")?;
                check_positive(*ode_dt, "ode_dt")?;
                if !(*tolerance >= 0.0) {
                    return Err(schema("tolerance must be non-negative"));
                }
            }
            Experiment::Variational {
                epsilons,
                paths,
                control,
                functional,
                ode_dt,
                ..
            } => {
                check_epsilons(epsilons)?;
                if *paths < 2 {
                    return Err(schema("variational needs at least two paths"));
                }
                check_positive(*ode_dt, "ode_dt")?;
                let spec = control.spec(dim).map_err(core)?;
                let bound = match functional {
                    Functional::Constant { value } => value.abs(),
                    Functional::Distance { cap, .. } | Functional::Sobolev { cap, .. } => {
                        check_positive(*cap, "functional.cap")?;
                        *cap
                    }
                };
                if !(spec.budget > 2.0 * bound) {
                    return Err(schema(format!("budget {} must exceed twice the bound {bound}", spec.budget)));
                }
            }
            Experiment::DissipationLdp {
                epsilons,
                paths,
                delta_fraction,
                partition,
            } => {
                check_epsilons(epsilons)?;
                check_paths(*paths)?;
                check_positive(*delta_fraction, "delta_fraction")?;
                if partition.time_bins == 0 || partition.blocks == 0 {
                    return Err(schema("partition needs at least one bin and one block"));
                }
            }
        }
        Ok(())
    }

    /// Hash of everything that determines the numbers: the canonical JSON
    /// of the config without output location and sweep table.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.out = None;
        canon.sweep.clear();
        let json = serde_json::to_vec(&canon).expect("config serializes");
        hex::encode(Sha256::digest(&json))[..16].to_string()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Child configs of the sweep grid (just `self` without a sweep).
    pub fn expand(&self) -> Result<Vec<RunConfig>, CliError> {
        let mut base = toml::Value::try_from(self).map_err(|e| schema(e.to_string()))?;
        if let toml::Value::Table(t) = &mut base {
            t.remove("sweep");
        }
        let mut points = vec![base];
        for (key, values) in &self.sweep {
            if values.is_empty() {
                return Err(schema(format!("sweep key '{key}' has no values")));
            }
            let mut next = Vec::with_capacity(points.len() * values.len());
            for p in &points {
                for v in values {
                    let mut child = p.clone();
                    set_dotted(&mut child, key, v.clone())?;
                    next.push(child);
                }
            }
            points = next;
        }
        points
            .into_iter()
            .map(|v| {
                let cfg: RunConfig = v.try_into().map_err(|e: toml::de::Error| schema(e.to_string()))?;
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

fn set_dotted(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| schema(format!("sweep key '{key}' walks into a non-table")))?;
        if i + 1 == parts.len() {
            if !table.contains_key(*part) {
                return Err(schema(format!("sweep key '{key}' names no config field")));
            }
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .get_mut(*part)
            .ok_or_else(|| schema(format!("sweep key '{key}' names no config field")))?;
    }
    Ok(())
}
