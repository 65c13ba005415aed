//! Builds the simulation objects from a config, runs the experiment and
//! writes the output tree.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ktl_core::control::ControlDictionary;
use ktl_core::diagnostics::{path_distance, MetricOptions};
use ktl_core::drift::{synthesize_drift, Velocity};
use ktl_core::experiments::{
    dissipation_ldp_check, ldp_tail_estimate, rate_function_eval, steer_toward, sup_sobolev_distance,
    variational_laplace, zero_noise_study, BoundedFunctional, Ensemble, ExperimentReport, RateOptions, ReportBody,
    SEEDING,
};
use ktl_core::io::{read_scalar_field, write_snapshot};
use ktl_core::noise::Phase;
use ktl_core::reference::{renormalized_reference, ReferenceConfig};
use ktl_core::solver::{evolve, Trajectory};
use ktl_core::{Domain, NoiseBasis, ScalarField};

use crate::config::{Experiment, Functional, Initial, RunConfig};
use crate::manifest::{self, OutputTree, RunManifest, Status};
use crate::CliError;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const CONFIG_COPY: &str = "config.toml";

/// The objects every experiment starts from.
pub struct Setup {
    pub domain: Arc<Domain<f64>>,
    pub basis: Arc<NoiseBasis<f64>>,
    pub b: Velocity<f64>,
    pub rho0: ScalarField<f64>,
}

fn schema(e: ktl_core::Error) -> CliError {
    CliError::Schema(e.to_string())
}

fn numerical(e: ktl_core::Error) -> CliError {
    match e {
        ktl_core::Error::Io(e) => CliError::Io(e.to_string()),
        e => CliError::Numerical(e.to_string()),
    }
}

/// `config_dir` resolves relative file references in the config.
pub fn setup(cfg: &RunConfig, config_dir: &Path) -> Result<Setup, CliError> {
    let domain = Domain::<f64>::new(cfg.grid().map_err(schema)?).map_err(schema)?;
    let basis = Arc::new(NoiseBasis::build(cfg.noise_spec()).map_err(schema)?);
    basis.check_resolution(&domain).map_err(schema)?;
    let mut drift_spec = cfg.drift.clone();
    if let ktl_core::drift::DriftKind::User { file } = &mut drift_spec.kind {
        *file = config_dir.join(&*file);
    }
    let b = synthesize_drift(&drift_spec, &domain).map_err(schema)?.velocity;
    let rho0 = match &cfg.initial {
        Initial::Constant { value } => ScalarField::constant(&domain, *value),
        Initial::Fourier { terms } => {
            let terms = terms.clone();
            ScalarField::from_fn(&domain, move |x| {
                terms
                    .iter()
                    .map(|t| {
                        let arg: f64 = t.mode.iter().zip(x).map(|(&m, &xi)| m as f64 * xi).sum();
                        t.amplitude
                            * match t.phase {
                                Phase::Cos => arg.cos(),
                                Phase::Sin => arg.sin(),
                            }
                    })
                    .sum()
            })
        }
        Initial::File { path } => read_scalar_field(&config_dir.join(path), &domain).map_err(schema)?.1,
    };
    Ok(Setup { domain, basis, b, rho0 })
}

/// Result of one experiment before anything touches the disk.
pub struct Outcome {
    pub report: ExperimentReport,
    /// Trajectory whose snapshots go to `fields/`.
    pub trajectory: Option<Trajectory<f64>>,
}

pub fn execute(cfg: &RunConfig, s: &Setup) -> Result<Outcome, CliError> {
    let hash = cfg.hash();
    let solver = cfg.solver_config();
    let ens = Ensemble {
        rho0: s.rho0.clone(),
        b: s.b.clone(),
        basis: s.basis.clone(),
        cfg: solver,
        master_seed: cfg.seed,
    };
    let reference = |ode_dt: f64| {
        renormalized_reference(&s.rho0, &s.b, None, &[0.0], &ReferenceConfig::matching(&solver, ode_dt))
            .map(|r| r.trajectory)
            .map_err(numerical)
    };
    let dictionary = |block: &crate::config::ControlBlock| {
        let spec = block.spec(s.domain.dim()).map_err(schema)?;
        ControlDictionary::build(&spec, &s.domain, &s.basis, solver.horizon).map_err(schema)
    };
    let mut trajectory = None;
    let body = match &cfg.experiment {
        Experiment::Evolve { save_fields } => {
            let basis = (solver.epsilon > 0.0).then_some(&s.basis);
            let traj = evolve(&s.rho0, &s.b, None, basis, &solver).map_err(numerical)?;
            let d = traj.diagnostics.clone();
            if *save_fields {
                trajectory = Some(traj);
            }
            ReportBody::Evolve(d)
        }
        Experiment::ZeroNoise {
            epsilons,
            paths,
            metric,
            metric_options,
            schedule,
            ode_dt,
        } => ReportBody::ZeroNoise(
            zero_noise_study(&ens, epsilons, *paths, *metric, metric_options, schedule, *ode_dt)
                .map_err(numerical)?,
        ),
        Experiment::LdpTail {
            epsilons,
            paths,
            delta,
            s: order,
            ode_dt,
            tilt,
        } => {
            let r = reference(*ode_dt)?;
            let (order, delta) = (*order, *delta);
            let event = |traj: &Trajectory<f64>| Ok(sup_sobolev_distance(traj, &r, order)? >= delta);
            let tail = match tilt {
                None => ldp_tail_estimate(&ens, &event, epsilons, *paths, None),
                Some(t) => {
                    let dict = dictionary(&t.control)?;
                    let theta = steer_toward(&ens, &dict, &r, order, t.level).map_err(numerical)?;
                    ldp_tail_estimate(&ens, &event, epsilons, *paths, Some((&dict, &theta)))
                }
            };
            ReportBody::LdpTail(tail.map_err(numerical)?)
        }
        Experiment::RateFn {
            control,
            target_theta,
            penalty,
            tolerance,
            ode_dt,
            optimizer,
        } => {
            let dict = dictionary(control)?;
            dict.ensure_admitted(target_theta).map_err(schema)?;
            let g = dict.velocity(target_theta).map_err(numerical)?;
            let rc = ReferenceConfig::matching(&solver, *ode_dt);
            let target = renormalized_reference(&s.rho0, &s.b, Some(&g), &[0.0], &rc)
                .map_err(numerical)?
                .trajectory;
            let opts = RateOptions {
                penalty: *penalty,
                tolerance: *tolerance,
                ode_dt: *ode_dt,
                metric: MetricOptions::default(),
                optimizer: *optimizer,
            };
            trajectory = Some(target.clone());
            ReportBody::RateFunction(rate_function_eval(&target, &s.rho0, &s.b, &dict, &opts).map_err(numerical)?)
        }
        Experiment::Variational {
            epsilons,
            paths,
            control,
            functional,
            ode_dt,
            optimizer,
        } => {
            let dict = dictionary(control)?;
            let r = reference(*ode_dt)?;
            let h = match functional.clone() {
                Functional::Constant { value } => BoundedFunctional {
                    bound: value.abs(),
                    h: Box::new(move |_: &Trajectory<f64>| Ok(value)),
                },
                Functional::Distance { metric, cap } => {
                    let r = &r;
                    BoundedFunctional {
                        bound: cap,
                        h: Box::new(move |traj: &Trajectory<f64>| {
                            Ok(path_distance(traj, r, metric, &MetricOptions::default())?.value.min(cap))
                        }),
                    }
                }
                Functional::Sobolev { s: order, cap } => {
                    let r = &r;
                    BoundedFunctional {
                        bound: cap,
                        h: Box::new(move |traj: &Trajectory<f64>| Ok(sup_sobolev_distance(traj, r, order)?.min(cap))),
                    }
                }
            };
            let estimates = epsilons
                .iter()
                .map(|&eps| variational_laplace(&ens, &h, eps, &dict, *paths, optimizer))
                .collect::<ktl_core::Result<Vec<_>>>()
                .map_err(numerical)?;
            ReportBody::Variational { estimates }
        }
        Experiment::DissipationLdp {
            epsilons,
            paths,
            delta_fraction,
            partition,
        } => {
            let e0 = s.rho0.l2_norm().powi(2);
            ReportBody::DissipationLdp(
                dissipation_ldp_check(&ens, epsilons, *paths, delta_fraction * e0, *partition).map_err(numerical)?,
            )
        }
    };
    Ok(Outcome {
        report: ExperimentReport::new(hash, cfg.seed, body),
        trajectory,
    })
}

fn csv_bytes(report: &ExperimentReport) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    report.write_csv(&mut buf).map_err(numerical)?;
    Ok(buf)
}

pub fn json_bytes(report: &ExperimentReport) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(report).expect("report serializes");
    v.push(b'\n');
    v
}

/// Writes `report.<format>` for `report` into `dir`.
pub fn emit(report: &ExperimentReport, dir: &Path, format: Format) -> Result<PathBuf, CliError> {
    let (name, bytes) = match format {
        Format::Json => (REPORT_JSON, json_bytes(report)),
        Format::Csv => (REPORT_CSV, csv_bytes(report)?),
    };
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

fn snapshot(tree: &mut OutputTree, stem: &str, time: f64, fields: &[&ScalarField<f64>]) -> Result<(), CliError> {
    let bin = format!("fields/{stem}.bin");
    write_snapshot(&tree.path(&bin), stem, time, fields).map_err(numerical)?;
    tree.record(&bin)?;
    tree.record(&format!("fields/{stem}.json"))
}

/// Runs one (already validated, sweep-free) config into `<out_root>/<hash>`.
pub fn run_one(cfg: &RunConfig, config_dir: &Path, out_root: &Path) -> Result<(PathBuf, RunManifest), CliError> {
    let started = manifest::now();
    let setup = setup(cfg, config_dir)?;
    let root = out_root.join(cfg.hash());
    let mut tree = OutputTree::create(&root)?;
    tree.write(CONFIG_COPY, cfg.to_toml().as_bytes())?;
    let b0 = setup.b.at(0.0);
    let mut b_fields: Vec<&ScalarField<f64>> = Vec::new();
    for a in 0..setup.domain.dim() {
        b_fields.push(b0.component(a));
    }
    snapshot(&mut tree, "drift", 0.0, &b_fields)?;
    snapshot(&mut tree, "rho0", 0.0, &[&setup.rho0])?;

    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        experiment: cfg.experiment.name().to_string(),
        started,
        finished: started,
        master_seed: cfg.seed,
        seeding: SEEDING.to_string(),
        status: Status::Ok,
        files: Vec::new(),
    };
    let outcome = match execute(cfg, &setup) {
        Ok(o) => o,
        Err(e) => {
            manifest.status = Status::Failed { error: e.to_string() };
            manifest.finished = manifest::now();
            tree.finish(manifest)?;
            return Err(e);
        }
    };
    if let Some(traj) = &outcome.trajectory {
        for snap in &traj.snapshots {
            snapshot(&mut tree, &format!("rho_{:06}", snap.step), snap.time, &[&snap.field])?;
        }
    }
    tree.write(REPORT_JSON, &json_bytes(&outcome.report))?;
    tree.write(REPORT_CSV, &csv_bytes(&outcome.report)?)?;
    manifest.finished = manifest::now();
    let manifest = tree.finish(manifest)?;
    Ok((root, manifest))
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `report.json` of a verified run directory.
pub fn load_report(run_dir: &Path) -> Result<ExperimentReport, CliError> {
    let m = manifest::read_manifest(run_dir)?;
    manifest::verify(run_dir, &m)?;
    let path = run_dir.join(REPORT_JSON);
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Integrity(format!("{}: {e}", path.display())))
}
