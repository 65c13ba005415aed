use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ktl_cli::manifest::{read_manifest, Status};
use ktl_core::experiments::{ExperimentReport, ReportBody};
use ktl_core::io::read_snapshot;

const EVOLVE: &str = r#"
seed = 11

[grid]
dim = 2
n = 16

[noise]
alpha = 0.25
cutoff = 4

[drift]
kind = "zero"

[initial]
kind = "constant"
value = 1.5

[solver]
epsilon = 0.0
dt = 0.01
T = 0.1
record_every = 5

[experiment]
kind = "evolve"
"#;

const NOISY: &str = r#"
seed = 3

[grid]
dim = 2
n = 16

[noise]
alpha = 0.25
cutoff = 4

[drift]
kind = "cellular"
amplitude = 1.0
wavenumber = 1

[initial]
kind = "fourier"
terms = [{ amplitude = 1.0, mode = [1, 0] }, { amplitude = 0.5, mode = [0, 2], phase = "sin" }]

[solver]
epsilon = 0.3
dt = 0.01
T = 0.2
record_every = 5

[experiment]
kind = "evolve"
"#;

const ZERO_NOISE: &str = r#"
seed = 5

[grid]
dim = 2
n = 32

[noise]
alpha = 0.25
cutoff = 8

[drift]
kind = "cellular"
amplitude = 1.0
wavenumber = 1

[initial]
kind = "fourier"
terms = [{ amplitude = 1.0, mode = [1, 0] }, { amplitude = 0.5, mode = [0, 2], phase = "sin" }]

[solver]
dt = 0.001
T = 1.0
record_every = 50

[experiment]
kind = "zero_noise"
epsilons = [0.4, 0.2, 0.1]
paths = 8
metric = "d_script_e"
"#;

fn ktl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ktl"))
        .args(args)
        .env("KTL_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Runs `config` into `out` and returns the single run directory.
fn run(config: &Path, out: &Path) -> PathBuf {
    let o = ktl(&["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "run failed: {}", String::from_utf8_lossy(&o.stderr));
    let mut dirs: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.pop().unwrap()
}

fn report(dir: &Path) -> ExperimentReport {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn noise_free_evolve_keeps_a_constant_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "evolve.toml", EVOLVE);
    let dir = run(&cfg, &tmp.path().join("out"));
    let m = read_manifest(&dir).unwrap();
    assert_eq!(m.status, Status::Ok);
    assert_eq!(m.experiment, "evolve");
    let snaps: Vec<_> = m.files.iter().filter(|f| f.path.starts_with("fields/rho_") && f.path.ends_with(".bin")).collect();
    assert_eq!(snaps.len(), 3);
    for f in snaps {
        let (_, comps) = read_snapshot(&dir.join(&f.path)).unwrap();
        assert!(comps[0].iter().all(|&v| v == 1.5));
    }
    let ReportBody::Evolve(d) = report(&dir).body else { panic!("wrong body") };
    assert_eq!(d.steps, 10);
    assert!((d.final_l2 - d.initial_l2).abs() <= 1e-12 * d.initial_l2);
}

#[test]
fn same_config_and_seed_reproduce_every_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "noisy.toml", NOISY);
    let a = read_manifest(&run(&cfg, &tmp.path().join("a"))).unwrap();
    let b = read_manifest(&run(&cfg, &tmp.path().join("b"))).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    assert!(!a.files.is_empty());
    assert_eq!(a.files, b.files);

    // a different seed is a different run
    let o = ktl(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("c").to_str().unwrap(), "--seed", "4"]);
    assert!(o.status.success());
    let c_dir = fs::read_dir(tmp.path().join("c")).unwrap().next().unwrap().unwrap().path();
    let c = read_manifest(&c_dir).unwrap();
    assert_ne!(c.config_hash, a.config_hash);
    assert_eq!(c.master_seed, 4);
}

#[test]
fn replay_matches_the_original_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "noisy.toml", NOISY);
    let dir = run(&cfg, &tmp.path().join("out"));
    let o = ktl(&["replay", dir.to_str().unwrap(), "--out", tmp.path().join("again").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("replay identical"));
}

#[test]
fn zero_noise_smoke_run_writes_one_row_per_epsilon() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "zn.toml", ZERO_NOISE);
    let start = std::time::Instant::now();
    let dir = run(&cfg, &tmp.path().join("out"));
    assert!(start.elapsed().as_secs() < 300);
    let mut rdr = csv::Reader::from_path(dir.join("report.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["config_hash", "epsilon", "median", "q1", "q3", "mean", "stderr", "paths"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    let hash = read_manifest(&dir).unwrap().config_hash;
    for (row, eps) in rows.iter().zip([0.4, 0.2, 0.1]) {
        assert_eq!(&row[0], hash);
        assert_eq!(row[1].parse::<f64>().unwrap(), eps);
        assert_eq!(&row[7], "8");
        let median: f64 = row[2].parse().unwrap();
        assert!(median.is_finite() && median > 0.0);
    }
}

#[test]
fn export_round_trips_json_and_csv_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "zn.toml", ZERO_NOISE.replace("paths = 8", "paths = 2").as_str());
    let dir = run(&cfg, &tmp.path().join("out"));
    let original_json = fs::read(dir.join("report.json")).unwrap();
    let original_csv = fs::read(dir.join("report.csv")).unwrap();

    // exporting in place is idempotent and leaves the manifest valid
    for fmt in ["csv", "json", "csv"] {
        let o = ktl(&["export", dir.to_str().unwrap(), "--format", fmt]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(dir.join("report.json")).unwrap(), original_json);
    assert_eq!(fs::read(dir.join("report.csv")).unwrap(), original_csv);

    // json -> csv -> json: every number in the CSV parses back bit-exactly
    let elsewhere = tmp.path().join("exported");
    let o = ktl(&["export", dir.to_str().unwrap(), "--format", "csv", "--out", elsewhere.to_str().unwrap()]);
    assert!(o.status.success());
    let ReportBody::ZeroNoise(conv) = report(&dir).body else { panic!("wrong body") };
    let mut rdr = csv::Reader::from_path(elsewhere.join("report.csv")).unwrap();
    for (rec, row) in rdr.records().map(Result::unwrap).zip(&conv.rows) {
        let s = &row.summary;
        let back: Vec<f64> = (1..7).map(|i| rec[i].parse().unwrap()).collect();
        let want = [row.epsilon, s.median, s.q1, s.q3, s.mean, s.stderr];
        for (x, y) in back.iter().zip(want) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
    let o = ktl(&["export", dir.to_str().unwrap(), "--format", "json", "--out", elsewhere.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read(elsewhere.join("report.json")).unwrap(), original_json);
}

#[test]
fn tampered_snapshot_is_reported_by_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "evolve.toml", EVOLVE);
    let dir = run(&cfg, &tmp.path().join("out"));
    let victim = dir.join("fields/rho_000005.bin");
    let mut bytes = fs::read(&victim).unwrap();
    bytes[3] ^= 0x10;
    fs::write(&victim, bytes).unwrap();
    let o = ktl(&["export", dir.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(o.status.code(), Some(4));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("rho_000005.bin"), "{err}");
    assert!(err.contains("checksum mismatch"));
    // replay refuses as well
    assert_eq!(ktl(&["replay", dir.to_str().unwrap()]).status.code(), Some(4));
}

#[test]
fn schema_violations_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        EVOLVE.replace("record_every = 5", "record_every = 5\nstride = 2"),
        EVOLVE.replace("alpha = 0.25", "alpha = 0.75"),
        EVOLVE.replace("cutoff = 4", "cutoff = 6"),
        EVOLVE.replace("n = 16", "n = 16.5"),
        ZERO_NOISE.replace("[0.4, 0.2, 0.1]", "[0.1, 0.2]"),
        ZERO_NOISE.replace("paths = 8", "paths = 0"),
    ];
    for (i, text) in cases.iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("bad{i}.toml"), text);
        let out = tmp.path().join(format!("out{i}"));
        let o = ktl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "case {i}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.exists(), "case {i} wrote output");
        let v = ktl(&["validate", "--config", cfg.to_str().unwrap()]);
        assert_eq!(v.status.code(), Some(2));
    }
}

#[test]
fn numerical_abort_exits_three_and_keeps_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    // no admissible control can push the noise-free path this far
    let text = NOISY.replace(
        "[experiment]\nkind = \"evolve\"\n",
        "[experiment]\nkind = \"ldp_tail\"\nepsilons = [0.3]\npaths = 4\ndelta = 1.0\node_dt = 0.01\n\
         tilt = { level = 1e6, control = { modes = 1, profiles = [\"constant\"], budget = 1.0 } }\n",
    );
    let cfg = write_config(tmp.path(), "abort.toml", &text);
    let out = tmp.path().join("out");
    let o = ktl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = fs::read_dir(&out).unwrap().next().unwrap().unwrap().path();
    let m = read_manifest(&dir).unwrap();
    assert!(matches!(m.status, Status::Failed { .. }));
    assert!(!dir.join("report.json").exists());
}

#[test]
fn sweep_expands_into_child_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{EVOLVE}\n[sweep]\n\"solver.dt\" = [0.01, 0.005]\nseed = [1, 2, 3]\n");
    let cfg = write_config(tmp.path(), "sweep.toml", &text);
    let children = tmp.path().join("children");
    let o = ktl(&["validate", "--config", cfg.to_str().unwrap(), "--expand", children.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let files: Vec<PathBuf> = fs::read_dir(&children).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 6);
    for f in &files {
        let child = ktl_cli::RunConfig::parse(&fs::read_to_string(f).unwrap()).unwrap();
        assert!(child.sweep.is_empty());
        assert_eq!(f.file_stem().unwrap().to_str().unwrap(), child.hash());
    }

    let bad = write_config(tmp.path(), "bad.toml", &format!("{EVOLVE}\n[sweep]\n\"solver.stride\" = [1]\n"));
    assert_eq!(ktl(&["validate", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let out = tmp.path().join("out");
    let o = ktl(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_dir(&out).unwrap().count(), 6);
}
