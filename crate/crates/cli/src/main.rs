use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ktl_cli::manifest::{read_manifest, verify};
use ktl_cli::run::{emit, load_config, load_report, run_one, Format, CONFIG_COPY};
use ktl_cli::CliError;

#[derive(Parser)]
#[command(name = "ktl", version, about = "Stochastic transport with Kraichnan noise")]
struct Cli {
    /// Worker threads for path-parallel ensembles.
    #[arg(long, global = true, env = "KTL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment in a config (every child of its sweep, if any).
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output root; defaults to the config's `out`, then `./out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the master seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-emit the report of a run directory after checking its checksums.
    Export {
        run_dir: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: ExportFormat,
        /// Destination directory (default: the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config without running it; optionally write its sweep children.
    Validate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write one TOML file per sweep child into this directory.
        #[arg(long)]
        expand: Option<PathBuf>,
    },
    /// Re-run a finished run and compare checksums with its manifest.
    Replay {
        run_dir: PathBuf,
        /// Where the replay is written (default: `<run_dir>.replay`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
    Json,
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Schema(format!("--threads {n}: {e}")))?;
    }
    match cli.command {
        Command::Run { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let root = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
            for child in cfg.expand()? {
                let (dir, manifest) = run_one(&child, &config_dir(&config), &root)?;
                println!("{} {} -> {}", manifest.experiment, manifest.config_hash, dir.display());
            }
        }
        Command::Export { run_dir, format, out } => {
            let report = load_report(&run_dir)?;
            let dest = out.unwrap_or_else(|| run_dir.clone());
            fs::create_dir_all(&dest).map_err(|e| CliError::io(&dest, e))?;
            let format = match format {
                ExportFormat::Csv => Format::Csv,
                ExportFormat::Json => Format::Json,
            };
            println!("{}", emit(&report, &dest, format)?.display());
        }
        Command::Validate { config, seed, expand } => {
            let cfg = load_config(&config, seed)?;
            let children = cfg.expand()?;
            if let Some(dir) = &expand {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            for child in &children {
                println!("{} {}", child.experiment.name(), child.hash());
                if let Some(dir) = &expand {
                    let path = dir.join(format!("{}.toml", child.hash()));
                    fs::write(&path, child.to_toml()).map_err(|e| CliError::io(&path, e))?;
                }
            }
        }
        Command::Replay { run_dir, out } => {
            let original = read_manifest(&run_dir)?;
            verify(&run_dir, &original)?;
            let cfg = load_config(&run_dir.join(CONFIG_COPY), None)?;
            let mut name = run_dir.file_name().unwrap_or_default().to_os_string();
            name.push(".replay");
            let root = out.unwrap_or_else(|| run_dir.with_file_name(name));
            let (dir, replayed) = run_one(&cfg, &run_dir, &root)?;
            let differing: Vec<String> = original
                .files
                .iter()
                .filter(|f| !replayed.files.contains(f))
                .map(|f| f.path.clone())
                .collect();
            if differing.is_empty() && replayed.files.len() == original.files.len() {
                println!("replay identical: {}", dir.display());
            } else {
                return Err(CliError::Integrity(format!("replay differs in {differing:?}")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ktl: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
