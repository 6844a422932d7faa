use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use drbsde_lab::{exit, run_experiment, ExperimentConfig, Outcome};

#[derive(Parser)]
#[command(name = "drbsde-lab", version, about = "Run and verify drbsde experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        /// Output directory; defaults to the config's `out` or `out/<config name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to the number of CPUs.
        #[arg(long)]
        jobs: Option<usize>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every `*.json` config in a directory and print a pass/fail table.
    VerifyAll {
        config_dir: PathBuf,
        /// Parent directory of the per-config outputs.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "run".into(), |s| s.to_string_lossy().into_owned())
}

fn run_one(path: &Path, out: &Path, seed: Option<u64>, jobs: usize) -> Result<Outcome> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    run_experiment(&config, path.parent(), out, jobs)
}

fn code(outcome: &Outcome) -> i32 {
    if outcome.pass {
        exit::PASS
    } else {
        exit::VERIFICATION_FAILED
    }
}

fn init_pool(jobs: Option<usize>) -> Result<usize> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(k) = jobs {
        anyhow::ensure!(k > 0, "--jobs must be at least 1");
        builder = builder.num_threads(k);
    }
    builder.build_global().context("starting the worker pool")?;
    Ok(rayon::current_num_threads())
}

fn run(config: &Path, out: Option<PathBuf>, jobs: Option<usize>, seed: Option<u64>) -> i32 {
    let result = init_pool(jobs).and_then(|jobs| {
        let out = match out {
            Some(dir) => dir,
            None => {
                let cfg = ExperimentConfig::load(config)?;
                cfg.out.map_or_else(|| Path::new("out").join(stem(config)), PathBuf::from)
            }
        };
        run_one(config, &out, seed, jobs)
    });
    match result {
        Ok(outcome) => {
            let status = if outcome.pass { "PASS" } else { "FAIL" };
            let y0 = outcome.y0.map_or_else(String::new, |v| format!(" y0={v:.12}"));
            println!("{status} {}{y0} -> {}", outcome.kind.name(), outcome.out_dir.display());
            for c in &outcome.failed {
                println!("  failed {}: {:e} > {:e}", c.name, c.value, c.limit);
            }
            code(&outcome)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit::CONFIG_ERROR
        }
    }
}

fn verify_all(dir: &Path, out: &Path, jobs: Option<usize>) -> i32 {
    let listing = init_pool(jobs).and_then(|jobs| {
        let mut configs: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        configs.sort();
        anyhow::ensure!(!configs.is_empty(), "no *.json configs in {}", dir.display());
        fs::create_dir_all(out)?;
        Ok((configs, jobs))
    });
    let (configs, jobs) = match listing {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return exit::CONFIG_ERROR;
        }
    };
    let mut worst = exit::PASS;
    let mut summary = String::from("config,kind,status,y0\n");
    println!("{:<32} {:<14} {:<6} y0", "config", "kind", "status");
    for path in &configs {
        let name = stem(path);
        let (kind, status, y0, c) = match run_one(path, &out.join(&name), None, jobs) {
            Ok(o) => {
                let status = if o.pass { "PASS" } else { "FAIL" };
                (o.kind.name().to_string(), status, o.y0.map(|v| format!("{v:.12}")), code(&o))
            }
            Err(e) => {
                eprintln!("{name}: error: {e:#}");
                ("-".into(), "ERROR", None, exit::CONFIG_ERROR)
            }
        };
        worst = worst.max(c);
        let y0 = y0.unwrap_or_default();
        println!("{name:<32} {kind:<14} {status:<6} {y0}");
        summary.push_str(&format!("{name},{kind},{status},{y0}\n"));
    }
    if let Err(e) = fs::write(out.join("summary.csv"), summary) {
        eprintln!("error: writing summary: {e}");
        return exit::CONFIG_ERROR;
    }
    worst
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out, jobs, seed } => run(&config, out, jobs, seed),
        Command::VerifyAll { config_dir, out, jobs } => verify_all(&config_dir, &out, jobs),
    };
    ExitCode::from(code as u8)
}
