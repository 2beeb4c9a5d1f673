use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use taylorlab::exp::{self, ExperimentConfig, ExperimentKind};
use taylorlab::Error;

/// Taylorized vs. full training experiments.
#[derive(Parser, Debug)]
#[command(name = "taylorlab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the full network and its Taylorizations side by side.
    TrainCompare(RunArgs),
    /// Width scaling of the two-layer coupling under gradient flow.
    TheoryScaling(RunArgs),
    /// Width or learning-rate / parameterization ablation.
    Ablate(RunArgs),
    /// Verify a finished run against its manifest and redraw its charts.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory. Defaults to $TAYLORLAB_OUT/<name>, then runs/<name>.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Run a single seed instead of the config's list.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for model-level parallelism.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Config of the run to report on; locates the output directory.
    #[arg(long, value_name = "PATH", required_unless_present = "out")]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Only print the summary of this seed.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (accepted for symmetry; reporting is single-threaded).
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

fn set_threads(n: Option<usize>) -> Result<(), Error> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn config_base(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(kind: &str, args: RunArgs) -> ExitCode {
    if let Err(e) = set_threads(args.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let mut cfg = match ExperimentConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(out) = &args.out {
                let _ = exp::write_failure(out, &e);
            }
            return ExitCode::from(2);
        }
    };
    let base = config_base(&args.config);
    let out = exp::resolve_out_dir(&cfg, args.out.as_deref(), &base);
    let matches = match kind {
        "train-compare" => cfg.experiment == ExperimentKind::TrainCompare,
        "theory-scaling" => cfg.experiment == ExperimentKind::TheoryScaling,
        _ => cfg.experiment.is_ablation(),
    };
    if !matches {
        let e = Error::Config(format!("`{kind}` cannot run a {} config", cfg.experiment));
        eprintln!("error: {e}");
        let _ = exp::write_failure(&out, &e);
        return ExitCode::from(2);
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    match exp::run_experiment(&cfg, &base, &out) {
        Ok(outcome) => {
            println!("wrote {} files to {}", outcome.manifest.files.len(), outcome.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            match exp::write_failure(&out, &e) {
                Ok(p) => eprintln!("failure record: {}", p.display()),
                Err(e2) => eprintln!("could not write failure record: {e2}"),
            }
            ExitCode::from(1)
        }
    }
}

fn report(args: ReportArgs) -> ExitCode {
    if let Err(e) = set_threads(args.threads) {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let dir = match (&args.out, &args.config) {
        (Some(out), _) => out.clone(),
        (None, Some(path)) => match ExperimentConfig::load(path) {
            Ok(cfg) => exp::resolve_out_dir(&cfg, None, &config_base(path)),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        (None, None) => unreachable!("clap requires one of --config/--out"),
    };
    let check = |stage: &str| -> Result<bool, Error> {
        let problems = exp::verify_manifest(&dir)?;
        for p in &problems {
            eprintln!("{stage}: {p:?}");
        }
        Ok(problems.is_empty())
    };
    let result = (|| -> Result<bool, Error> {
        if !check("manifest")? {
            return Ok(false);
        }
        let charts = exp::render_charts_recursive(&dir)?;
        let ok = check("after redraw")?;
        let manifest = exp::manifest::read_manifest(&dir)?;
        println!("run {} ({})", manifest.run.name, manifest.run.experiment);
        println!("config sha256 {}", manifest.run.config_sha256);
        println!("{} files verified, {} charts redrawn", manifest.files.len(), charts.len());
        let summary = dir.join("summary.json");
        if let Ok(text) = std::fs::read_to_string(&summary) {
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) {
                print_summary(&v, args.seed);
            }
        }
        Ok(ok)
    })();
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("manifest verification failed for {}", dir.display());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn print_summary(v: &serde_json::Value, only: Option<u64>) {
    if let Some(seeds) = v.get("seeds").and_then(|s| s.as_array()) {
        for s in seeds {
            if only.is_some_and(|o| s["seed"].as_u64() != Some(o)) {
                continue;
            }
            println!("seed {}: final test accuracy {}", s["seed"], s["final_test_acc"]);
        }
    }
    if let Some(orders) = v.get("orders").and_then(|s| s.as_array()) {
        for o in orders {
            println!(
                "k={}: slope {:.3} (bound {:.3}) within band: {}",
                o["k"],
                o["param_slope"].as_f64().unwrap_or(f64::NAN),
                o["slope_bound"].as_f64().unwrap_or(f64::NAN),
                o["within_band"]
            );
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::TrainCompare(a) => run("train-compare", a),
        Command::TheoryScaling(a) => run("theory-scaling", a),
        Command::Ablate(a) => run("ablate", a),
        Command::Report(a) => report(a),
    }
}
