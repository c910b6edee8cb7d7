//! Operator surface: search, baseline, oracle, estimate-power, and eval
//! subcommands over one JSON run config.
//!
//! Exit codes: 0 on success, 1 for configuration/validation errors, 2 for
//! runtime failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use splitnas_core::baseline::BaselineVariant;
use splitnas_core::config::{resolve_source, RunConfig};
use splitnas_core::error::Error;
use splitnas_core::oracle;
use splitnas_core::run::{self, EvalOverrides, RunResult};

#[derive(Parser)]
#[command(
    name = "splitnas",
    about = "Joint architecture and split-point search for split computing",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run config: a JSON file path or a bundled name like
    /// `bundled:config/toy-tabular`.
    #[arg(long)]
    config: String,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the joint architecture + split-point search.
    Search(ConfigArgs),
    /// Run the comparison protocol (search ignoring communication, then
    /// post-hoc split selection and re-training).
    Baseline {
        #[command(flatten)]
        config: ConfigArgs,
        /// `with-dropout` or `without-dropout` re-training.
        #[arg(long)]
        variant: String,
    },
    /// Exhaustively enumerate a small space and write the full ranking.
    Oracle {
        #[command(flatten)]
        config: ConfigArgs,
        /// Refuse spaces with more members than this.
        #[arg(long, default_value_t = oracle::DEFAULT_CAP)]
        cap: u64,
    },
    /// Fit device compute power (GFLOPS) from a measured latency table.
    EstimatePower {
        /// Space definition (path or bundled name).
        #[arg(long)]
        space: String,
        /// Latency table: layer_index, block_id, device_id, latency_ms.
        #[arg(long)]
        table: String,
        /// Restrict to one device (defaults to every device in the table).
        #[arg(long)]
        device: Option<String>,
        /// Also write a device-power file here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-evaluate a stored run, optionally overriding p / r_mbps / t_th_ms.
    Eval {
        /// Run directory produced by `search` or `baseline`.
        #[arg(long)]
        run: PathBuf,
        /// Repeatable key=value override: p=<rate>, r_mbps=<throughput>,
        /// t_th_ms=<threshold>.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Write the metrics table here (defaults to metrics.csv in the run
        /// directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Search(args) => {
            let (config, out_dir) = load_config(&args)?;
            let result = run::run_search(&config, &out_dir)?;
            print_result(&result, &out_dir);
            Ok(())
        }
        Command::Baseline { config, variant } => {
            let variant = BaselineVariant::parse(&variant)?;
            let (config, out_dir) = load_config(&config)?;
            let result = run::run_baseline(&config, variant, &out_dir)?;
            print_result(&result, &out_dir);
            Ok(())
        }
        Command::Oracle { config, cap } => {
            let (config, out_dir) = load_config(&config)?;
            let report = run::run_oracle(&config, cap, &out_dir)?;
            let best = report.best();
            println!(
                "enumerated {} members; {} satisfy the {} ms threshold",
                report.entries.len(),
                report.feasible_count,
                report.threshold_ms
            );
            println!(
                "best: id {} (loss {:.4}, latency {:.3} ms, combined {:.4})",
                best.id, best.loss, best.latency_ms, best.combined
            );
            println!(
                "report written to {}",
                out_dir.join(run::ORACLE_REPORT_FILE).display()
            );
            Ok(())
        }
        Command::EstimatePower {
            space,
            table,
            device,
            out,
        } => {
            let powers = run::estimate_powers(&space, &table, device.as_deref())?;
            let mut file = String::from("device_id,gflops\n");
            for (device, gflops) in &powers {
                println!("{device}: {gflops:.4} GFLOPS");
                file.push_str(&format!("{device},{gflops}\n"));
            }
            if let Some(path) = out {
                std::fs::write(&path, file)?;
                println!("written to {}", path.display());
            }
            Ok(())
        }
        Command::Eval {
            run: run_dir,
            overrides,
            out,
        } => {
            let overrides = EvalOverrides::parse(&overrides)?;
            let row = run::evaluate_run(&run_dir, &overrides)?;
            let csv = run::metrics_csv(std::slice::from_ref(&row));
            print!("{csv}");
            let path = out.unwrap_or_else(|| run_dir.join(run::METRICS_FILE));
            std::fs::write(&path, csv)?;
            println!("written to {}", path.display());
            Ok(())
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<(RunConfig, PathBuf), Error> {
    let text = resolve_source(&args.config)?;
    let mut config = RunConfig::from_json(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out_dir = match (&args.out, &config.out) {
        (Some(path), _) => path.clone(),
        (None, Some(path)) => PathBuf::from(path),
        (None, None) => default_out_dir(&config),
    };
    config.out = Some(out_dir.display().to_string());
    Ok((config, out_dir))
}

fn default_out_dir(config: &RunConfig) -> PathBuf {
    Path::new("runs").join(format!("{}-seed{}", config.hash(), config.seed))
}

fn print_result(result: &RunResult, out_dir: &Path) {
    println!("method: {}  seed: {}", result.method, result.seed);
    println!(
        "architecture: [{}]  split position: {}{}",
        result.block_ids.join(", "),
        result.split_position,
        if result.mid_block_split {
            " (mid-block)"
        } else {
            ""
        }
    );
    let latency = &result.objective.latency;
    println!(
        "latency: {:.3} ms (head {:.3} + comm {:.3} + tail {:.3}), penalty {:.3} ms",
        latency.total_ms,
        latency.head_comp_ms,
        latency.comm_ms,
        latency.tail_comp_ms,
        result.objective.penalty_ms
    );
    println!(
        "loss: {:.4}  combined objective: {:.4}",
        result.objective.loss, result.objective.combined
    );
    if !result.accuracy_per_rate.is_empty() && result.accuracy_per_rate[0].accuracy.is_some() {
        let cells: Vec<String> = result
            .accuracy_per_rate
            .iter()
            .map(|m| format!("{:.3}@{}", m.accuracy.unwrap_or(f64::NAN), m.rate))
            .collect();
        println!("accuracy per drop rate: {}", cells.join("  "));
    }
    println!("artifacts in {}", out_dir.display());
}
