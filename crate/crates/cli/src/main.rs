//! Command-line driver: run experiments and sweeps, verify the gradient and
//! analysis checks, inspect partitions and re-evaluate checkpoints.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 invalid
//! configuration, 3 training divergence.

mod config_file;
mod failure;
mod run;
mod stats;
mod sweep;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use mhd_core::federation::RunOptions;
use mhd_core::verify::{run_all, GradientSuiteConfig};

use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "mhd", version, about = "Decentralized multi-headed distillation simulator")]
struct Cli {
    /// Sequential, fixed-order execution. `--deterministic false` steps the
    /// clients of a run on separate threads; outputs are unchanged.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment file (TOML). Defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set distill.nu_aux=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "mhd-run")]
        out_dir: PathBuf,
    },
    /// Run a Cartesian grid of overrides, one directory per point.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// `key=v1,v2,...`; repeat for more dimensions.
        #[arg(long = "axis", value_name = "KEY=V1,V2")]
        axes: Vec<String>,
        #[arg(long, default_value = "mhd-sweep")]
        out_dir: PathBuf,
        /// Grid points run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Gradient checks and analysis identities.
    Verify {
        /// Random cases per gradient check.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Corrupt the combined gradient to confirm the checks can fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Primary-label histogram and per-client shard sizes.
    PartitionStats {
        #[command(flatten)]
        config: ConfigArgs,
        /// Partition seeds averaged in the histogram.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Skip generating the data; print only the label histogram.
        #[arg(long)]
        labels_only: bool,
    },
    /// Re-evaluate the checkpoints of a run directory.
    Eval {
        #[arg(long)]
        run_dir: PathBuf,
        /// Directory holding `client_{i}.mhdc`; defaults to the run's own.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Print every default setting as an experiment file.
    Defaults,
}

fn options(deterministic: bool) -> RunOptions {
    RunOptions { parallel_clients: !deterministic }
}

fn cmd_run(c: &ConfigArgs, out_dir: &Path, deterministic: bool) -> Result<(), Failure> {
    let (_, cfg) = config_file::load(c.config.as_deref(), &c.overrides, c.seed)?;
    let out = run::run_to_dir(&cfg, out_dir, options(deterministic))?;
    print!("{}", run::final_table(&out.records));
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn cmd_sweep(c: &ConfigArgs, axes: &[String], out_dir: &Path, jobs: usize, deterministic: bool) -> Result<(), Failure> {
    let (table, _) = config_file::load(c.config.as_deref(), &c.overrides, c.seed)?;
    let axes = axes.iter().map(|a| sweep::parse_axis(a)).collect::<Result<Vec<_>, _>>()?;
    let results = sweep::run_sweep(&table, &axes, out_dir, options(deterministic), jobs, |r| {
        let status = match &r.outcome {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("failed (exit {}): {}", e.code, e.message),
        };
        eprintln!("point {} {}: {status}", r.index, r.dir.display());
    })?;
    let csv = sweep::aggregate_csv(&axes, &results);
    std::fs::write(out_dir.join("aggregate.csv"), &csv)?;
    let failures = sweep::failure_report(&results);
    std::fs::write(out_dir.join("failures.txt"), &failures)?;
    print!("{csv}");
    if failures.is_empty() {
        Ok(())
    } else {
        let n = failures.lines().count();
        Err(Failure::other(format!(
            "{n} of {} points failed; see {}",
            results.len(),
            out_dir.join("failures.txt").display()
        )))
    }
}

fn cmd_verify(seeds: usize, inject_fault: bool) -> Result<(), Failure> {
    let suite = GradientSuiteConfig { seeds, inject_fault, ..GradientSuiteConfig::default() };
    let report = run_all(&suite)?;
    print!("{}", report.to_text());
    if report.all_passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        Err(Failure::other(format!("failed checks: {}", names.join(", "))))
    }
}

fn cmd_partition_stats(c: &ConfigArgs, seeds: usize, labels_only: bool) -> Result<(), Failure> {
    let (_, cfg) = config_file::load(c.config.as_deref(), &c.overrides, c.seed)?;
    print!("{}", stats::report(&cfg, seeds, !labels_only)?);
    Ok(())
}

fn cmd_eval(run_dir: &Path, checkpoints: Option<&Path>) -> Result<(), Failure> {
    let records = run::eval_dir(run_dir, checkpoints)?;
    let mut s = String::from("client,head,beta_priv,beta_sh\n");
    for r in &records {
        s.push_str(&format!("{},{},{:.6},{:.6}\n", r.client, r.head, r.beta_priv, r.beta_sh));
    }
    std::fs::write(run_dir.join("eval.csv"), &s)?;
    print!("{s}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let det = cli.deterministic;
    let result = match &cli.command {
        Command::Run { config, out_dir } => cmd_run(config, out_dir, det),
        Command::Sweep { config, axes, out_dir, jobs } => cmd_sweep(config, axes, out_dir, *jobs, det),
        Command::Verify { seeds, inject_fault } => cmd_verify(*seeds, *inject_fault),
        Command::PartitionStats { config, seeds, labels_only } => cmd_partition_stats(config, *seeds, *labels_only),
        Command::Eval { run_dir, checkpoints } => cmd_eval(run_dir, checkpoints.as_deref()),
        Command::Defaults => config_file::defaults_reference().map(|t| print!("{t}")),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
