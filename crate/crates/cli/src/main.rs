//! Experiment harness: solve | simulate | sweep | bounds.
//!
//! Failures print one machine-readable JSON line to stderr and exit with a
//! stable code: 2 config error, 3 solver failure, 4 simulation failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use asyncfl_core::config::{ExperimentConfig, SeedsSection};
use asyncfl_core::engine::SeedSet;
use asyncfl_core::experiment::{
    bounds_report, diagnostics_csv, exit_code_for, plan_json, results_csv, run_one, solve_offline,
    summary_json, ExperimentError, RunKey, RunOutcome,
};

#[derive(Parser)]
#[command(name = "asyncfl", version, about = "Asynchronous FL wireless simulator and optimizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the offline scheduling problem and write plan + diagnostics.
    Solve(RunArgs),
    /// Run one training simulation and write results.csv + summary.json.
    Simulate(RunArgs),
    /// Run a (rho x seed) grid of simulations into one results file.
    Sweep(RunArgs),
    /// Evaluate the convergence-bound calculators and print a JSON report.
    Bounds(BoundsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Base seeds, comma-separated; default is the config's seed set.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Tradeoff weights rho, comma-separated; default is the config's rho.
    #[arg(long, value_delimiter = ',')]
    rho: Vec<f64>,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    config: PathBuf,
    /// Also write the report to DIR/bounds.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Bounds(args) => cmd_bounds(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code_for(&err);
            let kind = match code {
                2 => "config",
                3 => "solver",
                _ => "simulation",
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": err.to_string(), "kind": kind, "exit_code": code })
            );
            ExitCode::from(code as u8)
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    Ok(ExperimentConfig::from_path(path)?)
}

/// Seed set plus the label written to the `seed` column: the base seed when
/// one exists, otherwise the selection stream id.
fn config_seeds(config: &ExperimentConfig) -> (SeedSet, u64) {
    match config.seeds {
        SeedsSection::Base(base) => (SeedSet::from_base(base), base),
        SeedsSection::Named(set) => (set, set.selection),
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)
        .and_then(|()| std::fs::write(dir.join(name), contents))
        .map_err(|e| ExperimentError::Invalid(format!("cannot write {name}: {e}")))
}

fn cmd_solve(args: &RunArgs) -> Result<(), ExperimentError> {
    let config = load(&args.config)?;
    let rho = args.rho.first().copied().unwrap_or(config.rho);
    let seeds = match args.seeds.first() {
        Some(&base) => SeedSet::from_base(base),
        None => config_seeds(&config).0,
    };
    let (_, result) = solve_offline(&config, rho, seeds)?;
    write(&args.out, "plan.json", &plan_json(&config, rho, &result)?)?;
    write(
        &args.out,
        "diagnostics.csv",
        &diagnostics_csv(&config, &result.diagnostics),
    )?;
    println!(
        "solved: objective {} residual_sq {} after {} outer iterations",
        result.objective, result.residual_sq, result.outer_iterations
    );
    Ok(())
}

fn cmd_simulate(args: &RunArgs) -> Result<(), ExperimentError> {
    let config = load(&args.config)?;
    let rho = args.rho.first().copied().unwrap_or(config.rho);
    let (seeds, label) = match args.seeds.first() {
        Some(&base) => (SeedSet::from_base(base), base),
        None => config_seeds(&config),
    };
    let outcome = run_one(&config, rho, seeds)?;
    let key = RunKey {
        run_id: 0,
        scheme: config.scheme.name().to_string(),
        rho,
        seed_label: label,
    };
    emit_results(&args.out, &config, vec![(key, outcome)])
}

fn cmd_sweep(args: &RunArgs) -> Result<(), ExperimentError> {
    let config = load(&args.config)?;
    let rhos = if args.rho.is_empty() {
        vec![config.rho]
    } else {
        args.rho.clone()
    };
    if rhos.iter().any(|&r| !(r > 0.0 && r < 1.0)) {
        return Err(ExperimentError::Invalid(format!(
            "rho values must lie in (0, 1): {rhos:?}"
        )));
    }
    let seeds = if args.seeds.is_empty() {
        match config.seeds {
            SeedsSection::Base(base) => vec![base],
            SeedsSection::Named(_) => {
                return Err(ExperimentError::Invalid(
                    "sweep needs --seeds when the config names streams explicitly".into(),
                ))
            }
        }
    } else {
        args.seeds.clone()
    };
    let results = parallel_grid(&config, &rhos, &seeds, args.parallel.max(1))?;
    emit_results(&args.out, &config, results)
}

/// Runs every (rho, seed) combination; output order and run ids are fixed by
/// the grid, not by completion, so worker count never changes the bytes.
fn parallel_grid(
    config: &ExperimentConfig,
    rhos: &[f64],
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<(RunKey, RunOutcome)>, ExperimentError> {
    let combos: Vec<(f64, u64)> = rhos
        .iter()
        .flat_map(|&rho| seeds.iter().map(move |&s| (rho, s)))
        .collect();
    let slots: Mutex<Vec<Option<Result<RunOutcome, ExperimentError>>>> =
        Mutex::new((0..combos.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(combos.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= combos.len() {
                    break;
                }
                let (rho, seed) = combos[i];
                let outcome = run_one(config, rho, SeedSet::from_base(seed));
                slots.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    let mut out = Vec::with_capacity(combos.len());
    for (i, slot) in slots.into_inner().unwrap().into_iter().enumerate() {
        let outcome = slot.expect("all grid slots filled")?;
        out.push((
            RunKey {
                run_id: i,
                scheme: config.scheme.name().to_string(),
                rho: combos[i].0,
                seed_label: combos[i].1,
            },
            outcome,
        ));
    }
    Ok(out)
}

fn emit_results(
    dir: &Path,
    config: &ExperimentConfig,
    results: Vec<(RunKey, RunOutcome)>,
) -> Result<(), ExperimentError> {
    write(dir, "results.csv", &results_csv(config, &results))?;
    write(dir, "summary.json", &summary_json(config, &results)?)?;
    println!(
        "wrote {} run(s) to {}",
        results.len(),
        dir.join("results.csv").display()
    );
    Ok(())
}

fn cmd_bounds(args: &BoundsArgs) -> Result<(), ExperimentError> {
    let config = load(&args.config)?;
    let report = bounds_report(&config)?;
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| ExperimentError::Invalid(format!("report serialization: {e}")))?;
    println!("{text}");
    if let Some(dir) = &args.out {
        write(dir, "bounds.json", &text)?;
    }
    Ok(())
}
