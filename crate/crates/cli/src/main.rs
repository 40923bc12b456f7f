//! Experiment CLI: `run` a configuration (optionally as a dry run or with
//! several workers), re-`render` plots from a run directory, and `report`
//! sweep aggregates.

use std::path::PathBuf;
use std::process::ExitCode;

use gatlab_cli::config::ExperimentConfig;
use gatlab_cli::{plots, runner};

const USAGE: &str = "usage:
  gatlab run <config.json> [--dry-run] [--workers N]
  gatlab render <run_dir>
  gatlab report <sweep_dir>

Relative output directories resolve under $GATLAB_OUT_ROOT when it is set.";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(args: &[String]) -> Result<ExitCode, String> {
    let mut it = args.iter();
    match it.next().map(String::as_str) {
        Some("run") => {
            let mut config_path: Option<PathBuf> = None;
            let mut dry_run = false;
            let mut workers = std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1);
            while let Some(arg) = it.next() {
                match arg.as_str() {
                    "--dry-run" => dry_run = true,
                    "--workers" => {
                        let n = it
                            .next()
                            .ok_or_else(|| "--workers requires a count".to_string())?;
                        workers = n
                            .parse()
                            .map_err(|_| format!("--workers: bad count {n:?}"))?;
                        if workers == 0 {
                            return Err("--workers: must be at least 1".into());
                        }
                    }
                    other if config_path.is_none() => config_path = Some(PathBuf::from(other)),
                    other => return Err(format!("unexpected argument {other:?}\n{USAGE}")),
                }
            }
            let path = config_path.ok_or_else(|| format!("missing config path\n{USAGE}"))?;
            cmd_run(&path, dry_run, workers)
        }
        Some("render") => {
            let dir = it
                .next()
                .ok_or_else(|| format!("missing run directory\n{USAGE}"))?;
            if let Some(extra) = it.next() {
                return Err(format!("unexpected argument {extra:?}\n{USAGE}"));
            }
            let written = plots::render_run_dir(std::path::Path::new(dir))?;
            for path in written {
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Some("report") => {
            let dir = it
                .next()
                .ok_or_else(|| format!("missing sweep directory\n{USAGE}"))?;
            if let Some(extra) = it.next() {
                return Err(format!("unexpected argument {extra:?}\n{USAGE}"));
            }
            cmd_report(std::path::Path::new(dir))
        }
        Some(other) => Err(format!("unknown command {other:?}\n{USAGE}")),
        None => Err(USAGE.to_string()),
    }
}

fn cmd_run(path: &std::path::Path, dry_run: bool, workers: usize) -> Result<ExitCode, String> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    let runs = cfg.resolve_runs()?;
    if dry_run {
        println!(
            "resolved {} runs -> {}",
            runs.len(),
            runner::resolve_output_dir(&cfg.output_dir).display()
        );
        println!(
            "{:<20} {:>5} {:>6} {:>20} {:>20}",
            "arch", "depth", "seed", "split_seed", "init_seed"
        );
        for run in &runs {
            println!(
                "{:<20} {:>5} {:>6} {:>20} {:>20}",
                run.arch, run.depth, run.seed, run.split_seed, run.policy.seed
            );
        }
        return Ok(ExitCode::SUCCESS);
    }
    let outcome = runner::execute_sweep(&cfg, workers)?;
    println!(
        "completed {}/{} runs -> {}",
        outcome.completed.len(),
        outcome.completed.len() + outcome.failures.len(),
        outcome.output_dir.display()
    );
    for row in &outcome.completed {
        println!(
            "  {}_d{}_s{}: test@min_loss {:.4} (epoch {}), test@max_val {:.4} (epoch {})",
            row.arch,
            row.depth,
            row.seed,
            row.test_acc_at_min_train_loss,
            row.epoch_min_train_loss,
            row.test_acc_at_max_val_acc,
            row.epoch_max_val_acc
        );
    }
    if !outcome.failures.is_empty() {
        for (run, msg) in &outcome.failures {
            eprintln!("FAILED {run}: {msg}");
        }
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(dir: &std::path::Path) -> Result<ExitCode, String> {
    let rows = runner::collect_summaries(dir)?;
    if rows.is_empty() {
        return Err(format!("no run summaries under {}", dir.display()));
    }
    runner::write_sweep_summary(&dir.join("sweep_summary.csv"), &rows)?;
    println!("{}", std::fs::read_to_string(dir.join("sweep_summary.csv")).expect("just written"));
    Ok(ExitCode::SUCCESS)
}
