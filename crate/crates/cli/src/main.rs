//! `bizur`: run simulation scenarios and linearizability checks.
//!
//! Exit status is 0 when every run is clean, 1 on any invariant or checker
//! failure, 2 when the input could not be read or validated.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bizur_sim::scenario::{summary_row, Scenario, SUMMARY_HEADER};
use bizur_sim::suite::{linearizability_run, LinParams};
use bizur_sim::{check, History, Verdict};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bizur", version, about = "Deterministic bizur simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write per-second metrics as CSV.
    Run {
        scenario: PathBuf,
        /// Output directory, created if missing.
        #[arg(long, default_value = ".")]
        out: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the message trace.
        #[arg(long)]
        trace: bool,
    },
    /// Generate, simulate and check one workload per seed.
    Check {
        /// Seed range `a..b` (end exclusive) or a single seed.
        #[arg(long, value_parser = parse_seeds)]
        seeds: Range<u64>,
        /// Use the node variant that skips the recovery write-back.
        #[arg(long)]
        mutant: bool,
        /// Reorder delivery around recovery points.
        #[arg(long)]
        chaos: bool,
        /// Where failing histories go.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Check a recorded history file.
    CheckHistory { file: PathBuf },
}

fn parse_seeds(s: &str) -> Result<Range<u64>, String> {
    let bad = || format!("expected `a..b` or a number, got `{s}`");
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
            if a >= b {
                return Err(format!("empty seed range `{s}`"));
            }
            Ok(a..b)
        }
        None => {
            let a: u64 = s.parse().map_err(|_| bad())?;
            Ok(a..a + 1)
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(path: &Path, out: &Path, seed: Option<u64>, trace: bool) -> Result<bool> {
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut scenario = Scenario::from_toml(&src).with_context(|| path.display().to_string())?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    scenario.validate().with_context(|| path.display().to_string())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let points = scenario.points();
    let swept = points.len() > 1 || !points[0].0.is_empty();
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut clean = true;
    for (label, point) in &points {
        let suffix = if swept { format!("-{label}") } else { String::new() };
        let result = point.execute(trace)?;
        write(&out.join(format!("metrics{suffix}.csv")), &result.csv)?;
        if trace {
            write(&out.join(format!("trace{suffix}.txt")), &result.trace)?;
        }
        summary.push_str(&summary_row(label, point, &result.summary));
        summary.push('\n');
        let name = if label.is_empty() { "run" } else { label };
        println!(
            "{name}: {:.0} ops/s, mean {:.3}ms, p99 {:.3}ms",
            result.summary.ops_per_sec, result.summary.latency_mean_ms, result.summary.latency_p99_ms
        );
        if !result.passed() {
            clean = false;
            let file = out.join(format!("history{suffix}.txt"));
            write(&file, &result.history.to_text())?;
            for p in &result.problems {
                eprintln!("{name}: {p}");
            }
            eprintln!("{name}: history written to {}", file.display());
        }
    }
    write(&out.join("summary.csv"), &summary)?;
    Ok(clean)
}

fn check_seeds(seeds: Range<u64>, mutant: bool, chaos: bool, out: &Path) -> Result<bool> {
    let (mut passed, mut violations, mut inconclusive) = (0, 0, 0);
    for seed in seeds.clone() {
        let mut params = if mutant { LinParams::mutant_for_seed(seed) } else { LinParams::for_seed(seed) };
        params.chaos |= chaos;
        let r = linearizability_run(&params);
        match &r.verdict {
            Ok(Verdict::Linearizable { .. }) if r.leader_conflicts == 0 => passed += 1,
            Ok(_) => {
                violations += 1;
                fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
                let file = out.join(format!("violation-seed{seed}.txt"));
                write(&file, &r.history.to_text())?;
                match &r.verdict {
                    Ok(Verdict::Violation(v)) => println!(
                        "seed {seed}: violation on key x{} ({} ops in minimal prefix), history in {}",
                        hex(&v.key),
                        v.prefix.len(),
                        file.display()
                    ),
                    _ => println!("seed {seed}: {} leader conflicts, history in {}", r.leader_conflicts, file.display()),
                }
            }
            Err(e) => {
                inconclusive += 1;
                println!("seed {seed}: {e}");
            }
        }
    }
    println!(
        "seeds {}..{}: {passed} linearizable, {violations} violations, {inconclusive} inconclusive",
        seeds.start, seeds.end
    );
    Ok(violations == 0 && inconclusive == 0)
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn check_history(path: &Path) -> Result<bool> {
    let src = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let history = History::parse(&src).with_context(|| path.display().to_string())?;
    match check(&history) {
        Ok(Verdict::Linearizable { .. }) => {
            println!("linearizable ({} operations)", history.len());
            Ok(true)
        }
        Ok(Verdict::Violation(v)) => {
            println!("violation on key x{}; minimal prefix:", hex(&v.key));
            print!("{}", v.log);
            Ok(false)
        }
        Err(e) => bail!(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            trace,
        } => run(scenario, out, *seed, *trace),
        Command::Check {
            seeds,
            mutant,
            chaos,
            out,
        } => check_seeds(seeds.clone(), *mutant, *chaos, out),
        Command::CheckHistory { file } => check_history(file),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
