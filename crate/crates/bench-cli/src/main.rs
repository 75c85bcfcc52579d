//! `bench`: command-line driver for the modeled-cycle experiments.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 i/o error.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pagesim::CostModelParams;
use pagesim_bench::{
    amdahl_speedup, apply_cost_file, csv_string, profile, run_faultcost, run_montecarlo,
    run_reallocbench, AllocatorKind, BenchConfig, BenchError, BinStats, FAULTCOST_SIZES,
};

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Deterministic allocator benchmarks on the page-allocation simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// PRNG seed for the size stream.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Iterations (montecarlo) or repetitions per size (reallocbench).
    #[arg(long)]
    iterations: Option<u64>,
    /// Live-block ring depth.
    #[arg(long, default_value_t = 512)]
    ring: usize,
    /// Smallest block size in bytes.
    #[arg(long, default_value_t = 4096)]
    min: u64,
    /// Largest block size in bytes.
    #[arg(long, default_value_t = 8 * 1024 * 1024)]
    max: u64,
    /// Allocator under test: kernel-paged, kernel-nonpaged, umpa, gp-umpa, gp-kernel.
    #[arg(long, default_value = "umpa")]
    allocator: String,
    /// Preload the lookaside cache before measuring.
    #[arg(long, default_value_t = false)]
    preload: bool,
    /// Cost-model overrides, one `key = value` per line.
    #[arg(long, value_name = "FILE")]
    cost_model: Option<PathBuf>,
    /// Write per-bin results to this CSV file.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Parameter preset: windows (default) or linux.
    #[arg(long, default_value = "windows")]
    profile: String,
}

#[derive(Subcommand)]
enum Command {
    /// Random-size alloc/touch/free loop over a ring of live blocks.
    Montecarlo(RunArgs),
    /// Cycles per page: fault-driven versus eagerly mapped allocation.
    Faultcost(RunArgs),
    /// Doubling-resize cost against the allocate+copy+free baseline.
    Reallocbench(RunArgs),
    /// Overall speedup for an allocator improvement under Amdahl's law.
    #[command(about = "Overall speedup when a fraction p of time speeds up by s")]
    Amdahl {
        /// Fraction of run time spent in the allocator, 0..=1.
        #[arg(long)]
        p: f64,
        /// Allocator speedup factor, > 0.
        #[arg(long)]
        s: f64,
    },
}

fn params_for(args: &RunArgs) -> Result<CostModelParams, BenchError> {
    let mut params = profile(&args.profile)?;
    if let Some(path) = &args.cost_model {
        let text = fs::read_to_string(path)
            .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
        params = apply_cost_file(params, &text)?;
    }
    Ok(params)
}

fn config_for(args: &RunArgs, default_iterations: u64) -> Result<BenchConfig, BenchError> {
    Ok(BenchConfig {
        seed: args.seed,
        iterations: args.iterations.unwrap_or(default_iterations),
        ring_size: args.ring,
        min_size: args.min,
        max_size: args.max,
        allocator: AllocatorKind::parse(&args.allocator)?,
        preload_cache: args.preload,
    })
}

fn emit_csv(stats: &[BinStats], path: &PathBuf) -> Result<(), BenchError> {
    let mut file =
        fs::File::create(path).map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
    file.write_all(csv_string(stats).as_bytes())
        .map_err(|e| BenchError::Io(format!("{}: {e}", path.display())))?;
    Ok(())
}

fn print_bins(stats: &[BinStats]) {
    println!(
        "{:>8} {:>14} {:>8} {:>16} {:>14} {:>16} {:>18}",
        "bin",
        "allocator",
        "samples",
        "alloc_cycles",
        "free_cycles",
        "traverse_cycles",
        "alloc_notraverse"
    );
    for s in stats {
        println!(
            "{:>8} {:>14} {:>8} {:>16.3} {:>14.3} {:>16.3} {:>18.3}",
            format!("2^{}", s.bin_log2),
            s.allocator,
            s.samples,
            s.mean_alloc_cycles,
            s.mean_free_cycles,
            s.mean_traverse_cycles,
            s.mean_alloc_cycles_notraverse,
        );
    }
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Montecarlo(args) => {
            let params = params_for(&args)?;
            let config = config_for(&args, 20_000)?;
            let stats = run_montecarlo(&config, &params)?;
            println!(
                "montecarlo: allocator={} seed={} iterations={} ring={} sizes={}..{}",
                config.allocator.name(),
                config.seed,
                config.iterations,
                config.ring_size,
                config.min_size,
                config.max_size
            );
            print_bins(&stats);
            if let Some(path) = &args.csv {
                emit_csv(&stats, path)?;
            }
        }
        Command::Faultcost(args) => {
            let params = params_for(&args)?;
            let config = config_for(&args, 1)?;
            let rows = run_faultcost(&config, &params, &FAULTCOST_SIZES)?;
            println!(
                "{:>12} {:>18} {:>20} {:>10}",
                "size", "paged cycles/page", "nonpaged cycles/page", "ratio"
            );
            for r in &rows {
                println!(
                    "{:>12} {:>18.2} {:>20.2} {:>10.1}",
                    r.size_bytes,
                    r.paged_cycles_per_page,
                    r.nonpaged_cycles_per_page,
                    r.overhead_ratio
                );
            }
            if let Some(path) = &args.csv {
                let stats: Vec<BinStats> = rows
                    .iter()
                    .flat_map(|r| {
                        let bin = r.size_bytes.ilog2();
                        let pages = r.size_bytes / pagesim::PAGE_SIZE;
                        [
                            ("kernel-paged", r.paged_cycles_per_page),
                            ("umpa", r.nonpaged_cycles_per_page),
                        ]
                        .map(|(name, per_page)| BinStats {
                            allocator: name,
                            bin_log2: bin,
                            samples: pages,
                            mean_alloc_cycles: per_page,
                            mean_free_cycles: 0.0,
                            mean_traverse_cycles: 0.0,
                            mean_alloc_cycles_notraverse: per_page,
                            mean_pages: pages as f64,
                        })
                    })
                    .collect();
                emit_csv(&stats, path)?;
            }
        }
        Command::Reallocbench(args) => {
            let params = params_for(&args)?;
            let config = config_for(&args, 1)?;
            let stats = run_reallocbench(&config, &params)?;
            println!(
                "reallocbench: doubling resize, forced relocation; sizes {}..{}",
                config.min_size, config.max_size
            );
            print_bins(&stats);
            // Summary ratio per bin.
            let mut bins: Vec<u32> = stats.iter().map(|s| s.bin_log2).collect();
            bins.dedup();
            println!("{:>8} {:>22}", "bin", "baseline/umpa cycles");
            for bin in bins {
                let of = |name: &str| {
                    stats
                        .iter()
                        .find(|s| s.bin_log2 == bin && s.allocator == name)
                        .map(|s| s.mean_alloc_cycles)
                };
                if let (Some(b), Some(u)) = (of("baseline"), of("umpa")) {
                    println!("{:>8} {:>22.2}", format!("2^{bin}"), b / u);
                }
            }
            if let Some(path) = &args.csv {
                emit_csv(&stats, path)?;
            }
        }
        Command::Amdahl { p, s } => {
            let speedup = amdahl_speedup(p, s)?;
            println!("{speedup:.6}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (BenchError::Config(_) | BenchError::Domain(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ BenchError::Io(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
