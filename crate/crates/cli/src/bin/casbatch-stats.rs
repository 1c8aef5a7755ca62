//! Workload statistics from the admin database's query log.
//!
//! Prints a log-binned histogram of query elapsed time as CSV, followed by
//! the fitted power-law slope and CPU utilization over the logged span.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use casbatch_core::admin::AdminDb;
use casbatch_core::datagen;
use casbatch_core::metrics::{histogram_csv, log_histogram, powerlaw_slope, utilization, QueryStat};
use casbatch_core::model::Timestamp;

#[derive(Parser)]
#[command(name = "casbatch-stats", version)]
struct Args {
    /// Data directory holding admin.db.
    #[arg(long, required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    bins_per_decade: u32,
    /// Analyse a generated workload of this many queries instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(args: &Args) -> casbatch_core::Result<()> {
    let stats: Vec<QueryStat> = match (args.synthetic, &args.data) {
        (Some(n), _) => datagen::synthetic_workload(n, args.seed),
        (None, Some(dir)) => AdminDb::open(&casbatch_core::deploy::admin_path(dir))?.stats()?,
        (None, None) => unreachable!("clap requires one"),
    };
    let elapsed: Vec<f64> = stats.iter().map(|s| s.elapsed_s).filter(|t| *t > 0.0).collect();
    let hist = log_histogram(&elapsed, args.bins_per_decade)?;
    print!("{}", histogram_csv(&hist));
    println!("# queries {}", stats.len());
    match powerlaw_slope(&hist) {
        Ok(s) => println!("# slope {s:.3}"),
        Err(e) => println!("# slope n/a ({e})"),
    }
    let from = stats
        .iter()
        .map(|s| Timestamp(s.t_finished.0 - (s.elapsed_s * 1000.0) as i64))
        .min()
        .unwrap_or(Timestamp(0));
    let to = stats.iter().map(|s| s.t_finished).max().unwrap_or(Timestamp(0));
    println!("# utilization {:.4}", utilization(&stats, from, to));
    Ok(())
}
