//! Generates a synthetic galaxy catalog as a context on a registered target.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use casbatch_core::datagen::{self, CatalogSpec};
use casbatch_core::deploy;

#[derive(Parser)]
#[command(name = "casbatch-datagen", version)]
struct Args {
    #[arg(long)]
    rows: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Target name, as registered with `casbatch admin add-target`.
    #[arg(long)]
    target: String,
    #[arg(long, default_value = datagen::DEFAULT_CONTEXT)]
    context: String,
    #[arg(long)]
    data: PathBuf,
}

fn main() -> ExitCode {
    let a = Args::parse();
    let spec = CatalogSpec { n_rows: a.rows, seed: a.seed };
    let res = deploy::init(&a.data).and_then(|mut admin| datagen::generate(&mut admin, &a.target, &a.context, spec));
    match res {
        Ok(path) => {
            println!("{}\t{}", path.display(), datagen::checksum(spec));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
