use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod output;

#[derive(Parser)]
#[command(name = "attnsep", version, about = "Geometric separability analysis of attention heads")]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct DumpArgs {
    /// Dump directory containing manifest.json.
    #[arg(long)]
    pub dump: PathBuf,
    /// Output directory for reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated N grid (defaults to 1, powers of two up to L, and L+1).
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    /// JSON config for the subcommand.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Precision/Recall/F curves and s(N) descriptors per head.
    Analyze(DumpArgs),
    /// Norm, similarity and attention-profile fits per head.
    Fit(DumpArgs),
    /// Bound envelopes from a dump (measured cosines) or a synthetic config (model cosines).
    Bounds {
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        dump: Option<PathBuf>,
        /// Synthetic config; envelopes use the model amplitudes and cosines.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        #[arg(long, default_value_t = 0.5)]
        kappa: f64,
    },
    /// Generate a synthetic dump and run the Monte Carlo envelope harness.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ns: Option<Vec<usize>>,
        /// Fixed kappa; calibrated at N = 2 when omitted.
        #[arg(long)]
        kappa: Option<f64>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retriever / Mixer / Reset classification and depth table.
    Taxonomy(DumpArgs),
    /// Emit a head keep/remove mask plan.
    Sparsify {
        #[command(flatten)]
        common: DumpArgs,
        /// type-guided, random, entropy-low, entropy-high, sink-mass, last-mass, weight-magnitude
        #[arg(long)]
        method: String,
        /// Fraction of heads kept per layer, in (0, 1].
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run analyze, fit, bounds and taxonomy into one directory with a summary.
    Report {
        #[command(flatten)]
        common: DumpArgs,
        #[arg(long, default_value_t = 0.5)]
        kappa: f64,
    },
}

fn run(cli: Cli) -> attnsep::Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| attnsep::Error::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Analyze(a) => commands::analyze(&a),
        Command::Fit(a) => commands::fit(&a),
        Command::Bounds { dump, config, out, ns, kappa } => {
            commands::bounds(dump.as_deref(), config.as_deref(), &out, ns.as_deref(), kappa)
        }
        Command::Synth { config, out, ns, kappa, seed } => {
            commands::synth(&config, &out, ns.as_deref(), kappa, seed)
        }
        Command::Taxonomy(a) => commands::taxonomy(&a),
        Command::Sparsify { common, method, fraction, seed } => {
            commands::sparsify(&common, &method, fraction, seed)
        }
        Command::Report { common, kappa } => commands::report(&common, kappa),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 1 } else { 2 })
        }
    }
}
