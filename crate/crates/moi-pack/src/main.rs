//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation or usage problems, 2 a container
//! that loaded but failed verification, 3 I/O and malformed-file errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use moi_pack::config::load_config;
use moi_pack::error::{Error, Result};
use moi_pack::pipeline::{run_inspect, run_pack, run_stats, run_verify};

#[derive(Parser)]
#[command(
    name = "moi-pack",
    version,
    about = "Packs multi-task instruction corpora into attention-masked, loss-weighted training batches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pack a JSONL corpus into a batch container.
    Pack {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Corpus file, one instruction per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Output container path (written atomically).
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-derive and re-execute a container's claims; exits 2 on findings.
    Verify {
        /// Container to verify.
        #[arg(long = "in")]
        input: PathBuf,
        /// Seed for the reference model and the item sample.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Show one packed item in detail, or the embedded sampling plan.
    Inspect {
        /// Container to inspect.
        #[arg(long = "in")]
        input: PathBuf,
        /// Item index to display.
        #[arg(long, required_unless_present = "plan")]
        item: Option<usize>,
        /// Print the full sampling plan as JSON instead.
        #[arg(long)]
        plan: bool,
    },
    /// Summarize a corpus per task.
    Stats {
        /// Corpus file, one instruction per line.
        #[arg(long)]
        corpus: PathBuf,
        /// Optional configuration supplying the prompt map.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("MOI_PACK_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw.parse().map_err(|_| Error::Config {
        msg: format!("MOI_PACK_THREADS must be a thread count, got {raw:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config {
            msg: format!("could not size the thread pool: {e}"),
        })
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Pack { config, corpus, out } => {
            let resolved = load_config(&config)?;
            let report = run_pack(&resolved, &corpus, &out)?;
            println!("{report}");
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Verify { input, seed } => {
            let report = run_verify(&input, seed)?;
            println!("{report}");
            Ok(if report.passed() { 0 } else { 2 })
        }
        Command::Inspect { input, item, plan } => {
            print!("{}", run_inspect(&input, item, plan)?);
            Ok(0)
        }
        Command::Stats { corpus, config } => {
            let resolved = config.map(|p| load_config(&p)).transpose()?;
            let stats = run_stats(&corpus, resolved.as_ref())?;
            println!("{stats}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            // Help and version go to stdout, usage errors to stderr.
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
