use std::io;
use std::panic;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use rgi::cli::{self, FAULT_ENV, THREADS_ENV};
use rgi::parallel;

/// Regularized Graph Infomax: self-supervised node embeddings.
#[derive(Parser)]
#[command(name = "rgi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an encoder; writes checkpoint.rgi and metrics.csv to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write eval-mode node embeddings of the configured dataset as CSV.
    Embed {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score embeddings with a linear probe over several seeds.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        /// Number of probe seeds; defaults to the config's eval.num_seeds.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Run gradient checks, propagation oracles and analytic loss cases.
    Selfcheck,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train { config } => {
            let history = cli::cmd_train(&config).with_context(|| format!("training with {}", config.display()))?;
            if let Some(last) = history.last() {
                println!(
                    "trained {} epochs: rec={} var={} cov={} total={}",
                    history.len(),
                    cli::format_g(last.loss.rec, 6),
                    cli::format_g(last.loss.var, 6),
                    cli::format_g(last.loss.cov, 6),
                    cli::format_g(last.loss.total, 6)
                );
            }
        }
        Command::Embed { config, checkpoint, out } => {
            let u = cli::cmd_embed(&config, &checkpoint, &out).context("extracting embeddings")?;
            println!("wrote {}x{} embeddings to {}", u.rows(), u.cols(), out.display());
        }
        Command::Eval { config, embeddings, seeds } => {
            let report = cli::cmd_eval(&config, &embeddings, seeds).context("evaluating embeddings")?;
            for line in report.csv_lines() {
                println!("{line}");
            }
            println!("{}", report.summary());
        }
        Command::Selfcheck => {
            let fault = std::env::var(FAULT_ENV).ok();
            let ok = cli::cmd_selfcheck(fault.as_deref(), &mut io::stdout())?;
            if !ok {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = std::env::var(THREADS_ENV).ok().and_then(|s| s.parse().ok()).filter(|&n: &usize| n > 0);
    parallel::init_thread_pool(threads);

    match panic::catch_unwind(|| run(cli)) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            let internal = e.chain().any(|c| c.downcast_ref::<rgi::Error>().is_some_and(rgi::Error::is_internal));
            ExitCode::from(if internal { 2 } else { 1 })
        }
        // The panic message has already been printed by the hook.
        Err(_) => ExitCode::from(2),
    }
}
