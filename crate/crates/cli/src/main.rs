//! `htsf`: hierarchical forecasting experiments from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use htsf_core::forecast::ModelFamily;
use htsf_core::reconciliation::Reconciliation;
use htsf_core::runner::{cmd_report, cmd_run, cmd_synth, cmd_validate, Overrides};
use htsf_core::synth::SynthSpec;
use htsf_core::Error;

#[derive(Parser)]
#[command(name = "htsf", version, about = "Hierarchical time-series forecasting with local and pooled GBDT models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a run config and its input files.
    Validate { config: PathBuf },
    /// Generate a synthetic sales panel with a matching config.
    Synth(SynthArgs),
    /// Run the full pipeline described by a config.
    Run(RunArgs),
    /// Regenerate evaluation outputs of a finished run.
    Report { artifact_dir: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    hierarchies: usize,
    /// Bottom series per hierarchy.
    #[arg(long, default_value_t = 4)]
    bottoms: usize,
    /// Middle-level groups (0 attaches bottoms to the root).
    #[arg(long, default_value_t = 2)]
    groups: usize,
    /// Series length.
    #[arg(long, default_value_t = 300)]
    length: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    /// Weight of the shared driver, in [0, 1].
    #[arg(long, default_value_t = 0.8)]
    sharing: f64,
    #[arg(long, default_value_t = 0.6)]
    phi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated model families (es, arima, gbdt-local, gbdt-nfg, gbdt-fg).
    #[arg(long, value_delimiter = ',', value_parser = parse_model)]
    models: Option<Vec<ModelFamily>>,
    /// Comma-separated reconciliations (none, bu, td, mint).
    #[arg(long, value_delimiter = ',', value_parser = parse_reconciliation)]
    reconciliations: Option<Vec<Reconciliation>>,
    #[arg(long)]
    grid_search: Option<bool>,
}

fn parse_model(s: &str) -> Result<ModelFamily, String> {
    ModelFamily::from_config_name(s).ok_or_else(|| format!("unknown model family '{s}'"))
}

fn parse_reconciliation(s: &str) -> Result<Reconciliation, String> {
    Reconciliation::from_config_name(s).ok_or_else(|| format!("unknown reconciliation '{s}'"))
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Validate { config } => {
            let r = cmd_validate(&config)?;
            println!(
                "OK: {} hierarchies, {} nodes each, length {}, {} embedding rows per series",
                r.hierarchies, r.nodes, r.series_length, r.embedding_rows
            );
        }
        Command::Synth(a) => {
            let spec = SynthSpec {
                hierarchies: a.hierarchies,
                bottoms: a.bottoms,
                groups: a.groups,
                length: a.length,
                noise: a.noise,
                sharing: a.sharing,
                phi: a.phi,
                seed: a.seed,
                ..SynthSpec::default()
            };
            let config = cmd_synth(&spec, &a.out)?;
            println!("wrote {}", config.display());
        }
        Command::Run(a) => {
            let overrides = Overrides {
                seed: a.seed,
                output_dir: a.output_dir,
                workers: a.workers,
                models: a.models,
                reconciliations: a.reconciliations,
                grid_search: a.grid_search,
            };
            let outcome = cmd_run(&a.config, &overrides)?;
            print!("{}", outcome.results_table);
            eprintln!("artifact: {}", outcome.output_dir.display());
        }
        Command::Report { artifact_dir } => {
            print!("{}", cmd_report(&artifact_dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match std::panic::catch_unwind(|| execute(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
        Err(_) => ExitCode::from(2),
    }
}
