use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use omnimoe::tensor::Precision;
use omnimoe_cli::commands::{self, TokenSource};
use omnimoe_cli::config::{parse_precision, RunConfig, SelectorKind, SEED_ENV};
use omnimoe_cli::verify::FaultInjection;
use omnimoe_cli::CliError;

#[derive(Debug, Parser)]
#[command(name = "omnimoe", version, about = "Verification, benchmarks and inspection for the omnimoe layer")]
struct Cli {
    /// key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// 32 (runtime) or 64 (verification).
    #[arg(long, global = true, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long, global = true, value_parser = ["tiled", "subgrid", "bruteforce"])]
    selector: Option<String>,
    #[arg(long, global = true, value_parser = ["reference", "scheduled"])]
    executor: Option<String>,
    /// Write the report here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the oracle suites; exit status 1 if any check fails.
    Verify {
        /// Perturb one grouped-executor output element (harness self-test).
        #[arg(long)]
        inject_fault: bool,
    },
    /// Time token-centric vs expert-centric execution over the (K, L) grid.
    Bench,
    /// List each token's selected experts from a weight file.
    Route {
        weights: PathBuf,
        /// Token file: one token per line.
        #[arg(long, conflicts_with = "random")]
        tokens: Option<PathBuf>,
        /// Number of seeded random tokens.
        #[arg(long)]
        random: Option<usize>,
    },
    /// Train on the seeded key-value task and emit the loss curve.
    TrainToy,
    /// Sweep the expert-parallel communication model over N.
    CommSim,
    /// Write a seeded layer as a weight file (requires --out).
    Export,
    /// Validate a weight file and print its summary; --out re-saves it.
    Import { weights: PathBuf },
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
    for pair in &cli.overrides {
        cfg.apply_override(pair)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    if let Some(s) = &cli.selector {
        cfg.selector = s.parse::<SelectorKind>().map_err(CliError::Usage)?;
    }
    if let Some(e) = &cli.executor {
        cfg.set("executor", e)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match out {
        Some(path) => std::fs::write(path, bytes).map_err(|e| CliError::io(path, e)),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(bytes).and_then(|_| stdout.flush()).map_err(|e| CliError::io(Path::new("<stdout>"), e))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = build_config(&cli)?;
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Verify { inject_fault } => {
            let (report, ok) = commands::verify(&cfg, FaultInjection(*inject_fault))?;
            emit(out, report.as_bytes())?;
            if !ok {
                let failed = report.lines().filter(|l| l.contains("\"status\":\"fail\"")).count();
                return Err(CliError::ChecksFailed(failed));
            }
        }
        Command::Bench => emit(out, commands::bench(&cfg)?.as_bytes())?,
        Command::Route { weights, tokens, random } => {
            let source = match (tokens, random) {
                (Some(path), _) => TokenSource::Text(std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?),
                (None, Some(n)) => TokenSource::Random(*n),
                (None, None) => TokenSource::Zero,
            };
            emit(out, commands::route(&cfg, weights, &source)?.as_bytes())?;
        }
        Command::TrainToy => emit(out, commands::train_toy_report(&cfg)?.as_bytes())?,
        Command::CommSim => emit(out, commands::comm_sim(&cfg)?.as_bytes())?,
        Command::Export => {
            let path = out.ok_or_else(|| CliError::Usage("export needs --out PATH".into()))?;
            emit(Some(path), &commands::export(&cfg)?)?;
        }
        Command::Import { weights } => {
            let (summary, bytes) = commands::import(weights)?;
            if let Some(path) = out {
                emit(Some(path), &bytes)?;
            }
            emit(None, summary.as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
