use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use rulecraft_cli::pipeline::{self, with_threads};
use rulecraft_cli::{exit_code, verify, ConfigError, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "rulecraft", version, about = "Learn and apply chain rules on knowledge graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Run configuration file.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain the generator and run the configured iterations.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Rank the test split with a trained checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write per-query ranks to this file.
        #[arg(long)]
        per_query: Option<PathBuf>,
        /// Comma-separated rule budgets; retrains a predictor per budget.
        #[arg(long, value_delimiter = ',')]
        rules_per_query: Vec<usize>,
    },
    /// List the top rules per relation.
    ExportRules {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Rules per relation
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print groundings of the top rules for one query.
    Ground {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Query head entity
        #[arg(long)]
        head: String,
        /// Query relation; `inv_<name>` for an inverse
        #[arg(long)]
        relation: String,
        /// Rules per relation
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Numeric checks of the selection step.
    Verify {
        /// Seed for the random instances
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Splits `--section.key value` overrides from the arguments clap handles.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut bad = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").filter(|k| k.contains('.'));
        match key {
            Some(k) => {
                let (k, inline) = match k.split_once('=') {
                    Some((k, v)) => (k.to_owned(), Some(v.to_owned())),
                    None => (k.to_owned(), None),
                };
                match inline.or_else(|| it.next()) {
                    Some(v) => overrides.push((k, v)),
                    None => bad.push(format!("--{k}: missing value")),
                }
            }
            None => rest.push(arg),
        }
    }
    (rest, overrides, bad)
}

fn load_config(args: &ConfigArgs, overrides: &[(String, String)], bad: &[String]) -> Result<RunConfig> {
    let config = RunConfig::load(&args.config)?;
    let pairs = overrides.iter().map(|(k, v)| (k.as_str(), v.as_str()));
    let config = config.with_overrides(pairs).map_err(|mut e| {
        e.0.splice(0..0, bad.iter().cloned());
        e
    })?;
    if !bad.is_empty() {
        return Err(ConfigError(bad.to_vec()).into());
    }
    Ok(config)
}

fn run(cli: Cli, overrides: &[(String, String)], bad: &[String]) -> Result<()> {
    let load_config = |args: &ConfigArgs| load_config(args, overrides, bad);
    match cli.command {
        Command::Train { cfg } => {
            let config = load_config(&cfg)?;
            with_threads(config.threads, || -> Result<()> {
                let dataset = pipeline::load_dataset(&config)?;
                let outcome = pipeline::train(&config, &dataset)?;
                println!("rules written to {}", outcome.rules_path.display());
                Ok(())
            })?
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            per_query,
            rules_per_query,
        } => {
            let config = load_config(&cfg)?;
            with_threads(config.threads, || -> Result<()> {
                let dataset = pipeline::load_dataset(&config)?;
                let models = pipeline::load_models(&checkpoint, &dataset)?;
                if !rules_per_query.is_empty() {
                    let rows = pipeline::budget_eval(&config, &dataset, &models, &rules_per_query)?;
                    print!("{}", pipeline::format_budget(&rows));
                    for row in &rows {
                        println!("rules_per_query={} {}", row.rules_per_query, row.metrics);
                    }
                    return Ok(());
                }
                let result = pipeline::evaluate_models(&config, &dataset, &models)?;
                print!("{}", result.metrics.table());
                println!("{}", result.metrics);
                if let Some(path) = per_query {
                    fs::write(&path, result.dump(&dataset.vocab)).with_context(|| format!("writing {}", path.display()))?;
                }
                Ok(())
            })?
        }
        Command::ExportRules {
            cfg,
            checkpoint,
            top,
            output,
        } => {
            let config = load_config(&cfg)?;
            with_threads(config.threads, || -> Result<()> {
                let dataset = pipeline::load_dataset(&config)?;
                let models = pipeline::load_models(&checkpoint, &dataset)?;
                let text = pipeline::export_rules(&models, &dataset, top, config.beam_width)?;
                match output {
                    Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
                    None => print!("{text}"),
                }
                Ok(())
            })?
        }
        Command::Ground {
            cfg,
            checkpoint,
            head,
            relation,
            top,
        } => {
            let config = load_config(&cfg)?;
            let dataset = pipeline::load_dataset(&config)?;
            let models = pipeline::load_models(&checkpoint, &dataset)?;
            print!("{}", pipeline::ground(&config, &models, &dataset, &head, &relation, top)?);
            Ok(())
        }
        Command::Verify { seed } => {
            let checks = verify::run_all(seed)?;
            for c in &checks {
                println!("{c}");
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(anyhow::anyhow!("verification failed"))
            }
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides, bad) = split_overrides(std::env::args().collect());
    match run(Cli::parse_from(args), &overrides, &bad) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
