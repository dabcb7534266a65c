use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tbma::chain::{diagnostic_series, posterior_summaries, run_chains, InitStrategy};
use tbma::io::{self, RunOverrides, SEED_ENV};
use tbma::oracle;
use tbma::{PriorSpec, TbmaError};

#[derive(Parser)]
#[command(name = "tbma", version, about = "Bayesian model averaging for the Type II Tobit model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run Gibbs/MC3 chains on a CSV and write traces, summary and diagnostics.
    Run {
        #[arg(long)]
        data: PathBuf,
        /// Column roles as `key = value` lines.
        #[arg(long)]
        schema: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        thin: Option<usize>,
        /// MC3 proposals per sweep.
        #[arg(long)]
        inner_moves: Option<usize>,
        /// prior-draw, zero-coefficients, full-model or null-model.
        #[arg(long, value_parser = parse_init)]
        init: Option<InitStrategy>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        prior_config: Option<PathBuf>,
        /// Run settings file; flags take precedence over its keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Treat rows with a zero response as censored (overrides the schema).
        #[arg(long)]
        censor_on_zero: bool,
    },
    /// Simulate a dataset from a generator spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Check the closed-form Bayes factors against the brute-force oracles.
    Validate {
        #[arg(long, default_value = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures"))]
        fixtures: PathBuf,
        /// Rewrite the fixture files from their generator before checking.
        #[arg(long)]
        regenerate: bool,
    },
    /// Pool trace files into a summary table and per-chain diagnostics.
    Summarize {
        #[arg(long, required = true, num_args = 1..)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_init(s: &str) -> Result<InitStrategy, String> {
    InitStrategy::parse(s).map_err(|e| e.to_string())
}

enum Failure {
    Validation,
    Error(TbmaError),
}

impl From<TbmaError> for Failure {
    fn from(e: TbmaError) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation) => ExitCode::from(1),
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            data,
            schema,
            iterations,
            burn_in,
            chains,
            seed,
            thin,
            inner_moves,
            init,
            out_dir,
            prior_config,
            config,
            censor_on_zero,
        } => {
            let mut schema = io::DataSchema::from_key_values(&io::read_key_values(&schema)?)?;
            if censor_on_zero {
                schema.censored = None;
            }
            let file = match &config {
                Some(p) => io::read_key_values(p)?,
                None => Default::default(),
            };
            let flags = RunOverrides {
                iterations,
                burn_in,
                chains,
                seed,
                thin,
                inner_moves,
                init,
            };
            let env_seed = std::env::var(SEED_ENV).ok();
            let chain_config = io::resolve_chain_config(&file, &flags, env_seed.as_deref())?;
            let loaded = io::load_csv(&data, &schema)?;
            let ds = &loaded.dataset;
            let prior = match &prior_config {
                Some(p) => io::prior_from_key_values(&io::read_key_values(p)?, ds.p(), ds.q())?,
                None => PriorSpec::default_for(ds.p(), ds.q()),
            };
            std::fs::create_dir_all(&out_dir)?;
            let outputs = run_chains(ds, &prior, &chain_config)?;
            for o in &outputs {
                io::write_trace(o, &out_dir.join(format!("trace_chain{}.csv", o.chain_id)))?;
            }
            summarize_into(&outputs, &out_dir)?;
            Ok(())
        }
        Command::Synth { spec, out_dir } => {
            let spec = io::synthetic_spec_from_key_values(&io::read_key_values(&spec)?)?;
            let data = oracle::generate_synthetic(&spec)?;
            std::fs::create_dir_all(&out_dir)?;
            let schema = io::write_dataset_csv(&data.dataset, &out_dir.join("data.csv"))?;
            std::fs::write(out_dir.join("schema.txt"), schema.to_key_values())?;
            io::write_truth(&data, &out_dir.join("truth.txt"))?;
            println!(
                "wrote {} rows ({:.1}% censored) to {}",
                data.dataset.n(),
                100.0 * data.censoring_fraction,
                out_dir.display()
            );
            Ok(())
        }
        Command::Validate { fixtures, regenerate } => {
            if regenerate {
                oracle::regenerate_fixtures(&fixtures)?;
            }
            let results = oracle::validation_suite(&fixtures)?;
            let mut ok = true;
            for r in &results {
                println!(
                    "{} {} = {:.3e} (tolerance {:.1e})",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.value,
                    r.tolerance
                );
                ok &= r.passed;
            }
            if ok {
                Ok(())
            } else {
                Err(Failure::Validation)
            }
        }
        Command::Summarize { traces, out_dir } => {
            let outputs = traces
                .iter()
                .map(|p| io::read_trace(p))
                .collect::<Result<Vec<_>, _>>()?;
            std::fs::create_dir_all(&out_dir)?;
            summarize_into(&outputs, &out_dir)?;
            Ok(())
        }
    }
}

fn summarize_into(outputs: &[tbma::ChainOutput], out_dir: &Path) -> Result<(), Failure> {
    let summary = posterior_summaries(outputs)?;
    io::write_summary(&summary, &out_dir.join("summary.csv"))?;
    for o in outputs {
        let series = diagnostic_series(o)?;
        io::write_diagnostics(&series, &out_dir.join(format!("diagnostics_chain{}.csv", o.chain_id)))?;
    }
    println!(
        "{} stored sweeps pooled over {} chain(s); jump rate {:.4}",
        summary.samples,
        outputs.len(),
        summary.jump_rate
    );
    Ok(())
}
