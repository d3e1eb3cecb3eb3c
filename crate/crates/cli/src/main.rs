use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use retention_core::budget::Budget;
use retention_core::config::RunConfig;
use retention_core::cost::ProfileConfig;
use retention_core::tasks::write_jsonl;
use retention_core::verify::Suite;

mod error;
mod eval;
mod ingest;
mod profile;
mod sweep;
mod train;
mod verify;

use error::{CliError, Result};

#[derive(Parser)]
#[command(name = "retention-lab", version, about = "Budgeted token retention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Retention ratio in (0, 1]; `eval` accepts a comma-separated list.
    #[arg(long)]
    budget: Option<String>,
    /// Output directory (a file for `eval` and `verify`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train with alternating primal and dual steps.
    Train(Common),
    /// Evaluate a checkpoint with top-M inference at one or more budgets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time dense, gated and pruned forwards and cross-check MAC counts.
    Profile(Common),
    /// Train one run per point of a Hard-Concrete parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// JSON object mapping beta, stretch_low or stretch_high to values.
        #[arg(long)]
        grid: PathBuf,
        /// Print the expanded grid without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run fixed-seed verification suites.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Suite to run; repeat to select several. Defaults to all.
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Print the report JSON schema and exit.
        #[arg(long)]
        print_schema: bool,
    },
    /// Tokenize JSONL text into the dataset format.
    Ingest {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        num_classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ratio(text: &str) -> Result<f64> {
    let rho: f64 = text
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("budget {text:?} is not a number")))?;
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(CliError::Config(format!("budget {rho} must lie in (0, 1]")));
    }
    Ok(rho)
}

fn parse_ratios(text: &str) -> Result<Vec<f64>> {
    text.split(',').map(parse_ratio).collect()
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(b) = &common.budget {
        let rho = parse_ratio(b)?;
        config.encoder.rho = rho;
        config.budget.budget = Budget::Ratio(rho);
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(common: &Common, config: &RunConfig, fallback: &str) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| config.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(out, value).map_err(retention_core::Error::from)?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => {
            let config = run_config(&common)?;
            let out = out_dir(&common, &config, "runs/train");
            let summary = train::run(config, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).map_err(retention_core::Error::from)?
            );
        }
        Command::Eval { common, checkpoint } => {
            let ckpt = eval::load_checkpoint(&checkpoint)?;
            let mut config = match &common.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig {
                    encoder: ckpt.encoder.clone(),
                    ..RunConfig::default()
                },
            };
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            let budgets = match &common.budget {
                Some(b) => parse_ratios(b)?,
                None => eval::DEFAULT_BUDGETS.to_vec(),
            };
            let output = eval::run(&config, &ckpt, &budgets)?;
            for r in &output.reports {
                println!(
                    "rho {:.2}  accuracy {:.4}  retention_recall {:.4}",
                    r.rho, r.accuracy, r.retention_recall
                );
            }
            println!("ungated accuracy {:.4}\n", output.ungated_accuracy);
            print!("{}", output.retention_table);
            if let Some(path) = &common.out {
                write_json(path, &output)?;
            }
        }
        Command::Profile(common) => {
            let mut config = match &common.config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                    serde_json::from_str::<ProfileConfig>(&text).map_err(|e| CliError::Config(e.to_string()))?
                }
                None => ProfileConfig::default(),
            };
            if let Some(seed) = common.seed {
                config.seed = seed;
            }
            if let Some(b) = &common.budget {
                config.encoder.rho = parse_ratio(b)?;
            }
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/profile"));
            let output = profile::run(config, &out)?;
            for r in &output.reports {
                println!(
                    "{:<15} {:>10.5} s/batch  {:>10.0} tokens/s  relative {:.3}  MACs {}",
                    format!("{:?}", r.variant),
                    r.wall_seconds_per_batch,
                    r.tokens_per_second,
                    r.relative_throughput,
                    r.flop_count
                );
            }
            for c in &output.cross_checks {
                println!(
                    "{:?}: closed form {} counted {} {}",
                    c.mode,
                    c.closed_form_macs,
                    c.counted_macs,
                    if c.equal { "ok" } else { "MISMATCH" }
                );
            }
        }
        Command::Sweep { common, grid, dry_run } => {
            let base = run_config(&common)?;
            let text = std::fs::read_to_string(&grid)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", grid.display())))?;
            let spec: sweep::GridSpec = serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
            let points = sweep::expand(&spec, &base.hard_concrete, base.seed)?;
            if dry_run {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&points).map_err(retention_core::Error::from)?
                );
                return Ok(());
            }
            let out = out_dir(&common, &base, "runs/sweep");
            let rows = sweep::run(&base, &points, &out)?;
            for r in &rows {
                println!(
                    "{:>3} beta {:<5} low {:<6} high {:<5} {} accuracy {:.4} recall {:.4}{}",
                    r.index,
                    r.beta,
                    r.stretch_low,
                    r.stretch_high,
                    r.status,
                    r.eval_accuracy,
                    r.retention_recall,
                    if r.is_default { "  (default)" } else { "" }
                );
            }
        }
        Command::Verify {
            common,
            suites,
            print_schema,
        } => {
            if print_schema {
                print!("{}", verify::SCHEMA);
                return Ok(());
            }
            let selected = if suites.is_empty() {
                Suite::ALL.to_vec()
            } else {
                suites
                    .iter()
                    .map(|s| Suite::parse(s))
                    .collect::<retention_core::Result<_>>()?
            };
            verify::run(&selected, common.out.as_deref())?;
        }
        Command::Ingest {
            train,
            eval,
            num_classes,
            out,
        } => {
            let open = |p: &Path| -> Result<BufReader<File>> {
                File::open(p)
                    .map(BufReader::new)
                    .map_err(|e| retention_core::Error::Data(format!("cannot open {}: {e}", p.display())).into())
            };
            let mut vocab = ingest::Vocab::default();
            let train_set = ingest::ingest(open(&train)?, &mut vocab, num_classes, true)?;
            std::fs::create_dir_all(&out)?;
            write_jsonl(
                BufWriter::new(File::create(out.join("train.jsonl"))?),
                &train_set.examples,
            )?;
            let mut counts = vec![("train", train_set.examples.len())];
            if let Some(eval) = eval {
                let eval_set = ingest::ingest(open(&eval)?, &mut vocab, num_classes, false)?;
                write_jsonl(
                    BufWriter::new(File::create(out.join("eval.jsonl"))?),
                    &eval_set.examples,
                )?;
                counts.push(("eval", eval_set.examples.len()));
            }
            write_json(&out.join("vocab.json"), &vocab)?;
            for (name, n) in counts {
                println!("{name}: {n} examples");
            }
            println!("vocabulary: {} ids", vocab.size());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
