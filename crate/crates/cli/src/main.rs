use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use gmtl::data::{generate_synthetic, load_dataset, save_dataset, SyntheticSpec};
use gmtl::dws::{format_table, parse_replay, simulate_weighting, Strategy, TaskLossHistory};
use gmtl::persist::load_model;
use gmtl::train::{self, evaluate, model_gradcheck, params_audit, read_jsonl, DataSource, TrainConfig, GRADCHECK_TOLERANCE};
use gmtl::{AttributeGrouping, Dataset64, ParamSet64};

#[derive(Parser)]
#[command(name = "gmtl", version, about = "Grouped multi-task attribute classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Synthetic spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        n: usize,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write metrics.jsonl, model.bin and task_losses.txt.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-attribute accuracy of a saved model on a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Central-difference check of the full training objective.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 200)]
        coordinates: usize,
    },
    /// Replay recorded per-task losses through a weighting strategy.
    DwsSim {
        /// Replay file, or a metrics.jsonl whose task losses are replayed.
        #[arg(long)]
        replay: PathBuf,
        #[arg(long, default_value = "dws")]
        strategy: String,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 2.0)]
        temp: f64,
        /// Output table; `-` for stdout.
        #[arg(long, default_value = "-")]
        out: PathBuf,
    },
    /// Parameter breakdown, shared versus per-group stacks.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print only the C=2048, r=16, G=7 attention overhead.
        #[arg(long)]
        reference: bool,
    },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::load(&read(path)?).with_context(|| format!("loading config {}", path.display()))
}

fn grouping_of(config: &TrainConfig) -> Result<AttributeGrouping> {
    Ok(match &config.data {
        DataSource::Synthetic { spec, .. } => spec.grouping.clone(),
        DataSource::Persisted { train, .. } => {
            let d: Dataset64 = load_dataset(train).with_context(|| format!("loading {}", train.display()))?;
            d.spec.grouping
        }
    })
}

fn load_replay(path: &Path) -> Result<TaskLossHistory<f64>> {
    let text = read(path)?;
    let is_jsonl = text.trim_start().starts_with('{');
    if is_jsonl {
        let records = read_jsonl(text.as_bytes())?;
        Ok(TaskLossHistory::from_epochs(records.into_iter().map(|r| r.task_losses).collect())?)
    } else {
        Ok(parse_replay(&text)?)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData { spec, n, seed, out } => {
            let mut spec = SyntheticSpec::load(&read(&spec)?)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let data: Dataset64 = generate_synthetic(&spec, n)?;
            save_dataset(&out, &data)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Train { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let started = Instant::now();
            let outcome = train::train::<f64>(&cfg)?;
            outcome.write(&out)?;
            let last = outcome.metrics.last().expect("at least one epoch");
            println!(
                "epochs {} | total loss {:.6} -> {:.6} | mean accuracy {:.4} | {:.1}s",
                outcome.metrics.len(),
                outcome.metrics[0].total_loss,
                last.total_loss,
                last.mean_accuracy,
                started.elapsed().as_secs_f64()
            );
            println!("outputs in {}", out.display());
        }
        Command::Eval { model, data } => {
            let (model, params): (_, ParamSet64) = load_model(&model)?;
            let data: Dataset64 = load_dataset(&data)?;
            if model.grouping().attributes() != data.spec.grouping.attributes() {
                bail!("dataset attributes differ from the model's");
            }
            let report = evaluate(&model, &params, &data)?;
            println!("{:<28} {:>8}", "attribute", "accuracy");
            for (name, acc) in model.grouping().attributes().iter().zip(&report.per_attribute) {
                println!("{name:<28} {acc:>8.4}");
            }
            println!("{:<28} {:>8.4}", "mean", report.mean);
        }
        Command::Gradcheck {
            config,
            seed,
            eps,
            coordinates,
        } => {
            let cfg = load_config(&config)?;
            let report = model_gradcheck(&cfg, seed, eps, coordinates)?;
            println!(
                "checked {} coordinates ({} replaced at kinks), max relative error {:.3e}",
                report.checked.len(),
                report.skipped.len(),
                report.max_rel_error
            );
            if let Some(w) = report.worst() {
                println!(
                    "worst: {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
            if !(report.max_rel_error <= GRADCHECK_TOLERANCE) {
                println!("FAIL: above tolerance {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
            println!("PASS");
        }
        Command::DwsSim {
            replay,
            strategy,
            beta,
            temp,
            out,
        } => {
            let history = load_replay(&replay)?;
            let strategy: Strategy = strategy.parse()?;
            let table = format_table(&simulate_weighting(&history, &[strategy], beta, temp)?);
            if out.as_os_str() == "-" {
                print!("{table}");
            } else {
                fs::write(&out, table).with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::Params { config, reference } => {
            if reference {
                println!(
                    "reference attention overhead (C={}, r={}, G={}, no bias): {}",
                    gmtl::model::REFERENCE_CHANNELS,
                    gmtl::model::REFERENCE_REDUCTION,
                    gmtl::model::REFERENCE_GROUPS,
                    gmtl::model::reference_attention_overhead()
                );
                return Ok(ExitCode::SUCCESS);
            }
            let cfg = match &config {
                Some(path) => load_config(path)?,
                None => TrainConfig::desk_default(),
            };
            print!("{}", params_audit(&cfg.model, &grouping_of(&cfg)?));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
