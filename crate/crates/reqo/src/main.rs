use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use reqo::dataset::{holdout, kfold, select};
use reqo::eval::{evaluate, plot_percentiles, write_rows_csv, EvalOptions};
use reqo::ingest::{read_catalog, write_candidate_sets, write_catalog, Ingestor};
use reqo::service::{render_tree, Selector};
use reqo::{train, Checkpoint, Oracle, OracleConfig, TrainingConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "reqo", version, about = "Learned query plan cost model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectorArg {
    Integrated,
    Mean,
}

impl From<SelectorArg> for Selector {
    fn from(s: SelectorArg) -> Self {
        match s {
            SelectorArg::Integrated => Selector::Integrated,
            SelectorArg::Mean => Selector::Mean,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled workload.
    Gen {
        /// Oracle config (JSON); defaults are used for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        queries: Option<usize>,
        /// Directory receiving workload.jsonl and catalog.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate plan documents against a catalog and write a dataset.
    Ingest {
        #[arg(long)]
        catalog: PathBuf,
        /// JSONL of candidate sets.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Register unknown operator kinds instead of failing.
        #[arg(long)]
        lenient: bool,
        /// Where to write the catalog when --lenient extended it.
        #[arg(long)]
        catalog_out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Training config (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train on the training split of this fold only.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate costs of plan documents (one per line).
    Estimate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        plans: PathBuf,
    },
    /// Choose among candidate plans (JSONL of candidate sets).
    Rank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long, value_enum, default_value = "integrated")]
        selector: SelectorArg,
    },
    /// Subtree and operator contributions of plan documents (one per line).
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        plans: PathBuf,
        /// Print an indented tree instead of JSON.
        #[arg(long)]
        text: bool,
    },
    /// Metrics of a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Evaluate on the test split of this fold only.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, value_enum, default_value = "integrated")]
        selector: SelectorArg,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// SVG percentile chart.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long)]
        no_explanations: bool,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| reqo::Error::json(e, &text).into())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn plan_lines(path: &Path) -> Result<Vec<String>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    io::BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(l?))
        .collect()
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path, None).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            config,
            seed,
            queries,
            out,
        } => {
            let mut cfg: OracleConfig = match config {
                Some(p) => read_json(&p)?,
                None => OracleConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(q) = queries {
                cfg.num_queries = q;
            }
            let oracle = Oracle::new(cfg)?;
            let sets = oracle.generate_workload()?;
            fs::create_dir_all(&out)?;
            write_candidate_sets(&out.join("workload.jsonl"), &sets)?;
            write_catalog(&out.join("catalog.json"), &oracle.catalog)?;
            eprintln!("wrote {} candidate sets to {}", sets.len(), out.display());
        }
        Command::Ingest {
            catalog,
            input,
            out,
            lenient,
            catalog_out,
        } => {
            let mut ing = Ingestor::new(read_catalog(&catalog)?, !lenient);
            let sets = ing.read_candidate_sets(&input)?;
            write_candidate_sets(&out, &sets)?;
            if let Some(p) = catalog_out {
                write_catalog(&p, &ing.catalog)?;
            }
            eprintln!("ingested {} candidate sets", sets.len());
        }
        Command::Train {
            catalog,
            dataset,
            config,
            fold,
            out,
        } => {
            let catalog = read_catalog(&catalog)?;
            let cfg: TrainingConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainingConfig::default(),
            };
            let sets = Ingestor::new(catalog.clone(), true).read_candidate_sets(&dataset)?;
            let pool: Vec<usize> = match fold {
                Some(f) => {
                    let folds = kfold(sets.len(), cfg.folds, cfg.seed)?;
                    match folds.get(f) {
                        Some((train_idx, _)) => train_idx.clone(),
                        None => bail!("fold {f} out of range (0..{})", cfg.folds),
                    }
                }
                None => (0..sets.len()).collect(),
            };
            let (train_idx, valid_idx) = holdout(&pool, cfg.validation_fraction, cfg.seed);
            let trained = train(
                &catalog,
                &select(&sets, &train_idx),
                &select(&sets, &valid_idx),
                &cfg,
            )?;
            eprintln!(
                "best epoch {} of {}",
                trained.best_epoch,
                trained.history.len()
            );
            Checkpoint::from_trained(trained).save(&out)?;
        }
        Command::Estimate { checkpoint, plans } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut ing = Ingestor::new(ck.model.catalog.clone(), true);
            let trees = plan_lines(&plans)?
                .iter()
                .map(|l| ing.parse_plan_document(l))
                .collect::<reqo::Result<Vec<_>>>()?;
            let est = ck.estimate_plans(&trees)?;
            let rows: Vec<_> = trees
                .iter()
                .zip(est)
                .map(|(t, e)| serde_json::json!({ "query_id": t.query_id(), "estimate": e }))
                .collect();
            print_json(&rows)?;
        }
        Command::Rank {
            checkpoint,
            candidates,
            selector,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let sets =
                Ingestor::new(ck.model.catalog.clone(), true).read_candidate_sets(&candidates)?;
            let rankings = sets
                .iter()
                .map(|s| ck.rank(s, selector.into()))
                .collect::<reqo::Result<Vec<_>>>()?;
            print_json(&rankings)?;
        }
        Command::Explain {
            checkpoint,
            plans,
            text,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let mut ing = Ingestor::new(ck.model.catalog.clone(), true);
            let mut reports = Vec::new();
            for line in plan_lines(&plans)? {
                let tree = ing.parse_plan_document(&line)?;
                let report = ck.explain(&tree)?;
                if text {
                    print!("{}", render_tree(&tree, &report));
                }
                reports.push(report);
            }
            if !text {
                print_json(&reports)?;
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            fold,
            selector,
            csv,
            plot,
            no_explanations,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let sets =
                Ingestor::new(ck.model.catalog.clone(), true).read_candidate_sets(&dataset)?;
            let idx: Vec<usize> = match fold {
                Some(f) => match kfold(sets.len(), ck.training.folds, ck.training.seed)?.get(f) {
                    Some((_, test)) => test.clone(),
                    None => bail!("fold {f} out of range"),
                },
                None => (0..sets.len()).collect(),
            };
            let ev = evaluate(
                &ck,
                &select(&sets, &idx),
                EvalOptions {
                    selector: selector.into(),
                    explanations: !no_explanations,
                },
            )?;
            if let Some(p) = csv {
                write_rows_csv(&p, &ev.rows)?;
            }
            if let Some(p) = plot {
                plot_percentiles(&p, &ev.report)?;
            }
            print_json(&ev.report)?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
