//! Command-line driver for the omission-aware detection pipeline.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use omigraph::config::RunConfig;
use omigraph::corpus::Split;
use omigraph::llm::ClientKind;
use omigraph::prompts::SimMode;
use omigraph::simulate::{ZAxis, TYPE_BATCH_SIZE};
use omigraph::synthetic::{generate_synthetic, LabelRule, SyntheticSpec};
use omigraph::workspace::{StageStatus, Workspace};

#[derive(Parser)]
#[command(name = "omigraph", version, about = "Omission-aware misinformation detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    workspace: PathBuf,
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured LLM client. `stub` never touches the network.
    #[arg(long)]
    client: Option<ClientKind>,
    /// Rerun stages whose outputs are already up to date.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<(Workspace, RunConfig)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(c) = self.client {
            cfg.client = c;
        }
        Ok((Workspace::open(&self.workspace)?, cfg))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Validate and copy target and context corpora into a workspace.
    Ingest {
        #[arg(long)]
        workspace: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        context: PathBuf,
    },
    /// Retrieve top-K environments and build omission graphs.
    BuildEnv(Common),
    /// Infer omission intents and add inter-source edges.
    InferIntents(Common),
    /// Simulate environments with an LLM instead of retrieving them.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: SimMode,
    },
    /// Train one checkpoint per configured seed.
    Train(Common),
    /// Score a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Summarize omission types of the inferred intents.
    AnalyzeTypes {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = TYPE_BATCH_SIZE)]
        batch: usize,
        #[arg(long, default_value = "across-types")]
        axis: ZAxis,
    },
    /// Token cost per relation method.
    CostReport {
        #[arg(long)]
        workspace: PathBuf,
    },
    /// Write a synthetic target and context corpus.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        events: usize,
        #[arg(long, default_value_t = 4)]
        items: usize,
        #[arg(long, default_value_t = 600)]
        vocab: usize,
        #[arg(long, default_value_t = 1.0)]
        omission_rate: f64,
        #[arg(long, value_parser = parse_label_rule, default_value = "omission")]
        label_rule: LabelRule,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Full pipeline: environments, relations, training and evaluation.
    Run {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; overrides the config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Configuration helpers.
    Config {
        #[arg(long)]
        print_defaults: bool,
    },
}

fn parse_label_rule(s: &str) -> std::result::Result<LabelRule, String> {
    match s {
        "omission" => Ok(LabelRule::Omission),
        "random" => Ok(LabelRule::Random),
        other => Err(format!("unknown label rule `{other}`")),
    }
}

fn status(stage: &str, s: StageStatus) {
    match s {
        StageStatus::Ran => println!("{stage}: done"),
        StageStatus::Skipped => println!("{stage}: up to date (use --force to rerun)"),
    }
}

fn locked(root: &Path) -> Result<(Workspace, omigraph::workspace::WorkspaceLock)> {
    let ws = Workspace::open(root)?;
    let lock = ws.lock()?;
    Ok((ws, lock))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest {
            workspace,
            targets,
            context,
        } => {
            let (ws, _lock) = locked(&workspace)?;
            let (t, c) = ws.ingest(&targets, &context)?;
            println!("ingested {t} targets and {c} context items");
        }
        Command::BuildEnv(common) => {
            let (ws, cfg) = common.load()?;
            let _lock = ws.lock()?;
            status("build-env", ws.build_env(&cfg, common.force)?);
        }
        Command::InferIntents(common) => {
            let (ws, cfg) = common.load()?;
            let _lock = ws.lock()?;
            status("infer-intents", ws.infer_intents(&cfg, common.force)?);
        }
        Command::Simulate { common, mode } => {
            let (ws, cfg) = common.load()?;
            let _lock = ws.lock()?;
            status(mode.as_str(), ws.simulate(&cfg, mode, common.force)?);
        }
        Command::Train(common) => {
            let (ws, cfg) = common.load()?;
            let _lock = ws.lock()?;
            status("train", ws.train(&cfg, common.force)?);
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let (ws, cfg) = common.load()?;
            let r = ws.eval(&cfg, &checkpoint, split)?;
            println!("{}", format_report(&r)?);
        }
        Command::AnalyzeTypes {
            common,
            samples,
            batch,
            axis,
        } => {
            let (ws, cfg) = common.load()?;
            let _lock = ws.lock()?;
            let a = ws.analyze_types(&cfg, samples, batch, axis)?;
            println!("{} samples, {} types", a.samples, a.types.len());
            print!("{}", a.distribution.to_csv());
        }
        Command::CostReport { workspace } => {
            let ws = Workspace::open(&workspace)?;
            print!("{}", ws.cost_report()?.to_csv());
        }
        Command::GenSynthetic {
            out,
            events,
            items,
            vocab,
            omission_rate,
            label_rule,
            seed,
        } => {
            let spec = SyntheticSpec {
                n_events: events,
                items_per_event: items,
                fact_vocab: vocab,
                omission_rate,
                label_rule,
                seed,
            };
            let c = generate_synthetic(&spec)?;
            std::fs::create_dir_all(&out)?;
            c.targets.write_jsonl(&out.join("targets.jsonl"))?;
            c.context.write_jsonl(&out.join("context.jsonl"))?;
            println!("wrote {} targets and {} context items to {}", c.targets.len(), c.context.len(), out.display());
        }
        Command::Run { common, seeds } => {
            let (ws, mut cfg) = common.load()?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            cfg.validate()?;
            let _lock = ws.lock()?;
            let r = ws.run(&cfg, common.force)?;
            print!("{}", r.summary.to_csv());
            print!("{}", r.cost.to_csv());
        }
        Command::Config { print_defaults } => {
            if print_defaults {
                print!("{}", RunConfig::default().to_toml());
            } else {
                println!("nothing to do; try --print-defaults");
            }
        }
    }
    Ok(())
}

fn format_report(r: &omigraph::metrics::MetricsReport) -> Result<String> {
    Ok(format!(
        "accuracy {:.4}\nf1_real {:.4}\nf1_fake {:.4}\nmacro_f1 {:.4}",
        r.accuracy, r.f1_real, r.f1_fake, r.macro_f1
    ))
}
