use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};

use sepp::config::{Arm, PipelineConfig};
use sepp::formats;
use sepp::metrics::{self, MetricsRecord};
use sepp::pipeline::{self, Context};
use sepp_core::data::SemanticPairSet;

#[derive(Debug, Parser)]
#[command(name = "sepp", version, about = "Contrastive pretraining with mined semantic positive pairs")]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Start from the synthetic blobs fixture instead of the defaults.
    #[arg(long, global = true, conflicts_with = "config")]
    fixture: bool,

    /// Override a config value, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Output directory (default: `run.output_dir` from the config).
    #[arg(long, short, env = "SEPP_OUTPUT_ROOT", global = true)]
    output: Option<PathBuf>,

    /// Use this seed instead of the first of `run.seeds`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain the vanilla reference encoder used for mining.
    Bootstrap,
    /// Write reference embeddings of the training set.
    Embed {
        /// Encoder parameters; otherwise `miner.source` decides.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Mine semantic positive pairs from an embedding file.
    Mine {
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Pretrain one arm.
    Train {
        #[arg(long, default_value = "sepp")]
        arm: Arm,
        /// Pair CSV (default: `<output>/pairs.csv` for pair arms).
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Linear evaluation of frozen encoder parameters.
    LinearEval {
        #[arg(long)]
        params: PathBuf,
    },
    /// Mine at several K values (first-K) and report pair counts and time.
    AblateK {
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Also pretrain and evaluate at every K.
        #[arg(long)]
        train: bool,
    },
    /// Train the control arm that duplicates `count` random images.
    ControlRandomAdd {
        #[arg(long)]
        count: usize,
    },
    /// Every stage for every configured seed and arm.
    RunAll,
}

fn load_config(common: &Common) -> anyhow::Result<PipelineConfig> {
    let base = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None if common.fixture => PipelineConfig::blobs_fixture(),
        None => PipelineConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(out) = &common.output {
        cfg.run.output_dir = out.clone();
    }
    Ok(cfg)
}

fn write_resolved(cfg: &PipelineConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.common)?;
    let out = cfg.run.output_dir.clone();
    let seed = cfg.run.seeds[0];

    if let Command::RunAll = cli.command {
        let summary = pipeline::run_pipeline(&cfg, &out)?;
        for arm in &cfg.run.arms {
            if let Some(m) = summary.mean_top1(*arm) {
                println!("{:<12} mean top1 {:.4}", arm.name(), m);
            }
        }
        println!("artifacts in {}", out.display());
        return Ok(());
    }

    write_resolved(&cfg, &out)?;
    let data = pipeline::load_dataset(&cfg).context("loading dataset")?;
    let ctx = Context::new(&cfg, &data)?;
    let wall = cfg.run.record_wall_time;

    match cli.command {
        Command::Bootstrap => {
            let (params, log) = ctx.bootstrap(seed)?;
            formats::write_params(&out.join("bootstrap.seppw"), &params)?;
            metrics::write_metrics(&out.join("bootstrap.csv"), &pipeline::bootstrap_records(&log))?;
            println!("bootstrap final loss {:.4}", log.last().map_or(0.0, |e| e.mean_loss));
        }
        Command::Embed { params } => {
            let emb = match params {
                Some(p) => ctx.embed(&formats::read_params(&p)?)?,
                None => {
                    let bootstrap = out.join("bootstrap.seppw");
                    let params = bootstrap.exists().then(|| formats::read_params(&bootstrap)).transpose()?;
                    ctx.reference(params.as_ref())?
                }
            };
            formats::write_embeddings(&out.join("embeddings.seppe"), &emb)?;
            println!("{} × {} embeddings", emb.n(), emb.d());
        }
        Command::Mine { embeddings } => {
            let path = embeddings.unwrap_or_else(|| out.join("embeddings.seppe"));
            let emb = formats::read_embeddings(&path)?;
            let (set, report) = ctx.mine(&emb)?;
            formats::write_pairset(&out.join("pairs.csv"), &set)?;
            metrics::write_metrics(&out.join("mine.csv"), &[pipeline::mine_record(&set, &report, wall)])?;
            println!("{} pairs from K = {}", set.len(), report.k_used);
        }
        Command::Train { arm, pairs } => {
            let set = if arm.uses_pairs() {
                let path = pairs.unwrap_or_else(|| out.join("pairs.csv"));
                formats::read_pairset_within(&path, Some(data.train.len()))?
            } else {
                SemanticPairSet::empty(0, cfg.miner.min_threshold, cfg.miner.max_threshold)
            };
            let run = ctx.train_arm(arm, &set, seed)?;
            let dir = out.join(arm.name());
            formats::write_params(&dir.join("encoder.seppw"), &run.params)?;
            metrics::write_metrics(&dir.join("metrics.csv"), &run.metrics(wall))?;
            println!("{}: final loss {:.4}", arm.name(), run.epochs.last().map_or(0.0, |e| e.mean_loss));
        }
        Command::LinearEval { params } => {
            let report = ctx.linear_eval(&formats::read_params(&params)?, seed)?;
            let row = pipeline::eval_record(&report, cfg.eval.epochs, None);
            metrics::write_metrics(&out.join("linear_eval.csv"), &[row])?;
            println!("top1 {:.4}", report.top1);
        }
        Command::AblateK { k, embeddings, train } => {
            let emb = match embeddings {
                Some(p) => formats::read_embeddings(&p)?,
                None => ctx.reference(None)?,
            };
            let rows = pipeline::ablate_k(&ctx, &emb, &k, train, seed)?;
            let report: Vec<_> = rows.iter().map(|r| r.mining_row()).collect();
            metrics::write_mining_report(&out.join("ablation.csv"), &report)?;
            if train {
                let records: Vec<MetricsRecord> = rows
                    .iter()
                    .enumerate()
                    .map(|(i, r)| MetricsRecord {
                        top1: r.top1,
                        pair_count: Some(r.pair_count),
                        k_size: Some(r.k),
                        ..MetricsRecord::new("ablate_k", i)
                    })
                    .collect();
                metrics::write_metrics(&out.join("ablation_metrics.csv"), &records)?;
            }
            for r in &rows {
                let top1 = r.top1.map_or(String::new(), |t| format!(" top1 {t:.4}"));
                println!("K {:>6}: {:>6} pairs in {:.3}s{top1}", r.k, r.pair_count, r.mine_seconds);
            }
        }
        Command::ControlRandomAdd { count } => {
            let (run, report) = pipeline::random_add_control(&ctx, count, seed)?;
            let dir = out.join(Arm::RandomAdd.name());
            formats::write_params(&dir.join("encoder.seppw"), &run.params)?;
            let mut rows = run.metrics(wall);
            rows.push(pipeline::eval_record(&report, cfg.eval.epochs, None));
            metrics::write_metrics(&dir.join("metrics.csv"), &rows)?;
            println!("random-add ({count} duplicates): top1 {:.4}", report.top1);
        }
        Command::RunAll => unreachable!(),
    }
    Ok(())
}
