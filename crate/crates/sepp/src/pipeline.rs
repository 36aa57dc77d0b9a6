//! Stage functions and the full workflow: load → bootstrap → embed → mine →
//! pretrain each arm → linear evaluation.
//!
//! Each stage is an ordinary function over in-memory values so tests and the
//! CLI can call them one at a time; [`run_pipeline`] chains them and writes
//! every intermediate artifact under the output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;

use sepp_core::augment::CombinedDataset;
use sepp_core::data::{EmbeddingMatrix, ImageRecord, SemanticPairSet};
use sepp_core::miner::{MiningReport, Selection};
use sepp_core::model::{Encoder, Params};
use sepp_core::rng::{derive_seed, rng_for};
use sepp_core::synth::{BlobGeometry, Renderer};
use sepp_core::train::{self, EpochSummary, LinearEvalReport, TrainingMode};

use crate::config::{Arm, DatasetKind, PipelineConfig, ReferenceSource};
use crate::error::{Error, Result, StageExt};
use crate::formats;
use crate::metrics::{self, MetricsRecord, MiningRow, TimingRow};
use crate::mining;

/// Training and test images, plus the latent vectors for rendered blobs.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<ImageRecord>,
    pub test: Vec<ImageRecord>,
    pub latent: Option<EmbeddingMatrix>,
}

impl Dataset {
    fn shape(&self) -> Result<(usize, usize, usize)> {
        let first = self
            .train
            .first()
            .ok_or_else(|| Error::Config("training set is empty".into()))?;
        let dims = first.dims();
        if let Some(bad) = self.train.iter().chain(&self.test).find(|r| r.dims() != dims) {
            return Err(Error::Config(format!(
                "image {} has shape {:?}, expected {dims:?}",
                bad.index,
                bad.dims()
            )));
        }
        Ok(dims)
    }
}

fn truncate(mut v: Vec<ImageRecord>, limit: usize) -> Vec<ImageRecord> {
    if limit > 0 {
        v.truncate(limit);
    }
    v
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("dataset.{key} is required")))
}

pub fn load_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let data = match d.kind {
        DatasetKind::Blobs => {
            let geometry = BlobGeometry::new(d.classes, d.latent_dim, d.intra_angle, derive_seed(&[d.seed, 1]))?;
            let train_blobs = geometry.sample(d.per_class, cfg.angle_spread(), derive_seed(&[d.seed, 2]))?;
            let test_blobs = geometry.sample(d.test_per_class, cfg.angle_spread(), derive_seed(&[d.seed, 3]))?;
            let renderer = Renderer::new(
                d.latent_dim,
                (d.channels, d.side, d.side),
                d.nuisance_rank,
                d.signal_gain,
                d.nuisance_gain,
                derive_seed(&[d.seed, 4]),
            );
            Dataset {
                train: renderer.render(&train_blobs, derive_seed(&[d.seed, 5]))?,
                test: renderer.render(&test_blobs, derive_seed(&[d.seed, 6]))?,
                latent: Some(train_blobs.embeddings),
            }
        }
        DatasetKind::Cifar => Dataset {
            train: truncate(formats::load_cifar_files(&d.train_files)?, d.train_limit),
            test: truncate(formats::load_cifar_files(&d.test_files)?, d.test_limit),
            latent: None,
        },
        DatasetKind::Idx => {
            let test = match &d.test_images {
                Some(p) => formats::load_idx(p, d.test_labels.as_deref())?,
                None => Vec::new(),
            };
            Dataset {
                train: truncate(
                    formats::load_idx(required(&d.train_images, "train_images")?, d.train_labels.as_deref())?,
                    d.train_limit,
                ),
                test: truncate(test, d.test_limit),
                latent: None,
            }
        }
    };
    let (_, h, w) = data.shape()?;
    if cfg.augment.output_size != (0, 0) && cfg.augment.output_size != (h, w) {
        return Err(Error::Config(format!(
            "augment.output_size {:?} differs from the image size {:?}; linear evaluation encodes unaugmented images",
            cfg.augment.output_size,
            (h, w)
        )));
    }
    Ok(data)
}

/// Everything a training run needs besides the pairs.
pub struct Context<'a> {
    pub cfg: &'a PipelineConfig,
    pub data: &'a Dataset,
    pub encoder: Encoder,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a PipelineConfig, data: &'a Dataset) -> Result<Self> {
        let (c, h, w) = data.shape()?;
        let encoder = Encoder::new(cfg.encoder_config(c, (h, w)))?;
        Ok(Self { cfg, data, encoder })
    }

    fn image_hw(&self) -> (usize, usize) {
        let s = self.encoder.config.input_shape;
        (s.1, s.2)
    }

    fn pretrain(
        &self,
        params: &mut Params,
        pairs: Vec<(usize, usize)>,
        duplicates: Vec<usize>,
        epochs: usize,
        mode: TrainingMode,
        seed: u64,
    ) -> Result<Vec<EpochSummary>> {
        let dataset = CombinedDataset::new(
            self.data.train.clone(),
            pairs,
            duplicates,
            derive_seed(&[seed, 0xEF]),
        )?;
        let policy = self.cfg.augmentation(self.image_hw(), derive_seed(&[seed, 0xA6]));
        let cfg = self.cfg.pretrain_config(epochs, mode);
        Ok(train::pretrain(&self.encoder, params, &dataset, &policy, &cfg)?)
    }

    /// Vanilla pretraining for the bootstrap reference encoder.
    pub fn bootstrap(&self, seed: u64) -> Result<(Params, Vec<EpochSummary>)> {
        let mut params = self.encoder.init(derive_seed(&[seed, 0xB0]));
        let epochs = self.cfg.train.bootstrap_epochs.max(1);
        let log = self.pretrain(&mut params, Vec::new(), Vec::new(), epochs, TrainingMode::Weighted, derive_seed(&[seed, 0xB1]))?;
        Ok((params, log))
    }

    /// Normalized backbone features of the training set.
    pub fn embed(&self, params: &Params) -> Result<EmbeddingMatrix> {
        Ok(self.encoder.embed_dataset(params, &self.data.train, 256)?)
    }

    /// Reference embeddings per `miner.source`; `bootstrap` is consulted only
    /// for the bootstrap source.
    pub fn reference(&self, bootstrap: Option<&Params>) -> Result<EmbeddingMatrix> {
        let emb = match self.cfg.miner.source {
            ReferenceSource::Latent => self
                .data
                .latent
                .clone()
                .ok_or_else(|| Error::Config("latent reference needs blobs".into()))?,
            ReferenceSource::File => {
                let path = self.cfg.miner.embeddings.as_deref().expect("validated");
                formats::read_embeddings(path)?
            }
            ReferenceSource::Bootstrap => {
                let params = bootstrap.ok_or_else(|| Error::Config("bootstrap parameters missing".into()))?;
                self.embed(params)?
            }
        };
        if emb.n() != self.data.train.len() {
            return Err(Error::Config(format!(
                "reference embeddings have {} rows for {} training images",
                emb.n(),
                self.data.train.len()
            )));
        }
        Ok(emb)
    }

    pub fn mine(&self, emb: &EmbeddingMatrix) -> Result<(SemanticPairSet, MiningReport)> {
        if !emb.is_normalized() {
            let n = emb.n();
            let d = emb.d();
            let emb = EmbeddingMatrix::normalized_from(n, d, emb.rows().to_vec())?;
            return mining::mine_pairs_parallel(&emb, &self.cfg.miner_config(n));
        }
        mining::mine_pairs_parallel(emb, &self.cfg.miner_config(emb.n()))
    }

    /// Pretrains one arm from the shared seed-specific initialization. The
    /// random-add arm duplicates as many images as `pairs` has pairs.
    pub fn train_arm(&self, arm: Arm, pairs: &SemanticPairSet, seed: u64) -> Result<ArmRun> {
        match arm {
            Arm::Vanilla => self.train_items(arm, Vec::new(), Vec::new(), TrainingMode::Weighted, seed),
            Arm::Sepp => self.train_items(arm, pairs.pairs.clone(), Vec::new(), self.cfg.training_mode(), seed),
            Arm::SeppMerged => self.train_items(arm, pairs.pairs.clone(), Vec::new(), TrainingMode::Merged, seed),
            Arm::RandomAdd => {
                let duplicates = self.random_duplicates(pairs.len(), seed)?;
                self.train_items(arm, Vec::new(), duplicates, TrainingMode::Weighted, seed)
            }
        }
    }

    fn train_items(
        &self,
        arm: Arm,
        pairs: Vec<(usize, usize)>,
        duplicates: Vec<usize>,
        mode: TrainingMode,
        seed: u64,
    ) -> Result<ArmRun> {
        let added = pairs.len() + duplicates.len();
        let mut params = self.encoder.init(derive_seed(&[seed, 0xE1]));
        let start = Instant::now();
        let epochs = self.pretrain(&mut params, pairs, duplicates, self.cfg.train.epochs, mode, seed)?;
        Ok(ArmRun {
            arm,
            seed,
            params,
            epochs,
            added,
            train_seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// `n` distinct random training positions for the random-add control.
    pub fn random_duplicates(&self, n: usize, seed: u64) -> Result<Vec<usize>> {
        let size = self.data.train.len();
        if n > size {
            return Err(Error::Config(format!(
                "random-add count {n} exceeds the dataset size {size}"
            )));
        }
        let mut rng = rng_for(&[seed, 0xAD]);
        let mut picked = index::sample(&mut rng, size, n).into_vec();
        picked.sort_unstable();
        Ok(picked)
    }

    pub fn linear_eval(&self, params: &Params, seed: u64) -> Result<LinearEvalReport> {
        Ok(train::linear_eval(
            &self.encoder,
            params,
            &self.data.train,
            &self.data.test,
            &self.cfg.eval_config(seed),
        )?)
    }
}

/// Result of pretraining one arm.
#[derive(Clone, Debug)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub params: Params,
    pub epochs: Vec<EpochSummary>,
    /// Mined pairs or duplicated images added to the vanilla stream.
    pub added: usize,
    pub train_seconds: f64,
}

impl ArmRun {
    pub fn metrics(&self, record_wall_time: bool) -> Vec<MetricsRecord> {
        let per_epoch = self.train_seconds / self.epochs.len().max(1) as f64;
        self.epochs
            .iter()
            .map(|e| MetricsRecord {
                loss: Some(f64::from(e.mean_loss)),
                pair_count: Some(self.added),
                wall_time_s: record_wall_time.then_some(per_epoch),
                ..MetricsRecord::new("pretrain", e.epoch)
            })
            .collect()
    }
}

pub fn eval_record(report: &LinearEvalReport, epochs: usize, seconds: Option<f64>) -> MetricsRecord {
    MetricsRecord {
        loss: Some(f64::from(report.final_loss)),
        top1: Some(report.top1),
        wall_time_s: seconds,
        ..MetricsRecord::new("linear_eval", epochs)
    }
}

pub fn bootstrap_records(log: &[EpochSummary]) -> Vec<MetricsRecord> {
    log.iter()
        .map(|e| MetricsRecord {
            loss: Some(f64::from(e.mean_loss)),
            ..MetricsRecord::new("bootstrap", e.epoch)
        })
        .collect()
}

pub fn mine_record(set: &SemanticPairSet, report: &MiningReport, record_wall_time: bool) -> MetricsRecord {
    MetricsRecord {
        pair_count: Some(set.len()),
        k_size: Some(report.k_used),
        wall_time_s: record_wall_time.then_some(report.wall_time_seconds),
        ..MetricsRecord::new("mine", 0)
    }
}

/// One line of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub k: usize,
    pub pair_count: usize,
    pub mine_seconds: f64,
    pub sim_evals: u64,
    pub top1: Option<f64>,
}

/// Mines at every K (first-K selection) and optionally trains the SePP arm
/// on each pair set. Pair counts must be non-decreasing in K.
pub fn ablate_k(
    ctx: &Context,
    emb: &EmbeddingMatrix,
    k_values: &[usize],
    train_each: bool,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if k_values.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("k values must be sorted ascending".into()));
    }
    if let Some(&k) = k_values.iter().find(|&&k| k > emb.n()) {
        return Err(Error::Config(format!("K = {k} exceeds the dataset size {}", emb.n())));
    }
    let mut rows: Vec<AblationRow> = Vec::new();
    for &k in k_values {
        let mut mcfg = ctx.cfg.miner_config(emb.n());
        mcfg.k = k;
        mcfg.selection = Selection::FirstK;
        let (set, report) = mining::mine_pairs_parallel(emb, &mcfg)?;
        if let Some(prev) = rows.last() {
            if set.len() < prev.pair_count {
                return Err(Error::Config(format!(
                    "pair count fell from {} at K = {} to {} at K = {k}",
                    prev.pair_count, prev.k, set.len()
                )));
            }
        }
        let top1 = if train_each {
            let run = ctx.train_arm(Arm::Sepp, &set, seed)?;
            Some(ctx.linear_eval(&run.params, seed)?.top1)
        } else {
            None
        };
        rows.push(AblationRow {
            k,
            pair_count: set.len(),
            mine_seconds: report.wall_time_seconds,
            sim_evals: report.similarity_evaluations,
            top1,
        });
    }
    Ok(rows)
}

impl AblationRow {
    pub fn mining_row(&self) -> MiningRow {
        MiningRow {
            k: self.k,
            pair_count: self.pair_count,
            wall_time_s: self.mine_seconds,
            sim_evals: self.sim_evals,
        }
    }
}

/// Trains the random-add control arm with `count` duplicated images.
pub fn random_add_control(ctx: &Context, count: usize, seed: u64) -> Result<(ArmRun, LinearEvalReport)> {
    let duplicates = ctx.random_duplicates(count, seed)?;
    let run = ctx.train_items(Arm::RandomAdd, Vec::new(), duplicates, TrainingMode::Weighted, seed)?;
    let report = ctx.linear_eval(&run.params, seed)?;
    Ok((run, report))
}

/// Top-1 of one arm at one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmScore {
    pub arm: Arm,
    pub seed: u64,
    pub top1: f64,
    pub added: usize,
}

#[derive(Clone, Debug, Default)]
pub struct PipelineSummary {
    pub scores: Vec<ArmScore>,
    pub pair_counts: Vec<(u64, usize)>,
    pub output_dir: PathBuf,
}

impl PipelineSummary {
    /// Mean top-1 of an arm over all seeds it ran with.
    pub fn mean_top1(&self, arm: Arm) -> Option<f64> {
        let v: Vec<f64> = self.scores.iter().filter(|s| s.arm == arm).map(|s| s.top1).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

fn seconds_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs every stage for every seed and arm, writing artifacts to `out`:
///
/// ```text
/// out/config.toml               resolved configuration
/// out/summary.csv               arm,seed,top1,added
/// out/timing.csv                stage durations
/// out/seed-<s>/bootstrap.seppw  reference encoder (bootstrap source only)
/// out/seed-<s>/embeddings.seppe reference embeddings
/// out/seed-<s>/pairs.csv        mined pairs
/// out/seed-<s>/<arm>/encoder.seppw, metrics.csv
/// ```
///
/// An empty pair set is not an error: the pair arms then train exactly like
/// the vanilla arm.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary> {
    cfg.validate().stage("config")?;
    let write_text = |path: PathBuf, text: String| {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write_text(out.join("config.toml"), cfg.to_toml()).stage("write")?;
    let data = load_dataset(cfg).stage("load")?;
    let ctx = Context::new(cfg, &data).stage("load")?;
    let wall = cfg.run.record_wall_time;
    let mut timing = Vec::new();
    let mut summary = PipelineSummary {
        output_dir: out.to_path_buf(),
        ..Default::default()
    };
    let mut csv = String::from("arm,seed,top1,added\n");
    let needs_pairs = cfg.miner.enabled && cfg.run.arms.iter().any(|a| a.uses_pairs());
    for &seed in &cfg.run.seeds {
        let dir = out.join(format!("seed-{seed}"));
        let mut shared = Vec::new();
        let mut time = |stage: &str, t: Instant| {
            timing.push(TimingRow {
                stage: format!("seed-{seed}/{stage}"),
                wall_time_s: seconds_since(t),
            })
        };
        let pairs = if needs_pairs {
            let bootstrap = if cfg.miner.source == ReferenceSource::Bootstrap {
                let t = Instant::now();
                let (params, log) = ctx.bootstrap(seed).stage("bootstrap")?;
                formats::write_params(&dir.join("bootstrap.seppw"), &params).stage("bootstrap")?;
                shared.extend(bootstrap_records(&log));
                time("bootstrap", t);
                Some(params)
            } else {
                None
            };
            let t = Instant::now();
            let emb = ctx.reference(bootstrap.as_ref()).stage("embed")?;
            formats::write_embeddings(&dir.join("embeddings.seppe"), &emb).stage("embed")?;
            time("embed", t);
            let t = Instant::now();
            let (set, report) = ctx.mine(&emb).stage("mine")?;
            formats::write_pairset(&dir.join("pairs.csv"), &set).stage("mine")?;
            shared.push(mine_record(&set, &report, wall));
            time("mine", t);
            set
        } else {
            SemanticPairSet::empty(0, cfg.miner.min_threshold, cfg.miner.max_threshold)
        };
        summary.pair_counts.push((seed, pairs.len()));
        for &arm in &cfg.run.arms {
            let arm_dir = dir.join(arm.name());
            let t = Instant::now();
            let run = ctx.train_arm(arm, &pairs, seed).stage("train")?;
            time(&format!("{}/pretrain", arm.name()), t);
            formats::write_params(&arm_dir.join("encoder.seppw"), &run.params).stage("train")?;
            let t = Instant::now();
            let report = ctx.linear_eval(&run.params, seed).stage("linear-eval")?;
            let eval_seconds = seconds_since(t);
            time(&format!("{}/linear-eval", arm.name()), t);
            let mut rows = if arm.uses_pairs() { shared.clone() } else { Vec::new() };
            rows.extend(run.metrics(wall));
            rows.push(eval_record(&report, cfg.eval.epochs, wall.then_some(eval_seconds)));
            metrics::write_metrics(&arm_dir.join("metrics.csv"), &rows).stage("write")?;
            csv.push_str(&format!("{},{seed},{},{}\n", arm.name(), report.top1, run.added));
            summary.scores.push(ArmScore {
                arm,
                seed,
                top1: report.top1,
                added: run.added,
            });
        }
    }
    write_text(out.join("summary.csv"), csv).stage("write")?;
    metrics::write_timing(&out.join("timing.csv"), &timing).stage("write")?;
    Ok(summary)
}
