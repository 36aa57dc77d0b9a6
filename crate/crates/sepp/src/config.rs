//! Pipeline configuration, read from TOML with one table per module.
//!
//! Every field has a default, so a config file only lists what it changes.
//! [`PipelineConfig::blobs_fixture`] is the small synthetic setup used by the
//! paired-arm experiments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sepp_core::augment::AugmentationPolicy;
use sepp_core::loss::{LambdaMode, LossConfig, NegativeRule};
use sepp_core::miner::{MinerConfig, Selection};
use sepp_core::model::{Architecture, EncoderConfig};
use sepp_core::optim::{OptimizerConfig, OptimizerKind};
use sepp_core::synth::AngleSpread;
use sepp_core::train::{LinearEvalConfig, PretrainConfig, TrainingMode};
use sepp_core::Float;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetSection,
    pub miner: MinerSection,
    pub augment: AugmentSection,
    pub encoder: EncoderSection,
    pub optimizer: OptimizerSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Labelled Gaussian-cone blobs rendered into small images.
    Blobs,
    /// CIFAR-10 binary batch files.
    Cifar,
    /// IDX image and label files.
    Idx,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spread {
    Uniform,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Blobs: number of classes.
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    /// Blobs: dimension of the latent class geometry.
    pub latent_dim: usize,
    /// Blobs: largest angle (radians) between a sample and its class centroid.
    pub intra_angle: f64,
    pub spread: Spread,
    pub channels: usize,
    pub side: usize,
    pub nuisance_rank: usize,
    pub signal_gain: Float,
    pub nuisance_gain: Float,
    pub seed: u64,
    /// CIFAR: training and test batch files.
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    /// IDX: image and label files.
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Keep only the first `train_limit` training images (0 keeps all).
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Blobs,
            classes: 10,
            per_class: 200,
            test_per_class: 100,
            latent_dim: 32,
            intra_angle: 0.4,
            spread: Spread::Uniform,
            channels: 1,
            side: 8,
            nuisance_rank: 12,
            signal_gain: 1.0,
            nuisance_gain: 1.0,
            seed: 1,
            train_files: Vec::new(),
            test_files: Vec::new(),
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: 0,
            test_limit: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    /// Embed with an encoder pretrained for `train.bootstrap_epochs`.
    Bootstrap,
    /// Read a `SEPPE1` file from `miner.embeddings`.
    File,
    /// Blobs only: the latent vectors the images were rendered from.
    Latent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionKind {
    FirstK,
    RandomK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MinerSection {
    pub enabled: bool,
    pub source: ReferenceSource,
    pub embeddings: Option<PathBuf>,
    /// Number of images entering mining (0 means the whole training set).
    pub k: usize,
    pub min_threshold: f64,
    pub max_threshold: f64,
    pub selection: SelectionKind,
    pub dedup_symmetric: bool,
    pub block_size: usize,
}

impl Default for MinerSection {
    fn default() -> Self {
        let m = MinerConfig::new(0);
        Self {
            enabled: true,
            source: ReferenceSource::Bootstrap,
            embeddings: None,
            k: 0,
            min_threshold: m.min_threshold,
            max_threshold: m.max_threshold,
            selection: SelectionKind::FirstK,
            dedup_symmetric: m.dedup_symmetric,
            block_size: m.block_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub crop_scale: (Float, Float),
    pub crop_ratio: (Float, Float),
    pub flip_probability: Float,
    pub jitter_probability: Float,
    pub brightness: Float,
    pub contrast: Float,
    pub saturation: Float,
    pub grayscale_probability: Float,
    /// Output `(height, width)`; `[0, 0]` keeps the dataset's image size.
    pub output_size: (usize, usize),
}

impl Default for AugmentSection {
    fn default() -> Self {
        let p = AugmentationPolicy::simclr((0, 0), 0);
        Self {
            crop_scale: p.crop_scale,
            crop_ratio: p.crop_ratio,
            flip_probability: p.flip_probability,
            jitter_probability: p.jitter_probability,
            brightness: p.brightness,
            contrast: p.contrast,
            saturation: p.saturation,
            grayscale_probability: p.grayscale_probability,
            output_size: (0, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    Mlp,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub architecture: ArchitectureKind,
    /// Hidden widths (MLP) or channel counts (conv) of the backbone.
    pub widths: Vec<usize>,
    pub projection_hidden: usize,
    pub projection_dim: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::desk_conv((3, 32, 32));
        let Architecture::SmallConv { channels } = d.architecture else {
            unreachable!()
        };
        Self {
            architecture: ArchitectureKind::Conv,
            widths: channels,
            projection_hidden: d.projection_hidden,
            projection_dim: d.projection_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Sgd,
    Lars,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerName,
    pub learning_rate: Float,
    pub momentum: Float,
    pub weight_decay: Float,
    pub cosine_schedule: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = OptimizerConfig::default();
        Self {
            kind: OptimizerName::Sgd,
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            cosine_schedule: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaName {
    Constant,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeRuleName {
    AllOtherViews,
    #[serde(rename = "literal-2n")]
    Literal2n,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub temperature: Float,
    pub lambda_mode: LambdaName,
    pub lambda: Float,
    pub exclude_semantic_from_negatives: bool,
    pub negative_rule: NegativeRuleName,
    /// Average both directions of the instance term.
    pub symmetric: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let l = LossConfig::default();
        Self {
            temperature: l.temperature,
            lambda_mode: LambdaName::Constant,
            lambda: l.lambda_value,
            exclude_semantic_from_negatives: l.exclude_semantic_from_negatives,
            negative_rule: NegativeRuleName::AllOtherViews,
            symmetric: l.symmetric,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Weighted,
    Merged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub bootstrap_epochs: usize,
    pub mode: ModeName,
    pub max_semantic_per_anchor: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            bootstrap_epochs: 20,
            mode: ModeName::Weighted,
            max_semantic_per_anchor: PretrainConfig::default().max_semantic_per_anchor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Float,
    pub momentum: Float,
    pub weight_decay: Float,
    pub cosine_schedule: bool,
    pub standardize: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = LinearEvalConfig::default();
        Self {
            epochs: e.epochs,
            batch_size: e.batch_size,
            learning_rate: e.learning_rate,
            momentum: e.momentum,
            weight_decay: e.weight_decay,
            cosine_schedule: e.cosine_schedule,
            standardize: e.standardize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    /// Arms trained by `run-all`: vanilla, sepp, sepp-merged, random-add.
    pub arms: Vec<Arm>,
    pub output_dir: PathBuf,
    /// Fill the `wall_time_s` metrics column (makes metrics non-reproducible).
    pub record_wall_time: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            arms: vec![Arm::Vanilla, Arm::Sepp],
            output_dir: PathBuf::from("sepp-out"),
            record_wall_time: false,
        }
    }
}

/// One training configuration of the paired comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// Plain NT-Xent on the original images.
    Vanilla,
    /// Mined pairs in the mode set by `train.mode`.
    Sepp,
    /// Mined pairs merged into the stream as ordinary positive pairs.
    SeppMerged,
    /// As many random images as there are mined pairs, duplicated.
    RandomAdd,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Vanilla => "vanilla",
            Arm::Sepp => "sepp",
            Arm::SeppMerged => "sepp-merged",
            Arm::RandomAdd => "random-add",
        }
    }

    pub fn uses_pairs(self) -> bool {
        !matches!(self, Arm::Vanilla)
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Arm::Vanilla, Arm::Sepp, Arm::SeppMerged, Arm::RandomAdd]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}`")))
    }
}

impl PipelineConfig {
    /// Rendered 8×8 blobs (50 classes of 40 images) whose pixels mix a weak
    /// class signal with a strong per-image nuisance pattern. Mining reads
    /// the latent class geometry. Crops and flips are off because the
    /// rendered pixels have no spatial structure for them to respect.
    pub fn blobs_fixture() -> Self {
        let mut cfg = Self::default();
        cfg.dataset.classes = 50;
        cfg.dataset.per_class = 40;
        cfg.dataset.test_per_class = 60;
        cfg.miner.source = ReferenceSource::Latent;
        cfg.miner.k = 800;
        cfg.augment.crop_scale = (1.0, 1.0);
        cfg.augment.crop_ratio = (1.0, 1.0);
        cfg.augment.flip_probability = 0.0;
        cfg.encoder = EncoderSection {
            architecture: ArchitectureKind::Mlp,
            widths: vec![32],
            projection_hidden: 32,
            projection_dim: 32,
        };
        cfg.train.epochs = 40;
        cfg.run.seeds = vec![0, 1, 2];
        cfg.run.arms = vec![Arm::Vanilla, Arm::Sepp, Arm::SeppMerged, Arm::RandomAdd];
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Applies `section.key=value` overrides; values use TOML syntax, and
    /// bare words are taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .map(|mut t| t.remove("v").unwrap())
                .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_table_mut()
                    .and_then(|t| t.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *slot = value;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.train.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be >= 2".into()));
        }
        if self.run.seeds.is_empty() {
            return Err(Error::Config("run.seeds must not be empty".into()));
        }
        if self.miner.source == ReferenceSource::File && self.miner.embeddings.is_none() {
            return Err(Error::Config("miner.source = file needs miner.embeddings".into()));
        }
        if self.miner.source == ReferenceSource::Latent && self.dataset.kind != DatasetKind::Blobs {
            return Err(Error::Config("miner.source = latent needs dataset.kind = blobs".into()));
        }
        self.miner_config(1).validate()?;
        self.loss_config().validate()?;
        self.optimizer_config().validate()?;
        Ok(())
    }

    pub fn angle_spread(&self) -> AngleSpread {
        match self.dataset.spread {
            Spread::Uniform => AngleSpread::Uniform,
            Spread::Fixed => AngleSpread::Fixed,
        }
    }

    /// Miner settings for a dataset of `n` images.
    pub fn miner_config(&self, n: usize) -> MinerConfig {
        let m = &self.miner;
        let k = if m.k == 0 { n } else { m.k };
        MinerConfig {
            selection: match m.selection {
                SelectionKind::FirstK => Selection::FirstK,
                SelectionKind::RandomK => Selection::RandomK {
                    seed: self.dataset.seed,
                },
            },
            dedup_symmetric: m.dedup_symmetric,
            block_size: m.block_size,
            ..MinerConfig::new(k).with_window(m.min_threshold, m.max_threshold)
        }
    }

    pub fn augmentation(&self, image_hw: (usize, usize), seed: u64) -> AugmentationPolicy {
        let a = &self.augment;
        let output_size = if a.output_size == (0, 0) { image_hw } else { a.output_size };
        AugmentationPolicy {
            crop_scale: a.crop_scale,
            crop_ratio: a.crop_ratio,
            flip_probability: a.flip_probability,
            jitter_probability: a.jitter_probability,
            brightness: a.brightness,
            contrast: a.contrast,
            saturation: a.saturation,
            grayscale_probability: a.grayscale_probability,
            output_size,
            seed,
        }
    }

    pub fn encoder_config(&self, channels: usize, image_hw: (usize, usize)) -> EncoderConfig {
        let e = &self.encoder;
        let (h, w) = if self.augment.output_size == (0, 0) {
            image_hw
        } else {
            self.augment.output_size
        };
        EncoderConfig {
            architecture: match e.architecture {
                ArchitectureKind::Mlp => Architecture::Mlp {
                    hidden: e.widths.clone(),
                },
                ArchitectureKind::Conv => Architecture::SmallConv {
                    channels: e.widths.clone(),
                },
            },
            projection_hidden: e.projection_hidden,
            projection_dim: e.projection_dim,
            input_shape: (channels, h, w),
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let o = &self.optimizer;
        OptimizerConfig {
            kind: match o.kind {
                OptimizerName::Sgd => OptimizerKind::SgdMomentum,
                OptimizerName::Lars => OptimizerKind::Lars,
            },
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        let l = &self.loss;
        LossConfig {
            temperature: l.temperature,
            lambda_mode: match l.lambda_mode {
                LambdaName::Constant => LambdaMode::Constant,
                LambdaName::Off => LambdaMode::Off,
            },
            lambda_value: l.lambda,
            exclude_semantic_from_negatives: l.exclude_semantic_from_negatives,
            negative_rule: match l.negative_rule {
                NegativeRuleName::AllOtherViews => NegativeRule::AllOtherViews,
                NegativeRuleName::Literal2n => NegativeRule::Literal2N,
            },
            symmetric: l.symmetric,
        }
    }

    pub fn pretrain_config(&self, epochs: usize, mode: TrainingMode) -> PretrainConfig {
        PretrainConfig {
            epochs,
            batch_size: self.train.batch_size,
            optimizer: self.optimizer_config(),
            loss: self.loss_config(),
            mode,
            cosine_schedule: self.optimizer.cosine_schedule,
            max_semantic_per_anchor: self.train.max_semantic_per_anchor,
        }
    }

    pub fn training_mode(&self) -> TrainingMode {
        match self.train.mode {
            ModeName::Weighted => TrainingMode::Weighted,
            ModeName::Merged => TrainingMode::Merged,
        }
    }

    pub fn eval_config(&self, seed: u64) -> LinearEvalConfig {
        let e = &self.eval;
        LinearEvalConfig {
            epochs: e.epochs,
            batch_size: e.batch_size,
            learning_rate: e.learning_rate,
            momentum: e.momentum,
            weight_decay: e.weight_decay,
            cosine_schedule: e.cosine_schedule,
            standardize: e.standardize,
            seed,
        }
    }
}
