//! Contrastive pretraining and the linear evaluation protocol.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::augment::{self, AugmentationPolicy, AugmentedView, CombinedDataset, ItemSpec, Origin};
use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::float::{self, Float};
use crate::loss::{self, LossConfig, SemanticLink, TrainBatch};
use crate::model::{Encoder, Params};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// How mined pairs enter training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingMode {
    /// Semantic partners are extra positives of instance anchors, weighted by λ.
    Weighted,
    /// Semantic pairs are ordinary positive pairs in the shuffled stream.
    Merged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub mode: TrainingMode,
    /// Decay the learning rate to zero along a half cosine over all steps.
    pub cosine_schedule: bool,
    /// Most semantic partners attached to one anchor per step (weighted mode).
    pub max_semantic_per_anchor: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 256,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            mode: TrainingMode::Weighted,
            cosine_schedule: true,
            max_semantic_per_anchor: 4,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        self.optimizer.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: Float,
    pub steps: usize,
}

fn cosine_lr(base: Float, step: usize, total: usize) -> Float {
    if total <= 1 {
        return base;
    }
    let t = step as f64 / total as f64;
    (base as f64 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t))) as Float
}

fn collect_grads(tape: &Tape, vars: &[crate::tape::Var]) -> Vec<Option<Tensor>> {
    vars.iter().map(|&v| tape.grad(v).cloned()).collect()
}

/// Every semantic partner of each image, both directions, sorted.
fn partner_map(pairs: &[(usize, usize)]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in pairs {
        map.entry(a).or_default().push(b);
        map.entry(b).or_default().push(a);
    }
    for v in map.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    map
}

struct StepInput {
    views: Vec<AugmentedView>,
    batch_n: usize,
    u_count: usize,
    pair_map: Vec<Vec<SemanticLink>>,
    z_sources: Vec<usize>,
    u_sources: Vec<usize>,
}

fn assemble_step(
    ds: &CombinedDataset,
    policy: &AugmentationPolicy,
    stream: &augment::EpochStream<'_>,
    chunk: &[ItemSpec],
    partners: Option<(&BTreeMap<usize, Vec<usize>>, usize)>,
    epoch: u64,
) -> Result<StepInput> {
    let n = chunk.len();
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for spec in chunk {
        first.push(stream.view(spec, 0)?);
        second.push(stream.view(spec, 1)?);
    }
    let z_sources: Vec<usize> = chunk.iter().map(|s| s.sources.0).collect();
    let mut pair_map = vec![Vec::new(); n];
    let mut u_views = Vec::new();
    let mut u_sources = Vec::new();
    if let Some((map, cap)) = partners {
        for (i, spec) in chunk.iter().enumerate() {
            let Some(list) = map.get(&spec.sources.0) else {
                continue;
            };
            let take = cap.min(list.len());
            let offset = (epoch as usize) % list.len();
            for t in 0..take {
                let partner = list[(offset + t) % list.len()];
                let seed = rng::derive_seed(&[epoch, 0x5E4A, spec.item_index as u64, partner as u64]);
                pair_map[i].push(SemanticLink::new(u_views.len()));
                u_views.push(augment::apply(policy, &ds.originals[partner], seed)?);
                u_sources.push(partner);
            }
        }
    }
    let u_count = u_views.len();
    let mut views = first;
    views.extend(second);
    views.extend(u_views);
    Ok(StepInput {
        views,
        batch_n: n,
        u_count,
        pair_map,
        z_sources,
        u_sources,
    })
}

/// Trains `params` in place and returns one summary per epoch.
///
/// In weighted mode the epoch consists of the instance and duplicate items,
/// and each anchor brings views of up to `max_semantic_per_anchor` of its
/// mined partners. In merged mode semantic pairs are shuffled into the stream
/// as ordinary positive pairs and the loss is plain NT-Xent. Batches of fewer
/// than two items are skipped.
pub fn pretrain(
    encoder: &Encoder,
    params: &mut Params,
    dataset: &CombinedDataset,
    policy: &AugmentationPolicy,
    cfg: &PretrainConfig,
) -> Result<Vec<EpochSummary>> {
    cfg.validate()?;
    policy.validate()?;
    encoder.check_params(params)?;
    let partners = partner_map(&dataset.semantic_pairs);
    let mut optimizer = Optimizer::new(cfg.optimizer.clone(), params)?;

    let plans: Vec<Vec<ItemSpec>> = (0..cfg.epochs)
        .map(|e| {
            let stream = augment::build_epoch(dataset, policy, e as u64);
            stream
                .plan()
                .iter()
                .copied()
                .filter(|s| cfg.mode == TrainingMode::Merged || s.origin != Origin::Semantic)
                .collect()
        })
        .collect();
    let total_steps: usize = plans
        .iter()
        .map(|p| p.chunks(cfg.batch_size).filter(|c| c.len() >= 2).count())
        .sum();

    let mut summaries = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for (epoch, plan) in plans.iter().enumerate() {
        let stream = augment::build_epoch(dataset, policy, epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for chunk in plan.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let attach = match cfg.mode {
                TrainingMode::Weighted if cfg.loss.lambda_mode != loss::LambdaMode::Off => {
                    Some((&partners, cfg.max_semantic_per_anchor))
                }
                _ => None,
            };
            let input = assemble_step(dataset, policy, &stream, chunk, attach, epoch as u64)?;

            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let refs: Vec<&AugmentedView> = input.views.iter().collect();
            let x = tape.leaf(encoder.batch_tensor(&refs)?);
            let fwd = encoder.forward(&mut tape, &vars, x)?;
            let n = input.batch_n;
            let z = tape.select_rows(fwd.projection, (0..2 * n).collect())?;
            let u = if input.u_count > 0 {
                Some(tape.select_rows(fwd.projection, (2 * n..2 * n + input.u_count).collect())?)
            } else {
                None
            };
            let batch = TrainBatch {
                z,
                u,
                pair_map: if u.is_some() { input.pair_map } else { Vec::new() },
                n,
                z_sources: input.z_sources,
                u_sources: input.u_sources,
            };
            let l = loss::total_loss(&mut tape, &batch, &cfg.loss)?;
            let value = tape.value(l).item();
            if !value.is_finite() {
                return Err(Error::Numeric {
                    op: "pretrain loss",
                    detail: format!("non-finite loss at epoch {epoch}"),
                });
            }
            tape.backward(l)?;
            let grads = collect_grads(&tape, &vars);
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(|g| g.as_ref()).collect();
            if cfg.cosine_schedule {
                optimizer.set_learning_rate(cosine_lr(cfg.optimizer.learning_rate, step, total_steps));
            }
            optimizer.step(params, &grad_refs)?;
            loss_sum += value as f64;
            steps += 1;
            step += 1;
        }
        summaries.push(EpochSummary {
            epoch,
            mean_loss: if steps > 0 { (loss_sum / steps as f64) as Float } else { 0.0 },
            steps,
        });
    }
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearEvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Float,
    pub momentum: Float,
    pub weight_decay: Float,
    pub cosine_schedule: bool,
    /// Standardize features with the training-set mean and deviation.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for LinearEvalConfig {
    fn default() -> Self {
        Self {
            epochs: 90,
            batch_size: 256,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine_schedule: true,
            standardize: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearEvalReport {
    pub top1: f64,
    pub train_top1: f64,
    pub final_loss: Float,
    pub num_classes: usize,
}

fn labels_of(images: &[ImageRecord]) -> Result<Vec<usize>> {
    images
        .iter()
        .map(|im| im.label.map(|l| l as usize).ok_or(Error::MissingLabels))
        .collect()
}

/// Trains a linear softmax classifier on frozen features and scores top-1.
///
/// `features` are row-major `[n × d]`; weights start at zero, so with
/// `epochs = 0` every prediction is class 0.
pub fn linear_probe(
    train_x: &[Float],
    train_y: &[usize],
    test_x: &[Float],
    test_y: &[usize],
    d: usize,
    cfg: &LinearEvalConfig,
) -> Result<LinearEvalReport> {
    if cfg.batch_size < 1 {
        return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
    }
    let n = train_y.len();
    if train_x.len() != n * d || test_x.len() != test_y.len() * d {
        return Err(Error::Shape {
            op: "linear_probe",
            left: vec![train_x.len(), test_x.len()],
            right: vec![n * d, test_y.len() * d],
        });
    }
    let classes = train_y.iter().chain(test_y).copied().max().map_or(1, |m| m + 1);

    let (mean, scale) = if cfg.standardize && n > 0 {
        let mut mean = vec![0.0f64; d];
        let mut var = vec![0.0f64; d];
        for row in train_x.chunks(d) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for row in train_x.chunks(d) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v as f64 - m) * (v as f64 - m);
            }
        }
        let scale: Vec<Float> = var
            .iter()
            .map(|s| {
                let sd = libm::sqrt(s / n as f64);
                if sd > 1e-8 {
                    (1.0 / sd) as Float
                } else {
                    1.0
                }
            })
            .collect();
        (mean.into_iter().map(|m| m as Float).collect::<Vec<_>>(), scale)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let prep = |x: &[Float]| -> Vec<Float> {
        x.chunks(d)
            .flat_map(|row| row.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) * s))
            .collect()
    };
    let train_p = prep(train_x);
    let test_p = prep(test_x);

    let mut params = Params {
        entries: vec![
            (String::from("probe.weight"), Tensor::zeros(&[d, classes])),
            (String::from("probe.bias"), Tensor::zeros(&[classes])),
        ],
    };
    let opt_cfg = OptimizerConfig {
        kind: crate::optim::OptimizerKind::SgdMomentum,
        learning_rate: cfg.learning_rate,
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    };
    let mut optimizer = Optimizer::new(opt_cfg, &params)?;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut final_loss = 0.0;
    for epoch in 0..cfg.epochs {
        let mut r = rng::rng_for(&[cfg.seed, 0x11AE, epoch as u64]);
        order.shuffle(&mut r);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let mut xb = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                xb.extend_from_slice(&train_p[i * d..(i + 1) * d]);
            }
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape);
            let x = tape.leaf(Tensor::new(&[chunk.len(), d], xb)?);
            let logits = tape.matmul(x, vars[0])?;
            let logits = tape.add_bias(logits, vars[1])?;
            let lse = tape.masked_logsumexp_rows(logits, vec![1.0; chunk.len() * classes])?;
            let picked = tape.gather(logits, chunk.iter().enumerate().map(|(k, &i)| k * classes + train_y[i]).collect())?;
            let nll = tape.sub(lse, picked)?;
            let l = tape.mean(nll)?;
            loss_sum += tape.value(l).item() as f64 * chunk.len() as f64;
            tape.backward(l)?;
            let grads = collect_grads(&tape, &vars);
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(|g| g.as_ref()).collect();
            if cfg.cosine_schedule {
                optimizer.set_learning_rate(cosine_lr(cfg.learning_rate, step, total));
            }
            optimizer.step(&mut params, &grad_refs)?;
            step += 1;
        }
        final_loss = (loss_sum / n.max(1) as f64) as Float;
    }

    let accuracy = |x: &[Float], y: &[usize]| -> f64 {
        if y.is_empty() {
            return 0.0;
        }
        let w = params.entries[0].1.data();
        let b = params.entries[1].1.data();
        let mut correct = 0usize;
        for (row, &label) in x.chunks(d).zip(y) {
            let mut best = (0usize, Float::NEG_INFINITY);
            for c in 0..classes {
                let mut s = b[c];
                for (k, v) in row.iter().enumerate() {
                    s += v * w[k * classes + c];
                }
                if s > best.1 {
                    best = (c, s);
                }
            }
            correct += usize::from(best.0 == label);
        }
        correct as f64 / y.len() as f64
    };
    Ok(LinearEvalReport {
        top1: accuracy(&test_p, test_y),
        train_top1: accuracy(&train_p, train_y),
        final_loss,
        num_classes: classes,
    })
}

/// Linear evaluation of a frozen encoder on its backbone features.
pub fn linear_eval(
    encoder: &Encoder,
    params: &Params,
    train: &[ImageRecord],
    test: &[ImageRecord],
    cfg: &LinearEvalConfig,
) -> Result<LinearEvalReport> {
    let train_y = labels_of(train)?;
    let test_y = labels_of(test)?;
    let d = encoder.config.feature_dim();
    let train_x = encoder.encode_features(params, train, 256)?;
    let test_x = encoder.encode_features(params, test, 256)?;
    if train_x.iter().chain(&test_x).any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "linear_eval",
            detail: "non-finite features".into(),
        });
    }
    linear_probe(&train_x, &train_y, &test_x, &test_y, d, cfg)
}

/// Mean pairwise cosine between rows, a cheap collapse indicator.
pub fn mean_pairwise_cosine(rows: &[Float], d: usize) -> Float {
    let n = rows.len() / d.max(1);
    if n < 2 {
        return 1.0;
    }
    let normed: Vec<Vec<Float>> = rows
        .chunks(d)
        .map(|r| {
            let nrm = float::norm(r).max(1e-12);
            r.iter().map(|v| v / nrm).collect()
        })
        .collect();
    let mut sum = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            sum += float::dot(&normed[i], &normed[j]) as f64;
        }
    }
    (sum / (n * (n - 1) / 2) as f64) as Float
}
