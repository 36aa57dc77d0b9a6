//! Desk-scale encoder and projection head.
//!
//! Two backbones are available: a small strided conv net (3×3 kernels,
//! stride 2, ReLU, global average pooling) and a plain MLP for vector-like
//! inputs. Both feed a two-layer projection head. The backbone output is the
//! representation used for mining and linear evaluation; the head output `z`
//! is what the contrastive loss sees.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::augment::AugmentedView;
use crate::data::{EmbeddingMatrix, ImageRecord};
use crate::error::{Error, Result};
use crate::float::{self, Float};
use crate::rng;
use crate::tape::{Conv2dSpec, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    /// Strided 3×3 conv stages with the given output channels.
    SmallConv { channels: Vec<usize> },
    /// Fully connected stages with the given widths.
    Mlp { hidden: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    /// `(channels, height, width)` of the input views.
    pub input_shape: (usize, usize, usize),
}

impl EncoderConfig {
    /// 32→64→128→128 conv backbone with a 64-d projection, for 32×32 RGB.
    pub fn desk_conv(input_shape: (usize, usize, usize)) -> Self {
        Self {
            architecture: Architecture::SmallConv {
                channels: vec![32, 64, 128, 128],
            },
            projection_hidden: 128,
            projection_dim: 64,
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.projection_dim < 2 {
            return Err(Error::InvalidConfig("projection_dim must be >= 2".into()));
        }
        if self.projection_hidden == 0 {
            return Err(Error::InvalidConfig("projection_hidden must be >= 1".into()));
        }
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidConfig("input_shape must be positive".into()));
        }
        let widths = match &self.architecture {
            Architecture::SmallConv { channels } => channels,
            Architecture::Mlp { hidden } => hidden,
        };
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::InvalidConfig("backbone needs non-empty, positive widths".into()));
        }
        Ok(())
    }

    /// Width of the backbone representation.
    pub fn feature_dim(&self) -> usize {
        match &self.architecture {
            Architecture::SmallConv { channels } => *channels.last().unwrap_or(&0),
            Architecture::Mlp { hidden } => *hidden.last().unwrap_or(&0),
        }
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Puts every parameter on the tape as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect()
    }

    /// Puts every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.clone())).collect()
    }

    pub fn zeroed(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// Backbone representation `[B × feature_dim]`.
    pub features: Var,
    /// Projection head output `z` (unnormalized) `[B × projection_dim]`.
    pub projection: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Kaiming-uniform (fan-in) weights, zero biases.
    pub fn init(&self, seed: u64) -> Params {
        let mut entries = Vec::new();
        let mut layer = 0u64;
        let mut push_weight = |entries: &mut Vec<(String, Tensor)>, name: String, shape: &[usize], fan_in: usize| {
            let bound = float::sqrt(6.0 / fan_in as Float);
            let mut r = rng::rng_for(&[seed, 0x1417, layer]);
            layer += 1;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng::uniform(&mut r, -bound, bound)).collect();
            entries.push((name, Tensor::new(shape, data).expect("shape")));
        };
        let cfg = &self.config;
        match &cfg.architecture {
            Architecture::SmallConv { channels } => {
                let mut cin = cfg.input_shape.0;
                for (i, &cout) in channels.iter().enumerate() {
                    push_weight(&mut entries, format!("backbone.conv{i}.weight"), &[cout, cin, 3, 3], cin * 9);
                    entries.push((format!("backbone.conv{i}.bias"), Tensor::zeros(&[cout])));
                    cin = cout;
                }
            }
            Architecture::Mlp { hidden } => {
                let mut fin = cfg.input_len();
                for (i, &fout) in hidden.iter().enumerate() {
                    push_weight(&mut entries, format!("backbone.fc{i}.weight"), &[fin, fout], fin);
                    entries.push((format!("backbone.fc{i}.bias"), Tensor::zeros(&[fout])));
                    fin = fout;
                }
            }
        }
        let f = cfg.feature_dim();
        push_weight(&mut entries, "head.fc0.weight".into(), &[f, cfg.projection_hidden], f);
        entries.push(("head.fc0.bias".into(), Tensor::zeros(&[cfg.projection_hidden])));
        push_weight(
            &mut entries,
            "head.fc1.weight".into(),
            &[cfg.projection_hidden, cfg.projection_dim],
            cfg.projection_hidden,
        );
        entries.push(("head.fc1.bias".into(), Tensor::zeros(&[cfg.projection_dim])));
        Params { entries }
    }

    /// Checks that `params` has the names and shapes this encoder expects.
    pub fn check_params(&self, params: &Params) -> Result<()> {
        let expected = self.init(0);
        if expected.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for ((en, et), (n, t)) in expected.entries.iter().zip(&params.entries) {
            if en != n || et.shape() != t.shape() {
                return Err(Error::InvalidConfig(format!(
                    "parameter mismatch: expected {en} {:?}, found {n} {:?}",
                    et.shape(),
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Packs views into a `[B, C, H, W]` tensor.
    pub fn batch_tensor(&self, views: &[&AugmentedView]) -> Result<Tensor> {
        let (c, h, w) = self.config.input_shape;
        let mut data = Vec::with_capacity(views.len() * c * h * w);
        for v in views {
            if (v.channels, v.height, v.width) != (c, h, w) {
                return Err(Error::Shape {
                    op: "encoder input",
                    left: vec![c, h, w],
                    right: vec![v.channels, v.height, v.width],
                });
            }
            data.extend_from_slice(&v.pixels);
        }
        Tensor::new(&[views.len(), c, h, w], data)
    }

    /// Packs raw images (no augmentation) into a `[B, C, H, W]` tensor.
    pub fn image_tensor(&self, images: &[ImageRecord]) -> Result<Tensor> {
        let (c, h, w) = self.config.input_shape;
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for im in images {
            if im.dims() != (c, h, w) {
                return Err(Error::Shape {
                    op: "encoder input",
                    left: vec![c, h, w],
                    right: vec![im.channels, im.height, im.width],
                });
            }
            data.extend_from_slice(&im.pixels);
        }
        Tensor::new(&[images.len(), c, h, w], data)
    }

    /// Backbone + head on a `[B, C, H, W]` input already on the tape.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<Forward> {
        let (c, h, w) = self.config.input_shape;
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::Shape {
                op: "encoder input",
                left: vec![c, h, w],
                right: shape,
            });
        }
        let b = shape[0];
        let mut p = params.iter().copied();
        let mut next = || p.next().ok_or(Error::InvalidConfig("missing parameters".into()));
        let features = match &self.config.architecture {
            Architecture::SmallConv { channels } => {
                let mut x = input;
                for _ in channels {
                    let (wt, bias) = (next()?, next()?);
                    x = tape.conv2d(x, wt, Some(bias), Conv2dSpec { stride: 2, padding: 1 })?;
                    x = tape.relu(x);
                }
                tape.global_avg_pool(x)?
            }
            Architecture::Mlp { hidden } => {
                let mut x = tape.reshape(input, &[b, c * h * w])?;
                for _ in hidden {
                    let (wt, bias) = (next()?, next()?);
                    x = tape.matmul(x, wt)?;
                    x = tape.add_bias(x, bias)?;
                    x = tape.relu(x);
                }
                x
            }
        };
        let (w0, b0, w1, b1) = (next()?, next()?, next()?, next()?);
        let hdn = tape.matmul(features, w0)?;
        let hdn = tape.add_bias(hdn, b0)?;
        let hdn = tape.relu(hdn);
        let z = tape.matmul(hdn, w1)?;
        let projection = tape.add_bias(z, b1)?;
        if !tape.value(projection).is_finite() {
            return Err(Error::Numeric {
                op: "encoder forward",
                detail: "non-finite activation".into(),
            });
        }
        Ok(Forward {
            features,
            projection,
        })
    }

    /// Backbone features of raw images, row-major `[n × feature_dim]`.
    pub fn encode_features(&self, params: &Params, images: &[ImageRecord], batch_size: usize) -> Result<Vec<Float>> {
        let bs = batch_size.max(1);
        let mut out = Vec::with_capacity(images.len() * self.config.feature_dim());
        for chunk in images.chunks(bs) {
            let mut tape = Tape::new();
            let vars = params.bind_frozen(&mut tape);
            let x = tape.leaf(self.image_tensor(chunk)?);
            let fwd = self.forward(&mut tape, &vars, x)?;
            out.extend_from_slice(tape.value(fwd.features).data());
        }
        Ok(out)
    }

    /// Row-normalized backbone features in dataset order.
    pub fn embed_dataset(&self, params: &Params, images: &[ImageRecord], batch_size: usize) -> Result<EmbeddingMatrix> {
        let feats = self.encode_features(params, images, batch_size)?;
        EmbeddingMatrix::normalized_from(images.len(), self.config.feature_dim(), feats)
    }
}
