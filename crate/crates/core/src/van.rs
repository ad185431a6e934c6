//! VAN backbones assembled from any of the four attention designs.
//!
//! Layout: stem (7x7 stride-4 conv + BN), then four stages. Stages 2-4 open
//! with a 3x3 stride-2 conv + BN. Each block is
//!
//! ```text
//! x = x + scale1 * proj2(attn(gelu(proj1(norm1(x)))))
//! x = x + scale2 * fc2(gelu(dwconv3x3(fc1(norm2(x)))))
//! ```
//!
//! and the head is global average pooling followed by a linear layer
//! (stored as a 1x1 convolution on the pooled `[N, C, 1, 1]` map).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionModule, AttentionVariant, KernelSpec};
use crate::autodiff::{Recordable, Tape, Var};
use crate::conv::{ConvKernel, KernelKind, StridedConv};
use crate::error::{Error, Result};
use crate::init::{self, fan_in_uniform};
use crate::tensor::{BatchNorm, Shape, Tensor};

pub const LAYER_SCALE_INIT: f64 = 0.01;
pub const DEFAULT_CLASSES: usize = 1000;
/// Total downsampling factor of the backbone.
pub const OUTPUT_STRIDE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Capacity {
    Tiny,
    Small,
    Base,
}

impl Capacity {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tiny => "tiny",
            Self::Small => "small",
            Self::Base => "base",
        }
    }

    pub fn stages(self) -> Vec<StageSpec> {
        let (channels, depths) = match self {
            Self::Tiny => ([32, 64, 160, 256], [3, 3, 5, 2]),
            Self::Small => ([64, 128, 320, 512], [2, 2, 4, 2]),
            Self::Base => ([64, 128, 320, 512], [3, 3, 12, 3]),
        };
        let expansion = [8, 8, 4, 4];
        (0..4)
            .map(|i| StageSpec {
                stride: if i == 0 { 4 } else { 2 },
                down_kernel: if i == 0 { 7 } else { 3 },
                channels: channels[i],
                expansion: expansion[i],
                depth: depths[i],
            })
            .collect()
    }
}

impl fmt::Display for Capacity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Capacity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            "base" => Ok(Self::Base),
            other => Err(Error::Config(format!("unknown capacity '{other}'"))),
        }
    }
}

/// `(S_i, K_i, C_i, E_i, L_i)` for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stride: usize,
    pub down_kernel: usize,
    pub channels: usize,
    pub expansion: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub k: usize,
    pub d: usize,
}

impl AttentionConfig {
    pub fn spec(&self) -> KernelSpec {
        KernelSpec::new(self.k, self.d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub capacity: Capacity,
    pub stages: Vec<StageSpec>,
    pub attention: AttentionConfig,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_classes() -> usize {
    DEFAULT_CLASSES
}

impl ModelConfig {
    pub fn new(capacity: Capacity, variant: AttentionVariant, spec: KernelSpec) -> Self {
        Self {
            capacity,
            stages: capacity.stages(),
            attention: AttentionConfig {
                variant,
                k: spec.k,
                d: spec.d,
            },
            num_classes: DEFAULT_CLASSES,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages != self.capacity.stages() {
            return Err(Error::Config(format!(
                "stage settings do not match the {} capacity",
                self.capacity
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        self.attention.spec().validate(self.attention.variant)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return Err(Error::IndivisibleInput {
                h,
                w,
                divisor: OUTPUT_STRIDE,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: BatchNorm,
    pub proj1: ConvKernel,
    pub attn: AttentionModule,
    pub proj2: ConvKernel,
    pub scale1: Vec<f64>,
    pub norm2: BatchNorm,
    pub fc1: ConvKernel,
    pub dwconv: ConvKernel,
    pub fc2: ConvKernel,
    pub scale2: Vec<f64>,
}

fn dense_pointwise<R: Rng + ?Sized>(rng: &mut R, out: usize, inp: usize) -> Result<ConvKernel> {
    ConvKernel::pointwise(out, inp, fan_in_uniform(rng, out * inp, inp), Some(vec![0.0; out]))
}

impl Block {
    fn random<R: Rng + ?Sized>(rng: &mut R, stage: &StageSpec, attention: &AttentionConfig) -> Result<Self> {
        let c = stage.channels;
        let hidden = c * stage.expansion;
        let proj1 = dense_pointwise(rng, c, c)?;
        let attn = AttentionModule::random(attention.variant, attention.spec(), c, true, rng)?;
        let proj2 = dense_pointwise(rng, c, c)?;
        let fc1 = dense_pointwise(rng, hidden, c)?;
        let dwconv = ConvKernel::depthwise(KernelKind::Depthwise2d, hidden, 3, 3, 1, fan_in_uniform(rng, hidden * 9, 9))?
            .with_bias(Some(vec![0.0; hidden]))?;
        let fc2 = dense_pointwise(rng, c, hidden)?;
        Ok(Self {
            norm1: BatchNorm::identity(c),
            proj1,
            attn,
            proj2,
            scale1: vec![LAYER_SCALE_INIT; c],
            norm2: BatchNorm::identity(c),
            fc1,
            dwconv,
            fc2,
            scale2: vec![LAYER_SCALE_INIT; c],
        })
    }

    fn param_count(&self) -> usize {
        self.norm1.param_count()
            + self.proj1.param_count()
            + self.attn.param_count()
            + self.proj2.param_count()
            + self.scale1.len()
            + self.norm2.param_count()
            + self.fc1.param_count()
            + self.dwconv.param_count()
            + self.fc2.param_count()
            + self.scale2.len()
    }

    fn record<'a>(&'a self, tape: &mut Tape<'a>, scope: &str, x: Var) -> Result<Var> {
        let h = tape.batch_norm(&format!("{scope}.norm1"), x, &self.norm1)?;
        let h = tape.pointwise(&format!("{scope}.proj1"), h, &self.proj1)?;
        let h = tape.gelu(h);
        let h = self.attn.record(tape, &format!("{scope}.attn"), h)?;
        let h = tape.pointwise(&format!("{scope}.proj2"), h, &self.proj2)?;
        let h = tape.scale(&format!("{scope}.scale1"), h, &self.scale1)?;
        let x = tape.add(x, h)?;

        let h = tape.batch_norm(&format!("{scope}.norm2"), x, &self.norm2)?;
        let h = tape.pointwise(&format!("{scope}.fc1"), h, &self.fc1)?;
        let h = tape.dw_conv(&format!("{scope}.dwconv"), h, &self.dwconv)?;
        let h = tape.gelu(h);
        let h = tape.pointwise(&format!("{scope}.fc2"), h, &self.fc2)?;
        let h = tape.scale(&format!("{scope}.scale2"), h, &self.scale2)?;
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    /// Stem convolution for stage 1, downsampling convolution otherwise.
    pub down: StridedConv,
    pub down_norm: BatchNorm,
    pub blocks: Vec<Block>,
}

impl Stage {
    /// Cost-log prefix of the opening conv/BN pair.
    pub fn down_scope(index: usize) -> String {
        if index == 0 {
            "stem".to_string()
        } else {
            format!("stage{}.down", index + 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VanModel {
    config: ModelConfig,
    stages: Vec<Stage>,
    head: ConvKernel,
}

/// Build a seeded random model. BN layers start frozen at the identity
/// (zero mean, unit variance, gamma 1, beta 0) and every bias at zero.
pub fn build_van(config: &ModelConfig) -> Result<VanModel> {
    config.validate()?;
    let mut rng = init::rng(config.seed);
    let mut stages = Vec::with_capacity(4);
    let mut in_channels = 3;
    for spec in &config.stages {
        let c = spec.channels;
        let fan_in = in_channels * spec.down_kernel * spec.down_kernel;
        let down = StridedConv::new(
            c,
            in_channels,
            spec.down_kernel,
            spec.stride,
            fan_in_uniform(&mut rng, c * fan_in, fan_in),
            Some(vec![0.0; c]),
        )?;
        let blocks = (0..spec.depth)
            .map(|_| Block::random(&mut rng, spec, &config.attention))
            .collect::<Result<Vec<_>>>()?;
        stages.push(Stage {
            down,
            down_norm: BatchNorm::identity(c),
            blocks,
        });
        in_channels = c;
    }
    let head = dense_pointwise(&mut rng, config.num_classes, in_channels)?;
    Ok(VanModel {
        config: config.clone(),
        stages,
        head,
    })
}

impl VanModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn head(&self) -> &ConvKernel {
        &self.head
    }

    /// Trainable scalars: conv weights and biases, BN affine terms,
    /// LayerScale diagonals, head weight and bias.
    pub fn count_params(&self) -> usize {
        self.stages
            .iter()
            .map(|s| s.down.param_count() + s.down_norm.param_count() + s.blocks.iter().map(Block::param_count).sum::<usize>())
            .sum::<usize>()
            + self.head.param_count()
    }

    /// Every attention module, in forward order.
    pub fn attention_modules(&self) -> impl Iterator<Item = &AttentionModule> {
        self.stages.iter().flat_map(|s| s.blocks.iter().map(|b| &b.attn))
    }

    /// Set both LayerScale diagonals of every block to `value`.
    pub fn with_layer_scale(mut self, value: f64) -> Self {
        for b in self.stages.iter_mut().flat_map(|s| s.blocks.iter_mut()) {
            b.scale1.iter_mut().for_each(|v| *v = value);
            b.scale2.iter_mut().for_each(|v| *v = value);
        }
        self
    }

    /// Rescale the classifier head weights.
    pub fn with_head_scaled(mut self, factor: f64) -> Result<Self> {
        let w = self.head.weights().iter().map(|v| v * factor).collect();
        self.head = self.head.with_weights(w)?;
        Ok(self)
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = images.shape();
        if s.c != 3 {
            return Err(Error::ChannelMismatch {
                op: "van forward",
                expected: 3,
                actual: s.c,
            });
        }
        self.config.check_input(s.h, s.w)
    }

    /// Record stem and stages; returns the stage-4 feature map.
    pub fn record_features<'a>(&'a self, tape: &mut Tape<'a>, images: Var) -> Result<Var> {
        self.check_images(tape.value(images))?;
        let mut x = images;
        for (i, stage) in self.stages.iter().enumerate() {
            let scope = Stage::down_scope(i);
            x = tape.strided(&format!("{scope}.conv"), x, &stage.down)?;
            x = tape.batch_norm(&format!("{scope}.bn"), x, &stage.down_norm)?;
            for (j, block) in stage.blocks.iter().enumerate() {
                x = block.record(tape, &format!("stage{}.block{}", i + 1, j), x)?;
            }
        }
        Ok(x)
    }

    pub fn record_logits<'a>(&'a self, tape: &mut Tape<'a>, images: Var) -> Result<Var> {
        let f = self.record_features(tape, images)?;
        let pooled = tape.avg_pool(f);
        tape.pointwise("head", pooled, &self.head)
    }

    /// Logits as `[N, num_classes, 1, 1]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.leaf(images.clone());
        let y = self.record_logits(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Stage-4 feature map.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let x = tape.leaf(images.clone());
        let y = self.record_features(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Adapter whose recorded output is the stage-4 feature map.
    pub fn feature_extractor(&self) -> VanFeatures<'_> {
        VanFeatures(self)
    }

    /// Per-stage output shapes for an `N x 3 x H x W` input.
    pub fn stage_shapes(&self, n: usize, h: usize, w: usize) -> Result<Vec<Shape>> {
        self.config.check_input(h, w)?;
        let mut s = Shape::new(n, 3, h, w);
        Ok(self
            .stages
            .iter()
            .map(|stage| {
                s = stage.down.output_shape(s);
                s
            })
            .collect())
    }
}

impl Recordable for VanModel {
    fn record<'a>(&'a self, tape: &mut Tape<'a>, input: Var) -> Result<Var> {
        self.record_logits(tape, input)
    }
}

pub struct VanFeatures<'m>(pub &'m VanModel);

impl Recordable for VanFeatures<'_> {
    fn record<'a>(&'a self, tape: &mut Tape<'a>, input: Var) -> Result<Var> {
        self.0.record_features(tape, input)
    }
}

/// Which output position the input gradient is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Target {
    /// `(H/2, W/2)` of the output map.
    #[default]
    Center,
    At { h: usize, w: usize },
}

/// Gradient of the channel-summed output at `target` (summed over the batch)
/// with respect to the input.
pub fn input_gradient<M: Recordable + ?Sized>(model: &M, input: &Tensor, target: Target) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let y = model.record(&mut tape, x)?;
    let os = tape.value(y).shape();
    let (th, tw) = match target {
        Target::Center => (os.h / 2, os.w / 2),
        Target::At { h, w } => (h, w),
    };
    if th >= os.h || tw >= os.w {
        return Err(Error::TargetOutOfBounds {
            h: th,
            w: tw,
            height: os.h,
            width: os.w,
        });
    }
    let mut seed = vec![0.0; os.numel()];
    for n in 0..os.n {
        for c in 0..os.c {
            seed[((n * os.c + c) * os.h + th) * os.w + tw] = 1.0;
        }
    }
    tape.gradient(y, Tensor::from_vec(os, seed)?, x)
}
