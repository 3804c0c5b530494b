//! The Tiny-Inception-ResNet-v2 family.
//!
//! Layout: stem → `n_a` × block A (35×35 grid at full scale) → reduction A →
//! `n_b − 1` × block B → reduction B → `n_c` × block C → 1×1 conv →
//! global average pool → dropout → linear. Reduction A counts as the first
//! member of the B group, so `n_b = 0` drops it and feeds reduction B
//! straight from the A group. Reduction B is always present.
//!
//! Filter counts follow the Keras reference implementation and are scaled
//! by `width` (rounded up). Every convolution except the residual
//! up-projections is followed by batchnorm and ReLU.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradcheck::{self, GradCheckReport};
use crate::tensor::kernels::{self, BatchStats};
use crate::tensor::{BatchNormState, ConvSpec, Graph, Mode, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("input of {input}px collapses at stage `{stage}`: {detail}")]
    Collapse {
        stage: String,
        input: usize,
        detail: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ArchError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stem {
    /// Full stem when the input survives it, desk stem otherwise.
    #[default]
    Auto,
    /// Reference stem: six convolutions and two max-pools.
    Full,
    /// Two stride-2 3×3 convolutions; for small desk-scale chips.
    Desk,
}

impl fmt::Display for Stem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stem::Auto => "auto",
            Stem::Full => "full",
            Stem::Desk => "desk",
        })
    }
}

impl FromStr for Stem {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "auto" => Ok(Stem::Auto),
            "full" => Ok(Stem::Full),
            "desk" => Ok(Stem::Desk),
            other => Err(format!("unknown stem {other:?} (expected auto, full or desk)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub n_a: usize,
    pub n_b: usize,
    pub n_c: usize,
    pub width: f64,
    pub num_classes: usize,
    pub input_size: usize,
    pub residual_scale: f64,
    pub dropout: f64,
    pub stem: Stem,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_a: 10,
            n_b: 3,
            n_c: 3,
            width: 1.0,
            num_classes: 11,
            input_size: 299,
            residual_scale: 0.1,
            dropout: 0.2,
            stem: Stem::Auto,
        }
    }
}

impl NetworkConfig {
    pub fn new(n_a: usize, n_b: usize, n_c: usize, width: f64) -> Self {
        Self {
            n_a,
            n_b,
            n_c,
            width,
            ..Self::default()
        }
    }

    pub fn with_input_size(mut self, input_size: usize) -> Self {
        self.input_size = input_size;
        self
    }

    pub fn with_classes(mut self, num_classes: usize) -> Self {
        self.num_classes = num_classes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ArchError::Config(m));
        if self.n_a + self.n_b + self.n_c == 0 {
            return fail("at least one inception block is required".into());
        }
        if !(self.width.is_finite() && self.width > 0.0 && self.width <= 1.0) {
            return fail(format!("width must be in (0, 1], got {}", self.width));
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.input_size == 0 {
            return fail("input_size must be positive".into());
        }
        if !self.residual_scale.is_finite() {
            return fail("residual_scale must be finite".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Channel count for a reference filter count: `ceil(width · reference)`,
    /// never below 1. Products within 1e-9 of an integer snap to it first.
    pub fn channels(&self, reference: usize) -> usize {
        let v = self.width * reference as f64;
        let r = v.round();
        let c = if (v - r).abs() < 1e-9 { r } else { v.ceil() };
        (c as usize).max(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum StageKind {
    Stem,
    BlockA,
    ReductionA,
    BlockB,
    ReductionB,
    BlockC,
    Head,
}

impl StageKind {
    /// Block group (`'A'`, `'B'`, `'C'`) the stage counts towards, if any.
    pub fn group(self) -> Option<char> {
        match self {
            StageKind::BlockA => Some('A'),
            StageKind::ReductionA | StageKind::BlockB => Some('B'),
            StageKind::BlockC => Some('C'),
            _ => None,
        }
    }

    pub fn is_residual(self) -> bool {
        matches!(self, StageKind::BlockA | StageKind::BlockB | StageKind::BlockC)
    }
}

/// One row of [`Network::describe`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub name: String,
    pub kind: StageKind,
    /// `[C, H, W]` for feature stages, `[num_classes]` for the head.
    pub output: Vec<usize>,
    pub params: usize,
    /// Output channels of every convolution in the stage, in build order.
    pub conv_channels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
pub struct BatchNormEntry {
    pub name: String,
    pub state: BatchNormState,
}

#[derive(Clone, Debug)]
struct ConvBn {
    spec: ConvSpec,
    weight: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
}

#[derive(Clone, Debug)]
struct ConvBias {
    spec: ConvSpec,
    weight: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(ConvBn),
    MaxPool {
        window: usize,
        stride: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
        pad: usize,
    },
    /// Parallel branches concatenated along channels.
    Mixed(Vec<Vec<Layer>>),
    /// `relu(x + scale · up(concat(branches(x))))`.
    Residual {
        branches: Vec<Vec<Layer>>,
        up: ConvBias,
    },
    /// Global average pool → dropout → linear.
    Classifier {
        weight: usize,
        bias: usize,
    },
}

#[derive(Clone, Debug)]
struct Stage {
    summary: StageSummary,
    layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Shape {
    c: usize,
    h: usize,
    w: usize,
}

/// Options for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Apply batchnorm layers; when false they are skipped entirely.
    pub normalize: bool,
    /// Seed for the dropout mask; `None` disables dropout. Ignored in eval mode.
    pub dropout_seed: Option<u64>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            normalize: true,
            dropout_seed: None,
        }
    }

    pub fn train(dropout_seed: Option<u64>) -> Self {
        Self {
            mode: Mode::Train,
            normalize: true,
            dropout_seed,
        }
    }
}

/// Handles produced by [`Network::forward`].
pub struct ForwardPass {
    pub logits: Var,
    /// Leaf for each parameter, in [`Network::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics for each batchnorm layer (train mode only).
    pub bn_stats: Vec<Option<BatchStats>>,
}

#[derive(Clone, Debug)]
pub struct Network {
    config: NetworkConfig,
    seed: u64,
    full_stem: bool,
    stages: Vec<Stage>,
    params: Vec<Param>,
    batchnorms: Vec<BatchNormEntry>,
}

/// Builds and initialises a network.
///
/// Convolution and linear weights are drawn from `U(−√(6/fan_in), √(6/fan_in))`
/// with a ChaCha8 stream seeded by `seed`; biases and betas start at 0 and
/// gammas at 1.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    match config.stem {
        Stem::Full => Builder::new(config, seed).build(true),
        Stem::Desk => Builder::new(config, seed).build(false),
        Stem::Auto => match Builder::new(config, seed).build(true) {
            Err(ArchError::Collapse { .. }) => Builder::new(config, seed).build(false),
            other => other,
        },
    }
}

struct Builder<'a> {
    config: &'a NetworkConfig,
    seed: u64,
    rng: ChaCha8Rng,
    params: Vec<Param>,
    batchnorms: Vec<BatchNormEntry>,
    stage: String,
    conv_channels: Vec<usize>,
}

enum Pad {
    Same,
    Valid,
}

impl<'a> Builder<'a> {
    fn new(config: &'a NetworkConfig, seed: u64) -> Self {
        Self {
            config,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            batchnorms: Vec::new(),
            stage: String::new(),
            conv_channels: Vec::new(),
        }
    }

    fn collapse(&self, detail: String) -> ArchError {
        ArchError::Collapse {
            stage: self.stage.clone(),
            input: self.config.input_size,
            detail,
        }
    }

    fn uniform_param(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let limit = (6.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        let value = Tensor::from_fn(shape, |_| rng.random_range(-limit..limit));
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn const_param(&mut self, name: String, shape: &[usize], v: f64) -> usize {
        self.params.push(Param {
            name,
            value: Tensor::full(shape, v),
        });
        self.params.len() - 1
    }

    fn conv_spec(
        &self,
        input: &mut Shape,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: Pad,
    ) -> Result<ConvSpec> {
        let mut spec = match pad {
            Pad::Same => ConvSpec::same(input.c, cout, kh, kw),
            Pad::Valid => ConvSpec::valid(input.c, cout, kh, 1),
        };
        spec.kernel_w = kw;
        spec.stride = stride;
        let (h, w) = spec
            .output_hw(input.h, input.w)
            .map_err(|e| self.collapse(e.to_string()))?;
        *input = Shape { c: cout, h, w };
        Ok(spec)
    }

    /// Convolution (no bias) → batchnorm → ReLU, with `reference` filters before width scaling.
    fn conv_bn(
        &mut self,
        name: &str,
        shape: &mut Shape,
        reference: usize,
        k: (usize, usize),
        stride: usize,
        pad: Pad,
    ) -> Result<Layer> {
        let cout = self.config.channels(reference);
        let spec = self.conv_spec(shape, cout, k.0, k.1, stride, pad)?;
        let prefix = format!("{}/{name}", self.stage);
        let fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w;
        let weight = self.uniform_param(format!("{prefix}/weight"), &spec.weight_shape(), fan_in);
        let gamma = self.const_param(format!("{prefix}/bn_gamma"), &[cout], 1.0);
        let beta = self.const_param(format!("{prefix}/bn_beta"), &[cout], 0.0);
        self.batchnorms.push(BatchNormEntry {
            name: format!("{prefix}/bn"),
            state: BatchNormState::new(cout),
        });
        self.conv_channels.push(cout);
        Ok(Layer::Conv(ConvBn {
            spec,
            weight,
            gamma,
            beta,
            bn: self.batchnorms.len() - 1,
        }))
    }

    fn maxpool(&self, shape: &mut Shape, window: usize, stride: usize) -> Result<Layer> {
        if shape.h < window || shape.w < window {
            return Err(self.collapse(format!("max-pool window {window} does not fit {}×{}", shape.h, shape.w)));
        }
        shape.h = (shape.h - window) / stride + 1;
        shape.w = (shape.w - window) / stride + 1;
        Ok(Layer::MaxPool { window, stride })
    }

    fn mixed(shape: &mut Shape, branches: Vec<(Vec<Layer>, Shape)>) -> Layer {
        let first = branches[0].1;
        debug_assert!(branches.iter().all(|(_, s)| s.h == first.h && s.w == first.w));
        *shape = Shape {
            c: branches.iter().map(|(_, s)| s.c).sum(),
            ..first
        };
        Layer::Mixed(branches.into_iter().map(|(l, _)| l).collect())
    }

    fn residual(&mut self, shape: Shape, branches: Vec<(Vec<Layer>, Shape)>) -> Layer {
        let concat: usize = branches.iter().map(|(_, s)| s.c).sum();
        let spec = ConvSpec::same(concat, shape.c, 1, 1).with_bias(true);
        let prefix = format!("{}/up", self.stage);
        let weight = self.uniform_param(format!("{prefix}/weight"), &spec.weight_shape(), concat);
        let bias = self.const_param(format!("{prefix}/bias"), &[shape.c], 0.0);
        self.conv_channels.push(shape.c);
        Layer::Residual {
            branches: branches.into_iter().map(|(l, _)| l).collect(),
            up: ConvBias { spec, weight, bias },
        }
    }

    fn full_stem(&mut self, s: &mut Shape) -> Result<Vec<Layer>> {
        Ok(vec![
            self.conv_bn("conv1", s, 32, (3, 3), 2, Pad::Valid)?,
            self.conv_bn("conv2", s, 32, (3, 3), 1, Pad::Valid)?,
            self.conv_bn("conv3", s, 64, (3, 3), 1, Pad::Same)?,
            self.maxpool(s, 3, 2)?,
            self.conv_bn("conv4", s, 80, (1, 1), 1, Pad::Valid)?,
            self.conv_bn("conv5", s, 192, (3, 3), 1, Pad::Valid)?,
            self.maxpool(s, 3, 2)?,
            self.mixed_5b(s)?,
        ])
    }

    fn desk_stem(&mut self, s: &mut Shape) -> Result<Vec<Layer>> {
        Ok(vec![
            self.conv_bn("conv1", s, 32, (3, 3), 2, Pad::Same)?,
            self.conv_bn("conv2", s, 192, (3, 3), 2, Pad::Same)?,
            self.mixed_5b(s)?,
        ])
    }

    fn mixed_5b(&mut self, s: &mut Shape) -> Result<Layer> {
        let x = *s;
        let (mut b0, mut b1, mut b2, mut b3) = (x, x, x, x);
        let l0 = vec![self.conv_bn("mixed/b0_1x1", &mut b0, 96, (1, 1), 1, Pad::Same)?];
        let l1 = vec![
            self.conv_bn("mixed/b1_1x1", &mut b1, 48, (1, 1), 1, Pad::Same)?,
            self.conv_bn("mixed/b1_5x5", &mut b1, 64, (5, 5), 1, Pad::Same)?,
        ];
        let l2 = vec![
            self.conv_bn("mixed/b2_1x1", &mut b2, 64, (1, 1), 1, Pad::Same)?,
            self.conv_bn("mixed/b2_3x3a", &mut b2, 96, (3, 3), 1, Pad::Same)?,
            self.conv_bn("mixed/b2_3x3b", &mut b2, 96, (3, 3), 1, Pad::Same)?,
        ];
        let l3 = vec![
            Layer::AvgPool {
                window: 3,
                stride: 1,
                pad: 1,
            },
            self.conv_bn("mixed/b3_1x1", &mut b3, 64, (1, 1), 1, Pad::Same)?,
        ];
        Ok(Self::mixed(s, vec![(l0, b0), (l1, b1), (l2, b2), (l3, b3)]))
    }

    fn block_a(&mut self, s: Shape) -> Result<Layer> {
        let (mut b0, mut b1, mut b2) = (s, s, s);
        let l0 = vec![self.conv_bn("b0_1x1", &mut b0, 32, (1, 1), 1, Pad::Same)?];
        let l1 = vec![
            self.conv_bn("b1_1x1", &mut b1, 32, (1, 1), 1, Pad::Same)?,
            self.conv_bn("b1_3x3", &mut b1, 32, (3, 3), 1, Pad::Same)?,
        ];
        let l2 = vec![
            self.conv_bn("b2_1x1", &mut b2, 32, (1, 1), 1, Pad::Same)?,
            self.conv_bn("b2_3x3a", &mut b2, 48, (3, 3), 1, Pad::Same)?,
            self.conv_bn("b2_3x3b", &mut b2, 64, (3, 3), 1, Pad::Same)?,
        ];
        Ok(self.residual(s, vec![(l0, b0), (l1, b1), (l2, b2)]))
    }

    fn block_b(&mut self, s: Shape) -> Result<Layer> {
        let (mut b0, mut b1) = (s, s);
        let l0 = vec![self.conv_bn("b0_1x1", &mut b0, 192, (1, 1), 1, Pad::Same)?];
        let l1 = vec![
            self.conv_bn("b1_1x1", &mut b1, 128, (1, 1), 1, Pad::Same)?,
            self.conv_bn("b1_1x7", &mut b1, 160, (1, 7), 1, Pad::Same)?,
            self.conv_bn("b1_7x1", &mut b1, 192, (7, 1), 1, Pad::Same)?,
        ];
        Ok(self.residual(s, vec![(l0, b0), (l1, b1)]))
    }

    fn block_c(&mut self, s: Shape) -> Result<Layer> {
        let (mut b0, mut b1) = (s, s);
        let l0 = vec![self.conv_bn("b0_1x1", &mut b0, 192, (1, 1), 1, Pad::Same)?];
        let l1 = vec![
            self.conv_bn("b1_1x1", &mut b1, 192, (1, 1), 1, Pad::Same)?,
            self.conv_bn("b1_1x3", &mut b1, 224, (1, 3), 1, Pad::Same)?,
            self.conv_bn("b1_3x1", &mut b1, 256, (3, 1), 1, Pad::Same)?,
        ];
        Ok(self.residual(s, vec![(l0, b0), (l1, b1)]))
    }

    fn reduction_a(&mut self, s: &mut Shape) -> Result<Layer> {
        let x = *s;
        let (mut b0, mut b1, mut b2) = (x, x, x);
        let l0 = vec![self.conv_bn("b0_3x3", &mut b0, 384, (3, 3), 2, Pad::Valid)?];
        let l1 = vec![
            self.conv_bn("b1_1x1", &mut b1, 256, (1, 1), 1, Pad::Same)?,
            self.conv_bn("b1_3x3a", &mut b1, 256, (3, 3), 1, Pad::Same)?,
            self.conv_bn("b1_3x3b", &mut b1, 384, (3, 3), 2, Pad::Valid)?,
        ];
        let l2 = vec![self.maxpool(&mut b2, 3, 2)?];
        Ok(Self::mixed(s, vec![(l0, b0), (l1, b1), (l2, b2)]))
    }

    fn reduction_b(&mut self, s: &mut Shape) -> Result<Layer> {
        let x = *s;
        let (mut b0, mut b1, mut b2, mut b3) = (x, x, x, x);
        let l0 = vec![
            self.conv_bn("b0_1x1", &mut b0, 256, (1, 1), 1, Pad::Same)?,
            self.conv_bn("b0_3x3", &mut b0, 384, (3, 3), 2, Pad::Valid)?,
        ];
        let l1 = vec![
            self.conv_bn("b1_1x1", &mut b1, 256, (1, 1), 1, Pad::Same)?,
            self.conv_bn("b1_3x3", &mut b1, 288, (3, 3), 2, Pad::Valid)?,
        ];
        let l2 = vec![
            self.conv_bn("b2_1x1", &mut b2, 256, (1, 1), 1, Pad::Same)?,
            self.conv_bn("b2_3x3a", &mut b2, 288, (3, 3), 1, Pad::Same)?,
            self.conv_bn("b2_3x3b", &mut b2, 320, (3, 3), 2, Pad::Valid)?,
        ];
        let l3 = vec![self.maxpool(&mut b3, 3, 2)?];
        Ok(Self::mixed(s, vec![(l0, b0), (l1, b1), (l2, b2), (l3, b3)]))
    }

    fn stage(
        &mut self,
        stages: &mut Vec<Stage>,
        name: String,
        kind: StageKind,
        shape: &mut Shape,
        make: impl FnOnce(&mut Self, &mut Shape) -> Result<Vec<Layer>>,
    ) -> Result<()> {
        self.stage = name.clone();
        self.conv_channels.clear();
        let before: usize = self.params.iter().map(|p| p.value.len()).sum();
        let layers = make(self, shape)?;
        let after: usize = self.params.iter().map(|p| p.value.len()).sum();
        stages.push(Stage {
            summary: StageSummary {
                name,
                kind,
                output: vec![shape.c, shape.h, shape.w],
                params: after - before,
                conv_channels: std::mem::take(&mut self.conv_channels),
            },
            layers,
        });
        Ok(())
    }

    fn build(mut self, full_stem: bool) -> Result<Network> {
        let cfg = self.config;
        let mut s = Shape {
            c: 3,
            h: cfg.input_size,
            w: cfg.input_size,
        };
        let mut stages = Vec::new();
        self.stage(&mut stages, "stem".into(), StageKind::Stem, &mut s, |b, s| {
            if full_stem {
                b.full_stem(s)
            } else {
                b.desk_stem(s)
            }
        })?;
        for i in 1..=cfg.n_a {
            self.stage(&mut stages, format!("block_a{i}"), StageKind::BlockA, &mut s, |b, s| {
                Ok(vec![b.block_a(*s)?])
            })?;
        }
        if cfg.n_b > 0 {
            self.stage(
                &mut stages,
                "reduction_a".into(),
                StageKind::ReductionA,
                &mut s,
                |b, s| Ok(vec![b.reduction_a(s)?]),
            )?;
        }
        for i in 1..cfg.n_b {
            self.stage(&mut stages, format!("block_b{i}"), StageKind::BlockB, &mut s, |b, s| {
                Ok(vec![b.block_b(*s)?])
            })?;
        }
        self.stage(
            &mut stages,
            "reduction_b".into(),
            StageKind::ReductionB,
            &mut s,
            |b, s| Ok(vec![b.reduction_b(s)?]),
        )?;
        for i in 1..=cfg.n_c {
            self.stage(&mut stages, format!("block_c{i}"), StageKind::BlockC, &mut s, |b, s| {
                Ok(vec![b.block_c(*s)?])
            })?;
        }
        self.stage(&mut stages, "head".into(), StageKind::Head, &mut s, |b, s| {
            let conv = b.conv_bn("conv", s, 1536, (1, 1), 1, Pad::Same)?;
            let k = cfg.num_classes;
            let weight = b.uniform_param("head/linear/weight".into(), &[k, s.c], s.c);
            let bias = b.const_param("head/linear/bias".into(), &[k], 0.0);
            *s = Shape { c: k, h: 1, w: 1 };
            Ok(vec![conv, Layer::Classifier { weight, bias }])
        })?;
        if let Some(head) = stages.last_mut() {
            head.summary.output = vec![cfg.num_classes];
        }
        Ok(Network {
            config: cfg.clone(),
            seed: self.seed,
            full_stem,
            stages,
            params: self.params,
            batchnorms: self.batchnorms,
        })
    }
}

struct Forward<'g> {
    g: &'g mut Graph,
    params: Vec<Var>,
    batchnorms: &'g [BatchNormEntry],
    opts: ForwardOptions,
    stats: Vec<Option<BatchStats>>,
    dropout: f64,
    scale: f64,
}

impl Forward<'_> {
    fn seq(&mut self, layers: &[Layer], mut x: Var) -> Result<Var> {
        for layer in layers {
            x = self.layer(layer, x)?;
        }
        Ok(x)
    }

    fn layer(&mut self, layer: &Layer, x: Var) -> Result<Var> {
        Ok(match layer {
            Layer::Conv(c) => {
                let mut y = self.g.conv2d(x, self.params[c.weight], None, c.spec)?;
                if self.opts.normalize {
                    let state = &self.batchnorms[c.bn].state;
                    let (z, stats) =
                        self.g
                            .batchnorm(y, self.params[c.gamma], self.params[c.beta], state, self.opts.mode)?;
                    self.stats[c.bn] = stats;
                    y = z;
                }
                self.g.relu(y)
            }
            Layer::MaxPool { window, stride } => self.g.maxpool2d(x, *window, *stride)?,
            Layer::AvgPool { window, stride, pad } => self.g.avgpool2d(x, *window, *stride, *pad)?,
            Layer::Mixed(branches) => {
                let outs = branches.iter().map(|b| self.seq(b, x)).collect::<Result<Vec<_>>>()?;
                self.g.concat_channels(&outs)?
            }
            Layer::Residual { branches, up } => {
                let outs = branches.iter().map(|b| self.seq(b, x)).collect::<Result<Vec<_>>>()?;
                let cat = self.g.concat_channels(&outs)?;
                let r = self
                    .g
                    .conv2d(cat, self.params[up.weight], Some(self.params[up.bias]), up.spec)?;
                let sum = self.g.residual_add_scaled(x, r, self.scale)?;
                self.g.relu(sum)
            }
            Layer::Classifier { weight, bias } => {
                let mut pooled = self.g.global_avgpool(x)?;
                if let (Mode::Train, Some(seed)) = (self.opts.mode, self.opts.dropout_seed) {
                    if self.dropout > 0.0 {
                        let n = self.g.value(pooled).len();
                        let keep = 1.0 - self.dropout;
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let mask = (0..n)
                            .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
                            .collect();
                        pooled = self.g.mask(pooled, mask)?;
                    }
                }
                self.g.linear(pooled, self.params[*weight], self.params[*bias])?
            }
        })
    }
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Seed the parameters were initialised from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uses_full_stem(&self) -> bool {
        self.full_stem
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn batchnorms(&self) -> &[BatchNormEntry] {
        &self.batchnorms
    }

    pub fn batchnorms_mut(&mut self) -> &mut [BatchNormEntry] {
        &mut self.batchnorms
    }

    /// Number of learnable scalars (batchnorm running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Per-stage output shapes and parameter subtotals, in forward order.
    pub fn describe(&self) -> Vec<StageSummary> {
        self.stages.iter().map(|s| s.summary.clone()).collect()
    }

    /// Records a forward pass of `input` (`[N, 3, S, S]`) onto `g`.
    pub fn forward(&self, g: &mut Graph, input: Var, opts: ForwardOptions) -> Result<ForwardPass> {
        let shape = g.value(input).shape();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(TensorError::Shape {
                op: "forward",
                detail: format!("expected [N, 3, {s}, {s}], got {shape:?}"),
            }
            .into());
        }
        let params = self.params.iter().map(|p| g.leaf(p.value.clone(), true)).collect();
        let mut fwd = Forward {
            g,
            params,
            batchnorms: &self.batchnorms,
            opts,
            stats: vec![None; self.batchnorms.len()],
            dropout: self.config.dropout,
            scale: self.config.residual_scale,
        };
        let mut x = input;
        for stage in &self.stages {
            x = fwd.seq(&stage.layers, x)?;
        }
        Ok(ForwardPass {
            logits: x,
            params: fwd.params,
            bn_stats: fwd.stats,
        })
    }

    /// Folds train-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, stats: &[Option<BatchStats>]) {
        for (entry, s) in self.batchnorms.iter_mut().zip(stats) {
            if let Some(s) = s {
                entry.state.update(s);
            }
        }
    }

    /// Eval-mode logits `[N, num_classes]`.
    pub fn logits(&self, chips: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.leaf(chips.clone(), false);
        let out = self.forward(&mut g, x, ForwardOptions::eval())?;
        let logits = g.value(out.logits).clone();
        if !logits.all_finite() {
            return Err(TensorError::NonFinite("forward").into());
        }
        Ok(logits)
    }

    /// Eval-mode class probabilities `[N, num_classes]`.
    pub fn predict_proba(&self, chips: &Tensor) -> Result<Tensor> {
        Ok(kernels::softmax(&self.logits(chips)?)?)
    }

    /// Loss and parameter gradients for one batch.
    pub fn loss_and_grads(
        &self,
        chips: &Tensor,
        labels: &[usize],
        opts: ForwardOptions,
    ) -> Result<(f64, Vec<Tensor>, Vec<Option<BatchStats>>)> {
        let mut g = Graph::new();
        let x = g.leaf(chips.clone(), false);
        let out = self.forward(&mut g, x, opts)?;
        let loss = g.softmax_cross_entropy(out.logits, labels)?;
        let value = g.value(loss).data()[0];
        let mut grads = g.backward(loss)?;
        let grads = out
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect();
        Ok((value, grads, out.bn_stats))
    }

    /// Finite-difference check of the end-to-end loss gradient.
    ///
    /// Checks up to `per_param` randomly chosen coordinates of every
    /// parameter tensor (`seed` picks them). Batchnorm runs in `opts.mode`
    /// with statistics frozen; dropout should be disabled. Coordinates
    /// whose probes flip a ReLU or move a max-pool choice are skipped and
    /// counted, since the loss has no derivative to compare there.
    pub fn grad_check(
        &self,
        chips: &Tensor,
        labels: &[usize],
        opts: ForwardOptions,
        eps: f64,
        per_param: usize,
        seed: u64,
    ) -> Result<GradCheckReport> {
        let (_, grads, _) = self.loss_and_grads(chips, labels, opts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let offsets: Vec<usize> = self
            .params
            .iter()
            .scan(0, |acc, p| {
                let o = *acc;
                *acc += p.value.len();
                Some(o)
            })
            .collect();
        let mut flat = Vec::with_capacity(self.param_count());
        grads.iter().for_each(|g| flat.extend_from_slice(g.data()));
        let mut coords = Vec::new();
        for (p, &off) in self.params.iter().zip(&offsets) {
            let n = p.value.len();
            if n <= per_param {
                coords.extend(off..off + n);
            } else {
                coords.extend((0..per_param).map(|_| off + rng.random_range(0..n)));
            }
        }
        let (_, base) = self.loss_and_piece(chips, labels, opts)?;
        let mut probe = self.clone();
        let report = gradcheck::compare_piecewise(
            &flat,
            &coords,
            |i, delta| {
                let k = offsets.partition_point(|&o| o <= i) - 1;
                let j = i - offsets[k];
                let orig = probe.params[k].value.data()[j];
                probe.params[k].value.data_mut()[j] = orig + delta;
                let loss = probe.loss_and_piece(chips, labels, opts);
                probe.params[k].value.data_mut()[j] = orig;
                loss.map_err(|e| match e {
                    ArchError::Tensor(t) => t,
                    other => TensorError::Config {
                        op: "grad_check",
                        detail: other.to_string(),
                    },
                })
            },
            base,
            eps,
        )?;
        Ok(report)
    }

    /// Loss and the kink fingerprint of the forward pass.
    fn loss_and_piece(&self, chips: &Tensor, labels: &[usize], opts: ForwardOptions) -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let x = g.leaf(chips.clone(), false);
        let out = self.forward(&mut g, x, opts)?;
        let loss = g.softmax_cross_entropy(out.logits, labels)?;
        Ok((g.value(loss).data()[0], g.kink_fingerprint()))
    }
}

/// Learnable-parameter count of the network `config` describes.
pub fn param_count(config: &NetworkConfig) -> Result<usize> {
    Ok(build_network(config, 0)?.param_count())
}

/// End-to-end gradient check of a (1,1,1) width-0.125 network on four
/// random 32×32 chips, three coordinates per parameter tensor.
///
/// Runs in eval mode. With batch statistics the loss is exactly invariant
/// to some parameters (a bias feeding straight into batchnorm), and their
/// zero gradients turn rounding noise into large relative errors.
pub fn tiny_network_gradcheck(eps: f64, seed: u64) -> Result<GradCheckReport> {
    let cfg = NetworkConfig::new(1, 1, 1, 0.125).with_input_size(32);
    let net = build_network(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let chips = Tensor::from_fn(&[4, 3, 32, 32], |_| rng.random_range(0.0..1.0));
    net.grad_check(&chips, &[0, 1, 2, 3], ForwardOptions::eval(), eps, 3, seed)
}
