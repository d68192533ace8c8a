//! Desk-scale 3D-conv backbones with named adapter insertion sites.
//!
//! Two families: an inception-style network (parallel 1x1x1 / 3x3x3 / pool
//! branches concatenated, one adapter on the concatenated channels of each
//! block) and a residual-style network (conv-BN-ReLU-conv-BN blocks with the
//! adapter between the second BN and the residual add). Both end in global
//! average pooling; heads hang off the pooled embedding.
//!
//! Every learnable tensor is registered under a stable dotted name, each
//! layer draws its init from an RNG stream keyed by that name, and freeze
//! policies flip per-parameter `trainable` flags (plus batch-norm statistics
//! mode) without touching values.

use crate::adapter::{Adapter3D, AdapterConfig, AdapterInit};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm3d, Buffer, Conv3d, GlobalAvgPool, Linear, MaxPool3d, Param, ParamKind, Relu};
use crate::tensor::Tensor;
use crate::util::{derive_seed, fnv1a};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Inception3d,
    Residual3d,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub family: Family,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub input_frames: usize,
    pub input_size: usize,
    /// Compression factor shared by every inserted adapter.
    pub adapter_lambda: usize,
}

impl BackboneSpec {
    pub fn residual_default() -> Self {
        BackboneSpec {
            family: Family::Residual3d,
            stage_channels: vec![16, 32],
            blocks_per_stage: vec![1, 1],
            input_frames: 16,
            input_size: 56,
            adapter_lambda: 4,
        }
    }

    pub fn inception_default() -> Self {
        BackboneSpec {
            family: Family::Inception3d,
            stage_channels: vec![32, 64],
            blocks_per_stage: vec![1, 1],
            input_frames: 16,
            input_size: 56,
            adapter_lambda: 4,
        }
    }

    /// Full-scale reference configuration sized like a standard two-stream
    /// inception video classifier (tens of millions of backbone weights,
    /// ~1.1M adapter weights at lambda=4). Used only for parameter and
    /// storage accounting — never run a forward pass at this size casually.
    pub fn reference_scale() -> Self {
        BackboneSpec {
            family: Family::Inception3d,
            stage_channels: vec![256, 480, 512, 512, 512, 528, 832, 832, 1024],
            blocks_per_stage: vec![1; 9],
            input_frames: 32,
            input_size: 224,
            adapter_lambda: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::config("backbone needs at least one stage"));
        }
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return Err(Error::config(format!(
                "stage_channels has {} entries but blocks_per_stage has {}",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::config("blocks_per_stage entries must be positive"));
        }
        if self.adapter_lambda == 0 {
            return Err(Error::config("adapter_lambda must be positive"));
        }
        for &c in &self.stage_channels {
            if c == 0 || c % self.adapter_lambda != 0 {
                return Err(Error::config(format!(
                    "stage channel {c} must be positive and divisible by adapter_lambda {}",
                    self.adapter_lambda
                )));
            }
            if self.family == Family::Inception3d && c % 4 != 0 {
                return Err(Error::config(format!(
                    "inception stage channel {c} must be divisible by 4 (branch split 1/4 + 1/2 + 1/4)"
                )));
            }
        }
        if self.input_frames == 0 || self.input_size == 0 {
            return Err(Error::config("input extents must be positive"));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }

    /// Batch-norm layer count implied by the topology: 1 for the stem, then
    /// 4 per inception block (1x1 branch, 3x3 reduce, 3x3 main, pool branch)
    /// or 2 per residual block plus 1 per channel-changing projection.
    pub fn num_bn_layers(&self) -> usize {
        let blocks: usize = self.blocks_per_stage.iter().sum();
        match self.family {
            Family::Inception3d => 1 + 4 * blocks,
            Family::Residual3d => {
                let mut projections = 0;
                for s in 1..self.stage_channels.len() {
                    if self.stage_channels[s] != self.stage_channels[s - 1] {
                        projections += 1;
                    }
                }
                1 + 2 * blocks + projections
            }
        }
    }
}

// ── Head variants ────────────────────────────────────────────────────────

/// What to build on top of the pooled embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    None,
    /// Plain classifier for the synthetic domain-general pretraining stage.
    Classifier { classes: usize },
    /// Segment-pace prediction: separate speed and segment-index heads.
    SegmentPace { num_speeds: usize, num_segments: usize },
    /// Whole-clip pace prediction: a single speed head.
    Pace { num_speeds: usize },
    /// Score-distribution head over discrete score bins.
    ScoreBins { bins: usize },
    /// Pairwise difference regressor on concat(query, exemplar, score).
    PairDiff,
}

#[derive(Debug, Clone)]
pub enum Head {
    None,
    Classifier(Linear),
    SegmentPace { speed: Linear, index: Linear },
    Pace(Linear),
    ScoreBins(Linear),
    PairDiff(Linear),
}

impl Head {
    fn build(kind: HeadKind, embed: usize, seed: u64) -> Head {
        let rng_for = |name: &str| ChaCha8Rng::seed_from_u64(derive_seed(seed, &[fnv1a(name.as_bytes())]));
        match kind {
            HeadKind::None => Head::None,
            HeadKind::Classifier { classes } => {
                Head::Classifier(Linear::new("head.cls", ParamKind::Head, embed, classes, &mut rng_for("head.cls")))
            }
            HeadKind::SegmentPace { num_speeds, num_segments } => Head::SegmentPace {
                speed: Linear::new("head.speed", ParamKind::Head, embed, num_speeds, &mut rng_for("head.speed")),
                index: Linear::new("head.index", ParamKind::Head, embed, num_segments, &mut rng_for("head.index")),
            },
            HeadKind::Pace { num_speeds } => {
                Head::Pace(Linear::new("head.speed", ParamKind::Head, embed, num_speeds, &mut rng_for("head.speed")))
            }
            HeadKind::ScoreBins { bins } => {
                Head::ScoreBins(Linear::new("head.bins", ParamKind::Head, embed, bins, &mut rng_for("head.bins")))
            }
            HeadKind::PairDiff => {
                Head::PairDiff(Linear::new("head.pair", ParamKind::Head, 2 * embed + 1, 1, &mut rng_for("head.pair")))
            }
        }
    }

    fn visit(&mut self, f: &mut impl FnMut(&mut Param)) {
        match self {
            Head::None => {}
            Head::Classifier(l) | Head::Pace(l) | Head::ScoreBins(l) | Head::PairDiff(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Head::SegmentPace { speed, index } => {
                f(&mut speed.weight);
                f(&mut speed.bias);
                f(&mut index.weight);
                f(&mut index.bias);
            }
        }
    }
}

// ── Building blocks ──────────────────────────────────────────────────────

fn layer_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[fnv1a(name.as_bytes())]))
}

#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv3d,
    bn: BatchNorm3d,
    relu: Relu,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    fn new(
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize, usize),
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
        seed: u64,
    ) -> Self {
        let conv_name = format!("{prefix}.conv.weight");
        let mut rng = layer_rng(seed, &conv_name);
        ConvBnRelu {
            conv: Conv3d::new(conv_name, ParamKind::BackboneConv, in_ch, out_ch, 1, kernel, stride, pad, &mut rng),
            bn: BatchNorm3d::new(&format!("{prefix}.bn"), out_ch),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = self.conv.forward(x, train);
        let y = self.bn.forward(&y, train);
        self.relu.forward(&y, train)
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let d = self.relu.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }

    fn visit(&mut self, f: &mut impl FnMut(&mut Param)) {
        f(&mut self.conv.weight);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }

    fn visit_bn(&mut self, f: &mut impl FnMut(&mut BatchNorm3d)) {
        f(&mut self.bn);
    }
}

/// Inception-style block: 1x1x1 branch (C/4), 3x3x3 branch behind a 1x1x1
/// reduce to C/4 (outputs C/2), max-pool + 1x1x1 branch (C/4), concatenated
/// to C channels, then one adapter on the concatenation.
#[derive(Debug, Clone)]
struct InceptionBlock {
    b1: ConvBnRelu,
    b3_reduce: ConvBnRelu,
    b3: ConvBnRelu,
    pool: MaxPool3d,
    bp: ConvBnRelu,
    adapter: Option<Adapter3D>,
    splits: (usize, usize, usize),
}

impl InceptionBlock {
    fn new(prefix: &str, in_ch: usize, out_ch: usize, adapter_cfg: Option<&AdapterConfig>, seed: u64) -> Result<Self> {
        let (c1, c3, cp) = (out_ch / 4, out_ch / 2, out_ch / 4);
        let c3_mid = out_ch / 4;
        let adapter = match adapter_cfg {
            Some(cfg) => {
                let cfg = AdapterConfig { c_in: out_ch, c_out: out_ch, ..*cfg };
                Some(Adapter3D::build(&format!("{prefix}.adapter"), &cfg, seed)?)
            }
            None => None,
        };
        Ok(InceptionBlock {
            b1: ConvBnRelu::new(&format!("{prefix}.b1"), in_ch, c1, (1, 1, 1), (1, 1, 1), (0, 0, 0), seed),
            b3_reduce: ConvBnRelu::new(&format!("{prefix}.b3r"), in_ch, c3_mid, (1, 1, 1), (1, 1, 1), (0, 0, 0), seed),
            b3: ConvBnRelu::new(&format!("{prefix}.b3"), c3_mid, c3, (3, 3, 3), (1, 1, 1), (1, 1, 1), seed),
            pool: MaxPool3d::new((3, 3, 3), (1, 1, 1), (1, 1, 1)),
            bp: ConvBnRelu::new(&format!("{prefix}.bp"), in_ch, cp, (1, 1, 1), (1, 1, 1), (0, 0, 0), seed),
            adapter,
            splits: (c1, c3, cp),
        })
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y1 = self.b1.forward(x, train);
        let y3 = self.b3.forward(&self.b3_reduce.forward(x, train), train);
        let yp = self.bp.forward(&self.pool.forward(x, train), train);
        let cat = concat_channels(&[&y1, &y3, &yp]);
        match (&mut self.adapter, train) {
            (Some(a), true) => a.forward_train(&cat),
            (Some(a), false) => a.apply(&cat),
            (None, _) => Ok(cat),
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let dcat = match &mut self.adapter {
            Some(a) => a.backward(dy),
            None => dy.clone(),
        };
        let parts = split_channels(&dcat, &[self.splits.0, self.splits.1, self.splits.2]);
        let mut dx = self.b1.backward(&parts[0]);
        dx.add_assign(&self.b3_reduce.backward(&self.b3.backward(&parts[1])));
        dx.add_assign(&self.pool.backward(&self.bp.backward(&parts[2])));
        dx
    }

    fn visit(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.b1.visit(f);
        self.b3_reduce.visit(f);
        self.b3.visit(f);
        self.bp.visit(f);
        if let Some(a) = &mut self.adapter {
            a.visit_params(f);
        }
    }

    fn visit_bn(&mut self, f: &mut impl FnMut(&mut BatchNorm3d)) {
        self.b1.visit_bn(f);
        self.b3_reduce.visit_bn(f);
        self.b3.visit_bn(f);
        self.bp.visit_bn(f);
    }
}

/// Residual block: conv-BN-ReLU-conv-BN, adapter between the second BN and
/// the residual add, then add + ReLU. Channel changes go through a 1x1x1
/// projection (with its own BN) on the skip path.
#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: ConvBnRelu,
    conv2: Conv3d,
    bn2: BatchNorm3d,
    adapter: Option<Adapter3D>,
    proj: Option<(Conv3d, BatchNorm3d)>,
    relu_out: Relu,
}

impl ResidualBlock {
    fn new(prefix: &str, in_ch: usize, out_ch: usize, adapter_cfg: Option<&AdapterConfig>, seed: u64) -> Result<Self> {
        let conv2_name = format!("{prefix}.conv2.weight");
        let mut rng2 = layer_rng(seed, &conv2_name);
        let proj = if in_ch != out_ch {
            let proj_name = format!("{prefix}.proj.weight");
            let mut rngp = layer_rng(seed, &proj_name);
            Some((
                Conv3d::new(proj_name, ParamKind::BackboneConv, in_ch, out_ch, 1, (1, 1, 1), (1, 1, 1), (0, 0, 0), &mut rngp),
                BatchNorm3d::new(&format!("{prefix}.proj_bn"), out_ch),
            ))
        } else {
            None
        };
        let adapter = match adapter_cfg {
            Some(cfg) => {
                let cfg = AdapterConfig { c_in: out_ch, c_out: out_ch, ..*cfg };
                Some(Adapter3D::build(&format!("{prefix}.adapter"), &cfg, seed)?)
            }
            None => None,
        };
        Ok(ResidualBlock {
            conv1: ConvBnRelu::new(&format!("{prefix}.conv1"), in_ch, out_ch, (3, 3, 3), (1, 1, 1), (1, 1, 1), seed),
            conv2: Conv3d::new(conv2_name, ParamKind::BackboneConv, out_ch, out_ch, 1, (3, 3, 3), (1, 1, 1), (1, 1, 1), &mut rng2),
            bn2: BatchNorm3d::new(&format!("{prefix}.bn2"), out_ch),
            adapter,
            proj,
            relu_out: Relu::new(),
        })
    }

    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.conv1.forward(x, train);
        let h = self.conv2.forward(&h, train);
        let h = self.bn2.forward(&h, train);
        let mut h = match (&mut self.adapter, train) {
            (Some(a), true) => a.forward_train(&h)?,
            (Some(a), false) => a.apply(&h)?,
            (None, _) => h,
        };
        match &mut self.proj {
            Some((pc, pb)) => {
                let skip = pc.forward(x, train);
                let skip = pb.forward(&skip, train);
                h.add_assign(&skip);
            }
            None => h.add_assign(x),
        }
        Ok(self.relu_out.forward(&h, train))
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        let dsum = self.relu_out.backward(dy);
        let dmain = match &mut self.adapter {
            Some(a) => a.backward(&dsum),
            None => dsum.clone(),
        };
        let dmain = self.bn2.backward(&dmain);
        let dmain = self.conv2.backward(&dmain);
        let mut dx = self.conv1.backward(&dmain);
        match &mut self.proj {
            Some((pc, pb)) => {
                let dskip = pb.backward(&dsum);
                dx.add_assign(&pc.backward(&dskip));
            }
            None => dx.add_assign(&dsum),
        }
        dx
    }

    fn visit(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.conv1.visit(f);
        f(&mut self.conv2.weight);
        f(&mut self.bn2.gamma);
        f(&mut self.bn2.beta);
        if let Some((pc, pb)) = &mut self.proj {
            f(&mut pc.weight);
            f(&mut pb.gamma);
            f(&mut pb.beta);
        }
        if let Some(a) = &mut self.adapter {
            a.visit_params(f);
        }
    }

    fn visit_bn(&mut self, f: &mut impl FnMut(&mut BatchNorm3d)) {
        self.conv1.visit_bn(f);
        f(&mut self.bn2);
        if let Some((_, pb)) = &mut self.proj {
            f(pb);
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Inception(InceptionBlock),
    Residual(ResidualBlock),
}

impl Block {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Block::Inception(b) => b.forward(x, train),
            Block::Residual(b) => b.forward(x, train),
        }
    }

    fn backward(&mut self, dy: &Tensor) -> Tensor {
        match self {
            Block::Inception(b) => b.backward(dy),
            Block::Residual(b) => b.backward(dy),
        }
    }

    fn visit(&mut self, f: &mut impl FnMut(&mut Param)) {
        match self {
            Block::Inception(b) => b.visit(f),
            Block::Residual(b) => b.visit(f),
        }
    }

    fn visit_bn(&mut self, f: &mut impl FnMut(&mut BatchNorm3d)) {
        match self {
            Block::Inception(b) => b.visit_bn(f),
            Block::Residual(b) => b.visit_bn(f),
        }
    }

    fn adapter_mut(&mut self) -> Option<&mut Adapter3D> {
        match self {
            Block::Inception(b) => b.adapter.as_mut(),
            Block::Residual(b) => b.adapter.as_mut(),
        }
    }
}

fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let (n, _, d, h, w) = parts[0].dims5().unwrap();
    let plane = d * h * w;
    let chans: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    let c_total: usize = chans.iter().sum();
    let mut out = Tensor::zeros(&[n, c_total, d, h, w]);
    for ni in 0..n {
        let mut c_off = 0;
        for (p, &pc) in parts.iter().zip(&chans) {
            let src = &p.data()[ni * pc * plane..][..pc * plane];
            let dst = &mut out.data_mut()[(ni * c_total + c_off) * plane..][..pc * plane];
            dst.copy_from_slice(src);
            c_off += pc;
        }
    }
    out
}

fn split_channels(x: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let (n, c, d, h, w) = x.dims5().unwrap();
    debug_assert_eq!(sizes.iter().sum::<usize>(), c);
    let plane = d * h * w;
    let mut out = Vec::with_capacity(sizes.len());
    let mut c_off = 0;
    for &pc in sizes {
        let mut part = Tensor::zeros(&[n, pc, d, h, w]);
        for ni in 0..n {
            let src = &x.data()[(ni * c + c_off) * plane..][..pc * plane];
            part.data_mut()[ni * pc * plane..][..pc * plane].copy_from_slice(src);
        }
        out.push(part);
        c_off += pc;
    }
    out
}

// ── Model ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: BackboneSpec,
    stem: ConvBnRelu,
    /// One optional downsampling pool before each stage except the first,
    /// then that stage's blocks.
    stages: Vec<(Option<MaxPool3d>, Vec<Block>)>,
    gap: GlobalAvgPool,
    pub head: Head,
    last_dhw: (usize, usize, usize),
}

/// One row of the parameter registry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegistryEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub trainable: bool,
}

pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<Model> {
    Model::build(spec, Some(AdapterInit::Random), HeadKind::None, seed)
}

impl Model {
    /// Build a model; `adapters` None omits adapter sites entirely (the bare
    /// backbone used for domain-general pretraining). Weight init depends
    /// only on (seed, layer name), so the backbone comes out identical
    /// whether or not adapters or heads are attached.
    pub fn build(spec: &BackboneSpec, adapters: Option<AdapterInit>, head: HeadKind, seed: u64) -> Result<Model> {
        spec.validate()?;
        let stem = ConvBnRelu::new("stem", INPUT_CHANNELS, spec.stage_channels[0], (3, 3, 3), (1, 2, 2), (1, 1, 1), seed);
        let mut stages = Vec::new();
        let mut in_ch = spec.stage_channels[0];
        for (s, (&out_ch, &blocks)) in spec.stage_channels.iter().zip(&spec.blocks_per_stage).enumerate() {
            let pool = if s > 0 { Some(MaxPool3d::new((2, 2, 2), (2, 2, 2), (0, 0, 0))) } else { None };
            let mut stage_blocks = Vec::new();
            for b in 0..blocks {
                let prefix = format!("s{s}.b{b}");
                let adapter_cfg = adapters.map(|init| AdapterConfig {
                    c_in: out_ch,
                    c_out: out_ch,
                    lambda: spec.adapter_lambda,
                    kernel: 3,
                    init,
                });
                let block = match spec.family {
                    Family::Inception3d => {
                        Block::Inception(InceptionBlock::new(&prefix, in_ch, out_ch, adapter_cfg.as_ref(), seed)?)
                    }
                    Family::Residual3d => {
                        Block::Residual(ResidualBlock::new(&prefix, in_ch, out_ch, adapter_cfg.as_ref(), seed)?)
                    }
                };
                stage_blocks.push(block);
                in_ch = out_ch;
            }
            stages.push((pool, stage_blocks));
        }
        let head = Head::build(head, spec.embed_dim(), seed);
        Ok(Model { spec: spec.clone(), stem, stages, gap: GlobalAvgPool::new(), head, last_dhw: (0, 0, 0) })
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.embed_dim()
    }

    /// Forward to the pooled embedding, shape (N, embed_dim).
    pub fn forward_features(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (_, c, _, _, _) = x.dims5()?;
        if c != INPUT_CHANNELS {
            return Err(Error::shape(format!("backbone expects {INPUT_CHANNELS}-channel input, got {c}")));
        }
        x.ensure_finite("backbone input")?;
        let mut h = self.stem.forward(x, train);
        for (pool, blocks) in &mut self.stages {
            if let Some(p) = pool {
                let (_, _, d, hh, ww) = h.dims5()?;
                if d < 2 || hh < 2 || ww < 2 {
                    return Err(Error::shape(format!(
                        "feature map {:?} too small to downsample; enlarge input_frames/input_size",
                        h.shape()
                    )));
                }
                h = p.forward(&h, train);
            }
            for b in blocks {
                h = b.forward(&h, train)?;
            }
        }
        let (_, _, d, hh, ww) = h.dims5()?;
        self.last_dhw = (d, hh, ww);
        Ok(self.gap.forward(&h, train))
    }

    /// Backpropagate d loss / d features; returns d loss / d input.
    pub fn backward_features(&mut self, dfeat: &Tensor) -> Result<Tensor> {
        let mut dh = self.gap.backward(dfeat, self.last_dhw);
        for (pool, blocks) in self.stages.iter_mut().rev() {
            for b in blocks.iter_mut().rev() {
                dh = b.backward(&dh);
            }
            if let Some(p) = pool {
                dh = p.backward(&dh);
            }
        }
        Ok(self.stem.backward(&dh))
    }

    /// Visit every parameter in registry order (stem, stages, head).
    pub fn visit_params(&mut self, f: &mut impl FnMut(&mut Param)) {
        self.stem.visit(f);
        for (_, blocks) in &mut self.stages {
            for b in blocks {
                b.visit(f);
            }
        }
        self.head.visit(f);
    }

    /// Visit every batch-norm layer (for statistics-mode control and buffers).
    pub fn visit_bns(&mut self, f: &mut impl FnMut(&mut BatchNorm3d)) {
        self.stem.visit_bn(f);
        for (_, blocks) in &mut self.stages {
            for b in blocks {
                b.visit_bn(f);
            }
        }
    }

    pub fn visit_buffers(&mut self, f: &mut impl FnMut(&mut Buffer)) {
        self.visit_bns(&mut |bn| {
            f(&mut bn.running_mean);
            f(&mut bn.running_var);
        });
    }

    pub fn visit_adapters(&mut self, f: &mut impl FnMut(&mut Adapter3D)) {
        for (_, blocks) in &mut self.stages {
            for b in blocks {
                if let Some(a) = b.adapter_mut() {
                    f(a);
                }
            }
        }
    }

    pub fn param_registry(&mut self) -> Vec<RegistryEntry> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| {
            out.push(RegistryEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                kind: p.kind,
                trainable: p.trainable,
            })
        });
        out
    }

    pub fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    pub fn num_adapters(&mut self) -> usize {
        let mut n = 0;
        self.visit_adapters(&mut |_| n += 1);
        n
    }
}

// ── Freeze policies ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    AdaptersOnly,
    BnAffineOnly,
    Full,
    NoneTrainable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub mode: FreezeMode,
    pub heads_trainable: bool,
}

impl FreezePolicy {
    pub fn new(mode: FreezeMode) -> Self {
        FreezePolicy { mode, heads_trainable: true }
    }
}

/// Set per-parameter trainability and batch-norm statistics mode. Frozen
/// backbones also freeze BN running statistics — otherwise the statistics
/// would keep drifting and constitute hidden backbone updates.
pub fn apply_freeze_policy(model: &mut Model, policy: &FreezePolicy) {
    let mode = policy.mode;
    model.visit_params(&mut |p| {
        p.trainable = match p.kind {
            ParamKind::Head => policy.heads_trainable,
            ParamKind::Adapter => matches!(mode, FreezeMode::AdaptersOnly | FreezeMode::Full),
            ParamKind::BnAffine => matches!(mode, FreezeMode::BnAffineOnly | FreezeMode::Full),
            ParamKind::BackboneConv => mode == FreezeMode::Full,
        };
        if !p.trainable {
            p.zero_grad();
        }
    });
    let batch_stats = mode == FreezeMode::Full;
    model.visit_bns(&mut |bn| bn.use_batch_stats = batch_stats);
}

// ── Trainability accounting ──────────────────────────────────────────────

/// Bytes per stored parameter element in checkpoints (f64 little-endian).
pub const CHECKPOINT_BYTES_PER_ELEMENT: u64 = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KindCount {
    pub total: usize,
    pub trainable: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainabilityReport {
    pub per_kind: BTreeMap<String, KindCount>,
    pub total_params: usize,
    pub trainable_params: usize,
    pub trainable_fraction: f64,
    pub checkpoint_bytes_trainable_only: u64,
    pub checkpoint_bytes_full: u64,
}

pub fn trainability_report(model: &mut Model) -> TrainabilityReport {
    let mut per_kind: BTreeMap<String, KindCount> = BTreeMap::new();
    let mut total = 0usize;
    let mut trainable = 0usize;
    model.visit_params(&mut |p| {
        let n = p.value.numel();
        let e = per_kind.entry(p.kind.as_str().to_string()).or_default();
        e.total += n;
        total += n;
        if p.trainable {
            e.trainable += n;
            trainable += n;
        }
    });
    TrainabilityReport {
        per_kind,
        total_params: total,
        trainable_params: trainable,
        trainable_fraction: if total == 0 { 0.0 } else { trainable as f64 / total as f64 },
        checkpoint_bytes_trainable_only: trainable as u64 * CHECKPOINT_BYTES_PER_ELEMENT,
        checkpoint_bytes_full: total as u64 * CHECKPOINT_BYTES_PER_ELEMENT,
    }
}
