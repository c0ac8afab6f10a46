//! Residual speaker embedder.
//!
//! `[N, 1, F, T]` log-mel input → 3x3 stem → four residual stages (strides
//! 1, 2, 2, 2) → frames `[N, C*F', T']` → attentive statistics pooling → linear
//! embedding. Context blocks are inserted inside residual blocks at a
//! configurable position.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::blocks::{ContextKind, GcmBlock, GcmConfig};
use crate::dct::DctBasisSet;
use crate::error::{invalid, shape_err, Result};
use crate::params::{self, ParamStore, Rng64, Scope, StatsStore};
use crate::tensor::{BnMode, Graph, RunningStats, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    AfterBn,
    BeforeBn,
    BeforeConv,
    None,
}

/// Which residual blocks receive a context block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    EveryBlock,
    LastStage,
    LastBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    /// Attention-weighted mean and standard deviation.
    Asp,
    /// Uniformly weighted mean and standard deviation.
    Stats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub n_mels: usize,
    pub channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embedding_dim: usize,
    pub pooling: PoolingKind,
    pub asp_hidden: usize,
    pub insertion: Insertion,
    pub placement: Placement,
    pub gcm: Option<GcmConfig>,
    /// Per-stage block settings; when present it replaces `gcm` stage by stage.
    pub stage_blocks: Option<Vec<Option<GcmConfig>>>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            n_mels: 64,
            channels: vec![8, 16, 32, 64],
            blocks_per_stage: vec![2, 2, 2, 2],
            embedding_dim: 512,
            pooling: PoolingKind::Asp,
            asp_hidden: 128,
            insertion: Insertion::AfterBn,
            placement: Placement::EveryBlock,
            gcm: Some(GcmConfig::default()),
            stage_blocks: None,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl EmbedderConfig {
    /// ResNet34 layout with the full-scale channel widths.
    pub fn resnet34() -> Self {
        Self {
            channels: vec![32, 64, 128, 256],
            blocks_per_stage: vec![3, 4, 6, 3],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.blocks_per_stage.len() {
            return invalid("channels and blocks_per_stage must be non-empty and equally long");
        }
        if self.channels.iter().chain(&self.blocks_per_stage).any(|&v| v == 0) {
            return invalid("stage extents must be positive");
        }
        if self.n_mels == 0 || self.asp_hidden == 0 {
            return invalid("n_mels and asp_hidden must be positive");
        }
        if self.embedding_dim < 2 {
            return invalid("embedding dimension must be at least 2");
        }
        if let Some(sb) = &self.stage_blocks {
            if sb.len() != self.channels.len() {
                return invalid(format!("stage_blocks has {} entries for {} stages", sb.len(), self.channels.len()));
            }
        }
        for (s, &c) in self.channels.iter().enumerate() {
            if let Some(gc) = self.stage_gcm(s) {
                gc.check_channels(c)?;
            }
        }
        let any = (0..self.channels.len()).any(|s| self.stage_gcm(s).is_some());
        if (self.insertion == Insertion::None) == any {
            return invalid("insertion must be `none` exactly when no context block is configured");
        }
        if self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return invalid("bn_eps must be positive and bn_momentum within [0, 1]");
        }
        Ok(())
    }

    /// Block settings for stage `s`.
    pub fn stage_gcm(&self, s: usize) -> Option<&GcmConfig> {
        match &self.stage_blocks {
            Some(sb) => sb.get(s).and_then(Option::as_ref),
            None => self.gcm.as_ref(),
        }
    }

    /// Frequency extent after the strided stages.
    pub fn output_freq(&self) -> usize {
        (1..self.channels.len()).fold(self.n_mels, |f, _| strided(f))
    }
}

/// Output extent of a 3x3, stride-2, pad-1 convolution.
fn strided(len: usize) -> usize {
    (len - 1) / 2 + 1
}

#[derive(Clone, Debug)]
struct Conv {
    name: String,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
}

impl Conv {
    fn numel(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng64) -> Result<()> {
        let fan_in = self.cin * self.k * self.k;
        store.insert(&self.name, params::kaiming_normal(&[self.cout, self.cin, self.k, self.k], fan_in, rng))
    }

    fn forward(&self, scope: &mut Scope<'_>, x: Var) -> Result<Var> {
        let w = scope.p(&self.name)?;
        let pad = self.k / 2;
        scope.g.conv2d(x, w, None, (self.stride, self.stride), (pad, pad))
    }
}

#[derive(Clone, Debug)]
struct Bn {
    name: String,
    c: usize,
    eps: f64,
    momentum: f64,
}

impl Bn {
    fn init(&self, store: &mut ParamStore, stats: &mut StatsStore) -> Result<()> {
        store.insert(format!("{}.gamma", self.name), params::filled(&[self.c], 1.0))?;
        store.insert(format!("{}.beta", self.name), params::filled(&[self.c], 0.0))?;
        stats.insert(&self.name, RunningStats::new(self.c))
    }

    fn forward(&self, scope: &mut Scope<'_>, x: Var) -> Result<Var> {
        let gamma = scope.p(&format!("{}.gamma", self.name))?;
        let beta = scope.p(&format!("{}.beta", self.name))?;
        let running = scope
            .stats
            .get_mut(&self.name)
            .ok_or_else(|| crate::Error::InvalidArgument(format!("missing statistics {}", self.name)))?;
        let mode = if scope.training {
            BnMode::Train { running, momentum: self.momentum }
        } else {
            BnMode::Infer { running }
        };
        scope.g.batch_norm2d(x, gamma, beta, self.eps, mode)
    }
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv,
    bn1: Bn,
    conv2: Conv,
    bn2: Bn,
    shortcut: Option<(Conv, Bn)>,
    gcm: Option<GcmBlock>,
    insertion: Insertion,
}

/// One residual basic block.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub insertion: Insertion,
    pub gcm: Option<GcmConfig>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ResidualBlock {
    pub fn new(prefix: &str, cfg: &ResidualBlockConfig, basis: Option<Arc<DctBasisSet>>) -> Result<Self> {
        let (cin, cout, stride) = (cfg.in_channels, cfg.out_channels, cfg.stride);
        if cin == 0 || cout == 0 || stride == 0 {
            return invalid("residual block extents must be positive");
        }
        if (cfg.insertion == Insertion::None) != cfg.gcm.is_none() {
            return invalid("insertion must be `none` exactly when no context block is configured");
        }
        let conv = |name: &str, cin, cout, k, stride| Conv { name: format!("{prefix}.{name}"), cin, cout, k, stride };
        let bn = |name: &str, c| Bn { name: format!("{prefix}.{name}"), c, eps: cfg.bn_eps, momentum: cfg.bn_momentum };
        let shortcut = (stride != 1 || cin != cout).then(|| (conv("proj", cin, cout, 1, stride), bn("proj_bn", cout)));
        let gcm = match &cfg.gcm {
            None => None,
            Some(gc) => {
                let channels = if cfg.insertion == Insertion::BeforeConv { cin } else { cout };
                Some(GcmBlock::new(gc.clone(), channels, format!("{prefix}.gcm"), basis)?)
            }
        };
        Ok(Self {
            conv1: conv("conv1", cin, cout, 3, stride),
            bn1: bn("bn1", cout),
            conv2: conv("conv2", cout, cout, 3, 1),
            bn2: bn("bn2", cout),
            shortcut,
            gcm,
            insertion: cfg.insertion,
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.conv1.numel() + 2 * self.bn1.c + self.conv2.numel() + 2 * self.bn2.c;
        if let Some((c, b)) = &self.shortcut {
            n += c.numel() + 2 * b.c;
        }
        n + self.gcm_param_count()
    }

    pub fn gcm_param_count(&self) -> usize {
        self.gcm.as_ref().map_or(0, GcmBlock::param_count)
    }

    pub fn init(&self, store: &mut ParamStore, stats: &mut StatsStore, rng: &mut Rng64) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.bn1.init(store, stats)?;
        self.conv2.init(store, rng)?;
        self.bn2.init(store, stats)?;
        if let Some((c, b)) = &self.shortcut {
            c.init(store, rng)?;
            b.init(store, stats)?;
        }
        if let Some(gcm) = &self.gcm {
            gcm.init(store, rng)?;
        }
        Ok(())
    }

    fn apply_gcm(&self, scope: &mut Scope<'_>, x: Var, at: Insertion) -> Result<Var> {
        match &self.gcm {
            Some(gcm) if self.insertion == at => gcm.forward(scope, x),
            _ => Ok(x),
        }
    }

    pub fn forward(&self, scope: &mut Scope<'_>, x: Var) -> Result<Var> {
        let cin = self.conv1.cin;
        if scope.g.shape(x).len() != 4 || scope.g.shape(x)[1] != cin {
            return shape_err("residual_block", format!("expected {cin} channels, got {:?}", scope.g.shape(x)));
        }
        let h = self.apply_gcm(scope, x, Insertion::BeforeConv)?;
        let h = self.conv1.forward(scope, h)?;
        let h = self.bn1.forward(scope, h)?;
        let h = scope.g.relu(h)?;
        let h = self.conv2.forward(scope, h)?;
        let h = self.apply_gcm(scope, h, Insertion::BeforeBn)?;
        let h = self.bn2.forward(scope, h)?;
        let h = self.apply_gcm(scope, h, Insertion::AfterBn)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(scope, x)?;
                bn.forward(scope, s)?
            }
            None => x,
        };
        let y = scope.g.add(h, skip)?;
        scope.g.relu(y)
    }
}

/// Variables for attentive statistics pooling over `[N, C', T']` frames.
pub struct AspParams {
    /// `[hidden, C']`
    pub w: Var,
    /// `[hidden]`
    pub b: Var,
    /// `[hidden]`
    pub v: Var,
    /// `[1]`
    pub k: Var,
}

/// Softmax-over-time frame weights `[N, T']` from a one-hidden-layer scorer.
pub fn asp_weights(g: &mut Graph, frames: Var, p: &AspParams) -> Result<Var> {
    let (n, c, t) = match *g.shape(frames) {
        [n, c, t] => (n, c, t),
        ref s => return shape_err("asp_pool", format!("frames must be [N, C, T], got {s:?}")),
    };
    let hidden = g.shape(p.w)[0];
    if g.shape(p.w) != [hidden, c] {
        return shape_err("asp_pool", format!("attention weight {:?} for {c} features", g.shape(p.w)));
    }
    let rows = g.permute(frames, &[0, 2, 1])?;
    let rows = g.reshape(rows, &[n * t, c])?;
    let wt = g.permute(p.w, &[1, 0])?;
    let h = g.matmul(rows, wt)?;
    let b = g.reshape(p.b, &[1, hidden])?;
    let h = g.add(h, b)?;
    let h = g.tanh(h)?;
    let v = g.reshape(p.v, &[hidden, 1])?;
    let e = g.matmul(h, v)?;
    let k = g.reshape(p.k, &[1, 1])?;
    let e = g.add(e, k)?;
    let e = g.reshape(e, &[n, t])?;
    g.softmax_over(e, &[1])
}

/// Concatenated weighted mean and standard deviation, `[N, 2C']`.
///
/// The variance is floored at `1e-8` before the square root.
pub fn weighted_stats(g: &mut Graph, frames: Var, weights: Var) -> Result<Var> {
    let (n, c, t) = match *g.shape(frames) {
        [n, c, t] => (n, c, t),
        ref s => return shape_err("asp_pool", format!("frames must be [N, C, T], got {s:?}")),
    };
    if g.shape(weights) != [n, t] {
        return shape_err("asp_pool", format!("weights {:?} for {n} x {t} frames", g.shape(weights)));
    }
    let w = g.reshape(weights, &[n, t, 1])?;
    let mu = g.bmm(frames, w)?;
    let centered = g.sub(frames, mu)?;
    let sq = g.square(centered)?;
    let var = g.bmm(sq, w)?;
    let var = g.clamp_min(var, 1e-8)?;
    let sigma = g.sqrt(var)?;
    let out = g.concat(&[mu, sigma], 1)?;
    g.reshape(out, &[n, 2 * c])
}

pub fn asp_pool(g: &mut Graph, frames: Var, p: &AspParams) -> Result<Var> {
    let w = asp_weights(g, frames, p)?;
    weighted_stats(g, frames, w)
}

/// Uniform-weight statistics pooling.
pub fn stats_pool(g: &mut Graph, frames: Var) -> Result<Var> {
    let (n, t) = match *g.shape(frames) {
        [n, _, t] => (n, t),
        ref s => return shape_err("stats_pool", format!("frames must be [N, C, T], got {s:?}")),
    };
    let w = g.constant(params::filled(&[n, t], 1.0 / t as f64));
    weighted_stats(g, frames, w)
}

/// Row-wise L2 normalization. A zero row is an error.
pub fn l2_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let sq = g.square(x)?;
    let ss = g.sum(sq, &[1])?;
    if g.value(ss).data().iter().any(|&v| v == 0.0) {
        return invalid("cannot normalize a zero embedding");
    }
    let norm = g.sqrt(ss)?;
    g.div(x, norm)
}

#[derive(Clone, Debug)]
pub struct Embedder {
    pub cfg: EmbedderConfig,
    stem: Conv,
    stem_bn: Bn,
    blocks: Vec<ResidualBlock>,
    pool_features: usize,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut bases: Vec<([usize; 3], Arc<DctBasisSet>)> = Vec::new();
        let stem = Conv { name: "stem".into(), cin: 1, cout: cfg.channels[0], k: 3, stride: 1 };
        let stem_bn = Bn { name: "stem_bn".into(), c: cfg.channels[0], eps: cfg.bn_eps, momentum: cfg.bn_momentum };
        let stages = cfg.channels.len();
        let mut blocks = Vec::new();
        let mut cin = cfg.channels[0];
        for (s, (&cout, &count)) in cfg.channels.iter().zip(&cfg.blocks_per_stage).enumerate() {
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let wanted = match cfg.placement {
                    Placement::EveryBlock => true,
                    Placement::LastStage => s + 1 == stages,
                    Placement::LastBlock => s + 1 == stages && b + 1 == count,
                };
                let gcm = cfg.stage_gcm(s).cloned().filter(|_| wanted);
                let basis = match &gcm {
                    Some(gc) if gc.context == ContextKind::MultiDct => {
                        let key = [gc.dct_grid[0], gc.dct_grid[1], gc.dct_components];
                        match bases.iter().find(|(k, _)| *k == key) {
                            Some((_, b)) => Some(b.clone()),
                            None => {
                                let b = DctBasisSet::shared(key[0], key[1], key[2])?;
                                bases.push((key, b.clone()));
                                Some(b)
                            }
                        }
                    }
                    _ => None,
                };
                let block = ResidualBlockConfig {
                    in_channels: cin,
                    out_channels: cout,
                    stride,
                    insertion: if gcm.is_some() { cfg.insertion } else { Insertion::None },
                    gcm,
                    bn_eps: cfg.bn_eps,
                    bn_momentum: cfg.bn_momentum,
                };
                blocks.push(ResidualBlock::new(&format!("s{s}.b{b}"), &block, basis)?);
                cin = cout;
            }
        }
        let pool_features = cfg.channels[stages - 1] * cfg.output_freq();
        Ok(Self { cfg, stem, stem_bn, blocks, pool_features })
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.blocks
    }

    /// Frame feature width `C * F'` entering the pooling layer.
    pub fn pool_features(&self) -> usize {
        self.pool_features
    }

    /// Analytic count of learnable scalars.
    pub fn param_count(&self) -> usize {
        let c0 = self.cfg.channels[0];
        let mut n = self.stem.numel() + 2 * c0;
        n += self.blocks.iter().map(ResidualBlock::param_count).sum::<usize>();
        let (cp, h, d) = (self.pool_features, self.cfg.asp_hidden, self.cfg.embedding_dim);
        if self.cfg.pooling == PoolingKind::Asp {
            n += h * cp + 2 * h + 1;
        }
        n + d * 2 * cp + d
    }

    /// Scalars added by context blocks alone.
    pub fn gcm_param_count(&self) -> usize {
        self.blocks.iter().map(ResidualBlock::gcm_param_count).sum()
    }

    pub fn init(&self, rng: &mut Rng64) -> Result<(ParamStore, StatsStore)> {
        let mut store = ParamStore::new();
        let mut stats = StatsStore::default();
        self.stem.init(&mut store, rng)?;
        self.stem_bn.init(&mut store, &mut stats)?;
        for b in &self.blocks {
            b.init(&mut store, &mut stats, rng)?;
        }
        let (cp, h, d) = (self.pool_features, self.cfg.asp_hidden, self.cfg.embedding_dim);
        if self.cfg.pooling == PoolingKind::Asp {
            store.insert("asp.w", params::xavier_uniform(&[h, cp], cp, h, rng))?;
            store.insert("asp.b", params::filled(&[h], 0.0))?;
            store.insert("asp.v", params::xavier_uniform(&[h], h, 1, rng))?;
            store.insert("asp.k", params::filled(&[1], 0.0))?;
        }
        store.insert("embed.w", params::linear_init(&[d, 2 * cp], 2 * cp, rng))?;
        store.insert("embed.b", params::filled(&[d], 0.0))?;
        Ok((store, stats))
    }

    /// Frames `[N, C*F', T']` after the residual trunk.
    pub fn trunk(&self, scope: &mut Scope<'_>, feats: Var) -> Result<Var> {
        match *scope.g.shape(feats) {
            [_, 1, f, _] if f == self.cfg.n_mels => {}
            ref s => {
                return shape_err("embedder", format!("expected [N, 1, {}, T] features, got {s:?}", self.cfg.n_mels))
            }
        }
        let h = self.stem.forward(scope, feats)?;
        let h = self.stem_bn.forward(scope, h)?;
        let mut h = scope.g.relu(h)?;
        for b in &self.blocks {
            h = b.forward(scope, h)?;
        }
        let (n, c, f, t) = match *scope.g.shape(h) {
            [n, c, f, t] => (n, c, f, t),
            _ => unreachable!("residual blocks keep rank 4"),
        };
        scope.g.reshape(h, &[n, c * f, t])
    }

    /// Unnormalized embedding `[N, D]`.
    pub fn forward(&self, scope: &mut Scope<'_>, feats: Var) -> Result<Var> {
        let frames = self.trunk(scope, feats)?;
        let pooled = match self.cfg.pooling {
            PoolingKind::Asp => {
                let p = AspParams {
                    w: scope.p("asp.w")?,
                    b: scope.p("asp.b")?,
                    v: scope.p("asp.v")?,
                    k: scope.p("asp.k")?,
                };
                asp_pool(scope.g, frames, &p)?
            }
            PoolingKind::Stats => stats_pool(scope.g, frames)?,
        };
        let w = scope.p("embed.w")?;
        let b = scope.p("embed.b")?;
        let wt = scope.g.permute(w, &[1, 0])?;
        let e = scope.g.matmul(pooled, wt)?;
        let d = self.cfg.embedding_dim;
        let b = scope.g.reshape(b, &[1, d])?;
        scope.g.add(e, b)
    }

    /// Unit-norm embedding `[N, D]`.
    pub fn embed(&self, scope: &mut Scope<'_>, feats: Var) -> Result<Var> {
        let e = self.forward(scope, feats)?;
        l2_normalize(scope.g, e)
    }
}
