//! Channel recalibration blocks over `[N, C, F, T]` feature maps.
//!
//! A block runs three stages: a context model pools each channel into one
//! value (mean, learned attention, or max over 2D-DCT responses), a channel
//! transform mixes the pooled vector (FC bottleneck or 1D convolution), and the
//! sigmoid of the result rescales every channel. Time-frequency enhancement can
//! then gate each position by its standardized similarity to the context.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dct::DctBasisSet;
use crate::error::{invalid, shape_err, Result};
use crate::params::{self, ParamStore, Rng64, Scope};
use crate::tensor::{Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    /// Global average pooling (squeeze-and-excitation).
    Gap,
    /// Query-independent softmax attention over all time-frequency positions.
    Attention,
    /// Max over the `K` lowest 2D-DCT responses.
    MultiDct,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Fc,
    Eca,
}

/// Hyper-parameters of one context block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GcmConfig {
    pub context: ContextKind,
    pub transform: TransformKind,
    /// FC bottleneck reduction `r`.
    pub reduction: usize,
    /// Attention MLP hidden width is `C / attention_reduction`.
    pub attention_reduction: usize,
    pub dct_components: usize,
    /// Grid `[F, T]` that maps are pooled onto before DCT pooling.
    pub dct_grid: [usize; 2],
    pub eca_gamma: f64,
    pub eca_b: f64,
    pub tfe: bool,
    pub tfe_groups: usize,
    pub tfe_eps: f64,
    /// Initial `(rho, tau)`.
    pub tfe_init: [f64; 2],
    /// One `W_e` shared by every group instead of one per group.
    pub tfe_shared_weight: bool,
}

impl Default for GcmConfig {
    fn default() -> Self {
        Self {
            context: ContextKind::Attention,
            transform: TransformKind::Fc,
            reduction: 16,
            attention_reduction: 1,
            dct_components: 2,
            dct_grid: [8, 25],
            eca_gamma: 2.0,
            eca_b: 1.0,
            tfe: false,
            tfe_groups: 8,
            tfe_eps: 1e-5,
            tfe_init: [0.0, 1.0],
            tfe_shared_weight: false,
        }
    }
}

pub struct AttGcmParams {
    /// `[hidden, C]`
    pub w_alpha: Var,
    /// `[hidden]`
    pub b: Var,
    /// `[hidden]`
    pub u_alpha: Var,
    /// `[1]`
    pub k: Var,
}

pub enum ChannelTransform {
    /// `w1: [C/r, C]`, `w2: [C, C/r]`.
    Fc { w1: Var, w2: Var },
    /// Odd-length kernel `[k]` slid over the channel axis with zero padding.
    Conv1d { kernel: Var },
}

pub struct TfeParams {
    /// `[G, C/G, C/G]`, or `[1, C/G, C/G]` when shared.
    pub w_e: Var,
    /// `[G]`
    pub rho: Var,
    /// `[G]`
    pub tau: Var,
    pub groups: usize,
    pub eps: f64,
}

pub enum ContextParams {
    Gap,
    Attention(AttGcmParams),
    MultiDct(Arc<DctBasisSet>),
}

pub struct GcmBlockParams {
    pub context: ContextParams,
    pub transform: ChannelTransform,
    pub tfe: Option<TfeParams>,
}

fn map_dims(g: &Graph, x: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *g.shape(x) {
        [n, c, f, t] => Ok((n, c, f, t)),
        ref s => shape_err(op, format!("expected a [N, C, F, T] map, got {s:?}")),
    }
}

/// Per-channel mean over the time-frequency grid: `[N,C,F,T] -> [N,C]`.
pub fn se_squeeze(g: &mut Graph, x: Var) -> Result<Var> {
    let (n, c, _, _) = map_dims(g, x, "se_squeeze")?;
    let m = g.mean(x, &[2, 3])?;
    g.reshape(m, &[n, c])
}

/// Softmax attention weights over positions, `[N, F*T]`, shared by all channels.
pub fn att_gcm_weights(g: &mut Graph, x: Var, p: &AttGcmParams) -> Result<Var> {
    let (n, c, f, t) = map_dims(g, x, "att_gcm_context")?;
    let hidden = match *g.shape(p.w_alpha) {
        [h, wc] if wc == c => h,
        ref s => return shape_err("att_gcm_context", format!("W_alpha {s:?} for {c} channels")),
    };
    if g.shape(p.b) != [hidden] || g.shape(p.u_alpha) != [hidden] || g.shape(p.k) != [1] {
        return shape_err("att_gcm_context", "b, u_alpha must be [hidden] and k must be [1]");
    }
    let positions = f * t;
    let x3 = g.reshape(x, &[n, c, positions])?;
    let rows = g.permute(x3, &[0, 2, 1])?;
    let rows = g.reshape(rows, &[n * positions, c])?;
    let wt = g.permute(p.w_alpha, &[1, 0])?;
    let h = g.matmul(rows, wt)?;
    let b = g.reshape(p.b, &[1, hidden])?;
    let h = g.add(h, b)?;
    let h = g.tanh(h)?;
    let u = g.reshape(p.u_alpha, &[hidden, 1])?;
    let e = g.matmul(h, u)?;
    let k = g.reshape(p.k, &[1, 1])?;
    let e = g.add(e, k)?;
    let e = g.reshape(e, &[n, positions])?;
    g.softmax_over(e, &[1])
}

/// `g_c = sum_{f,t} alpha_{f,t} X_c(f,t)`: `[N,C,F,T] -> [N,C]`.
pub fn att_gcm_context(g: &mut Graph, x: Var, p: &AttGcmParams) -> Result<Var> {
    let (n, c, f, t) = map_dims(g, x, "att_gcm_context")?;
    let alpha = att_gcm_weights(g, x, p)?;
    let x3 = g.reshape(x, &[n, c, f * t])?;
    let a3 = g.reshape(alpha, &[n, f * t, 1])?;
    let ctx = g.bmm(x3, a3)?;
    g.reshape(ctx, &[n, c])
}

/// Per-channel max over DCT responses: `[N,C,F,T] -> [N,C]`.
///
/// Maps whose grid differs from the basis grid are first adaptively
/// average-pooled onto it.
pub fn multi_dct_context(g: &mut Graph, x: Var, bases: &DctBasisSet) -> Result<Var> {
    let (n, c, f, t) = map_dims(g, x, "multi_dct_context")?;
    if bases.is_empty() {
        return invalid("multi_dct_context: empty basis set");
    }
    let (bf, bt) = (bases.f_len, bases.t_len);
    let x = if (f, t) != (bf, bt) { g.adaptive_avg_pool2d(x, bf, bt)? } else { x };
    let rows = g.reshape(x, &[n * c, bf * bt])?;
    let basis = g.constant(bases.as_matrix());
    let phi = g.matmul(rows, basis)?;
    let best = g.max(phi, &[1])?;
    g.reshape(best, &[n, c])
}

/// Nearest odd integer to `log2(C)/gamma + b/gamma`; exact ties go to the smaller odd value.
pub fn eca_kernel_size(channels: usize, gamma: f64, b: f64) -> Result<usize> {
    if channels < 2 {
        return invalid(format!("ECA kernel size needs at least 2 channels, got {channels}"));
    }
    if gamma <= 0.0 {
        return invalid("ECA gamma must be positive");
    }
    let raw = (channels as f64).log2() / gamma + b / gamma;
    if raw <= 1.0 {
        return Ok(1);
    }
    let lo = (((raw - 1.0) / 2.0).floor() as usize) * 2 + 1;
    let hi = lo + 2;
    Ok(if (hi as f64 - raw) < (raw - lo as f64) { hi } else { lo })
}

/// Channel interaction. Returns `(logits, gate)` where `gate = sigmoid(logits)`.
pub fn channel_excite(g: &mut Graph, ctx: Var, transform: &ChannelTransform) -> Result<(Var, Var)> {
    let (n, c) = match *g.shape(ctx) {
        [n, c] => (n, c),
        ref s => return shape_err("channel_excite", format!("context must be [N, C], got {s:?}")),
    };
    let logits = match transform {
        ChannelTransform::Fc { w1, w2 } => {
            let (s1, s2) = (g.shape(*w1).to_vec(), g.shape(*w2).to_vec());
            if s1.len() != 2 || s1[1] != c || s2 != [c, s1[0]] {
                return shape_err("channel_excite", format!("W1 {s1:?} / W2 {s2:?} for {c} channels"));
            }
            let w1t = g.permute(*w1, &[1, 0])?;
            let h = g.matmul(ctx, w1t)?;
            let h = g.relu(h)?;
            let w2t = g.permute(*w2, &[1, 0])?;
            g.matmul(h, w2t)?
        }
        ChannelTransform::Conv1d { kernel } => {
            let k = match *g.shape(*kernel) {
                [k] if k % 2 == 1 => k,
                ref s => return shape_err("channel_excite", format!("kernel must be [odd], got {s:?}")),
            };
            let x = g.reshape(ctx, &[n, 1, c, 1])?;
            let w = g.reshape(*kernel, &[1, 1, k, 1])?;
            let y = g.conv2d(x, w, None, (1, 1), ((k - 1) / 2, 0))?;
            g.reshape(y, &[n, c])?
        }
    };
    let gate = g.sigmoid(logits)?;
    Ok((logits, gate))
}

/// `X̂_c = s_c * X_c`.
pub fn channel_scale(g: &mut Graph, x: Var, s: Var) -> Result<Var> {
    let (n, c, _, _) = map_dims(g, x, "channel_scale")?;
    if g.shape(s) != [n, c] {
        return shape_err("channel_scale", format!("scale {:?} for map with N={n}, C={c}", g.shape(s)));
    }
    let s = g.reshape(s, &[n, c, 1, 1])?;
    g.mul(x, s)
}

/// Standardized similarity `ê` between each position and the group context: `[N, G, F*T]`.
pub fn tfe_scores(g: &mut Graph, x: Var, ctx: Var, p: &TfeParams) -> Result<Var> {
    let (n, c, f, t) = map_dims(g, x, "tfe_enhance")?;
    let groups = p.groups;
    if groups == 0 || c % groups != 0 {
        return invalid(format!("tfe_enhance: {groups} groups do not divide {c} channels"));
    }
    if p.eps <= 0.0 {
        return invalid("tfe_enhance: eps must be positive");
    }
    if g.shape(ctx) != [n, c] {
        return shape_err("tfe_enhance", format!("context {:?} for N={n}, C={c}", g.shape(ctx)));
    }
    let d = c / groups;
    let positions = f * t;
    let shared = match *g.shape(p.w_e) {
        [1, a, b] if a == d && b == d && groups > 1 => true,
        [gg, a, b] if gg == groups && a == d && b == d => false,
        ref s => return shape_err("tfe_enhance", format!("W_e {s:?} for {groups} groups of {d}")),
    };
    if g.shape(p.rho) != [groups] || g.shape(p.tau) != [groups] {
        return shape_err("tfe_enhance", "rho and tau must be [groups]");
    }

    // group-wise L2 normalization of the context
    let gc = g.reshape(ctx, &[n * groups, d])?;
    let sq = g.square(gc)?;
    let ss = g.sum(sq, &[1])?;
    let ss = g.clamp_min(ss, 1e-24)?;
    let norm = g.sqrt(ss)?;
    let ghat = g.div(gc, norm)?;

    // v = ĝᵀ W_e per group
    let v = if shared {
        let w = g.reshape(p.w_e, &[d, d])?;
        g.matmul(ghat, w)?
    } else {
        let gh = g.reshape(ghat, &[n, groups, d])?;
        let gh = g.permute(gh, &[1, 0, 2])?;
        let v = g.bmm(gh, p.w_e)?;
        let v = g.permute(v, &[1, 0, 2])?;
        g.reshape(v, &[n * groups, d])?
    };
    let v = g.reshape(v, &[n * groups, 1, d])?;
    let xg = g.reshape(x, &[n * groups, d, positions])?;
    let e = g.bmm(v, xg)?;
    let e = g.reshape(e, &[n, groups, positions])?;

    let mu = g.mean(e, &[2])?;
    let centered = g.sub(e, mu)?;
    let sq = g.square(centered)?;
    let var = g.mean(sq, &[2])?;
    let var = g.clamp_min(var, 1e-20)?;
    let sigma = g.sqrt(var)?;
    let denom = g.shift(sigma, p.eps)?;
    g.div(centered, denom)
}

/// Gates every position of each group by `sigmoid(rho * ê + tau)`.
pub fn tfe_enhance(g: &mut Graph, x: Var, ctx: Var, p: &TfeParams) -> Result<Var> {
    let (n, c, f, t) = map_dims(g, x, "tfe_enhance")?;
    let ehat = tfe_scores(g, x, ctx, p)?;
    let groups = p.groups;
    let rho = g.reshape(p.rho, &[1, groups, 1])?;
    let tau = g.reshape(p.tau, &[1, groups, 1])?;
    let s = g.mul(ehat, rho)?;
    let s = g.add(s, tau)?;
    let gate = g.sigmoid(s)?;
    let gate = g.reshape(gate, &[n, groups, 1, f * t])?;
    let xg = g.reshape(x, &[n, groups, c / groups, f * t])?;
    let y = g.mul(xg, gate)?;
    g.reshape(y, &[n, c, f, t])
}

/// Context, channel excitation, channel scaling, then optional TFE.
///
/// TFE is fed the transformed context before the sigmoid gate.
pub fn gcm_block_forward(g: &mut Graph, x: Var, p: &GcmBlockParams) -> Result<Var> {
    let ctx = match &p.context {
        ContextParams::Gap => se_squeeze(g, x)?,
        ContextParams::Attention(a) => att_gcm_context(g, x, a)?,
        ContextParams::MultiDct(b) => multi_dct_context(g, x, b)?,
    };
    let (logits, gate) = channel_excite(g, ctx, &p.transform)?;
    let y = channel_scale(g, x, gate)?;
    match &p.tfe {
        Some(tfe) => tfe_enhance(g, y, logits, tfe),
        None => Ok(y),
    }
}

impl GcmConfig {
    /// Checks the settings that depend on the channel count `c`.
    pub fn check_channels(&self, c: usize) -> Result<()> {
        if c == 0 {
            return invalid("context block needs at least one channel");
        }
        if self.reduction == 0 || self.attention_reduction == 0 {
            return invalid("reduction ratios must be positive");
        }
        if self.transform == TransformKind::Eca {
            eca_kernel_size(c, self.eca_gamma, self.eca_b)?;
        }
        if self.tfe && (self.tfe_groups == 0 || c % self.tfe_groups != 0) {
            return invalid(format!("{} TFE groups do not divide {c} channels", self.tfe_groups));
        }
        Ok(())
    }
}

/// A configured block bound to a channel count and a parameter-name prefix.
#[derive(Clone, Debug)]
pub struct GcmBlock {
    pub cfg: GcmConfig,
    pub channels: usize,
    pub prefix: String,
    basis: Option<Arc<DctBasisSet>>,
}

impl GcmBlock {
    pub fn new(cfg: GcmConfig, channels: usize, prefix: impl Into<String>, basis: Option<Arc<DctBasisSet>>) -> Result<Self> {
        let block = Self { cfg, channels, prefix: prefix.into(), basis };
        block.validate()?;
        Ok(block)
    }

    fn validate(&self) -> Result<()> {
        self.cfg.check_channels(self.channels)?;
        if self.cfg.context == ContextKind::MultiDct {
            match &self.basis {
                Some(b) if b.len() == self.cfg.dct_components && [b.f_len, b.t_len] == self.cfg.dct_grid => {}
                _ => return invalid("multi-DCT block needs a basis set matching dct_components and dct_grid"),
            }
        }
        Ok(())
    }

    pub fn attention_hidden(&self) -> usize {
        (self.channels / self.cfg.attention_reduction).max(1)
    }

    pub fn bottleneck(&self) -> usize {
        (self.channels / self.cfg.reduction).max(1)
    }

    pub fn eca_kernel(&self) -> usize {
        eca_kernel_size(self.channels, self.cfg.eca_gamma, self.cfg.eca_b).unwrap_or(1)
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.prefix)
    }

    /// Learnable scalars, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let context = match self.cfg.context {
            ContextKind::Attention => self.attention_hidden() * (c + 2) + 1,
            ContextKind::Gap | ContextKind::MultiDct => 0,
        };
        let transform = match self.cfg.transform {
            TransformKind::Fc => 2 * self.bottleneck() * c,
            TransformKind::Eca => self.eca_kernel(),
        };
        let tfe = if self.cfg.tfe {
            let groups = self.cfg.tfe_groups;
            let d = c / groups;
            let mats = if self.cfg.tfe_shared_weight && groups > 1 { 1 } else { groups };
            mats * d * d + 2 * groups
        } else {
            0
        };
        context + transform + tfe
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng64) -> Result<()> {
        let c = self.channels;
        if self.cfg.context == ContextKind::Attention {
            let h = self.attention_hidden();
            store.insert(self.name("att.w_alpha"), params::xavier_uniform(&[h, c], c, h, rng))?;
            store.insert(self.name("att.b"), params::filled(&[h], 0.0))?;
            store.insert(self.name("att.u_alpha"), params::xavier_uniform(&[h], h, 1, rng))?;
            store.insert(self.name("att.k"), params::filled(&[1], 0.0))?;
        }
        match self.cfg.transform {
            TransformKind::Fc => {
                let b = self.bottleneck();
                store.insert(self.name("fc.w1"), params::linear_init(&[b, c], c, rng))?;
                store.insert(self.name("fc.w2"), params::linear_init(&[c, b], b, rng))?;
            }
            TransformKind::Eca => {
                let k = self.eca_kernel();
                store.insert(self.name("eca.kernel"), params::linear_init(&[k], k, rng))?;
            }
        }
        if self.cfg.tfe {
            let groups = self.cfg.tfe_groups;
            let d = c / groups;
            let mats = if self.cfg.tfe_shared_weight && groups > 1 { 1 } else { groups };
            store.insert(self.name("tfe.w_e"), params::linear_init(&[mats, d, d], d, rng))?;
            store.insert(self.name("tfe.rho"), params::filled(&[groups], self.cfg.tfe_init[0]))?;
            store.insert(self.name("tfe.tau"), params::filled(&[groups], self.cfg.tfe_init[1]))?;
        }
        Ok(())
    }

    pub fn bind(&self, scope: &Scope<'_>) -> Result<GcmBlockParams> {
        let context = match self.cfg.context {
            ContextKind::Gap => ContextParams::Gap,
            ContextKind::Attention => ContextParams::Attention(AttGcmParams {
                w_alpha: scope.p(&self.name("att.w_alpha"))?,
                b: scope.p(&self.name("att.b"))?,
                u_alpha: scope.p(&self.name("att.u_alpha"))?,
                k: scope.p(&self.name("att.k"))?,
            }),
            ContextKind::MultiDct => ContextParams::MultiDct(self.basis.clone().expect("validated")),
        };
        let transform = match self.cfg.transform {
            TransformKind::Fc => ChannelTransform::Fc {
                w1: scope.p(&self.name("fc.w1"))?,
                w2: scope.p(&self.name("fc.w2"))?,
            },
            TransformKind::Eca => ChannelTransform::Conv1d { kernel: scope.p(&self.name("eca.kernel"))? },
        };
        let tfe = if self.cfg.tfe {
            Some(TfeParams {
                w_e: scope.p(&self.name("tfe.w_e"))?,
                rho: scope.p(&self.name("tfe.rho"))?,
                tau: scope.p(&self.name("tfe.tau"))?,
                groups: self.cfg.tfe_groups,
                eps: self.cfg.tfe_eps,
            })
        } else {
            None
        };
        Ok(GcmBlockParams { context, transform, tfe })
    }

    pub fn forward(&self, scope: &mut Scope<'_>, x: Var) -> Result<Var> {
        let p = self.bind(scope)?;
        gcm_block_forward(scope.g, x, &p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dct::build_basis_set;
    use crate::params::{seeded, uniform};
    use crate::tensor::{finite_diff_check, sigmoid, Tensor, DEFAULT_STEP};

    fn random_map(shape: &[usize], seed: u64) -> Tensor {
        uniform(shape, 1.0, &mut seeded(seed))
    }

    #[test]
    fn squeeze_is_channel_mean() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 7.0, 7.0, 7.0, 7.0]).unwrap());
        let s = se_squeeze(&mut g, x).unwrap();
        assert_eq!(g.value(s).data(), &[2.5, 7.0]);
    }

    #[test]
    fn eca_kernel_examples() {
        assert_eq!(eca_kernel_size(256, 2.0, 1.0).unwrap(), 5);
        assert_eq!(eca_kernel_size(64, 2.0, 1.0).unwrap(), 3);
        assert_eq!(eca_kernel_size(128, 2.0, 1.0).unwrap(), 3);
        assert_eq!(eca_kernel_size(2, 2.0, 1.0).unwrap(), 1);
        assert!(eca_kernel_size(1, 2.0, 1.0).is_err());
    }

    #[test]
    fn zero_fc_weights_give_half_gate() {
        let mut g = Graph::new();
        let ctx = g.constant(random_map(&[2, 8], 1).reshape(vec![2, 8]).unwrap());
        let w1 = g.constant(Tensor::zeros(vec![2, 8]).unwrap());
        let w2 = g.constant(Tensor::zeros(vec![8, 2]).unwrap());
        let (_, s) = channel_excite(&mut g, ctx, &ChannelTransform::Fc { w1, w2 }).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn impulse_kernel_gives_sigmoid_of_context() {
        let mut g = Graph::new();
        let ctx_t = random_map(&[2, 6], 2).reshape(vec![2, 6]).unwrap();
        let ctx = g.constant(ctx_t.clone());
        let kernel = g.constant(Tensor::new(vec![5], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let (_, s) = channel_excite(&mut g, ctx, &ChannelTransform::Conv1d { kernel }).unwrap();
        for (&v, &c) in g.value(s).data().iter().zip(ctx_t.data()) {
            assert!((v - sigmoid(c)).abs() < 1e-15);
        }
        let even = g.constant(Tensor::zeros(vec![4]).unwrap());
        assert!(channel_excite(&mut g, ctx, &ChannelTransform::Conv1d { kernel: even }).is_err());
    }

    #[test]
    fn conv1d_transform_matches_zero_padded_loop() {
        let (n, c, k) = (2, 7, 3);
        let ctx_t = random_map(&[n, c], 3).reshape(vec![n, c]).unwrap();
        let ker = [0.3, -0.7, 1.1];
        let mut g = Graph::new();
        let ctx = g.constant(ctx_t.clone());
        let kernel = g.constant(Tensor::new(vec![k], ker.to_vec()).unwrap());
        let (logits, _) = channel_excite(&mut g, ctx, &ChannelTransform::Conv1d { kernel }).unwrap();
        for s in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                for (tap, w) in ker.iter().enumerate() {
                    let src = ch as isize + tap as isize - 1;
                    if (0..c as isize).contains(&src) {
                        acc += w * ctx_t.at(&[s, src as usize]);
                    }
                }
                assert!((g.value(logits).at(&[s, ch]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_scale_cases() {
        let mut g = Graph::new();
        let xt = random_map(&[1, 3, 2, 2], 4);
        let x = g.constant(xt.clone());
        let ones = g.constant(Tensor::ones(vec![1, 3]).unwrap());
        let zeros = g.constant(Tensor::zeros(vec![1, 3]).unwrap());
        let y = channel_scale(&mut g, x, ones).unwrap();
        assert_eq!(g.value(y), &xt);
        let z = channel_scale(&mut g, x, zeros).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::ones(vec![1, 2]).unwrap());
        assert!(channel_scale(&mut g, x, bad).is_err());
    }

    #[test]
    fn tfe_rejects_bad_groups() {
        let mut g = Graph::new();
        let x = g.constant(random_map(&[1, 6, 2, 2], 5));
        let ctx = g.constant(Tensor::ones(vec![1, 6]).unwrap());
        let p = TfeParams {
            w_e: g.constant(Tensor::ones(vec![4, 1, 1]).unwrap()),
            rho: g.constant(Tensor::zeros(vec![4]).unwrap()),
            tau: g.constant(Tensor::ones(vec![4]).unwrap()),
            groups: 4,
            eps: 1e-5,
        };
        assert!(tfe_enhance(&mut g, x, ctx, &p).is_err());
    }

    #[test]
    fn empty_basis_is_rejected_by_block() {
        let cfg = GcmConfig { context: ContextKind::MultiDct, ..GcmConfig::default() };
        assert!(GcmBlock::new(cfg, 8, "b", None).is_err());
    }

    #[test]
    fn block_params_pass_gradient_check() {
        let variants = [
            (ContextKind::Gap, TransformKind::Fc, false),
            (ContextKind::Attention, TransformKind::Fc, false),
            (ContextKind::Attention, TransformKind::Eca, true),
            (ContextKind::MultiDct, TransformKind::Fc, true),
        ];
        for (context, transform, tfe) in variants {
            let cfg = GcmConfig {
                context,
                transform,
                tfe,
                reduction: 2,
                tfe_groups: 2,
                tfe_init: [0.7, 0.2],
                dct_grid: [3, 4],
                dct_components: 3,
                ..GcmConfig::default()
            };
            let basis = Some(Arc::new(build_basis_set(3, 4, 3).unwrap()));
            let block = GcmBlock::new(cfg, 4, "blk", basis).unwrap();
            let mut store = ParamStore::new();
            block.init(&mut store, &mut seeded(9)).unwrap();
            let xt = random_map(&[2, 4, 3, 4], 10);
            let weights = random_map(&[2, 4, 3, 4], 11);
            for name in store.names().map(str::to_string).collect::<Vec<_>>() {
                let p0 = store.get(&name).unwrap().clone();
                let err = finite_diff_check(
                    |g, probe| {
                        let mut b = crate::params::Bindings::bind(g, &store, false);
                        b.rebind(&name, probe)?;
                        let mut stats = crate::params::StatsStore::default();
                        let mut scope = Scope { g, params: &b, stats: &mut stats, training: true };
                        let x = scope.g.constant(xt.clone());
                        let y = block.forward(&mut scope, x)?;
                        let w = g.constant(weights.clone());
                        let y = g.mul(y, w)?;
                        g.sum_all(y)
                    },
                    &p0,
                    DEFAULT_STEP,
                )
                .unwrap();
                assert!(err < 1e-4, "{context:?}/{transform:?}/tfe={tfe} {name}: {err}");
            }
        }
    }
}
