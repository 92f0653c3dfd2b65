//! Building blocks of the TDNN speaker encoders.
//!
//! Every block takes a batch of `T × C` items. Items are independent except
//! through train-mode batch normalization, which pools statistics over all
//! frames of all items.

use ndarray::Axis;

use crate::autograd::{Mat, Var};
use crate::error::{Error, Result};
use crate::nn::Ctx;

/// Variance floor inside the pooled standard deviation.
pub const POOL_EPS: f64 = 1e-12;

/// One convolution layer's geometry: `kernel` is the temporal width and
/// `dilation` the tap spacing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl ConvBlockSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Result<Self> {
        let spec = Self { in_channels, out_channels, kernel, dilation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel {} must be odd", self.kernel)));
        }
        if self.dilation == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("dilation and channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Attention and statistics used to summarize frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolingMode {
    /// Per-channel attention conditioned on the frame and on global
    /// mean/std context; outputs weighted mean ‖ weighted std.
    #[default]
    ChannelContext,
    /// One attention weight per frame shared by all channels.
    Shared,
    /// Unweighted time average of the frames (no std).
    FrameAverage,
}

impl std::fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolingMode::ChannelContext => "channel_context",
            PoolingMode::Shared => "shared",
            PoolingMode::FrameAverage => "frame_average",
        })
    }
}

impl std::str::FromStr for PoolingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_context" => Ok(PoolingMode::ChannelContext),
            "shared" => Ok(PoolingMode::Shared),
            "frame_average" => Ok(PoolingMode::FrameAverage),
            other => Err(Error::Config(format!("unknown pooling mode `{other}`"))),
        }
    }
}

impl PoolingMode {
    /// Width of the pooled vector for `channels` input channels.
    pub fn output_width(&self, channels: usize) -> usize {
        match self {
            PoolingMode::FrameAverage => channels,
            _ => 2 * channels,
        }
    }
}

/// Squeeze-and-excitation: rescale each channel by
/// `sigmoid(W2 · relu(W1 · mean_t(x) + b1) + b2)`.
pub fn se_block(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let mean = ctx.g.mean_axis(x, Axis(0));
    let h = ctx.linear(mean, &format!("{prefix}.fc1"))?;
    let h = ctx.g.relu(h);
    let s = ctx.linear(h, &format!("{prefix}.fc2"))?;
    if ctx.g.shape(s).1 != ctx.g.shape(x).1 {
        return Err(Error::Model(format!("{prefix}: excitation width does not match input channels")));
    }
    let s = ctx.g.sigmoid(s);
    Ok(ctx.g.mul(x, s))
}

/// Convolution → ReLU → batch norm.
pub fn tdnn_block(ctx: &mut Ctx, xs: &[Var], prefix: &str, dilation: usize) -> Result<Vec<Var>> {
    let mut acts = Vec::with_capacity(xs.len());
    for &x in xs {
        let y = ctx.conv(x, &format!("{prefix}.conv"), dilation)?;
        acts.push(ctx.g.relu(y));
    }
    ctx.batch_norm(&acts, &format!("{prefix}.bn"))
}

/// SE-Res2Block: 1×1 TDNN → Res2 dilated convolution (hierarchical group
/// residuals) → ReLU+BN → 1×1 TDNN → SE, plus the identity skip.
///
/// The Res2 stage splits the channels into `scale` groups `x_1..x_s` and
/// computes `y_1 = K_1(x_1)`, `y_i = K_i(x_i + y_{i−1})`; with `scale = 1`
/// it is a single dilated convolution.
pub fn se_res2_block(ctx: &mut Ctx, xs: &[Var], prefix: &str, spec: &ConvBlockSpec, scale: usize) -> Result<Vec<Var>> {
    spec.validate()?;
    if scale == 0 || !spec.out_channels.is_multiple_of(scale) {
        return Err(Error::Config(format!(
            "{prefix}: {} channels not divisible by res2 scale {scale}",
            spec.out_channels
        )));
    }
    if spec.in_channels != spec.out_channels {
        return Err(Error::Config(format!("{prefix}: identity skip needs in_channels == out_channels")));
    }
    for &x in xs {
        if ctx.g.shape(x).1 != spec.in_channels {
            return Err(Error::Model(format!(
                "{prefix}: input has {} channels, expected {}",
                ctx.g.shape(x).1,
                spec.in_channels
            )));
        }
    }
    let width = spec.out_channels / scale;
    let a = tdnn_block(ctx, xs, &format!("{prefix}.conv1"), 1)?;
    let mut pre = Vec::with_capacity(xs.len());
    for &item in &a {
        let mut ys: Vec<Var> = Vec::with_capacity(scale);
        for g in 0..scale {
            let part = ctx.g.slice_cols(item, g * width, (g + 1) * width);
            let input = match ys.last() {
                Some(&prev) => ctx.g.add(part, prev),
                None => part,
            };
            ys.push(ctx.conv(input, &format!("{prefix}.res2.{g}"), spec.dilation)?);
        }
        let cat = if scale == 1 { ys[0] } else { ctx.g.concat_cols(&ys) };
        pre.push(ctx.g.relu(cat));
    }
    let b = ctx.batch_norm(&pre, &format!("{prefix}.res2_bn"))?;
    let c = tdnn_block(ctx, &b, &format!("{prefix}.conv2"), 1)?;
    let mut out = Vec::with_capacity(xs.len());
    for (&ci, &x) in c.iter().zip(xs) {
        let s = se_block(ctx, ci, &format!("{prefix}.se"))?;
        out.push(ctx.g.add(s, x));
    }
    Ok(out)
}

/// Pooling result for one item.
pub struct Pooled {
    /// `1 × 2C` (attentive) or `1 × C` (frame average).
    pub vector: Var,
    /// Attention weights over frames: `T × C` (channel-context), `T × 1`
    /// (shared) or absent (frame average).
    pub weights: Option<Var>,
}

fn validate_pool_inputs(ctx: &Ctx, hs: &[Var], masks: Option<&[Vec<bool>]>) -> Result<()> {
    for (i, &h) in hs.iter().enumerate() {
        let t = ctx.g.shape(h).0;
        if t == 0 {
            return Err(Error::Input("pooling over zero frames".into()));
        }
        if let Some(m) = masks {
            let m = m.get(i).ok_or_else(|| Error::Input("one mask per item required".into()))?;
            if m.len() != t {
                return Err(Error::Input(format!("mask length {} != {t} frames", m.len())));
            }
            if !m.iter().any(|&v| v) {
                return Err(Error::Input("every frame of an item is masked".into()));
            }
        }
    }
    Ok(())
}

fn uniform_weights(t: usize, mask: Option<&Vec<bool>>) -> Mat {
    let valid = mask.map_or(t, |m| m.iter().filter(|&&v| v).count()) as f64;
    Mat::from_shape_fn((t, 1), |(i, _)| match mask {
        Some(m) if !m[i] => 0.0,
        _ => 1.0 / valid,
    })
}

fn mask_bias(t: usize, mask: &[bool]) -> Mat {
    Mat::from_shape_fn((t, 1), |(i, _)| if mask[i] { 0.0 } else { f64::NEG_INFINITY })
}

/// Weighted mean and std: `μ = Σ α h`, `σ = sqrt(Σ α (h − μ)² + eps)`.
///
/// The centered form equals `Σ α h² − μ²` but does not cancel, so a channel
/// that is constant over time gets an exact zero variance.
fn weighted_stats(ctx: &mut Ctx, h: Var, weights: Var) -> (Var, Var) {
    let wh = ctx.g.mul(h, weights);
    let mean = ctx.g.sum_axis(wh, Axis(0));
    let centered = ctx.g.sub(h, mean);
    let sq = ctx.g.square(centered);
    let wsq = ctx.g.mul(sq, weights);
    let var = ctx.g.sum_axis(wsq, Axis(0));
    let var = ctx.g.add_scalar(var, POOL_EPS);
    let std = ctx.g.sqrt(var);
    (mean, std)
}

/// Unweighted mean over (unmasked) frames.
pub fn frame_average_pool(ctx: &mut Ctx, h: Var, mask: Option<&Vec<bool>>) -> Result<Var> {
    let t = ctx.g.shape(h).0;
    if t == 0 {
        return Err(Error::Input("pooling over zero frames".into()));
    }
    if let Some(m) = mask {
        validate_pool_inputs(ctx, &[h], Some(std::slice::from_ref(m)))?;
    }
    let w = ctx.constant(uniform_weights(t, mask));
    let wh = ctx.g.mul(h, w);
    Ok(ctx.g.sum_axis(wh, Axis(0)))
}

/// Attentive statistics pooling over a batch.
///
/// Masked frames (`false`) receive `−∞` attention logits and are excluded
/// from the global context statistics.
pub fn attentive_stats_pool(
    ctx: &mut Ctx,
    hs: &[Var],
    masks: Option<&[Vec<bool>]>,
    prefix: &str,
    mode: PoolingMode,
) -> Result<Vec<Pooled>> {
    validate_pool_inputs(ctx, hs, masks)?;
    let mask_of = |i: usize| masks.map(|m| &m[i]);
    match mode {
        PoolingMode::FrameAverage => hs
            .iter()
            .enumerate()
            .map(|(i, &h)| Ok(Pooled { vector: frame_average_pool(ctx, h, mask_of(i))?, weights: None }))
            .collect(),
        PoolingMode::Shared => {
            let mut out = Vec::with_capacity(hs.len());
            for (i, &h) in hs.iter().enumerate() {
                let t = ctx.g.shape(h).0;
                let a = ctx.conv(h, &format!("{prefix}.attn1"), 1)?;
                let a = ctx.g.tanh(a);
                let mut logits = ctx.conv(a, &format!("{prefix}.attn2"), 1)?;
                if ctx.g.shape(logits).1 != 1 {
                    return Err(Error::Model(format!("{prefix}: shared attention must emit one score per frame")));
                }
                if let Some(m) = mask_of(i) {
                    let bias = ctx.constant(mask_bias(t, m));
                    logits = ctx.g.add(logits, bias);
                }
                let alpha = ctx.g.softmax(logits, Axis(0));
                let (mean, std) = weighted_stats(ctx, h, alpha);
                let vector = ctx.g.concat_cols(&[mean, std]);
                out.push(Pooled { vector, weights: Some(alpha) });
            }
            Ok(out)
        }
        PoolingMode::ChannelContext => {
            let mut hidden = Vec::with_capacity(hs.len());
            for (i, &h) in hs.iter().enumerate() {
                let t = ctx.g.shape(h).0;
                let u = ctx.constant(uniform_weights(t, mask_of(i)));
                let (gmean, gstd) = weighted_stats(ctx, h, u);
                let ones = ctx.constant(Mat::ones((t, 1)));
                let gm = ctx.g.matmul(ones, gmean);
                let gs = ctx.g.matmul(ones, gstd);
                let joined = ctx.g.concat_cols(&[h, gm, gs]);
                let a = ctx.conv(joined, &format!("{prefix}.attn1"), 1)?;
                hidden.push(ctx.g.relu(a));
            }
            let normed = ctx.batch_norm(&hidden, &format!("{prefix}.attn_bn"))?;
            let mut out = Vec::with_capacity(hs.len());
            for (i, (&h, &a)) in hs.iter().zip(&normed).enumerate() {
                let t = ctx.g.shape(h).0;
                let a = ctx.g.tanh(a);
                let mut logits = ctx.conv(a, &format!("{prefix}.attn2"), 1)?;
                if ctx.g.shape(logits).1 != ctx.g.shape(h).1 {
                    return Err(Error::Model(format!("{prefix}: attention width does not match channels")));
                }
                if let Some(m) = mask_of(i) {
                    let bias = ctx.constant(mask_bias(t, m));
                    logits = ctx.g.add(logits, bias);
                }
                let alpha = ctx.g.softmax(logits, Axis(0));
                let (mean, std) = weighted_stats(ctx, h, alpha);
                let vector = ctx.g.concat_cols(&[mean, std]);
                out.push(Pooled { vector, weights: Some(alpha) });
            }
            Ok(out)
        }
    }
}
