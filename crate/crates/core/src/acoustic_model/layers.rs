//! Transformer, variance-predictor and Postnet layers of the synthesizer.

use ndarray::Axis;
use rand::Rng;

use crate::autograd::{Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};

/// Parameters of one feed-forward Transformer block under `prefix`.
pub fn init_fft_block<R: Rng>(p: &mut ParamStore, prefix: &str, hidden: usize, ffn: usize, kernel: usize, rng: &mut R) {
    for proj in ["q", "k", "v", "o"] {
        p.init_linear(&format!("{prefix}.attn.{proj}"), hidden, hidden, rng);
    }
    // A key bias only shifts each score row by a constant, which the softmax removes.
    p.remove(&format!("{prefix}.attn.k.bias"));
    p.init_layer_norm(&format!("{prefix}.ln1"), hidden);
    p.init_conv(&format!("{prefix}.ffn1"), hidden, ffn, kernel, rng);
    p.init_conv(&format!("{prefix}.ffn2"), ffn, hidden, 1, rng);
    p.init_layer_norm(&format!("{prefix}.ln2"), hidden);
}

/// Multi-head scaled dot-product self-attention. Returns the output and the
/// `L × L` attention matrix of every head.
pub fn multi_head_attention(ctx: &mut Ctx, x: Var, prefix: &str, heads: usize) -> Result<(Var, Vec<Var>)> {
    let hidden = ctx.g.shape(x).1;
    if heads == 0 || !hidden.is_multiple_of(heads) {
        return Err(Error::Config(format!("hidden size {hidden} not divisible by {heads} heads")));
    }
    let dk = hidden / heads;
    let q = ctx.linear(x, &format!("{prefix}.q"))?;
    let k = ctx.linear(x, &format!("{prefix}.k"))?;
    let v = ctx.linear(x, &format!("{prefix}.v"))?;
    let mut outs = Vec::with_capacity(heads);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = ctx.g.slice_cols(q, h * dk, (h + 1) * dk);
        let kh = ctx.g.slice_cols(k, h * dk, (h + 1) * dk);
        let vh = ctx.g.slice_cols(v, h * dk, (h + 1) * dk);
        let kt = ctx.g.transpose(kh);
        let scores = ctx.g.matmul(qh, kt);
        let scores = ctx.g.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = ctx.g.softmax(scores, Axis(1));
        outs.push(ctx.g.matmul(attn, vh));
        maps.push(attn);
    }
    let cat = if heads == 1 { outs[0] } else { ctx.g.concat_cols(&outs) };
    Ok((ctx.linear(cat, &format!("{prefix}.o"))?, maps))
}

/// Self-attention and a two-layer convolutional feed-forward net, each with
/// a residual connection followed by layer norm.
pub fn fft_block(ctx: &mut Ctx, x: Var, prefix: &str, heads: usize) -> Result<(Var, Vec<Var>)> {
    let (a, maps) = multi_head_attention(ctx, x, &format!("{prefix}.attn"), heads)?;
    let r = ctx.g.add(a, x);
    let h = ctx.layer_norm(r, &format!("{prefix}.ln1"))?;
    let f = ctx.conv(h, &format!("{prefix}.ffn1"), 1)?;
    let f = ctx.g.relu(f);
    let f = ctx.conv(f, &format!("{prefix}.ffn2"), 1)?;
    let r = ctx.g.add(f, h);
    Ok((ctx.layer_norm(r, &format!("{prefix}.ln2"))?, maps))
}

/// Parameters of one variance predictor under `prefix`.
pub fn init_variance_predictor<R: Rng>(p: &mut ParamStore, prefix: &str, hidden: usize, width: usize, kernel: usize, rng: &mut R) {
    p.init_conv(&format!("{prefix}.conv1"), hidden, width, kernel, rng);
    p.init_layer_norm(&format!("{prefix}.ln1"), width);
    p.init_conv(&format!("{prefix}.conv2"), width, width, kernel, rng);
    p.init_layer_norm(&format!("{prefix}.ln2"), width);
    p.init_linear(&format!("{prefix}.out"), width, 1, rng);
}

/// Two conv → ReLU → layer norm stages and a scalar projection: `L × 1`.
pub fn variance_predictor(ctx: &mut Ctx, h: Var, prefix: &str) -> Result<Var> {
    let a = ctx.conv(h, &format!("{prefix}.conv1"), 1)?;
    let a = ctx.g.relu(a);
    let a = ctx.layer_norm(a, &format!("{prefix}.ln1"))?;
    let b = ctx.conv(a, &format!("{prefix}.conv2"), 1)?;
    let b = ctx.g.relu(b);
    let b = ctx.layer_norm(b, &format!("{prefix}.ln2"))?;
    ctx.linear(b, &format!("{prefix}.out"))
}

/// Parameters of the Postnet stack under `postnet.`.
pub fn init_postnet<R: Rng>(p: &mut ParamStore, n_mels: usize, channels: usize, layers: usize, kernel: usize, rng: &mut R) {
    for i in 0..layers {
        let input = if i == 0 { n_mels } else { channels };
        let output = if i + 1 == layers { n_mels } else { channels };
        p.init_conv(&format!("postnet.{i}"), input, output, kernel, rng);
    }
}

/// Convolution stack with tanh on every layer but the last.
pub fn postnet(ctx: &mut Ctx, mel: Var, layers: usize) -> Result<Var> {
    let mut x = mel;
    for i in 0..layers {
        x = ctx.conv(x, &format!("postnet.{i}"), 1)?;
        if i + 1 < layers {
            x = ctx.g.tanh(x);
        }
    }
    Ok(x)
}

/// Repeat row `i` of `h` `durations[i]` times.
pub fn length_regulate(ctx: &mut Ctx, h: Var, durations: &[usize]) -> Result<Var> {
    let l = ctx.g.shape(h).0;
    if durations.len() != l {
        return Err(Error::Input(format!("{} durations for {l} phonemes", durations.len())));
    }
    let index = expansion_index(durations);
    if index.is_empty() {
        return Err(Error::Input("all durations are zero: nothing to expand".into()));
    }
    Ok(ctx.g.gather_rows(h, &index))
}

/// Source row of every expanded frame.
pub fn expansion_index(durations: &[usize]) -> Vec<usize> {
    durations.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat_n(i, d)).collect()
}

/// Linearly spaced bucket boundaries: `n_bins − 1` points spanning `[lo, hi]`.
pub fn bucket_boundaries(lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
    let n = n_bins.saturating_sub(1);
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Number of boundaries strictly below `x`: a value equal to a boundary
/// falls in the lower bucket.
pub fn bucketize(x: f64, boundaries: &[f64]) -> usize {
    boundaries.partition_point(|&b| b < x)
}

pub(crate) fn column(values: &[f64]) -> Mat {
    Mat::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape")
}
