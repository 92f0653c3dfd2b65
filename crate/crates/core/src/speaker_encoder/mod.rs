//! Speaker-embedding networks.
//!
//! Two architectures share the same pooling and training code:
//!
//! * **ECAPA-TDNN**: a `K=5` stem, three SE-Res2Blocks (`K=3`, dilations
//!   2, 3, 4), multi-layer feature aggregation by concatenating the three
//!   block outputs, a 1×1 TDNN, channel- and context-dependent attentive
//!   statistics pooling and a final affine layer (128-dim by default).
//! * **x-vector**: stacked dilated TDNN layers, shared-weight attentive
//!   statistics pooling and a segment-level affine layer (512-dim).
//!
//! Either can use unweighted frame averaging instead (`PoolingMode::FrameAverage`),
//! the d-vector style baseline.

mod blocks;
mod train;

pub use blocks::{
    attentive_stats_pool, frame_average_pool, se_block, se_res2_block, tdnn_block, ConvBlockSpec, Pooled,
    PoolingMode, POOL_EPS,
};
pub use train::{classification_accuracy, train_speaker_classifier, ClassifierLoss, EncoderTrainConfig, SpeakerCorpus};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Var};
use crate::config::{flat_fields, FlatConfig, FlatFields};
use crate::dsp::{mel_spectrogram, mfcc, resample, FeatureMap, SpectroConfig, Waveform};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::trainer::Checkpoint;

pub const ENCODER_SAMPLE_RATE: u32 = 16000;
pub const MIN_UTTERANCE_SECS: f64 = 0.2;
const ECAPA_DILATIONS: [usize; 3] = [2, 3, 4];

#[derive(Clone, Debug, PartialEq)]
pub struct EcapaConfig {
    pub n_mels: usize,
    pub channels: usize,
    pub res2_scale: usize,
    pub se_bottleneck: usize,
    pub mfa_channels: usize,
    pub attention_channels: usize,
    pub embedding_dim: usize,
    pub stem_kernel: usize,
    pub block_kernel: usize,
    pub pooling: PoolingMode,
}

impl Default for EcapaConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            channels: 64,
            res2_scale: 4,
            se_bottleneck: 16,
            mfa_channels: 192,
            attention_channels: 32,
            embedding_dim: 128,
            stem_kernel: 5,
            block_kernel: 3,
            pooling: PoolingMode::ChannelContext,
        }
    }
}

flat_fields!(EcapaConfig {
    n_mels,
    channels,
    res2_scale,
    se_bottleneck,
    mfa_channels,
    attention_channels,
    embedding_dim,
    stem_kernel,
    block_kernel,
    pooling,
});

impl EcapaConfig {
    /// Channel widths of the published speaker-verification model.
    pub fn reference() -> Self {
        Self {
            channels: 512,
            res2_scale: 8,
            se_bottleneck: 128,
            mfa_channels: 1536,
            attention_channels: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.res2_scale == 0 || !self.channels.is_multiple_of(self.res2_scale) {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by res2_scale ({})",
                self.channels, self.res2_scale
            )));
        }
        for k in [self.stem_kernel, self.block_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel {k} must be odd")));
            }
        }
        if [self.n_mels, self.se_bottleneck, self.mfa_channels, self.attention_channels, self.embedding_dim]
            .contains(&0)
        {
            return Err(Error::Config("ECAPA widths must be positive".into()));
        }
        Ok(())
    }
}

/// TDNN layer stack written as `out:kernel:dilation,...`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerList(pub Vec<(usize, usize, usize)>);

impl fmt::Display for LayerList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(c, k, d)| format!("{c}:{k}:{d}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for LayerList {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid layer list `{s}`"));
        s.split(',')
            .map(|part| {
                let v: Vec<usize> = part.trim().split(':').map(|x| x.parse().map_err(|_| bad())).collect::<Result<_>>()?;
                match v.as_slice() {
                    [c, k, d] => Ok((*c, *k, *d)),
                    _ => Err(bad()),
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(LayerList)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XvectorConfig {
    pub n_mfcc: usize,
    pub layers: LayerList,
    pub attention_channels: usize,
    pub embedding_dim: usize,
    pub pooling: PoolingMode,
}

impl Default for XvectorConfig {
    fn default() -> Self {
        Self {
            n_mfcc: 30,
            layers: LayerList(vec![(64, 5, 1), (64, 3, 2), (64, 3, 3), (64, 1, 1), (192, 1, 1)]),
            attention_channels: 32,
            embedding_dim: 512,
            pooling: PoolingMode::Shared,
        }
    }
}

flat_fields!(XvectorConfig { n_mfcc, layers, attention_channels, embedding_dim, pooling });

impl XvectorConfig {
    pub fn reference() -> Self {
        Self {
            layers: LayerList(vec![(512, 5, 1), (512, 3, 2), (512, 3, 3), (512, 1, 1), (1500, 1, 1)]),
            attention_channels: 128,
            ..Self::default()
        }
    }

    fn specs(&self) -> Result<Vec<ConvBlockSpec>> {
        if self.layers.0.is_empty() {
            return Err(Error::Config("x-vector needs at least one TDNN layer".into()));
        }
        let mut input = self.n_mfcc;
        self.layers
            .0
            .iter()
            .map(|&(out, k, d)| {
                let spec = ConvBlockSpec::new(input, out, k, d)?;
                input = out;
                Ok(spec)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EncoderArch {
    Ecapa(EcapaConfig),
    XVector(XvectorConfig),
}

impl EncoderArch {
    pub fn name(&self) -> &'static str {
        match self {
            EncoderArch::Ecapa(_) => "ecapa",
            EncoderArch::XVector(_) => "xvector",
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match self {
            EncoderArch::Ecapa(c) => c.embedding_dim,
            EncoderArch::XVector(c) => c.embedding_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EncoderArch::Ecapa(c) => c.n_mels,
            EncoderArch::XVector(c) => c.n_mfcc,
        }
    }

    /// Front-end geometry at 16 kHz.
    pub fn feature_config(&self) -> SpectroConfig {
        match self {
            EncoderArch::Ecapa(c) => SpectroConfig { n_mels: c.n_mels, ..SpectroConfig::ecapa() },
            EncoderArch::XVector(c) => SpectroConfig { n_mels: c.n_mfcc, ..SpectroConfig::xvector() },
        }
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut out = match self {
            EncoderArch::Ecapa(c) => c.to_flat("encoder"),
            EncoderArch::XVector(c) => c.to_flat("encoder"),
        };
        out.set("model.kind", self.name());
        out
    }

    pub fn from_flat(cfg: &FlatConfig) -> Result<Self> {
        match cfg.get_str("model.kind") {
            Some("ecapa") => Ok(EncoderArch::Ecapa(EcapaConfig::from_flat("encoder", cfg)?)),
            Some("xvector") => Ok(EncoderArch::XVector(XvectorConfig::from_flat("encoder", cfg)?)),
            other => Err(Error::Incompatible(format!("not a speaker-encoder checkpoint (model.kind = {other:?})"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Utterance,
    SpeakerAverage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedding {
    pub values: Vec<f64>,
    pub source: EmbeddingSource,
    pub speaker_id: Option<String>,
}

impl SpeakerEmbedding {
    pub fn utterance(values: Vec<f64>) -> Self {
        Self { values, source: EmbeddingSource::Utterance, speaker_id: None }
    }

    pub fn with_speaker(mut self, id: impl Into<String>) -> Self {
        self.speaker_id = Some(id.into());
        self
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_row(&self) -> Mat {
        Mat::from_shape_vec((1, self.values.len()), self.values.clone()).expect("row shape")
    }
}

/// Arithmetic mean of utterance embeddings of one speaker.
pub fn average_speaker_embedding(embs: &[SpeakerEmbedding]) -> Result<SpeakerEmbedding> {
    let first = embs.first().ok_or_else(|| Error::Input("cannot average zero embeddings".into()))?;
    let dim = first.dim();
    if embs.iter().any(|e| e.dim() != dim) {
        return Err(Error::Input("embeddings have mixed dimensions".into()));
    }
    if embs.iter().any(|e| e.speaker_id != first.speaker_id) {
        return Err(Error::Input("embeddings belong to different speakers".into()));
    }
    let mut values = vec![0.0; dim];
    for e in embs {
        for (acc, v) in values.iter_mut().zip(&e.values) {
            *acc += v;
        }
    }
    let n = embs.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(SpeakerEmbedding { values, source: EmbeddingSource::SpeakerAverage, speaker_id: first.speaker_id.clone() })
}

/// Architecture plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEncoder {
    pub arch: EncoderArch,
    pub params: ParamStore,
}

impl SpeakerEncoder {
    /// Randomly initialized encoder.
    pub fn new(arch: EncoderArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        match &arch {
            EncoderArch::Ecapa(c) => {
                c.validate()?;
                let ch = c.channels;
                p.init_conv("stem.conv", c.n_mels, ch, c.stem_kernel, &mut rng);
                p.init_batch_norm("stem.bn", ch);
                for b in 1..=ECAPA_DILATIONS.len() {
                    init_se_res2(&mut p, &format!("block{b}"), ch, c.block_kernel, c.res2_scale, c.se_bottleneck, &mut rng);
                }
                p.init_conv("mfa.conv", 3 * ch, c.mfa_channels, 1, &mut rng);
                p.init_batch_norm("mfa.bn", c.mfa_channels);
                init_pool(&mut p, "pool", c.mfa_channels, c.attention_channels, c.pooling, &mut rng);
                p.init_linear("head", c.pooling.output_width(c.mfa_channels), c.embedding_dim, &mut rng);
            }
            EncoderArch::XVector(c) => {
                let specs = c.specs()?;
                for (i, s) in specs.iter().enumerate() {
                    p.init_conv(&format!("tdnn{i}.conv"), s.in_channels, s.out_channels, s.kernel, &mut rng);
                    p.init_batch_norm(&format!("tdnn{i}.bn"), s.out_channels);
                }
                let last = specs.last().unwrap().out_channels;
                init_pool(&mut p, "pool", last, c.attention_channels, c.pooling, &mut rng);
                p.init_linear("head", c.pooling.output_width(last), c.embedding_dim, &mut rng);
            }
        }
        Ok(Self { arch, params: p })
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim()
    }

    pub fn feature_config(&self) -> SpectroConfig {
        self.arch.feature_config()
    }

    /// Forward a batch of `T_i × F` feature matrices to `1 × E` embeddings.
    pub fn forward(&self, ctx: &mut Ctx, feats: &[Var]) -> Result<Vec<Var>> {
        let want = self.arch.input_dim();
        for &f in feats {
            if ctx.g.shape(f).1 != want {
                return Err(Error::Model(format!(
                    "feature dimension {} does not match encoder input {want}",
                    ctx.g.shape(f).1
                )));
            }
        }
        match &self.arch {
            EncoderArch::Ecapa(c) => ecapa_forward(ctx, c, feats),
            EncoderArch::XVector(c) => xvector_forward(ctx, c, feats),
        }
    }

    /// Encoder input features for a waveform of any sample rate.
    pub fn features(&self, w: &Waveform) -> Result<FeatureMap> {
        if w.duration_secs() < MIN_UTTERANCE_SECS {
            return Err(Error::Input(format!(
                "utterance is {:.3} s, at least {MIN_UTTERANCE_SECS} s required",
                w.duration_secs()
            )));
        }
        let w16 = resample(w, ENCODER_SAMPLE_RATE)?;
        let cfg = self.feature_config();
        match &self.arch {
            EncoderArch::Ecapa(_) => mel_spectrogram(&w16, &cfg),
            EncoderArch::XVector(c) => mfcc(&w16, &cfg, c.n_mfcc),
        }
    }

    /// Eval-mode embedding of precomputed features.
    pub fn embed_features(&self, feat: &FeatureMap) -> Result<SpeakerEmbedding> {
        let mut ctx = Ctx::new(&self.params, Mode::Eval);
        let x = ctx.constant(feat.values.clone());
        let out = self.forward(&mut ctx, &[x])?;
        Ok(SpeakerEmbedding::utterance(ctx.value(out[0]).row(0).to_vec()))
    }

    /// Resample → features → eval-mode forward pass.
    pub fn extract_utterance_embedding(&self, w: &Waveform) -> Result<SpeakerEmbedding> {
        self.embed_features(&self.features(w)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.params.clone(), self.arch.to_flat())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let arch = EncoderArch::from_flat(&ckpt.config)?;
        Ok(Self { arch, params: ckpt.params.clone() })
    }
}

/// Parameters of one SE-Res2 block under `prefix`.
pub fn init_se_res2(
    p: &mut ParamStore,
    prefix: &str,
    ch: usize,
    kernel: usize,
    scale: usize,
    bottleneck: usize,
    rng: &mut ChaCha8Rng,
) {
    let width = ch / scale;
    p.init_conv(&format!("{prefix}.conv1.conv"), ch, ch, 1, rng);
    p.init_batch_norm(&format!("{prefix}.conv1.bn"), ch);
    for g in 0..scale {
        p.init_conv(&format!("{prefix}.res2.{g}"), width, width, kernel, rng);
    }
    p.init_batch_norm(&format!("{prefix}.res2_bn"), ch);
    p.init_conv(&format!("{prefix}.conv2.conv"), ch, ch, 1, rng);
    p.init_batch_norm(&format!("{prefix}.conv2.bn"), ch);
    p.init_linear(&format!("{prefix}.se.fc1"), ch, bottleneck, rng);
    p.init_linear(&format!("{prefix}.se.fc2"), bottleneck, ch, rng);
}

/// Parameters of an attentive statistics pooling layer under `prefix`.
pub fn init_pool(p: &mut ParamStore, prefix: &str, ch: usize, attn: usize, mode: PoolingMode, rng: &mut ChaCha8Rng) {
    match mode {
        PoolingMode::ChannelContext => {
            p.init_conv(&format!("{prefix}.attn1"), 3 * ch, attn, 1, rng);
            p.init_batch_norm(&format!("{prefix}.attn_bn"), attn);
            p.init_conv(&format!("{prefix}.attn2"), attn, ch, 1, rng);
        }
        PoolingMode::Shared => {
            p.init_conv(&format!("{prefix}.attn1"), ch, attn, 1, rng);
            p.init_conv(&format!("{prefix}.attn2"), attn, 1, 1, rng);
        }
        PoolingMode::FrameAverage => return,
    }
    // Softmax over time cancels a per-channel score offset.
    p.remove(&format!("{prefix}.attn2.bias"));
}

fn pool_and_project(ctx: &mut Ctx, hs: &[Var], mode: PoolingMode) -> Result<Vec<Var>> {
    let pooled = attentive_stats_pool(ctx, hs, None, "pool", mode)?;
    pooled.into_iter().map(|p| ctx.linear(p.vector, "head")).collect()
}

/// ECAPA-TDNN over a batch of `T × n_mels` inputs.
pub fn ecapa_forward(ctx: &mut Ctx, cfg: &EcapaConfig, feats: &[Var]) -> Result<Vec<Var>> {
    cfg.validate()?;
    let ch = cfg.channels;
    let mut x = tdnn_block(ctx, feats, "stem", 1)?;
    let mut levels: Vec<Vec<Var>> = Vec::with_capacity(ECAPA_DILATIONS.len());
    for (b, &d) in ECAPA_DILATIONS.iter().enumerate() {
        let spec = ConvBlockSpec::new(ch, ch, cfg.block_kernel, d)?;
        x = se_res2_block(ctx, &x, &format!("block{}", b + 1), &spec, cfg.res2_scale)?;
        levels.push(x.clone());
    }
    let joined: Vec<Var> = (0..feats.len())
        .map(|i| {
            let parts: Vec<Var> = levels.iter().map(|l| l[i]).collect();
            ctx.g.concat_cols(&parts)
        })
        .collect();
    let h = tdnn_block(ctx, &joined, "mfa", 1)?;
    pool_and_project(ctx, &h, cfg.pooling)
}

/// x-vector TDNN over a batch of `T × n_mfcc` inputs.
pub fn xvector_forward(ctx: &mut Ctx, cfg: &XvectorConfig, feats: &[Var]) -> Result<Vec<Var>> {
    let specs = cfg.specs()?;
    let mut x = feats.to_vec();
    for (i, s) in specs.iter().enumerate() {
        x = tdnn_block(ctx, &x, &format!("tdnn{i}"), s.dilation)?;
    }
    pool_and_project(ctx, &x, cfg.pooling)
}

#[cfg(test)]
mod tests;
