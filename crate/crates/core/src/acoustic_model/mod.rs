//! Non-autoregressive acoustic model.
//!
//! Phoneme ids pass through an embedding and feed-forward Transformer
//! blocks, get a speaker vector added, go through the variance adaptor
//! (duration, pitch and energy predictors plus the length regulator) and are
//! decoded to an 80-band log-mel spectrogram refined by a residual Postnet.
//!
//! ```text
//! ids ─ embed ─ encoder ─ + speaker ─ variance adaptor ─ decoder ─ mel ─ + postnet
//! ```

mod layers;
mod loss;
mod train;

pub use layers::{
    bucket_boundaries, bucketize, expansion_index, fft_block, init_fft_block, init_postnet, init_variance_predictor,
    length_regulate, multi_head_attention, postnet, variance_predictor,
};
pub use loss::{compute_losses, loss_terms, LossRecord, LossVars, Masks};
pub use train::{train_synthesizer, SpeakerRef, TtsItem, TtsObjective};

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Mat, Var};
use crate::config::{flat_fields, FlatConfig, FlatFields};
use crate::dsp::{FeatureKind, FeatureMap, SpectroConfig};
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, Ctx, Mode, ParamStore};
use crate::trainer::Checkpoint;

/// Upper bound on frames a single phoneme expands to at inference.
pub const MAX_PHONEME_FRAMES: usize = 200;

/// How the speaker identity enters the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Conditioning {
    /// One affine layer from a speaker embedding.
    #[default]
    Projection,
    /// Trainable lookup table indexed by speaker id (the baseline system).
    Lookup,
}

impl fmt::Display for Conditioning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Conditioning::Projection => "projection",
            Conditioning::Lookup => "lookup",
        })
    }
}

impl FromStr for Conditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(Conditioning::Projection),
            "lookup" => Ok(Conditioning::Lookup),
            other => Err(Error::Config(format!("unknown conditioning `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub ffn_kernel: usize,
    pub conditioning: Conditioning,
    /// Input width of the speaker projection.
    pub speaker_dim: usize,
    /// Rows of the lookup table.
    pub n_speakers: usize,
    pub use_positions: bool,
    pub variance_width: usize,
    pub variance_kernel: usize,
    pub n_bins: usize,
    pub pitch_min: f64,
    pub pitch_max: f64,
    pub energy_min: f64,
    pub energy_max: f64,
    pub n_mels: usize,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    pub frame_rate: f64,
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            hidden: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_hidden: 128,
            ffn_kernel: 9,
            conditioning: Conditioning::Projection,
            speaker_dim: 128,
            n_speakers: 0,
            use_positions: true,
            variance_width: 64,
            variance_kernel: 3,
            n_bins: 256,
            pitch_min: -3.0,
            pitch_max: 3.0,
            energy_min: -3.0,
            energy_max: 3.0,
            n_mels: 80,
            postnet_channels: 64,
            postnet_layers: 5,
            postnet_kernel: 5,
            frame_rate: SpectroConfig::synthesizer().frame_rate(),
        }
    }
}

flat_fields!(AcousticConfig {
    vocab_size,
    hidden,
    encoder_layers,
    decoder_layers,
    heads,
    ffn_hidden,
    ffn_kernel,
    conditioning,
    speaker_dim,
    n_speakers,
    use_positions,
    variance_width,
    variance_kernel,
    n_bins,
    pitch_min,
    pitch_max,
    energy_min,
    energy_max,
    n_mels,
    postnet_channels,
    postnet_layers,
    postnet_kernel,
    frame_rate,
});

impl AcousticConfig {
    /// Widths of the open-source reference implementation.
    pub fn reference() -> Self {
        Self {
            hidden: 256,
            encoder_layers: 4,
            decoder_layers: 6,
            ffn_hidden: 1024,
            variance_width: 256,
            postnet_channels: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.hidden == 0 || self.n_mels == 0 || self.n_bins < 2 {
            return Err(Error::Config("vocab_size, hidden, n_mels must be positive and n_bins ≥ 2".into()));
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("hidden {} not divisible by heads {}", self.hidden, self.heads)));
        }
        for k in [self.ffn_kernel, self.variance_kernel, self.postnet_kernel] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel {k} must be odd")));
            }
        }
        if self.postnet_layers < 1 {
            return Err(Error::Config("postnet needs at least one layer".into()));
        }
        if !(self.pitch_max > self.pitch_min) || !(self.energy_max > self.energy_min) {
            return Err(Error::Config("pitch/energy ranges must be non-empty".into()));
        }
        match self.conditioning {
            Conditioning::Projection if self.speaker_dim == 0 => {
                Err(Error::Config("projection conditioning needs speaker_dim > 0".into()))
            }
            Conditioning::Lookup if self.n_speakers == 0 => {
                Err(Error::Config("lookup conditioning needs n_speakers > 0".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn pitch_boundaries(&self) -> Vec<f64> {
        bucket_boundaries(self.pitch_min, self.pitch_max, self.n_bins)
    }

    pub fn energy_boundaries(&self) -> Vec<f64> {
        bucket_boundaries(self.energy_min, self.energy_max, self.n_bins)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("phoneme sequence is empty".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::Input(format!("phoneme id {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Per-phoneme supervision for the variance adaptor.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisTargets {
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

impl SynthesisTargets {
    pub fn validate(&self, phonemes: usize) -> Result<()> {
        if self.durations.len() != phonemes || self.pitch.len() != phonemes || self.energy.len() != phonemes {
            return Err(Error::Input(format!(
                "targets have {}/{}/{} entries for {phonemes} phonemes",
                self.durations.len(),
                self.pitch.len(),
                self.energy.len()
            )));
        }
        if self.pitch.iter().chain(&self.energy).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite pitch or energy target".into()));
        }
        Ok(())
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// `ln(d + 1)` regression targets of the duration predictor.
    pub fn log_durations(&self) -> Vec<f64> {
        self.durations.iter().map(|&d| (d as f64 + 1.0).ln()).collect()
    }
}

/// Speaker conditioning input.
#[derive(Clone, Copy, Debug)]
pub enum Speaker<'a> {
    Embedding(&'a [f64]),
    Id(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceMode {
    /// Teacher forcing with ground-truth durations, pitch and energy.
    Train,
    /// Use the predictors' outputs.
    Infer,
}

/// Inferred frame count for a predicted log-duration:
/// `max(round(exp(logd) − 1 + 0.5), 0)` with halves rounded up.
pub fn infer_duration(log_duration: f64) -> usize {
    let v = (log_duration.exp() - 1.0 + 0.5 + 0.5).floor();
    if v.is_nan() || v <= 0.0 {
        0
    } else {
        (v as usize).min(MAX_PHONEME_FRAMES)
    }
}

/// Graph nodes of one forward pass.
pub struct ForwardVars {
    pub mel_before: Var,
    pub mel_after: Var,
    /// `L × 1` columns.
    pub log_durations: Var,
    pub pitch: Var,
    pub energy: Var,
    /// Durations used by the length regulator.
    pub durations: Vec<usize>,
    /// Attention maps of every encoder block and head.
    pub encoder_attention: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisOutput {
    pub mel_before: FeatureMap,
    pub mel_after: FeatureMap,
    pub log_durations: Vec<f64>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub durations: Vec<usize>,
}

impl SynthesisOutput {
    pub fn frames(&self) -> usize {
        self.mel_after.frames()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcousticModel {
    pub cfg: AcousticConfig,
    pub params: ParamStore,
}

impl AcousticModel {
    pub fn new(cfg: AcousticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let h = cfg.hidden;
        p.init_embedding("phoneme_embedding", cfg.vocab_size, h, &mut rng);
        for i in 0..cfg.encoder_layers {
            init_fft_block(&mut p, &format!("encoder.{i}"), h, cfg.ffn_hidden, cfg.ffn_kernel, &mut rng);
        }
        match cfg.conditioning {
            Conditioning::Projection => p.init_linear("speaker_proj", cfg.speaker_dim, h, &mut rng),
            Conditioning::Lookup => p.init_embedding("speaker_table", cfg.n_speakers, h, &mut rng),
        }
        for name in ["duration", "pitch", "energy"] {
            init_variance_predictor(&mut p, &format!("variance.{name}"), h, cfg.variance_width, cfg.variance_kernel, &mut rng);
        }
        p.init_embedding("pitch_embedding", cfg.n_bins, h, &mut rng);
        p.init_embedding("energy_embedding", cfg.n_bins, h, &mut rng);
        for i in 0..cfg.decoder_layers {
            init_fft_block(&mut p, &format!("decoder.{i}"), h, cfg.ffn_hidden, cfg.ffn_kernel, &mut rng);
        }
        p.init_linear("mel_proj", h, cfg.n_mels, &mut rng);
        init_postnet(&mut p, cfg.n_mels, cfg.postnet_channels, cfg.postnet_layers, cfg.postnet_kernel, &mut rng);
        Ok(Self { cfg, params: p })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.params.clone(), self.meta())
    }

    pub fn meta(&self) -> FlatConfig {
        let mut out = self.cfg.to_flat("acoustic");
        out.set("model.kind", "acoustic");
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        match ckpt.config.get_str("model.kind") {
            Some("acoustic") => {}
            other => {
                return Err(Error::Incompatible(format!("not a synthesizer checkpoint (model.kind = {other:?})")))
            }
        }
        let cfg = AcousticConfig::from_flat("acoustic", &ckpt.config)?;
        cfg.validate()?;
        Ok(Self { cfg, params: ckpt.params.clone() })
    }

    /// Embedding lookup, optional sinusoidal positions and encoder blocks.
    pub fn encode_phonemes(&self, ctx: &mut Ctx, p: &PhonemeSequence) -> Result<(Var, Vec<Var>)> {
        let p = PhonemeSequence::new(p.ids.clone(), self.cfg.vocab_size)?;
        let table = ctx.p("phoneme_embedding")?;
        let mut h = ctx.g.gather_rows(table, &p.ids);
        if self.cfg.use_positions {
            let pos = ctx.constant(sinusoid_table(p.len(), self.cfg.hidden));
            h = ctx.g.add(h, pos);
        }
        let mut maps = Vec::new();
        for i in 0..self.cfg.encoder_layers {
            let (out, m) = fft_block(ctx, h, &format!("encoder.{i}"), self.cfg.heads)?;
            h = out;
            maps.extend(m);
        }
        Ok((h, maps))
    }

    /// `h + 1 · (W e + b)ᵀ`, or `h + 1 · table[id]ᵀ` for lookup conditioning.
    pub fn condition_on_speaker(&self, ctx: &mut Ctx, h: Var, speaker: Speaker) -> Result<Var> {
        let v = match (self.cfg.conditioning, speaker) {
            (Conditioning::Projection, Speaker::Embedding(e)) => {
                if e.len() != self.cfg.speaker_dim {
                    return Err(Error::Model(format!(
                        "speaker embedding has {} dims, projection expects {}",
                        e.len(),
                        self.cfg.speaker_dim
                    )));
                }
                let e = ctx.constant(Mat::from_shape_vec((1, e.len()), e.to_vec()).expect("row"));
                ctx.linear(e, "speaker_proj")?
            }
            (Conditioning::Lookup, Speaker::Id(id)) => {
                if id >= self.cfg.n_speakers {
                    return Err(Error::Input(format!("speaker id {id} outside table of {}", self.cfg.n_speakers)));
                }
                let table = ctx.p("speaker_table")?;
                ctx.g.gather_rows(table, &[id])
            }
            (Conditioning::Projection, Speaker::Id(_)) => {
                return Err(Error::Model("projection conditioning needs a speaker embedding".into()))
            }
            (Conditioning::Lookup, Speaker::Embedding(_)) => {
                return Err(Error::Model("lookup conditioning needs a speaker id".into()))
            }
        };
        Ok(ctx.g.add(h, v))
    }

    /// Predict log-durations, pitch and energy; add bucket embeddings and
    /// expand to frame rate. Returns the expanded hiddens plus predictions.
    pub fn variance_adaptor(
        &self,
        ctx: &mut Ctx,
        h: Var,
        targets: Option<&SynthesisTargets>,
        mode: VarianceMode,
    ) -> Result<(Var, [Var; 3], Vec<usize>)> {
        let l = ctx.g.shape(h).0;
        let targets = match (mode, targets) {
            (VarianceMode::Train, None) => {
                return Err(Error::Usage("train mode requires duration, pitch and energy targets".into()))
            }
            (VarianceMode::Train, Some(t)) => {
                t.validate(l)?;
                Some(t)
            }
            (VarianceMode::Infer, _) => None,
        };
        let logd = variance_predictor(ctx, h, "variance.duration")?;
        let pitch = variance_predictor(ctx, h, "variance.pitch")?;
        let pitch_values = match targets {
            Some(t) => t.pitch.clone(),
            None => ctx.value(pitch).column(0).to_vec(),
        };
        let bounds = self.cfg.pitch_boundaries();
        let idx: Vec<usize> = pitch_values.iter().map(|&v| bucketize(v, &bounds)).collect();
        let table = ctx.p("pitch_embedding")?;
        let emb = ctx.g.gather_rows(table, &idx);
        let h = ctx.g.add(h, emb);

        let energy = variance_predictor(ctx, h, "variance.energy")?;
        let energy_values = match targets {
            Some(t) => t.energy.clone(),
            None => ctx.value(energy).column(0).to_vec(),
        };
        let bounds = self.cfg.energy_boundaries();
        let idx: Vec<usize> = energy_values.iter().map(|&v| bucketize(v, &bounds)).collect();
        let table = ctx.p("energy_embedding")?;
        let emb = ctx.g.gather_rows(table, &idx);
        let h = ctx.g.add(h, emb);

        let durations = match targets {
            Some(t) => t.durations.clone(),
            None => {
                let logd_values = ctx.value(logd).column(0).to_vec();
                let mut d: Vec<usize> = logd_values.iter().map(|&v| infer_duration(v)).collect();
                if d.iter().all(|&x| x == 0) {
                    // Keep at least one frame: the most confident phoneme.
                    let best = logd_values
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a })
                        .0;
                    d[best] = 1;
                }
                d
            }
        };
        let expanded = length_regulate(ctx, h, &durations)?;
        Ok((expanded, [logd, pitch, energy], durations))
    }

    /// Decoder blocks, mel projection and residual Postnet.
    pub fn decode_mel(&self, ctx: &mut Ctx, h: Var) -> Result<(Var, Var)> {
        let t = ctx.g.shape(h).0;
        if t == 0 {
            return Err(Error::Input("cannot decode zero frames".into()));
        }
        let mut x = h;
        if self.cfg.use_positions {
            let pos = ctx.constant(sinusoid_table(t, self.cfg.hidden));
            x = ctx.g.add(x, pos);
        }
        for i in 0..self.cfg.decoder_layers {
            x = fft_block(ctx, x, &format!("decoder.{i}"), self.cfg.heads)?.0;
        }
        let before = ctx.linear(x, "mel_proj")?;
        let residual = postnet(ctx, before, self.cfg.postnet_layers)?;
        let after = ctx.g.add(before, residual);
        Ok((before, after))
    }

    /// encode → condition → variance adaptor → decode, on the graph.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        p: &PhonemeSequence,
        speaker: Speaker,
        targets: Option<&SynthesisTargets>,
        mode: VarianceMode,
    ) -> Result<ForwardVars> {
        let (h, encoder_attention) = self.encode_phonemes(ctx, p)?;
        let h = self.condition_on_speaker(ctx, h, speaker)?;
        let (x, [logd, pitch, energy], durations) = self.variance_adaptor(ctx, h, targets, mode)?;
        let (mel_before, mel_after) = self.decode_mel(ctx, x)?;
        Ok(ForwardVars { mel_before, mel_after, log_durations: logd, pitch, energy, durations, encoder_attention })
    }

    pub fn synthesize(
        &self,
        p: &PhonemeSequence,
        speaker: Speaker,
        targets: Option<&SynthesisTargets>,
        mode: VarianceMode,
    ) -> Result<SynthesisOutput> {
        let mut ctx = Ctx::new(&self.params, Mode::Eval);
        let fw = self.forward(&mut ctx, p, speaker, targets, mode)?;
        let mel = |v: Var| FeatureMap::new(ctx.value(v).clone(), self.cfg.frame_rate, FeatureKind::Mel);
        let col = |v: Var| ctx.value(v).column(0).to_vec();
        Ok(SynthesisOutput {
            mel_before: mel(fw.mel_before)?,
            mel_after: mel(fw.mel_after)?,
            log_durations: col(fw.log_durations),
            pitch: col(fw.pitch),
            energy: col(fw.energy),
            durations: fw.durations,
        })
    }
}
