//! End-to-end workflows over a feature cache: encoder and synthesizer
//! training inputs, the bundled synthesis checkpoint, voice cloning from
//! reference audio, and the similarity, MOS and visualization runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::acoustic_model::{AcousticConfig, AcousticModel, PhonemeSequence, SpeakerRef, TtsItem, VarianceMode};
use crate::autograd::Mat;
use crate::data::{CacheEntry, FeatureCache, Split};
use crate::dsp::{griffin_lim, FeatureKind, mel_spectrogram, FeatureMap, SpectroConfig, Waveform};
use crate::error::{Error, Result};
use crate::evaluation::{
    cosine_similarity, mismatched_speaker_score, mos_report, pair_and_score_embeddings, render_scatter, silhouette_score,
    tsne_project, AudioUtterance, EmbeddedUtterance, EvalReport, MosPredictor, SelfPairing, TsneConfig,
};
use crate::io::{read_wav, Vocabulary};
use crate::nn::ParamStore;
use crate::speaker_encoder::{average_speaker_embedding, EncoderArch, SpeakerCorpus, SpeakerEmbedding, SpeakerEncoder};
use crate::trainer::Checkpoint;

/// Parameter and config namespace of the encoder inside a synthesis bundle.
pub const BUNDLE_ENCODER_PREFIX: &str = "speaker_encoder";
pub const GROUND_TRUTH: &str = "ground-truth";
pub const RECONSTRUCT: &str = "reconstruct";
pub const SHUFFLED: &str = "shuffled-speaker";
pub const DEFAULT_GL_ITERS: usize = 32;

/// Cached encoder input of one utterance for `arch`.
pub fn encoder_input(cache: &FeatureCache, arch: &EncoderArch, id: &str) -> Result<Mat> {
    let m = match arch {
        EncoderArch::Ecapa(_) => cache.enc_mel(id)?,
        EncoderArch::XVector(_) => cache.mfcc(id)?,
    };
    if m.ncols() != arch.input_dim() {
        return Err(Error::Data(format!(
            "cached encoder features have {} channels, {} expects {}",
            m.ncols(),
            arch.name(),
            arch.input_dim()
        )));
    }
    Ok(m)
}

/// Labelled encoder inputs of the given cache entries.
pub fn encoder_corpus(cache: &FeatureCache, arch: &EncoderArch, entries: &[&CacheEntry]) -> Result<SpeakerCorpus> {
    let items = entries
        .iter()
        .map(|e| Ok((e.speaker_id.clone(), encoder_input(cache, arch, &e.utterance_id)?)))
        .collect::<Result<Vec<_>>>()?;
    SpeakerCorpus::new(items)
}

/// Utterance embeddings from cached encoder features, in input order.
pub fn embed_cached(encoder: &SpeakerEncoder, cache: &FeatureCache, entries: &[&CacheEntry], jobs: usize) -> Result<Vec<EmbeddedUtterance>> {
    crate::parallel::map(entries, jobs, |e| {
        let kind = match encoder.arch {
            EncoderArch::Ecapa(_) => FeatureKind::Mel,
            EncoderArch::XVector(_) => FeatureKind::Mfcc,
        };
        let rate = encoder.feature_config().frame_rate();
        let feat = FeatureMap::new(encoder_input(cache, &encoder.arch, &e.utterance_id)?, rate, kind)?;
        Ok(EmbeddedUtterance {
            id: e.utterance_id.clone(),
            speaker_id: e.speaker_id.clone(),
            embedding: encoder.embed_features(&feat)?.values,
        })
    })
}

/// Per-speaker average of utterance embeddings.
pub fn speaker_averages(embs: &[EmbeddedUtterance]) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut groups: BTreeMap<&str, Vec<SpeakerEmbedding>> = BTreeMap::new();
    for e in embs {
        groups.entry(&e.speaker_id).or_default().push(SpeakerEmbedding::utterance(e.embedding.clone()).with_speaker(&e.speaker_id));
    }
    groups.into_iter().map(|(s, v)| Ok((s.to_string(), average_speaker_embedding(&v)?.values))).collect()
}

/// Teacher-forcing items conditioned on each utterance's own embedding.
pub fn tts_items(cache: &FeatureCache, embs: &[EmbeddedUtterance]) -> Result<Vec<TtsItem>> {
    embs.iter()
        .map(|e| {
            let (phonemes, targets) = cache.targets(&e.id)?;
            Ok(TtsItem { phonemes, targets, mel: cache.mel(&e.id)?, speaker: SpeakerRef::Embedding(e.embedding.clone()) })
        })
        .collect()
}

/// Griffin-Lim vocoder at the synthesizer geometry.
pub fn vocode(mel: &FeatureMap, iters: usize) -> Result<Waveform> {
    griffin_lim(mel, &SpectroConfig::synthesizer(), iters)
}

/// Synthesizer, the encoder that conditions it, and its phoneme inventory.
#[derive(Clone, Debug)]
pub struct TtsBundle {
    pub model: AcousticModel,
    pub encoder: SpeakerEncoder,
    pub vocab: Vocabulary,
}

impl TtsBundle {
    pub fn new(model: AcousticModel, encoder: SpeakerEncoder, vocab: Vocabulary) -> Result<Self> {
        if model.cfg.vocab_size != vocab.len() {
            return Err(Error::Model(format!("model vocabulary {} vs {} symbols", model.cfg.vocab_size, vocab.len())));
        }
        if model.cfg.speaker_dim != encoder.embedding_dim() {
            return Err(Error::Model(format!(
                "synthesizer expects {}-dim speaker embeddings, encoder produces {}",
                model.cfg.speaker_dim,
                encoder.embedding_dim()
            )));
        }
        Ok(Self { model, encoder, vocab })
    }

    /// Name of the system in evaluation reports: the conditioning encoder.
    pub fn system_name(&self) -> &'static str {
        self.encoder.arch.name()
    }

    /// Merge into the synthesizer's training checkpoint `trained`.
    pub fn to_checkpoint(&self, trained: &Checkpoint) -> Checkpoint {
        let mut out = trained.clone();
        out.params = self.model.params.clone();
        for (k, v) in self.encoder.params.params() {
            out.params.insert(format!("{BUNDLE_ENCODER_PREFIX}.{k}"), v.clone());
        }
        for (k, v) in self.encoder.params.buffers() {
            out.params.insert_buffer(format!("{BUNDLE_ENCODER_PREFIX}.{k}"), v.clone());
        }
        for (k, v) in self.encoder.arch.to_flat().iter() {
            out.config.set(format!("{BUNDLE_ENCODER_PREFIX}.{k}"), v);
        }
        out.config.set("vocab.symbols", self.vocab.symbols().join(" "));
        out
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let prefix = format!("{BUNDLE_ENCODER_PREFIX}.");
        let (mut model_params, mut enc_params) = (ParamStore::new(), ParamStore::new());
        for (k, v) in ckpt.params.params() {
            match k.strip_prefix(&prefix) {
                Some(rest) => enc_params.insert(rest, v.clone()),
                None => model_params.insert(k.clone(), v.clone()),
            }
        }
        for (k, v) in ckpt.params.buffers() {
            match k.strip_prefix(&prefix) {
                Some(rest) => enc_params.insert_buffer(rest, v.clone()),
                None => model_params.insert_buffer(k.clone(), v.clone()),
            }
        }
        let model = AcousticModel::from_checkpoint(&Checkpoint { params: model_params, ..ckpt.clone() })?;
        let arch = EncoderArch::from_flat(&ckpt.config.section(BUNDLE_ENCODER_PREFIX)).map_err(|_| {
            Error::Incompatible("synthesizer checkpoint carries no speaker encoder".into())
        })?;
        let symbols = ckpt
            .config
            .get_str("vocab.symbols")
            .ok_or_else(|| Error::Incompatible("synthesizer checkpoint carries no vocabulary".into()))?;
        let vocab = Vocabulary::new(symbols.split_whitespace().map(str::to_string).collect())?;
        Self::new(model, SpeakerEncoder { arch, params: enc_params }, vocab)
    }

    /// Synthesizer configuration fitted to the encoder and vocabulary.
    pub fn acoustic_config(base: &AcousticConfig, encoder: &SpeakerEncoder, vocab: &Vocabulary) -> AcousticConfig {
        AcousticConfig { vocab_size: vocab.len(), speaker_dim: encoder.embedding_dim(), ..base.clone() }
    }

    /// Average embedding of reference utterances: the cloning rule.
    pub fn reference_embedding(&self, references: &[Waveform], jobs: usize) -> Result<SpeakerEmbedding> {
        if references.is_empty() {
            return Err(Error::Input("no reference utterances".into()));
        }
        let embs = crate::parallel::map(references, jobs, |w| self.encoder.extract_utterance_embedding(w))?;
        average_speaker_embedding(&embs)
    }

    /// Mel and Griffin-Lim audio for `symbols` in the voice `speaker`.
    pub fn synthesize(&self, symbols: &[String], speaker: &[f64], gl_iters: usize) -> Result<(FeatureMap, Waveform)> {
        let ids = PhonemeSequence::new(self.vocab.encode(symbols)?, self.vocab.len())?;
        let out = self.model.synthesize(&ids, crate::acoustic_model::Speaker::Embedding(speaker), None, VarianceMode::Infer)?;
        let wav = vocode(&out.mel_after, gl_iters)?;
        Ok((out.mel_after, wav))
    }
}

/// Sorted `*.wav` files of a directory.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::Input(format!("no .wav files in {}", dir.display())));
    }
    Ok(out)
}

pub fn read_wavs(paths: &[PathBuf]) -> Result<Vec<Waveform>> {
    paths.iter().map(|p| read_wav(p)).collect()
}

/// Audio of every system on one test set.
pub struct SystemOutputs {
    pub test_set: Split,
    /// Real test-set utterances: the ground-truth system.
    pub real: Vec<AudioUtterance>,
    /// Every real utterance of the test set's speakers, the pool that
    /// evaluation pairs are drawn from.
    pub references: Vec<AudioUtterance>,
    /// `(system name, utterances)`, ground truth excluded.
    pub systems: Vec<(String, Vec<AudioUtterance>)>,
}

fn audio(e: &CacheEntry, w: Waveform) -> AudioUtterance {
    AudioUtterance { id: e.utterance_id.clone(), speaker_id: e.speaker_id.clone(), audio: w }
}

/// Every cached utterance of the speakers in `entries`, in cache order.
pub fn speaker_pool<'a>(cache: &'a FeatureCache, entries: &[&CacheEntry]) -> Vec<&'a CacheEntry> {
    let speakers: std::collections::BTreeSet<&str> = entries.iter().map(|e| e.speaker_id.as_str()).collect();
    cache.entries.iter().filter(|e| speakers.contains(e.speaker_id.as_str())).collect()
}

const VOICE_STREAM: u64 = 0x766f_6963;

/// How the synthesizer's voice is chosen for each test utterance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoiceRule {
    /// Average over all of the speaker's utterances.
    Average,
    /// One seeded random utterance of the same speaker other than the
    /// target itself, when the speaker has one.
    SingleReference { seed: u64 },
}

/// Voice of every target under `rule`, drawn from the embedded `pool`.
pub fn choose_voices(targets: &[&CacheEntry], pool: &[EmbeddedUtterance], rule: VoiceRule) -> Result<Vec<Vec<f64>>> {
    let mut by_speaker: BTreeMap<&str, Vec<&EmbeddedUtterance>> = BTreeMap::new();
    for e in pool {
        by_speaker.entry(&e.speaker_id).or_default().push(e);
    }
    let refs = |t: &CacheEntry| {
        by_speaker
            .get(t.speaker_id.as_str())
            .ok_or_else(|| Error::Data(format!("no reference utterance of speaker `{}`", t.speaker_id)))
    };
    match rule {
        VoiceRule::Average => {
            let avg = speaker_averages(pool)?;
            targets.iter().map(|t| refs(t).map(|_| avg[&t.speaker_id].clone())).collect()
        }
        VoiceRule::SingleReference { seed } => {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Pairing draws from the same per-speaker lists with the same
            // seed; a separate stream keeps the reference from being the
            // utterance it is later scored against.
            rng.set_stream(VOICE_STREAM);
            targets
                .iter()
                .map(|t| {
                    let same = refs(t)?;
                    let others: Vec<&EmbeddedUtterance> = same.iter().copied().filter(|e| e.id != t.utterance_id).collect();
                    let pick = others.choose(&mut rng).or(same.first()).expect("non-empty speaker group");
                    Ok(pick.embedding.clone())
                })
                .collect()
        }
    }
}

/// Synthesize every entry's phoneme sequence in its speaker's voice, the
/// voice drawn from all of the speaker's cached utterances.
pub fn synthesize_entries(
    bundle: &TtsBundle,
    cache: &FeatureCache,
    entries: &[&CacheEntry],
    rule: VoiceRule,
    gl_iters: usize,
    jobs: usize,
) -> Result<Vec<AudioUtterance>> {
    let pool = embed_cached(&bundle.encoder, cache, &speaker_pool(cache, entries), jobs)?;
    let voices = choose_voices(entries, &pool, rule)?;
    let work: Vec<(&CacheEntry, Vec<f64>)> = entries.iter().copied().zip(voices).collect();
    crate::parallel::map(&work, jobs, |(e, voice)| {
        let symbols = cache.prosody(&e.utterance_id)?.symbols;
        Ok(audio(e, bundle.synthesize(&symbols, voice, gl_iters)?.1))
    })
}

/// Real audio, Griffin-Lim reconstructions of the real mels of one test
/// set and, with a bundle, synthesized utterances under `rule`.
pub fn system_outputs(
    cache: &FeatureCache,
    set: Split,
    tts: Option<&TtsBundle>,
    rule: VoiceRule,
    gl_iters: usize,
    jobs: usize,
) -> Result<SystemOutputs> {
    let entries: Vec<&CacheEntry> = cache.split(set).collect();
    if entries.is_empty() {
        return Err(Error::Data(format!("no {set} utterances in the cache")));
    }
    let load = |e: &&CacheEntry| Ok(audio(e, cache.wav(&e.utterance_id)?));
    let real = crate::parallel::map(&entries, jobs, load)?;
    let references = crate::parallel::map(&speaker_pool(cache, &entries), jobs, load)?;
    let recon = crate::parallel::map(&entries, jobs, |e| {
        let mel = FeatureMap::new(cache.mel(&e.utterance_id)?, SpectroConfig::synthesizer().frame_rate(), FeatureKind::Mel)?;
        Ok(audio(e, vocode(&mel, gl_iters)?))
    })?;
    let mut systems = vec![(RECONSTRUCT.to_string(), recon)];
    if let Some(b) = tts {
        systems.push((b.system_name().to_string(), synthesize_entries(b, cache, &entries, rule, gl_iters, jobs)?));
    }
    Ok(SystemOutputs { test_set: set, real, references, systems })
}

/// Similarity reports in table order: ground truth, then each system, then
/// the shuffled-speaker control of the last system.
pub fn similarity_reports(outputs: &SystemOutputs, scorer: &SpeakerEncoder, seed: u64, jobs: usize) -> Result<Vec<EvalReport>> {
    let set = outputs.test_set.to_string();
    let pool = crate::evaluation::embed_all(scorer, &outputs.references, jobs)?;
    let real = crate::evaluation::embed_all(scorer, &outputs.real, jobs)?;
    let (gt, _) = pair_and_score_embeddings(GROUND_TRUTH, &set, &real, &pool, SelfPairing::Exclude, seed)?;
    let mut reports = vec![gt];
    let mut last = None;
    for (name, utts) in &outputs.systems {
        let embs = crate::evaluation::embed_all(scorer, utts, jobs)?;
        reports.push(pair_and_score_embeddings(name, &set, &embs, &pool, SelfPairing::Exclude, seed)?.0);
        last = Some(embs);
    }
    if let Some(embs) = last {
        reports.push(mismatched_speaker_score(SHUFFLED, &set, &embs, &pool, seed)?);
    }
    Ok(reports)
}

/// Predictor input ids are `system/utterance_id`.
pub fn mos_reports(outputs: &SystemOutputs, predictor: &dyn MosPredictor, jobs: usize) -> Result<Vec<EvalReport>> {
    let set = outputs.test_set.to_string();
    let cfg = SpectroConfig::synthesizer();
    let score = |name: &str, utts: &[AudioUtterance]| -> Result<EvalReport> {
        let mels = crate::parallel::map(utts, jobs, |u| Ok((format!("{name}/{}", u.id), mel_spectrogram(&u.audio, &cfg)?)))?;
        mos_report(name, &set, predictor, &mels)
    };
    let mut reports = vec![score(GROUND_TRUTH, &outputs.real)?];
    for (name, utts) in &outputs.systems {
        reports.push(score(name, utts)?);
    }
    Ok(reports)
}

/// Result of an embedding visualization run.
pub struct Visualization {
    pub silhouette: f64,
    pub kl_history: Vec<f64>,
    pub points: usize,
    pub sidecar: PathBuf,
}

/// Project the first `n_speakers` speakers' first `per_speaker` utterance
/// embeddings with t-SNE and plot them.
pub fn visualize_embeddings(
    embs: &[EmbeddedUtterance],
    n_speakers: usize,
    per_speaker: usize,
    tsne: &TsneConfig,
    out: &Path,
) -> Result<Visualization> {
    let mut by_speaker: BTreeMap<&str, Vec<&EmbeddedUtterance>> = BTreeMap::new();
    for e in embs {
        by_speaker.entry(&e.speaker_id).or_default().push(e);
    }
    let chosen: Vec<&EmbeddedUtterance> =
        by_speaker.values().take(n_speakers).flat_map(|v| v.iter().take(per_speaker).copied()).collect();
    let x: Vec<Vec<f64>> = chosen.iter().map(|e| e.embedding.clone()).collect();
    let labels: Vec<String> = chosen.iter().map(|e| e.speaker_id.clone()).collect();
    let proj = tsne_project(&x, tsne)?;
    let sidecar = render_scatter(&proj.points, &labels, out)?;
    let index: BTreeMap<&str, usize> = by_speaker.keys().enumerate().map(|(i, s)| (*s, i)).collect();
    let ids: Vec<usize> = labels.iter().map(|l| index[l.as_str()]).collect();
    let pts: Vec<Vec<f64>> = proj.points.iter().map(|p| p.to_vec()).collect();
    Ok(Visualization { silhouette: silhouette_score(&pts, &ids)?, kl_history: proj.kl_history, points: pts.len(), sidecar })
}

/// Mean same-speaker and different-speaker cosine over all pairs.
pub fn intra_inter_similarity(embs: &[EmbeddedUtterance]) -> Result<(f64, f64)> {
    let (mut intra, mut inter) = ((0.0, 0usize), (0.0, 0usize));
    for (i, a) in embs.iter().enumerate() {
        for b in &embs[i + 1..] {
            let c = cosine_similarity(&a.embedding, &b.embedding)?;
            let acc = if a.speaker_id == b.speaker_id { &mut intra } else { &mut inter };
            acc.0 += c;
            acc.1 += 1;
        }
    }
    if intra.1 == 0 || inter.1 == 0 {
        return Err(Error::Data("need same-speaker and different-speaker pairs".into()));
    }
    Ok((intra.0 / intra.1 as f64, inter.0 / inter.1 as f64))
}
