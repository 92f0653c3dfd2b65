//! Feature cache: synthesizer mels, encoder features, phoneme-level prosody
//! and train-split normalization statistics.
//!
//! Layout under the cache directory:
//!
//! ```text
//! cache.tsv            utterance_id, speaker_id, split, phonemes, frames
//! stats.txt            key = value normalization statistics
//! vocab.txt            phoneme symbols, one per line
//! wav/<id>.wav         audio at the synthesizer sample rate
//! mel/<id>.vxfm        Σd × n_mels log-mel
//! enc_mel/<id>.vxfm    16 kHz log-mel for the ECAPA encoder
//! mfcc/<id>.vxfm       16 kHz MFCC for the x-vector encoder
//! prosody/<id>.tsv     phoneme, duration, pitch (Hz), energy
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::manifest::{CorpusManifest, ManifestEntry, Split};
use crate::acoustic_model::{PhonemeSequence, SynthesisTargets};
use crate::autograd::Mat;
use crate::config::FlatConfig;
use crate::dsp::{estimate_pitch, frame_energy, mel_spectrogram, mfcc, resample, SpectroConfig, Waveform};
use crate::error::{Error, Result};
use crate::io::{read_features, read_tokens, read_values, read_wav, write_features, write_wav, Vocabulary};

const CACHE_HEADER: &str = "utterance_id\tspeaker_id\tsplit\tphonemes\tframes";
const PROSODY_HEADER: &str = "phoneme\tduration\tpitch\tenergy";

/// Feature geometry of the cache.
#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub mel: SpectroConfig,
    pub ecapa: SpectroConfig,
    pub xvector: SpectroConfig,
    pub n_mfcc: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { mel: SpectroConfig::synthesizer(), ecapa: SpectroConfig::ecapa(), xvector: SpectroConfig::xvector(), n_mfcc: 30 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub split: Split,
    pub phonemes: usize,
    pub frames: usize,
}

/// Phoneme-level supervision of one utterance, in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct PhonemeProsody {
    pub symbols: Vec<String>,
    pub durations: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
}

/// Z-score statistics of phoneme-level pitch and energy over the train split.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub pitch_mean: f64,
    pub pitch_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
    pub train_items: usize,
    pub train_phonemes: usize,
}

impl Default for NormStats {
    fn default() -> Self {
        Self { pitch_mean: 0.0, pitch_std: 1.0, energy_mean: 0.0, energy_std: 1.0, train_items: 0, train_phonemes: 0 }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 1.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

impl NormStats {
    /// Population mean and standard deviation (1 when degenerate) of the
    /// phoneme values of the given utterances.
    pub fn from_prosody<'a>(items: impl IntoIterator<Item = &'a PhonemeProsody>) -> Self {
        let (mut pitch, mut energy, mut count) = (Vec::new(), Vec::new(), 0);
        for p in items {
            pitch.extend_from_slice(&p.pitch);
            energy.extend_from_slice(&p.energy);
            count += 1;
        }
        let (pitch_mean, pitch_std) = mean_std(&pitch);
        let (energy_mean, energy_std) = mean_std(&energy);
        Self { pitch_mean, pitch_std, energy_mean, energy_std, train_items: count, train_phonemes: pitch.len() }
    }

    pub fn normalize_pitch(&self, v: f64) -> f64 {
        (v - self.pitch_mean) / self.pitch_std
    }

    pub fn normalize_energy(&self, v: f64) -> f64 {
        (v - self.energy_mean) / self.energy_std
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut c = FlatConfig::new();
        c.set("pitch.mean", self.pitch_mean);
        c.set("pitch.std", self.pitch_std);
        c.set("energy.mean", self.energy_mean);
        c.set("energy.std", self.energy_std);
        c.set("train.items", self.train_items);
        c.set("train.phonemes", self.train_phonemes);
        c
    }

    pub fn from_flat(c: &FlatConfig) -> Result<Self> {
        let need = |k: &str| c.get::<f64>(k)?.ok_or_else(|| Error::Format(format!("stats file lacks `{k}`")));
        Ok(Self {
            pitch_mean: need("pitch.mean")?,
            pitch_std: need("pitch.std")?,
            energy_mean: need("energy.mean")?,
            energy_std: need("energy.std")?,
            train_items: need("train.items")? as usize,
            train_phonemes: need("train.phonemes")? as usize,
        })
    }
}

/// Mean of `frames[start..start + d]` per phoneme; zero for `d = 0`.
pub fn phoneme_means(frames: &[f64], durations: &[usize]) -> Vec<f64> {
    let mut start = 0;
    durations
        .iter()
        .map(|&d| {
            let span = &frames[start..start + d];
            start += d;
            if d == 0 {
                0.0
            } else {
                span.iter().sum::<f64>() / d as f64
            }
        })
        .collect()
}

/// A preprocessed corpus on disk.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub root: PathBuf,
    pub entries: Vec<CacheEntry>,
    pub stats: NormStats,
    pub vocab: Vocabulary,
}

impl FeatureCache {
    pub fn file(&self, kind: &str, id: &str) -> PathBuf {
        let ext = match kind {
            "wav" => "wav",
            "prosody" => "tsv",
            _ => "vxfm",
        };
        self.root.join(kind).join(format!("{id}.{ext}"))
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("cache.tsv"))?;
        let mut lines = text.lines();
        if lines.next() != Some(CACHE_HEADER) {
            return Err(Error::Format(format!("{}: bad cache header", dir.display())));
        }
        let entries = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                let bad = || Error::Format(format!("bad cache line `{l}`"));
                if f.len() != 5 {
                    return Err(bad());
                }
                Ok(CacheEntry {
                    utterance_id: f[0].to_string(),
                    speaker_id: f[1].to_string(),
                    split: f[2].parse()?,
                    phonemes: f[3].parse().map_err(|_| bad())?,
                    frames: f[4].parse().map_err(|_| bad())?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            root: dir.to_path_buf(),
            entries,
            stats: NormStats::from_flat(&FlatConfig::load(&dir.join("stats.txt"))?)?,
            vocab: Vocabulary::load(&dir.join("vocab.txt"))?,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CacheEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn mel(&self, id: &str) -> Result<Mat> {
        read_features(&self.file("mel", id))
    }

    pub fn enc_mel(&self, id: &str) -> Result<Mat> {
        read_features(&self.file("enc_mel", id))
    }

    pub fn mfcc(&self, id: &str) -> Result<Mat> {
        read_features(&self.file("mfcc", id))
    }

    pub fn wav(&self, id: &str) -> Result<Waveform> {
        read_wav(&self.file("wav", id))
    }

    pub fn prosody(&self, id: &str) -> Result<PhonemeProsody> {
        let path = self.file("prosody", id);
        let text = std::fs::read_to_string(&path)?;
        let bad = |l: &str| Error::Format(format!("{}: bad prosody line `{l}`", path.display()));
        let mut p = PhonemeProsody { symbols: Vec::new(), durations: Vec::new(), pitch: Vec::new(), energy: Vec::new() };
        for l in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 4 {
                return Err(bad(l));
            }
            p.symbols.push(f[0].to_string());
            p.durations.push(f[1].parse().map_err(|_| bad(l))?);
            p.pitch.push(f[2].parse().map_err(|_| bad(l))?);
            p.energy.push(f[3].parse().map_err(|_| bad(l))?);
        }
        Ok(p)
    }

    /// Phoneme ids and z-scored teacher-forcing targets.
    pub fn targets(&self, id: &str) -> Result<(PhonemeSequence, SynthesisTargets)> {
        let p = self.prosody(id)?;
        let ids = PhonemeSequence::new(self.vocab.encode(&p.symbols)?, self.vocab.len())?;
        let targets = SynthesisTargets {
            durations: p.durations,
            pitch: p.pitch.iter().map(|&v| self.stats.normalize_pitch(v)).collect(),
            energy: p.energy.iter().map(|&v| self.stats.normalize_energy(v)).collect(),
        };
        Ok((ids, targets))
    }
}

struct Processed {
    entry: CacheEntry,
    prosody: PhonemeProsody,
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("missing file {}", path.display())))
    }
}

fn frame_track(manifest: &CorpusManifest, path: &Option<PathBuf>, frames: usize, what: &str, estimate: impl FnOnce() -> Result<Vec<f64>>) -> Result<Vec<f64>> {
    let track = match path {
        Some(p) => {
            let p = manifest.resolve(p);
            require(&p)?;
            read_values(&p)?
        }
        None => estimate()?,
    };
    if track.len() < frames {
        return Err(Error::Data(format!("{what} track has {} frames, durations need {frames}", track.len())));
    }
    Ok(track)
}

fn process_one(manifest: &CorpusManifest, e: &ManifestEntry, cfg: &PreprocessConfig, out: &Path) -> Result<Processed> {
    let wav_path = manifest.resolve(&e.wav);
    let ph_path = manifest.resolve(&e.phonemes);
    let dur_path = manifest.resolve(&e.durations);
    for p in [&wav_path, &ph_path, &dur_path] {
        require(p)?;
    }
    let symbols = read_tokens(&ph_path)?;
    let durations: Vec<usize> = read_values(&dur_path)?;
    if symbols.is_empty() || symbols.len() != durations.len() {
        return Err(Error::Data(format!("{} phonemes but {} durations", symbols.len(), durations.len())));
    }
    let total: usize = durations.iter().sum();
    if total == 0 {
        return Err(Error::Data("durations sum to zero frames".into()));
    }
    let w = resample(&read_wav(&wav_path)?, cfg.mel.sample_rate)?;
    let mel = mel_spectrogram(&w, &cfg.mel)?;
    if mel.frames() < total {
        return Err(Error::Data(format!("audio has {} frames, durations sum to {total}", mel.frames())));
    }
    let pitch = frame_track(manifest, &e.pitch, total, "pitch", || estimate_pitch(&w, &cfg.mel))?;
    let energy = frame_track(manifest, &e.energy, total, "energy", || frame_energy(&w, &cfg.mel))?;
    let w16 = resample(&w, cfg.ecapa.sample_rate)?;
    let enc = mel_spectrogram(&w16, &cfg.ecapa)?;
    let cep = mfcc(&resample(&w, cfg.xvector.sample_rate)?, &cfg.xvector, cfg.n_mfcc)?;

    let prosody = PhonemeProsody {
        pitch: phoneme_means(&pitch, &durations),
        energy: phoneme_means(&energy, &durations),
        symbols,
        durations,
    };
    let id = &e.utterance_id;
    write_wav(&out.join("wav").join(format!("{id}.wav")), &w)?;
    write_features(&out.join("mel").join(format!("{id}.vxfm")), &mel.values.slice(ndarray::s![..total, ..]).to_owned())?;
    write_features(&out.join("enc_mel").join(format!("{id}.vxfm")), &enc.values)?;
    write_features(&out.join("mfcc").join(format!("{id}.vxfm")), &cep.values)?;
    let mut text = format!("{PROSODY_HEADER}\n");
    for i in 0..prosody.symbols.len() {
        let _ = writeln!(text, "{}\t{}\t{}\t{}", prosody.symbols[i], prosody.durations[i], prosody.pitch[i], prosody.energy[i]);
    }
    let dir = out.join("prosody");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{id}.tsv")), text)?;
    Ok(Processed {
        entry: CacheEntry {
            utterance_id: id.clone(),
            speaker_id: e.speaker_id.clone(),
            split: e.split,
            phonemes: prosody.symbols.len(),
            frames: total,
        },
        prosody,
    })
}

/// Extract every manifest entry into `out` on up to `jobs` workers.
///
/// Items that fail are collected; the cache index, vocabulary and
/// statistics are still written for the items that succeeded, and the call
/// returns [`Error::Preprocess`] listing the failures.
pub fn preprocess_corpus(manifest: &CorpusManifest, cfg: &PreprocessConfig, out: &Path, jobs: usize) -> Result<FeatureCache> {
    for c in [&cfg.mel, &cfg.ecapa, &cfg.xvector] {
        c.validate()?;
    }
    std::fs::create_dir_all(out)?;
    let results = crate::parallel::map_all(manifest.entries(), jobs, |e| process_one(manifest, e, cfg, out))?;
    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in manifest.entries().iter().zip(results) {
        match r {
            Ok(p) => done.push(p),
            Err(err) => failures.push((e.utterance_id.clone(), err.to_string())),
        }
    }
    let stats = NormStats::from_prosody(done.iter().filter(|p| p.entry.split == Split::Train).map(|p| &p.prosody));
    let vocab = Vocabulary::from_symbols(done.iter().flat_map(|p| p.prosody.symbols.iter().map(String::as_str)));
    let mut index = format!("{CACHE_HEADER}\n");
    for p in &done {
        let e = &p.entry;
        let _ = writeln!(index, "{}\t{}\t{}\t{}\t{}", e.utterance_id, e.speaker_id, e.split, e.phonemes, e.frames);
    }
    std::fs::write(out.join("cache.tsv"), index)?;
    std::fs::write(out.join("stats.txt"), stats.to_flat().render())?;
    vocab.save(&out.join("vocab.txt"))?;
    if !failures.is_empty() {
        return Err(Error::Preprocess { failures, written: done.len() });
    }
    Ok(FeatureCache { root: out.to_path_buf(), entries: done.into_iter().map(|p| p.entry).collect(), stats, vocab })
}
