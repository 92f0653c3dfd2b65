//! Deterministic synthetic multi-speaker corpus.
//!
//! A speaker is a fundamental frequency, a vocal-tract scale applied to the
//! phoneme formants, a spectral band emphasis, a spectral tilt and a breath
//! noise level. Voiced phonemes are harmonic series shaped by formant
//! envelopes; unvoiced phonemes are spectrally shaped noise. Segments are
//! exactly `duration · hop` samples long and cross-faded at the boundaries.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::manifest::{CorpusManifest, ManifestEntry, Split};
use crate::dsp::{SpectroConfig, Waveform};
use crate::error::{Error, Result};
use crate::io::{write_tokens, write_wav};

pub const TOY_SAMPLE_RATE: u32 = 22050;
pub const TOY_HOP: usize = 256;
pub const MIN_PHONEMES: usize = 8;
pub const MAX_PHONEMES: usize = 14;
pub const MIN_DURATION: usize = 3;
pub const MAX_DURATION: usize = 10;
const F0_LOW: f64 = 90.0;
const F0_HIGH: f64 = 260.0;
const BAND_LOW: f64 = 500.0;
const BAND_HIGH: f64 = 6000.0;
/// Linear gain of the band emphasis peak over the flat response.
pub const BAND_GAIN: f64 = 3.0;
const BAND_WIDTH_LOG: f64 = 0.2;
const HARMONIC_CEILING: f64 = 7800.0;
const RAMP: usize = 64;
const LEVEL: f64 = 0.1;

struct PhonemeDef {
    symbol: &'static str,
    /// (center Hz, bandwidth Hz, gain)
    formants: [(f64, f64, f64); 3],
    voiced: bool,
    level: f64,
}

const INVENTORY: [PhonemeDef; 10] = [
    PhonemeDef { symbol: "a", formants: [(730.0, 90.0, 1.0), (1090.0, 110.0, 0.5), (2440.0, 170.0, 0.25)], voiced: true, level: 1.0 },
    PhonemeDef { symbol: "e", formants: [(530.0, 60.0, 1.0), (1840.0, 100.0, 0.6), (2480.0, 120.0, 0.3)], voiced: true, level: 0.9 },
    PhonemeDef { symbol: "i", formants: [(270.0, 60.0, 1.0), (2290.0, 100.0, 0.5), (3010.0, 150.0, 0.3)], voiced: true, level: 0.8 },
    PhonemeDef { symbol: "o", formants: [(570.0, 70.0, 1.0), (840.0, 80.0, 0.6), (2410.0, 170.0, 0.2)], voiced: true, level: 0.9 },
    PhonemeDef { symbol: "u", formants: [(300.0, 60.0, 1.0), (870.0, 80.0, 0.4), (2240.0, 150.0, 0.15)], voiced: true, level: 0.8 },
    PhonemeDef { symbol: "m", formants: [(250.0, 60.0, 1.0), (1100.0, 200.0, 0.15), (2400.0, 300.0, 0.05)], voiced: true, level: 0.5 },
    PhonemeDef { symbol: "n", formants: [(250.0, 60.0, 1.0), (1500.0, 200.0, 0.15), (2600.0, 300.0, 0.08)], voiced: true, level: 0.5 },
    PhonemeDef { symbol: "l", formants: [(360.0, 60.0, 1.0), (1300.0, 150.0, 0.4), (2900.0, 200.0, 0.2)], voiced: true, level: 0.7 },
    PhonemeDef { symbol: "s", formants: [(5500.0, 1500.0, 1.0), (7500.0, 1500.0, 0.7), (3000.0, 800.0, 0.1)], voiced: false, level: 0.4 },
    PhonemeDef { symbol: "sh", formants: [(2800.0, 600.0, 1.0), (4500.0, 1500.0, 0.6), (6500.0, 1500.0, 0.3)], voiced: false, level: 0.35 },
];

/// Phoneme symbols of the toy inventory.
pub fn toy_inventory() -> Vec<&'static str> {
    INVENTORY.iter().map(|p| p.symbol).collect()
}

/// Voice parameters of one synthetic speaker.
#[derive(Clone, Debug, PartialEq)]
pub struct ToySpeaker {
    pub id: String,
    pub f0: f64,
    pub tract_scale: f64,
    /// Center of the band emphasis in Hz.
    pub band_center: f64,
    /// Exponent of the `(f / 1 kHz)^tilt` spectral tilt.
    pub tilt: f64,
    /// Breath noise level relative to the harmonic level.
    pub breath: f64,
}

impl ToySpeaker {
    /// Speaker-specific gain at frequency `f`.
    pub fn response(&self, f: f64) -> f64 {
        let f = f.max(20.0);
        let z = (f / self.band_center).ln() / BAND_WIDTH_LOG;
        (1.0 + BAND_GAIN * (-0.5 * z * z).exp()) * (f / 1000.0).powf(self.tilt)
    }
}

pub fn speaker_id(index: usize) -> String {
    format!("spk{index:02}")
}

pub fn utterance_id(speaker: usize, utt: usize) -> String {
    format!("{}_{utt:03}", speaker_id(speaker))
}

fn spread(rank: usize, n: usize, lo: f64, hi: f64) -> f64 {
    if n <= 1 {
        (lo * hi).sqrt()
    } else {
        lo * (hi / lo).powf(rank as f64 / (n - 1) as f64)
    }
}

/// Speaker voices: F0 and band centers are log-spaced over fixed ranges and
/// assigned through independent seeded permutations.
pub fn toy_speakers(n_speakers: usize, seed: u64) -> Vec<ToySpeaker> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70c1_5eed);
    let mut f0_rank: Vec<usize> = (0..n_speakers).collect();
    let mut band_rank = f0_rank.clone();
    f0_rank.shuffle(&mut rng);
    band_rank.shuffle(&mut rng);
    (0..n_speakers)
        .map(|s| ToySpeaker {
            id: speaker_id(s),
            f0: spread(f0_rank[s], n_speakers, F0_LOW, F0_HIGH),
            tract_scale: rng.gen_range(0.85..1.15),
            band_center: spread(band_rank[s], n_speakers, BAND_LOW, BAND_HIGH),
            tilt: rng.gen_range(-0.3..0.3),
            breath: rng.gen_range(0.02..0.08),
        })
        .collect()
}

fn formant_envelope(p: &PhonemeDef, scale: f64, f: f64) -> f64 {
    p.formants
        .iter()
        .map(|&(c, bw, g)| {
            let z = (f - c * scale) / (bw * scale);
            g * (-0.5 * z * z).exp()
        })
        .sum::<f64>()
        + 0.02
}

fn phoneme_def(symbol: &str) -> Result<&'static PhonemeDef> {
    INVENTORY
        .iter()
        .find(|p| p.symbol == symbol)
        .ok_or_else(|| Error::Input(format!("`{symbol}` is not a toy phoneme")))
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// White noise filtered by `gain(f)` in the frequency domain, RMS `level`.
fn shaped_noise(len: usize, gain: impl Fn(f64) -> f64, level: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..len).map(|_| Complex64::new(rng.sample(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut buf);
    let rate = TOY_SAMPLE_RATE as f64;
    for (k, b) in buf.iter_mut().enumerate() {
        let bin = k.min(len - k);
        *b *= gain(bin as f64 * rate / len as f64);
    }
    planner.plan_fft_inverse(len).process(&mut buf);
    let out: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let r = rms(&out);
    if r > 0.0 {
        out.iter().map(|v| v * level / r).collect()
    } else {
        out
    }
}

/// Render one utterance of exactly `Σ durations · hop` samples.
pub fn render_utterance(speaker: &ToySpeaker, symbols: &[&str], durations: &[usize], rng: &mut ChaCha8Rng) -> Result<Waveform> {
    if symbols.is_empty() || symbols.len() != durations.len() || durations.contains(&0) {
        return Err(Error::Input("toy utterance needs one positive duration per phoneme".into()));
    }
    let defs = symbols.iter().map(|s| phoneme_def(s)).collect::<Result<Vec<_>>>()?;
    let rate = TOY_SAMPLE_RATE as f64;
    let n: usize = durations.iter().sum::<usize>() * TOY_HOP;
    let utt_factor = rng.gen_range(0.94..1.06);
    let f0_at = |i: usize| {
        let t = i as f64 / rate;
        speaker.f0 * utt_factor * (1.05 - 0.1 * i as f64 / n as f64) * (1.0 + 0.02 * (2.0 * PI * 3.0 * t).sin())
    };
    let mut phase = Vec::with_capacity(n);
    let mut acc = 0.0;
    for i in 0..n {
        phase.push(acc);
        acc += 2.0 * PI * f0_at(i) / rate;
    }
    let mut out = vec![0.0; n];
    let mut start = 0;
    for (j, (def, &d)) in defs.iter().zip(durations).enumerate() {
        let end = start + d * TOY_HOP;
        let lo = if j == 0 { 0 } else { start - RAMP };
        let hi = if j + 1 == defs.len() { n } else { end + RAMP };
        let window = |i: usize| {
            let rise = if j == 0 { 1.0 } else { ((i + RAMP) as f64 - start as f64) / (2 * RAMP) as f64 };
            let fall = if j + 1 == defs.len() { 1.0 } else { ((end + RAMP) as f64 - i as f64) / (2 * RAMP) as f64 };
            rise.min(fall).clamp(0.0, 1.0)
        };
        let level = LEVEL * def.level;
        let shape = |f: f64| formant_envelope(def, speaker.tract_scale, f) * speaker.response(f);
        let mut seg = vec![0.0; hi - lo];
        if def.voiced {
            let f0_mid = f0_at((start + end) / 2);
            let amps: Vec<f64> =
                (1..).map(|k| k as f64 * f0_mid).take_while(|&f| f < HARMONIC_CEILING).map(shape).collect();
            let norm = (amps.iter().map(|a| a * a).sum::<f64>() / 2.0).sqrt();
            for (s, i) in seg.iter_mut().zip(lo..hi) {
                *s = amps.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * phase[i]).sin()).sum::<f64>() * level
                    / norm;
            }
            let breath = shaped_noise(hi - lo, |f| speaker.response(f), level * speaker.breath, rng);
            seg.iter_mut().zip(&breath).for_each(|(s, b)| *s += b);
        } else {
            seg = shaped_noise(hi - lo, shape, level, rng);
        }
        for (s, i) in seg.iter().zip(lo..hi) {
            out[i] += s * window(i);
        }
        start = end;
    }
    Waveform::new(out.iter().map(|&v| v.clamp(-0.99, 0.99) as f32).collect(), TOY_SAMPLE_RATE)
}

/// Seeded phoneme sequence with no immediate repeats, and its durations.
pub fn random_script(rng: &mut ChaCha8Rng) -> (Vec<&'static str>, Vec<usize>) {
    let len = rng.gen_range(MIN_PHONEMES..=MAX_PHONEMES);
    let mut symbols: Vec<&'static str> = Vec::with_capacity(len);
    while symbols.len() < len {
        let s = INVENTORY[rng.gen_range(0..INVENTORY.len())].symbol;
        if symbols.last() != Some(&s) {
            symbols.push(s);
        }
    }
    let durations = (0..len).map(|_| rng.gen_range(MIN_DURATION..=MAX_DURATION)).collect();
    (symbols, durations)
}

fn utterance_rng(seed: u64, speaker: usize, utt: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((speaker as u64) << 32) | utt as u64);
    rng
}

/// Write `n_speakers × n_utts` utterances under `out_dir/corpus/` and the
/// manifest to `out_dir/manifest.tsv`. Every entry is tagged `train`.
pub fn make_toy_corpus(n_speakers: usize, n_utts: usize, seed: u64, out_dir: &Path, jobs: usize) -> Result<CorpusManifest> {
    if n_speakers == 0 || n_utts == 0 {
        return Err(Error::Config("toy corpus needs at least one speaker and one utterance".into()));
    }
    debug_assert_eq!(SpectroConfig::synthesizer().hop_size, TOY_HOP);
    let speakers = toy_speakers(n_speakers, seed);
    let jobs_list: Vec<(usize, usize)> = (0..n_speakers).flat_map(|s| (0..n_utts).map(move |u| (s, u))).collect();
    let rel = |kind: &str, id: &str, ext: &str| PathBuf::from(format!("corpus/{kind}/{id}.{ext}"));
    let entries = crate::parallel::map(&jobs_list, jobs, |&(s, u)| {
        let id = utterance_id(s, u);
        let mut rng = utterance_rng(seed, s, u);
        let (symbols, durations) = random_script(&mut rng);
        let wav = render_utterance(&speakers[s], &symbols, &durations, &mut rng)?;
        let entry = ManifestEntry {
            utterance_id: id.clone(),
            speaker_id: speakers[s].id.clone(),
            wav: rel("wav", &id, "wav"),
            phonemes: rel("phonemes", &id, "txt"),
            durations: rel("durations", &id, "txt"),
            pitch: None,
            energy: None,
            split: Split::Train,
        };
        write_wav(&out_dir.join(&entry.wav), &wav)?;
        write_tokens(&out_dir.join(&entry.phonemes), &symbols)?;
        write_tokens(&out_dir.join(&entry.durations), &durations)?;
        Ok(entry)
    })?;
    let manifest = CorpusManifest::new(out_dir, entries)?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
