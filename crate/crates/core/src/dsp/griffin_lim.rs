use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;

use super::spectrum::{istft_frames, mel_filterbank, stft_frames};
use super::{FeatureKind, FeatureMap, SpectroConfig, Waveform};
use crate::autograd::Mat;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseInit {
    /// Magnitude-only start: every phase is zero.
    Zero,
    /// Uniform random phases from a seeded generator.
    Random(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GriffinLimConfig {
    pub iters: usize,
    pub init: PhaseInit,
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        Self { iters: 60, init: PhaseInit::Random(0) }
    }
}

pub struct GriffinLimOutput {
    pub waveform: Waveform,
    /// `‖|STFT(x)| − S‖ / ‖S‖` (two-sided spectral norm) after each iteration (index 0 is the initial estimate).
    pub spectral_convergence: Vec<f64>,
}

/// Linear magnitudes from a log-mel frame matrix via the filterbank pseudo-inverse.
fn mel_to_magnitude(mel: &FeatureMap, cfg: &SpectroConfig) -> Result<Mat> {
    let fb = mel_filterbank(cfg)?;
    let (m, f) = fb.dim();
    let fb_na = DMatrix::from_fn(m, f, |i, j| fb[[i, j]]);
    let pinv = fb_na
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::Model(format!("mel pseudo-inverse failed: {e}")))?;
    let pinv = Mat::from_shape_fn((f, m), |(i, j)| pinv[(i, j)]);
    let linear_mel = mel.values.mapv(f64::exp);
    Ok(linear_mel.dot(&pinv.t()).mapv(|v| v.max(0.0)))
}

/// Two-sided weight of one-sided bin `k`: interior bins stand for a
/// conjugate pair.
fn bin_weight(k: usize, n_freqs: usize) -> f64 {
    if k == 0 || k + 1 == n_freqs {
        1.0
    } else {
        2.0
    }
}

fn weighted_norm(m: &Mat) -> f64 {
    let nf = m.ncols();
    m.indexed_iter()
        .map(|((_, k), v)| bin_weight(k, nf) * v * v)
        .sum::<f64>()
        .sqrt()
}

fn convergence(spec: &Array2<Complex64>, target: &Mat, target_norm: f64) -> f64 {
    let nf = target.ncols();
    let mut acc = 0.0;
    for ((idx, c), s) in spec.indexed_iter().zip(target.iter()) {
        let d = c.norm() - s;
        acc += bin_weight(idx.1, nf) * d * d;
    }
    acc.sqrt() / target_norm.max(1e-300)
}

/// Griffin-Lim reconstruction with the default phase initialization.
pub fn griffin_lim(mel: &FeatureMap, cfg: &SpectroConfig, iters: usize) -> Result<Waveform> {
    let gl = GriffinLimConfig { iters, ..GriffinLimConfig::default() };
    Ok(griffin_lim_traced(mel, cfg, &gl)?.waveform)
}

/// Griffin-Lim from a log-mel spectrogram, reporting the spectral convergence
/// of each iterate.
///
/// Iterations run on the padded signal domain, where the windowed
/// overlap-add inverse is an orthogonal projection onto consistent spectra,
/// so the reported error never increases.
pub fn griffin_lim_traced(
    mel: &FeatureMap,
    cfg: &SpectroConfig,
    gl: &GriffinLimConfig,
) -> Result<GriffinLimOutput> {
    if mel.kind != FeatureKind::Mel {
        return Err(Error::Input("griffin_lim expects a mel feature map".into()));
    }
    if mel.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("mel spectrogram has non-finite entries".into()));
    }
    if mel.channels() != cfg.n_mels {
        return Err(Error::Config(format!(
            "mel has {} bands, config expects {}",
            mel.channels(),
            cfg.n_mels
        )));
    }
    let target = mel_to_magnitude(mel, cfg)?;
    let target_norm = weighted_norm(&target);
    let frames = target.nrows();

    let mut spec = match gl.init {
        PhaseInit::Zero => target.mapv(|m| Complex64::new(m, 0.0)),
        PhaseInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            target.mapv(|m| Complex64::from_polar(m, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)))
        }
    };
    let mut signal = istft_frames(&spec, cfg);
    let mut trace = Vec::with_capacity(gl.iters + 1);
    let mut rebuilt = stft_frames(&signal, cfg, frames);
    trace.push(convergence(&rebuilt, &target, target_norm));
    for _ in 0..gl.iters {
        for ((s, r), m) in spec.iter_mut().zip(rebuilt.iter()).zip(target.iter()) {
            let norm = r.norm();
            *s = if norm > 1e-12 { r * (*m / norm) } else { Complex64::new(*m, 0.0) };
        }
        signal = istft_frames(&spec, cfg);
        rebuilt = stft_frames(&signal, cfg, frames);
        trace.push(convergence(&rebuilt, &target, target_norm));
    }

    let pad = cfg.fft_size / 2;
    let len = ((frames - 1) * cfg.hop_size).max(1);
    let samples: Vec<f32> = (0..len)
        .map(|i| signal.get(pad + i).copied().unwrap_or(0.0) as f32)
        .collect();
    let waveform = Waveform::new(samples, cfg.sample_rate)?.normalized();
    Ok(GriffinLimOutput { waveform, spectral_convergence: trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel_spectrogram;
    use std::f64::consts::PI;

    fn tone(freq: f64, len: usize) -> Waveform {
        let s = (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / 22050.0).sin() as f32 * 0.5)
            .collect();
        Waveform::new(s, 22050).unwrap()
    }

    /// Peak of a direct DFT scan over the middle of the signal.
    fn dominant_frequency(w: &Waveform) -> f64 {
        let x = w.samples();
        let mid = &x[x.len() / 4..3 * x.len() / 4];
        let rate = w.sample_rate() as f64;
        let mut best = (0.0, 0.0);
        let mut f = 100.0;
        while f < 2000.0 {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in mid.iter().enumerate() {
                let a = 2.0 * PI * f * i as f64 / rate;
                re += v as f64 * a.cos();
                im -= v as f64 * a.sin();
            }
            if re * re + im * im > best.0 {
                best = (re * re + im * im, f);
            }
            f += 1.0;
        }
        best.1
    }

    #[test]
    fn reconstructs_tone_frequency() {
        let cfg = SpectroConfig::synthesizer();
        let mel = mel_spectrogram(&tone(440.0, 11025), &cfg).unwrap();
        let out = griffin_lim(&mel, &cfg, 60).unwrap();
        let peak = dominant_frequency(&out);
        let bin = 22050.0 / cfg.fft_size as f64;
        assert!((peak - 440.0).abs() <= bin, "peak at {peak} Hz");
    }

    #[test]
    fn zero_iterations_still_finite() {
        let cfg = SpectroConfig::synthesizer();
        let mel = mel_spectrogram(&tone(300.0, 4000), &cfg).unwrap();
        for init in [PhaseInit::Zero, PhaseInit::Random(7)] {
            let out = griffin_lim_traced(&mel, &cfg, &GriffinLimConfig { iters: 0, init }).unwrap();
            assert!(out.waveform.samples().iter().all(|v| v.is_finite()));
            assert_eq!(out.spectral_convergence.len(), 1);
        }
    }

    #[test]
    fn spectral_convergence_never_increases() {
        let cfg = SpectroConfig::synthesizer();
        let s: Vec<f32> = (0..8000)
            .map(|i| {
                let t = i as f64 / 22050.0;
                ((2.0 * PI * 220.0 * t).sin() * 0.4 + (2.0 * PI * 1337.0 * t).sin() * 0.2) as f32
            })
            .collect();
        let mel = mel_spectrogram(&Waveform::new(s, 22050).unwrap(), &cfg).unwrap();
        let out = griffin_lim_traced(&mel, &cfg, &GriffinLimConfig { iters: 30, init: PhaseInit::Random(1) }).unwrap();
        for pair in out.spectral_convergence.windows(2) {
            assert!(pair[1] <= pair[0] * (1.0 + 1e-9), "{} -> {}", pair[0], pair[1]);
        }
        assert!(out.spectral_convergence.last().unwrap() < &out.spectral_convergence[0]);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = SpectroConfig::synthesizer();
        let mel = mel_spectrogram(&tone(500.0, 3000), &cfg).unwrap();
        let a = griffin_lim(&mel, &cfg, 5).unwrap();
        let b = griffin_lim(&mel, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_non_mel_and_non_finite_input() {
        let cfg = SpectroConfig::synthesizer();
        let mut mel = mel_spectrogram(&tone(500.0, 3000), &cfg).unwrap();
        mel.kind = FeatureKind::Mfcc;
        assert!(matches!(griffin_lim(&mel, &cfg, 1), Err(Error::Input(_))));
        mel.kind = FeatureKind::Mel;
        mel.values[[0, 0]] = f64::NAN;
        assert!(matches!(griffin_lim(&mel, &cfg, 1), Err(Error::Input(_))));
    }
}
