use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{FeatureKind, FeatureMap, SpectroConfig, Waveform};
use crate::autograd::Mat;
use crate::error::{Error, Result};

/// Number of centered STFT frames for `len` samples.
pub fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Hann window of `win_size` zero-padded (centered) to `fft_size`.
pub(crate) fn padded_window(cfg: &SpectroConfig) -> Vec<f64> {
    let mut w = vec![0.0; cfg.fft_size];
    let offset = (cfg.fft_size - cfg.win_size) / 2;
    for (i, v) in hann_window(cfg.win_size).into_iter().enumerate() {
        w[offset + i] = v;
    }
    w
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let j = i.rem_euclid(period);
    if j >= n as isize {
        (period - j) as usize
    } else {
        j as usize
    }
}

pub(crate) fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    (0..n + 2 * pad)
        .map(|i| x[reflect_index(i as isize - pad as isize, n)])
        .collect()
}

/// Spectra of `n_frames` uncentered frames of `signal` (frame `t` starts at
/// `t · hop`); the signal must cover the last frame.
pub(crate) fn stft_frames(signal: &[f64], cfg: &SpectroConfig, n_frames: usize) -> Array2<Complex64> {
    let n = cfg.fft_size;
    let window = padded_window(cfg);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut out = Array2::from_elem((n_frames, cfg.n_freqs()), Complex64::new(0.0, 0.0));
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..n_frames {
        let start = t * cfg.hop_size;
        for (k, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(signal[start + k] * window[k], 0.0);
        }
        fft.process(&mut buf);
        for (k, b) in buf.iter().take(cfg.n_freqs()).enumerate() {
            out[[t, k]] = *b;
        }
    }
    out
}

/// Least-squares inverse of [`stft_frames`]: windowed overlap-add divided by
/// the summed squared window. Samples no window touches are zero.
pub(crate) fn istft_frames(spec: &Array2<Complex64>, cfg: &SpectroConfig) -> Vec<f64> {
    let n = cfg.fft_size;
    let frames = spec.nrows();
    let len = (frames - 1) * cfg.hop_size + n;
    let window = padded_window(cfg);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..frames {
        for k in 0..cfg.n_freqs() {
            buf[k] = spec[[t, k]];
        }
        for k in cfg.n_freqs()..n {
            buf[k] = spec[[t, n - k]].conj();
        }
        buf[0].im = 0.0;
        if n.is_multiple_of(2) {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = t * cfg.hop_size;
        for k in 0..n {
            out[start + k] += buf[k].re / n as f64 * window[k];
            norm[start + k] += window[k] * window[k];
        }
    }
    for (o, w) in out.iter_mut().zip(&norm) {
        *o = if *w > 1e-10 { *o / w } else { 0.0 };
    }
    out
}

/// Centered complex STFT with reflect padding of `fft_size / 2` on each side.
pub fn stft(w: &Waveform, cfg: &SpectroConfig) -> Result<Array2<Complex64>> {
    cfg.validate()?;
    if w.is_empty() {
        return Err(Error::Input("empty waveform".into()));
    }
    let padded = reflect_pad(&w.as_f64(), cfg.fft_size / 2);
    Ok(stft_frames(&padded, cfg, frame_count(w.len(), cfg.hop_size)))
}

/// Magnitude STFT, `T × (fft_size/2 + 1)`.
pub fn stft_magnitude(w: &Waveform, cfg: &SpectroConfig) -> Result<FeatureMap> {
    let spec = stft(w, cfg)?;
    FeatureMap::new(spec.mapv(|c| c.norm()), cfg.frame_rate(), FeatureKind::Magnitude)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Area-normalized triangular filters on the HTK mel scale, `n_mels × n_freqs`.
pub fn mel_filterbank(cfg: &SpectroConfig) -> Result<Mat> {
    cfg.validate()?;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
    let mut fb = Mat::zeros((cfg.n_mels, cfg.n_freqs()));
    for m in 0..cfg.n_mels {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (right - left);
        for k in 0..cfg.n_freqs() {
            let f = k as f64 * bin_hz;
            let up = (f - left) / (center - left);
            let down = (right - f) / (right - center);
            fb[[m, k]] = up.min(down).max(0.0) * norm;
        }
    }
    Ok(fb)
}

fn check_rate(w: &Waveform, cfg: &SpectroConfig) -> Result<()> {
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform is {} Hz but the feature config expects {} Hz",
            w.sample_rate(),
            cfg.sample_rate
        )));
    }
    Ok(())
}

/// Natural-log mel spectrogram, `T × n_mels`.
pub fn mel_spectrogram(w: &Waveform, cfg: &SpectroConfig) -> Result<FeatureMap> {
    check_rate(w, cfg)?;
    let mag = stft_magnitude(w, cfg)?;
    let fb = mel_filterbank(cfg)?;
    let mel = mag.values.dot(&fb.t()).mapv(|v| v.max(cfg.log_floor).ln());
    FeatureMap::new(mel, cfg.frame_rate(), FeatureKind::Mel)
}

/// Orthonormal DCT-II basis, `n_coeffs × n_in`.
pub fn dct_matrix(n_coeffs: usize, n_in: usize) -> Mat {
    Mat::from_shape_fn((n_coeffs, n_in), |(k, m)| {
        let scale = if k == 0 { (1.0 / n_in as f64).sqrt() } else { (2.0 / n_in as f64).sqrt() };
        scale * (PI * k as f64 * (2 * m + 1) as f64 / (2 * n_in) as f64).cos()
    })
}

/// First `n_coeffs` orthonormal DCT-II coefficients of each log-mel frame.
pub fn mfcc_from_log_mel(log_mel: &FeatureMap, n_coeffs: usize) -> Result<FeatureMap> {
    let n_mels = log_mel.channels();
    if n_coeffs == 0 || n_coeffs > n_mels {
        return Err(Error::Config(format!(
            "n_coeffs must be in 1..={n_mels}, got {n_coeffs}"
        )));
    }
    let dct = dct_matrix(n_coeffs, n_mels);
    FeatureMap::new(log_mel.values.dot(&dct.t()), log_mel.frame_rate, FeatureKind::Mfcc)
}

pub fn mfcc(w: &Waveform, cfg: &SpectroConfig, n_coeffs: usize) -> Result<FeatureMap> {
    if n_coeffs > cfg.n_mels {
        return Err(Error::Config(format!(
            "n_coeffs ({n_coeffs}) exceeds n_mels ({})",
            cfg.n_mels
        )));
    }
    mfcc_from_log_mel(&mel_spectrogram(w, cfg)?, n_coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_cfg() -> SpectroConfig {
        SpectroConfig {
            sample_rate: 8000,
            fft_size: 64,
            hop_size: 16,
            win_size: 48,
            n_mels: 12,
            fmin: 0.0,
            fmax: 4000.0,
            log_floor: 1e-10,
        }
    }

    /// Direct O(N²) DFT, one-sided.
    fn naive_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                x.iter().enumerate().fold((0.0, 0.0), |(re, im), (i, &v)| {
                    let a = -2.0 * PI * (k * i) as f64 / n as f64;
                    (re + v * a.cos(), im + v * a.sin())
                })
            })
            .collect()
    }

    #[test]
    fn zero_waveform_has_zero_magnitude() {
        let w = Waveform::new(vec![0.0; 200], 8000).unwrap();
        let m = stft_magnitude(&w, &small_cfg()).unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_waveform_is_rejected() {
        assert!(matches!(Waveform::new(vec![], 8000), Err(Error::Input(_))));
    }

    #[test]
    fn impulse_gives_flat_spectrum_equal_to_window_value() {
        let cfg = small_cfg();
        let mut samples = vec![0.0f32; 400];
        let pos = 200;
        samples[pos] = 1.0;
        let w = Waveform::new(samples, 8000).unwrap();
        let m = stft_magnitude(&w, &cfg).unwrap();
        let window = padded_window(&cfg);
        let pad = cfg.fft_size / 2;
        for t in 0..m.frames() {
            let start = t * cfg.hop_size;
            let padded_pos = pos + pad;
            if padded_pos < start || padded_pos >= start + cfg.fft_size {
                continue;
            }
            let expected = window[padded_pos - start];
            for k in 0..cfg.n_freqs() {
                assert!((m.values[[t, k]] - expected).abs() < 1e-12, "frame {t} bin {k}");
            }
        }
    }

    #[test]
    fn stft_matches_direct_dft_and_parseval() {
        let cfg = small_cfg();
        let samples: Vec<f32> = (0..300).map(|i| (i as f32 * 0.37).sin() * 0.5 + (i % 7) as f32 * 0.03).collect();
        let w = Waveform::new(samples, 8000).unwrap();
        let spec = stft(&w, &cfg).unwrap();
        let padded = reflect_pad(&w.as_f64(), cfg.fft_size / 2);
        let window = padded_window(&cfg);
        let t = 5;
        let frame: Vec<f64> = (0..cfg.fft_size)
            .map(|k| padded[t * cfg.hop_size + k] * window[k])
            .collect();
        let oracle = naive_dft(&frame);
        for (k, (re, im)) in oracle.iter().enumerate() {
            assert!((spec[[t, k]].re - re).abs() < 1e-9);
            assert!((spec[[t, k]].im - im).abs() < 1e-9);
        }
        let n = cfg.fft_size;
        let one_sided: Vec<f64> = (0..cfg.n_freqs()).map(|k| spec[[t, k]].norm_sqr()).collect();
        let full: f64 = one_sided[0] + one_sided[n / 2] + 2.0 * one_sided[1..n / 2].iter().sum::<f64>();
        let energy: f64 = frame.iter().map(|v| v * v).sum();
        assert!((full - n as f64 * energy).abs() < 1e-9 * full.max(1.0));
    }

    #[test]
    fn silence_mel_is_log_floor() {
        let cfg = small_cfg();
        let w = Waveform::new(vec![0.0; 100], 8000).unwrap();
        let mel = mel_spectrogram(&w, &cfg).unwrap();
        assert!(mel.values.iter().all(|&v| (v - cfg.log_floor.ln()).abs() < 1e-12));
    }

    #[test]
    fn sample_rate_mismatch_is_config_error() {
        let w = Waveform::new(vec![0.0; 100], 16000).unwrap();
        assert!(matches!(mel_spectrogram(&w, &small_cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn filterbank_shape_and_coverage() {
        for cfg in [SpectroConfig::synthesizer(), SpectroConfig::ecapa(), SpectroConfig::xvector()] {
            let fb = mel_filterbank(&cfg).unwrap();
            assert_eq!(fb.dim(), (cfg.n_mels, cfg.n_freqs()));
            assert!(fb.iter().all(|&v| v >= 0.0));
            for row in fb.rows() {
                assert!(row.sum() > 0.0, "empty triangle");
            }
            let bin_hz = cfg.sample_rate as f64 / cfg.fft_size as f64;
            for k in 0..cfg.n_freqs() {
                let f = k as f64 * bin_hz;
                if f > cfg.fmin && f < cfg.fmax {
                    assert!(fb.column(k).iter().any(|&v| v > 0.0), "bin {k} ({f} Hz) uncovered");
                }
            }
        }
    }

    #[test]
    fn white_noise_exceeds_silence_in_every_band() {
        use rand::{Rng, SeedableRng};
        let cfg = SpectroConfig::ecapa();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noise: Vec<f32> = (0..8000).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let noisy = mel_spectrogram(&Waveform::new(noise, 16000).unwrap(), &cfg).unwrap();
        let silent = mel_spectrogram(&Waveform::new(vec![0.0; 8000], 16000).unwrap(), &cfg).unwrap();
        let t = noisy.frames() / 2;
        for m in 0..cfg.n_mels {
            assert!(noisy.values[[t, m]] > silent.values[[t, m]]);
        }
    }

    #[test]
    fn tone_at_band_center_peaks_in_that_band() {
        let cfg = SpectroConfig::synthesizer();
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        for band in [20usize, 40, 60] {
            let center = mel_to_hz(lo + (hi - lo) * (band + 1) as f64 / (cfg.n_mels + 1) as f64);
            let samples: Vec<f32> = (0..22050)
                .map(|i| (2.0 * PI * center * i as f64 / 22050.0).sin() as f32 * 0.5)
                .collect();
            let mel = mel_spectrogram(&Waveform::new(samples, 22050).unwrap(), &cfg).unwrap();
            for t in 10..mel.frames() - 10 {
                let row = mel.values.row(t);
                let argmax = (0..cfg.n_mels).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(argmax, band, "frame {t}");
            }
        }
    }

    #[test]
    fn dct_of_constant_has_only_dc_term() {
        let c = 2.5;
        let fm = FeatureMap::new(Mat::from_elem((3, 20), c), 100.0, FeatureKind::Mel).unwrap();
        let out = mfcc_from_log_mel(&fm, 13).unwrap();
        for row in out.values.rows() {
            assert!((row[0] - c * 20f64.sqrt()).abs() < 1e-9);
            assert!(row.iter().skip(1).all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn full_dct_round_trips() {
        let n = 30;
        let dct = dct_matrix(n, n);
        let x = Mat::from_shape_fn((1, n), |(_, j)| (j as f64 * 0.7).sin() - 0.2 * j as f64);
        let coeffs = x.dot(&dct.t());
        // orthonormal: inverse is the transpose
        let back = coeffs.dot(&dct);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mfcc_rejects_too_many_coefficients() {
        let w = Waveform::new(vec![0.0; 800], 16000).unwrap();
        assert!(matches!(mfcc(&w, &SpectroConfig::xvector(), 31), Err(Error::Config(_))));
    }

    #[test]
    fn silence_mfcc_is_identical_per_frame() {
        let w = Waveform::new(vec![0.0; 1600], 16000).unwrap();
        let m = mfcc(&w, &SpectroConfig::xvector(), 30).unwrap();
        let first = m.values.row(0).to_owned();
        assert!(m.values.rows().into_iter().all(|r| r == first));
    }

    #[test]
    fn features_are_deterministic() {
        let samples: Vec<f32> = (0..4000).map(|i| ((i * 31 % 97) as f32 / 97.0) - 0.5).collect();
        let w = Waveform::new(samples, 16000).unwrap();
        let cfg = SpectroConfig::ecapa();
        assert_eq!(mel_spectrogram(&w, &cfg).unwrap(), mel_spectrogram(&w, &cfg).unwrap());
        assert_eq!(mfcc(&w, &SpectroConfig::xvector(), 30).unwrap(), mfcc(&w, &SpectroConfig::xvector(), 30).unwrap());
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 1usize..=160) {
            let cfg = small_cfg();
            let samples: Vec<f32> = (0..len).map(|i| (i as f32 * 0.1).cos()).collect();
            let m = stft_magnitude(&Waveform::new(samples, 8000).unwrap(), &cfg).unwrap();
            prop_assert_eq!(m.frames(), 1 + len / cfg.hop_size);
            prop_assert!(m.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}
