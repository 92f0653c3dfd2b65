use super::spectrum::{frame_count, stft};
use super::{SpectroConfig, Waveform};
use crate::error::Result;

const F0_MIN: f64 = 50.0;
const F0_MAX: f64 = 500.0;
const VOICING_THRESHOLD: f64 = 0.45;

/// Per-frame energy: L2 norm of each STFT magnitude frame.
pub fn frame_energy(w: &Waveform, cfg: &SpectroConfig) -> Result<Vec<f64>> {
    let spec = stft(w, cfg)?;
    Ok(spec
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt())
        .collect())
}

/// Per-frame F0 in Hz by normalized autocorrelation; unvoiced frames are 0.
///
/// Frames are centered on `t · hop`, matching [`super::stft`]'s frame grid.
pub fn estimate_pitch(w: &Waveform, cfg: &SpectroConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let x = w.as_f64();
    let rate = w.sample_rate() as f64;
    let min_lag = (rate / F0_MAX).floor().max(1.0) as usize;
    let max_lag = (rate / F0_MIN).ceil() as usize;
    let len = cfg.win_size.max(2 * max_lag + 1);
    let frames = frame_count(x.len(), cfg.hop_size);
    let mut frame = vec![0.0; len];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let start = (t * cfg.hop_size) as isize - (len / 2) as isize;
        for (k, f) in frame.iter_mut().enumerate() {
            let i = start + k as isize;
            *f = if i >= 0 && (i as usize) < x.len() { x[i as usize] } else { 0.0 };
        }
        out.push(frame_f0(&frame, rate, min_lag, max_lag));
    }
    Ok(out)
}

fn frame_f0(frame: &[f64], rate: f64, min_lag: usize, max_lag: usize) -> f64 {
    let energy: f64 = frame.iter().map(|v| v * v).sum();
    if energy < 1e-8 {
        return 0.0;
    }
    let max_lag = max_lag.min(frame.len() - 2);
    let corr: Vec<f64> = (min_lag..=max_lag + 1)
        .map(|lag| {
            let (a, b) = (&frame[..frame.len() - lag], &frame[lag..]);
            let num: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let den = (a.iter().map(|v| v * v).sum::<f64>() * b.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if den > 0.0 {
                num / den
            } else {
                0.0
            }
        })
        .collect();
    let best = corr[..corr.len() - 1].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best < VOICING_THRESHOLD {
        return 0.0;
    }
    // smallest lag close to the global peak guards against sub-octave picks
    let mut idx = 0;
    for i in 1..corr.len() - 1 {
        if corr[i] >= 0.9 * best && corr[i] >= corr[i - 1] && corr[i] >= corr[i + 1] {
            idx = i;
            break;
        }
    }
    let peak = if idx == 0 {
        corr[..corr.len() - 1]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    } else {
        idx
    };
    let mut lag = (peak + min_lag) as f64;
    if peak > 0 && peak + 1 < corr.len() {
        let (l, c, r) = (corr[peak - 1], corr[peak], corr[peak + 1]);
        let denom = l - 2.0 * c + r;
        if denom.abs() > 1e-12 {
            lag += (0.5 * (l - r) / denom).clamp(-0.5, 0.5);
        }
    }
    rate / lag
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn harmonic_tone_pitch_is_recovered() {
        let cfg = SpectroConfig::synthesizer();
        let f0 = 180.0;
        let s: Vec<f32> = (0..11025)
            .map(|i| {
                let t = i as f64 / 22050.0;
                (0.5 * (2.0 * PI * f0 * t).sin() + 0.3 * (4.0 * PI * f0 * t).sin()) as f32
            })
            .collect();
        let w = Waveform::new(s, 22050).unwrap();
        let pitch = estimate_pitch(&w, &cfg).unwrap();
        assert_eq!(pitch.len(), frame_count(11025, cfg.hop_size));
        for p in &pitch[4..pitch.len() - 4] {
            assert!((p - f0).abs() < 3.0, "{p}");
        }
    }

    #[test]
    fn silence_is_unvoiced_and_zero_energy() {
        let cfg = SpectroConfig::synthesizer();
        let w = Waveform::new(vec![0.0; 5000], 22050).unwrap();
        assert!(estimate_pitch(&w, &cfg).unwrap().iter().all(|&p| p == 0.0));
        assert!(frame_energy(&w, &cfg).unwrap().iter().all(|&e| e == 0.0));
    }
}
