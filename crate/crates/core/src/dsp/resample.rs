use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the sinc kernel on each side of the output instant.
const ZERO_CROSSINGS: f64 = 16.0;

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Band-limited resampling with a Hann-windowed sinc kernel.
///
/// The output has `round(len · target / source)` samples; equal rates return
/// the input unchanged.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::Config("target sample rate must be positive".into()));
    }
    let source_rate = w.sample_rate();
    if source_rate == target_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / source_rate as f64;
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let input = w.samples();
    let n_in = input.len() as isize;
    let n_out = ((input.len() as f64 * ratio).round() as usize).max(1);
    let samples = (0..n_out)
        .map(|j| {
            let t = j as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            for i in lo..=hi {
                let x = t - i as f64;
                let window = 0.5 * (1.0 + (PI * x / half_width).cos());
                acc += input[i as usize] as f64 * cutoff * sinc(cutoff * x) * window;
            }
            acc as f32
        })
        .collect();
    Waveform::new(samples, target_rate)
}
