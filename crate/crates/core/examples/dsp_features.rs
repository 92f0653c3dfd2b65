//! Feature extraction and Griffin-Lim reconstruction on a synthetic tone.

use voxclone::dsp::{estimate_pitch, frame_energy, griffin_lim, mel_spectrogram, mfcc, resample, SpectroConfig, Waveform};

fn main() -> voxclone::Result<()> {
    let cfg = SpectroConfig::synthesizer();
    let rate = cfg.sample_rate as f64;
    let samples: Vec<f32> = (0..cfg.sample_rate as usize / 2)
        .map(|n| {
            let t = n as f64 / rate;
            (0.5 * (2.0 * std::f64::consts::PI * 220.0 * t).sin() + 0.2 * (2.0 * std::f64::consts::PI * 440.0 * t).sin()) as f32
        })
        .collect();
    let wave = Waveform::new(samples, cfg.sample_rate)?;
    let mel = mel_spectrogram(&wave, &cfg)?;
    let xv = SpectroConfig::xvector();
    let cepstra = mfcc(&resample(&wave, xv.sample_rate)?, &xv, 30)?;
    let pitch = estimate_pitch(&wave, &cfg)?;
    let energy = frame_energy(&wave, &cfg)?;
    let voiced: Vec<f64> = pitch.iter().copied().filter(|f| *f > 0.0).collect();
    println!("waveform: {:.2} s at {} Hz", wave.duration_secs(), wave.sample_rate());
    println!("log-mel: {} frames x {} bands at {:.1} frames/s", mel.frames(), mel.channels(), mel.frame_rate);
    println!("mfcc: {} frames x {} coefficients", cepstra.frames(), cepstra.channels());
    println!("median pitch: {:.1} Hz over {} voiced frames", median(&voiced), voiced.len());
    println!("mean frame energy: {:.4}", energy.iter().sum::<f64>() / energy.len() as f64);
    let rebuilt = griffin_lim(&mel, &cfg, 32)?;
    let again = mel_spectrogram(&rebuilt, &cfg)?;
    let n = mel.frames().min(again.frames());
    let err = (&mel.values.slice(ndarray::s![..n, ..]) - &again.values.slice(ndarray::s![..n, ..])).mapv(f64::abs).mean().unwrap_or(0.0);
    println!("griffin-lim: {} samples, mean log-mel error {err:.3}", rebuilt.len());
    Ok(())
}

fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    v.get(v.len() / 2).copied().unwrap_or(0.0)
}
