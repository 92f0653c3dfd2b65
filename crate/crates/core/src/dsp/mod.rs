//! Signal-processing front end: waveforms, resampling, STFT, mel/MFCC
//! features, frame-level prosody and Griffin-Lim reconstruction.
//!
//! All functions here are pure; they can be called concurrently.

mod griffin_lim;
mod pitch;
mod resample;
mod spectrum;

pub use griffin_lim::{griffin_lim, griffin_lim_traced, GriffinLimConfig, GriffinLimOutput, PhaseInit};
pub use pitch::{estimate_pitch, frame_energy};
pub use resample::resample;
pub use spectrum::{
    dct_matrix, frame_count, hann_window, hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz,
    mfcc, mfcc_from_log_mel, stft, stft_magnitude,
};

use crate::autograd::Mat;
use crate::error::{Error, Result};

/// Mono audio.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Input("empty waveform".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Input(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Scale so the peak magnitude is at most 1. Quiet signals are untouched.
    pub fn normalized(mut self) -> Self {
        let peak = self.samples.iter().fold(0f32, |m, s| m.max(s.abs()));
        if peak > 1.0 {
            self.samples.iter_mut().for_each(|s| *s /= peak);
        }
        self
    }

    pub(crate) fn as_f64(&self) -> Vec<f64> {
        self.samples.iter().map(|&s| s as f64).collect()
    }
}

/// STFT and mel geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop_size: usize,
    pub win_size: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl SpectroConfig {
    /// Synthesizer features: 80-band log-mel at 22050 Hz.
    pub fn synthesizer() -> Self {
        Self {
            sample_rate: 22050,
            fft_size: 1024,
            hop_size: 256,
            win_size: 1024,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }

    /// ECAPA-TDNN input: 80-band log-mel at 16 kHz.
    pub fn ecapa() -> Self {
        Self {
            sample_rate: 16000,
            fft_size: 512,
            hop_size: 160,
            win_size: 400,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
            log_floor: 1e-10,
        }
    }

    /// x-vector input: 30 mel bands at 16 kHz, converted to 30 MFCCs.
    pub fn xvector() -> Self {
        Self { n_mels: 30, ..Self::ecapa() }
    }

    pub fn n_freqs(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop_size == 0 || self.hop_size > self.win_size || self.win_size > self.fft_size {
            return bad("require 0 < hop_size <= win_size <= fft_size");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1");
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return bad("require 0 <= fmin < fmax <= sample_rate / 2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Mel,
    Mfcc,
    Magnitude,
    Hidden,
}

/// `T × C` real matrix with frame metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: Mat,
    pub frame_rate: f64,
    pub kind: FeatureKind,
}

impl FeatureMap {
    pub fn new(values: Mat, frame_rate: f64, kind: FeatureKind) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::Input("feature map has no frames".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature map has non-finite entries".into()));
        }
        Ok(Self { values, frame_rate, kind })
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }
}
