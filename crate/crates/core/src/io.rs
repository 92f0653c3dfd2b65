//! File formats: WAV audio, `VXFM` feature matrices, embedding tables,
//! phoneme vocabularies and whitespace-separated sequence files.
//!
//! `VXFM` layout: magic `b"VXFM"`, u32 frames, u32 channels, then
//! `frames · channels` little-endian f32 values, row-major.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::autograd::Mat;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::evaluation::EmbeddedUtterance;

const FEATURE_MAGIC: &[u8; 4] = b"VXFM";

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// Read a PCM or float WAV; multi-channel input is averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader.samples::<i32>().map(|s| s.map(|v| v as f32 * scale)).collect::<Result<_, _>>()?
        }
    };
    let mono = interleaved.chunks(channels).map(|c| c.iter().sum::<f32>() / channels as f32).collect();
    Waveform::new(mono, spec.sample_rate).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

/// Write 16-bit mono PCM. Samples are clipped to `[−1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    create_parent(path)?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32).round() as i16)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn encode_features(m: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * m.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for &v in m.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<Mat> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("not a VXFM feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let n = rows.checked_mul(cols).ok_or_else(|| Error::Format("feature shape overflows".into()))?;
    if bytes.len() != 12 + 4 * n {
        return Err(Error::Format(format!("{rows}×{cols} features need {} bytes, file has {}", 12 + 4 * n, bytes.len())));
    }
    let values = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(Mat::from_shape_vec((rows, cols), values).expect("checked shape"))
}

pub fn write_features(path: &Path, m: &Mat) -> Result<()> {
    create_parent(path)?;
    std::fs::write(path, encode_features(m))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Mat> {
    decode_features(&std::fs::read(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Whitespace-separated tokens of a text file.
pub fn read_tokens(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)?.split_whitespace().map(str::to_string).collect())
}

/// Whitespace-separated values of a text file.
pub fn read_values<T: FromStr>(path: &Path) -> Result<Vec<T>> {
    read_tokens(path)?
        .iter()
        .map(|t| t.parse().map_err(|_| Error::Format(format!("{}: invalid value `{t}`", path.display()))))
        .collect()
}

pub fn write_tokens<T: ToString>(path: &Path, tokens: &[T]) -> Result<()> {
    create_parent(path)?;
    let mut line = tokens.iter().map(T::to_string).collect::<Vec<_>>().join(" ");
    line.push('\n');
    std::fs::write(path, line)?;
    Ok(())
}

/// Phoneme symbol inventory; a symbol's id is its line index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid phoneme symbol `{s}`")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate phoneme symbol `{s}`")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Sorted, de-duplicated inventory of the given symbols.
    pub fn from_symbols<'a>(symbols: impl IntoIterator<Item = &'a str>) -> Self {
        let mut all: Vec<String> = symbols.into_iter().map(str::to_string).collect();
        all.sort();
        all.dedup();
        Self::new(all).expect("sorted unique symbols")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode(&self, symbols: &[String]) -> Result<Vec<usize>> {
        symbols
            .iter()
            .map(|s| self.index.get(s).copied().ok_or_else(|| Error::Input(format!("unknown phoneme `{s}`"))))
            .collect()
    }

    pub fn render(&self) -> String {
        self.symbols.iter().map(|s| format!("{s}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

/// One row per utterance: `speaker_id`, `utterance_id`, `dim`, values.
pub fn write_embeddings(path: &Path, rows: &[EmbeddedUtterance]) -> Result<()> {
    create_parent(path)?;
    let mut out = String::from("speaker_id\tutterance_id\tdim\tvalues\n");
    for r in rows {
        let _ = write!(out, "{}\t{}\t{}", r.speaker_id, r.id, r.embedding.len());
        for v in &r.embedding {
            let _ = write!(out, "\t{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddedUtterance>> {
    let text = std::fs::read_to_string(path)?;
    let bad = |line: usize, why: &str| Error::Format(format!("{}:{line}: {why}", path.display()));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() < 3 {
            return Err(bad(i + 1, "expected speaker_id, utterance_id and dim"));
        }
        let dim: usize = f[2].parse().map_err(|_| bad(i + 1, "invalid dim"))?;
        if f.len() != 3 + dim {
            return Err(bad(i + 1, "value count does not match dim"));
        }
        let embedding = f[3..].iter().map(|v| v.parse().map_err(|_| bad(i + 1, "invalid value"))).collect::<Result<_>>()?;
        out.push(EmbeddedUtterance { id: f[1].to_string(), speaker_id: f[0].to_string(), embedding });
    }
    Ok(out)
}
