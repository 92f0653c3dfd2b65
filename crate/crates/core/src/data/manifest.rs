//! Corpus manifests: one TSV row per utterance, paths relative to the
//! manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 8] =
    ["utterance_id", "speaker_id", "wav", "phonemes", "durations", "pitch", "energy", "split"];
const NONE: &str = "-";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    SeenTest,
    UnseenTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::SeenTest, Split::UnseenTest];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::SeenTest => "seen-test",
            Split::UnseenTest => "unseen-test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "seen-test" => Ok(Split::SeenTest),
            "unseen-test" => Ok(Split::UnseenTest),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub speaker_id: String,
    pub wav: PathBuf,
    pub phonemes: PathBuf,
    pub durations: PathBuf,
    /// Optional per-frame F0 track overriding estimation.
    pub pitch: Option<PathBuf>,
    /// Optional per-frame energy track overriding estimation.
    pub energy: Option<PathBuf>,
    pub split: Split,
}

/// Validated list of entries plus the directory their paths are relative to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    entries: Vec<ManifestEntry>,
}

fn check_field(name: &str, v: &str) -> Result<()> {
    if v.is_empty() || v.contains(['\t', '\n', '\r']) {
        return Err(Error::Data(format!("{name} `{v}` is empty or contains tabs or newlines")));
    }
    Ok(())
}

impl CorpusManifest {
    pub fn new(root: impl Into<PathBuf>, entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for e in &entries {
            check_field("utterance id", &e.utterance_id)?;
            check_field("speaker id", &e.speaker_id)?;
            if !ids.insert(e.utterance_id.as_str()) {
                return Err(Error::Data(format!("duplicate utterance id `{}`", e.utterance_id)));
            }
        }
        let train: BTreeSet<&str> =
            entries.iter().filter(|e| e.split == Split::Train).map(|e| e.speaker_id.as_str()).collect();
        if let Some(e) = entries.iter().find(|e| e.split == Split::UnseenTest && train.contains(e.speaker_id.as_str())) {
            return Err(Error::Data(format!("unseen-test speaker `{}` also has training utterances", e.speaker_id)));
        }
        Ok(Self { root: root.into(), entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<ManifestEntry> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.speaker_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Entries grouped by speaker in input order.
    pub fn by_speaker(&self) -> BTreeMap<&str, Vec<&ManifestEntry>> {
        let mut out: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.entries {
            out.entry(e.speaker_id.as_str()).or_default().push(e);
        }
        out
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn render(&self) -> String {
        let path = |p: &Path| p.to_string_lossy().replace('\\', "/");
        let opt = |p: &Option<PathBuf>| p.as_deref().map_or(NONE.to_string(), path);
        let mut out = MANIFEST_HEADER.join("\t");
        out.push('\n');
        for e in &self.entries {
            let row = [
                e.utterance_id.clone(),
                e.speaker_id.clone(),
                path(&e.wav),
                path(&e.phonemes),
                path(&e.durations),
                opt(&e.pitch),
                opt(&e.energy),
                e.split.to_string(),
            ];
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().map(|(_, l)| l.split('\t').collect()).unwrap_or_default();
        if header != MANIFEST_HEADER {
            return Err(Error::Format(format!("manifest header must be `{}`", MANIFEST_HEADER.join("\\t"))));
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != MANIFEST_HEADER.len() {
                return Err(Error::Format(format!(
                    "manifest line {}: expected {} fields, got {}",
                    i + 1,
                    MANIFEST_HEADER.len(),
                    f.len()
                )));
            }
            let opt = |s: &str| (s != NONE).then(|| PathBuf::from(s));
            entries.push(ManifestEntry {
                utterance_id: f[0].to_string(),
                speaker_id: f[1].to_string(),
                wav: f[2].into(),
                phonemes: f[3].into(),
                durations: f[4].into(),
                pitch: opt(f[5]),
                energy: opt(f[6]),
                split: f[7].parse().map_err(|e: Error| Error::Format(format!("manifest line {}: {e}", i + 1)))?,
            });
        }
        Self::new(root, entries)
    }

    /// Read a manifest; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&std::fs::read_to_string(path)?, root)
    }

    /// Write to `path`. Entry paths are stored as given, so they must be
    /// relative to `path`'s directory.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.render())?;
        Ok(())
    }
}
