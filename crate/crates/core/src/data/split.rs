//! Seeded speaker-level train / seen-test / unseen-test split.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{CorpusManifest, ManifestEntry, Split};
use crate::error::{Error, Result};

/// Held-out unseen speakers by default.
pub const DEFAULT_UNSEEN: usize = 8;
/// Fraction of each seen speaker's utterances held out for seen-test.
pub const SEEN_TEST_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpeakerSplit {
    pub train: Vec<ManifestEntry>,
    pub seen_test: Vec<ManifestEntry>,
    pub unseen_test: Vec<ManifestEntry>,
}

impl SpeakerSplit {
    /// All entries re-tagged, in original manifest order.
    pub fn into_manifest(self, original: &CorpusManifest) -> Result<CorpusManifest> {
        let mut tagged: std::collections::BTreeMap<String, Split> = std::collections::BTreeMap::new();
        for (list, split) in [(&self.train, Split::Train), (&self.seen_test, Split::SeenTest), (&self.unseen_test, Split::UnseenTest)] {
            for e in list {
                tagged.insert(e.utterance_id.clone(), split);
            }
        }
        let entries = original
            .entries()
            .iter()
            .map(|e| ManifestEntry { split: tagged[&e.utterance_id], ..e.clone() })
            .collect();
        CorpusManifest::new(original.root.clone(), entries)
    }
}

/// Hold out `n_unseen` whole speakers, then `max(1, round(10%))` utterances
/// of every seen speaker that has at least two. Existing split tags are
/// ignored. Requires more speakers than `n_unseen`.
pub fn split_speakers(manifest: &CorpusManifest, n_unseen: usize, seed: u64) -> Result<SpeakerSplit> {
    let speakers = manifest.speakers();
    if n_unseen >= speakers.len() {
        return Err(Error::Data(format!(
            "cannot hold out {n_unseen} unseen speakers from a corpus of {}",
            speakers.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = speakers.clone();
    order.shuffle(&mut rng);
    let unseen: std::collections::BTreeSet<&str> = order[..n_unseen].iter().map(String::as_str).collect();
    let mut split = SpeakerSplit { train: Vec::new(), seen_test: Vec::new(), unseen_test: Vec::new() };
    let mut held = std::collections::BTreeSet::new();
    for (spk, entries) in manifest.by_speaker() {
        if unseen.contains(spk) || entries.len() < 2 {
            continue;
        }
        let k = ((entries.len() as f64 * SEEN_TEST_FRACTION).round() as usize).max(1);
        for e in entries.choose_multiple(&mut rng, k) {
            held.insert(e.utterance_id.as_str());
        }
    }
    for e in manifest.entries() {
        let (list, tag) = if unseen.contains(e.speaker_id.as_str()) {
            (&mut split.unseen_test, Split::UnseenTest)
        } else if held.contains(e.utterance_id.as_str()) {
            (&mut split.seen_test, Split::SeenTest)
        } else {
            (&mut split.train, Split::Train)
        };
        list.push(ManifestEntry { split: tag, ..e.clone() });
    }
    Ok(split)
}
