//! Corpus manifests, the preprocessing pipeline, the synthetic toy corpus
//! and speaker-level splitting.

mod manifest;
mod preprocess;
mod split;
mod toy;

pub use manifest::{CorpusManifest, ManifestEntry, Split, MANIFEST_HEADER};
pub use preprocess::{
    phoneme_means, preprocess_corpus, CacheEntry, FeatureCache, NormStats, PhonemeProsody, PreprocessConfig,
};
pub use split::{split_speakers, SpeakerSplit, DEFAULT_UNSEEN, SEEN_TEST_FRACTION};
pub use toy::{
    make_toy_corpus, random_script, render_utterance, speaker_id, toy_inventory, toy_speakers, utterance_id, ToySpeaker,
    BAND_GAIN, MAX_DURATION, MAX_PHONEMES, MIN_DURATION, MIN_PHONEMES, TOY_HOP, TOY_SAMPLE_RATE,
};

#[cfg(test)]
mod tests;
