//! Generates a toy multi-speaker corpus, splits it by speaker and builds the feature cache.

use voxclone::data::{make_toy_corpus, preprocess_corpus, split_speakers, PreprocessConfig, Split};

fn main() -> voxclone::Result<()> {
    let dir = std::env::temp_dir().join("voxclone-example-corpus");
    let _ = std::fs::remove_dir_all(&dir);
    let manifest = make_toy_corpus(6, 6, 0, &dir, 0)?;
    let manifest = split_speakers(&manifest, 2, 0)?.into_manifest(&manifest)?;
    let cache = preprocess_corpus(&manifest, &PreprocessConfig::default(), &dir.join("cache"), 0)?;
    for split in [Split::Train, Split::SeenTest, Split::UnseenTest] {
        println!("{split}: {} utterances", cache.split(split).count());
    }
    println!("vocabulary: {} symbols", cache.vocab.len());
    println!("cache written to {}", dir.join("cache").display());
    Ok(())
}
