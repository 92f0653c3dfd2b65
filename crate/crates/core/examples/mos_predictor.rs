//! Trains the MOS predictor on progressively degraded toy mels and checks rank agreement.

use voxclone::data::{make_toy_corpus, preprocess_corpus, split_speakers, PreprocessConfig, Split};
use voxclone::evaluation::{make_quality_corpus, spearman, train_mos_predictor, MosConfig};
use voxclone::trainer::TrainConfig;

fn main() -> voxclone::Result<()> {
    let dir = std::env::temp_dir().join("voxclone-example-mos");
    let _ = std::fs::remove_dir_all(&dir);
    let manifest = make_toy_corpus(4, 8, 0, &dir, 0)?;
    let manifest = split_speakers(&manifest, 1, 0)?.into_manifest(&manifest)?;
    let cache = preprocess_corpus(&manifest, &PreprocessConfig::default(), &dir.join("cache"), 0)?;
    let mels = |train: bool| -> voxclone::Result<Vec<_>> {
        cache
            .entries
            .iter()
            .filter(|e| (e.split == Split::Train) == train)
            .map(|e| Ok((e.utterance_id.clone(), cache.mel(&e.utterance_id)?)))
            .collect()
    };
    let levels = voxclone::cli::QUALITY_LEVELS;
    let train = make_quality_corpus(&mels(true)?, &levels, 0)?;
    let test = make_quality_corpus(&mels(false)?, &levels, 1)?;
    let cfg = TrainConfig { max_steps: 200, ..Default::default() };
    let (model, _) = train_mos_predictor(&train, &MosConfig::default(), &cfg, |_, _| std::ops::ControlFlow::Continue(()))?;
    let pred: Vec<f64> = test.iter().map(|it| model.predict_mel(&it.mel)).collect::<voxclone::Result<_>>()?;
    let labels: Vec<f64> = test.iter().map(|it| it.score).collect();
    println!("{} training items, {} held-out items", train.len(), test.len());
    println!("held-out spearman {:.3}", spearman(&pred, &labels).unwrap_or(f64::NAN));
    Ok(())
}
