//! Trains an ECAPA-style speaker encoder on a toy corpus and reports embedding separation.

use std::ops::ControlFlow;

use voxclone::data::{make_toy_corpus, preprocess_corpus, split_speakers, PreprocessConfig, Split};
use voxclone::pipeline::{embed_cached, encoder_corpus, intra_inter_similarity};
use voxclone::speaker_encoder::{
    classification_accuracy, train_speaker_classifier, EcapaConfig, EncoderArch, EncoderTrainConfig, SpeakerEncoder,
};
use voxclone::trainer::TrainConfig;

fn main() -> voxclone::Result<()> {
    let dir = std::env::temp_dir().join("voxclone-example-encoder");
    let _ = std::fs::remove_dir_all(&dir);
    let manifest = make_toy_corpus(4, 20, 0, &dir, 0)?;
    let manifest = split_speakers(&manifest, 0, 0)?.into_manifest(&manifest)?;
    let cache = preprocess_corpus(&manifest, &PreprocessConfig::default(), &dir.join("cache"), 0)?;
    let arch = EncoderArch::Ecapa(EcapaConfig::default());
    let train: Vec<_> = cache.split(Split::Train).collect();
    let held_out: Vec<_> = cache.split(Split::SeenTest).collect();
    let corpus = encoder_corpus(&cache, &arch, &train)?;
    let cfg = TrainConfig { max_steps: 150, ..Default::default() };
    let (encoder, _) =
        train_speaker_classifier(&SpeakerEncoder::new(arch, 0)?, &corpus, &EncoderTrainConfig::default(), &cfg, None, |s, _| {
            if s.step % 50 == 0 {
                println!("step {:4} loss {:.4}", s.step, s.loss);
            }
            ControlFlow::Continue(())
        })?;
    println!("training accuracy {:.3}", classification_accuracy(&encoder, &corpus)?);
    let (intra, inter) = intra_inter_similarity(&embed_cached(&encoder, &cache, &held_out, 0)?)?;
    println!("held-out cosine: same speaker {intra:.3}, different speakers {inter:.3}");
    Ok(())
}
