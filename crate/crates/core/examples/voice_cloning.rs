//! Trains a small encoder and synthesizer, clones an unseen speaker and scores the result.

use std::ops::ControlFlow;

use voxclone::acoustic_model::{train_synthesizer, AcousticConfig, AcousticModel};
use voxclone::data::{make_toy_corpus, preprocess_corpus, split_speakers, PreprocessConfig, Split};
use voxclone::pipeline::{
    embed_cached, encoder_corpus, similarity_reports, system_outputs, tts_items, TtsBundle, VoiceRule, DEFAULT_GL_ITERS,
};
use voxclone::speaker_encoder::{train_speaker_classifier, EcapaConfig, EncoderArch, EncoderTrainConfig, SpeakerEncoder};
use voxclone::trainer::TrainConfig;

fn main() -> voxclone::Result<()> {
    let dir = std::env::temp_dir().join("voxclone-example-cloning");
    let _ = std::fs::remove_dir_all(&dir);
    let manifest = make_toy_corpus(6, 10, 0, &dir, 0)?;
    let manifest = split_speakers(&manifest, 2, 0)?.into_manifest(&manifest)?;
    let cache = preprocess_corpus(&manifest, &PreprocessConfig::default(), &dir.join("cache"), 0)?;
    let train: Vec<_> = cache.split(Split::Train).collect();
    let quiet = |_: &voxclone::trainer::StepInfo, _: &voxclone::nn::ParamStore| ControlFlow::Continue(());
    let encoder = |seed: u64| -> voxclone::Result<SpeakerEncoder> {
        let arch = EncoderArch::Ecapa(EcapaConfig::default());
        let corpus = encoder_corpus(&cache, &arch, &train)?;
        let cfg = TrainConfig { max_steps: 150, seed, ..Default::default() };
        Ok(train_speaker_classifier(&SpeakerEncoder::new(arch, seed)?, &corpus, &EncoderTrainConfig::default(), &cfg, None, quiet)?.0)
    };
    let conditioning = encoder(0)?;
    let scorer = encoder(7)?;
    let items = tts_items(&cache, &embed_cached(&conditioning, &cache, &train, 0)?)?;
    let acfg = TtsBundle::acoustic_config(&AcousticConfig::default(), &conditioning, &cache.vocab);
    let cfg = TrainConfig { max_steps: 200, ..Default::default() };
    let (model, _) = train_synthesizer(&AcousticModel::new(acfg, 0)?, &items, &cfg, None, quiet)?;
    let bundle = TtsBundle::new(model, conditioning, cache.vocab.clone())?;

    let outputs = system_outputs(&cache, Split::UnseenTest, Some(&bundle), VoiceRule::Average, DEFAULT_GL_ITERS, 0)?;
    for report in similarity_reports(&outputs, &scorer, 0, 0)? {
        println!("{:<18} mean cosine {:.3}", report.system, report.mean);
    }
    let target = manifest.entries().iter().find(|e| e.split == Split::UnseenTest).map(|e| e.speaker_id.clone()).unwrap_or_default();
    let references: Vec<_> = manifest
        .entries()
        .iter()
        .filter(|e| e.speaker_id == target)
        .take(3)
        .map(|e| voxclone::io::read_wav(&manifest.resolve(&e.wav)))
        .collect::<voxclone::Result<_>>()?;
    let voice = bundle.reference_embedding(&references, 0)?;
    let text: Vec<String> = cache.vocab.symbols().iter().take(6).cloned().collect();
    let (mel, wave) = bundle.synthesize(&text, &voice.values, DEFAULT_GL_ITERS)?;
    println!("cloned {target} from {} references", references.len());
    println!("synthesized {} frames, {} samples", mel.frames(), wave.len());
    Ok(())
}
