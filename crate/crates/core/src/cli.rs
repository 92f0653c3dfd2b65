//! Command-line front end: one verb per workflow step.

use std::ffi::OsString;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::acoustic_model::{train_synthesizer, AcousticConfig, AcousticModel};
use crate::config::{FlatConfig, FlatFields};
use crate::data::{
    make_toy_corpus, preprocess_corpus, split_speakers, CacheEntry, CorpusManifest, FeatureCache, PreprocessConfig, Split,
    DEFAULT_UNSEEN,
};
use crate::dsp::FeatureKind;
use crate::error::{Error, Result};
use crate::evaluation::{
    make_quality_corpus, read_score_file, train_mos_predictor, EvalReport, MosConfig, MosNet, MosPredictor, ReportTable,
    TsneConfig,
};
use crate::io::{read_tokens, write_features, write_wav};
use crate::pipeline::{
    embed_cached, encoder_corpus, list_wavs, mos_reports, read_wavs, similarity_reports, system_outputs, tts_items,
    visualize_embeddings, TtsBundle, VoiceRule, DEFAULT_GL_ITERS,
};
use crate::speaker_encoder::{
    classification_accuracy, train_speaker_classifier, EcapaConfig, EncoderArch, EncoderTrainConfig, SpeakerEncoder,
    XvectorConfig,
};
use crate::trainer::{load_checkpoint, save_checkpoint, StepInfo, TrainConfig};

/// Degradation levels of the synthetic MOS training corpus.
pub const QUALITY_LEVELS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const CONFIG_SECTIONS: [&str; 7] = ["train", "encoder", "encoder_train", "acoustic", "mos", "tsne", "vocoder"];

#[derive(Parser, Debug)]
#[command(name = "voxclone", version, about = "Multi-speaker TTS with speaker-encoder voice cloning", arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable, applied after --config.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed of every random choice (corpus, splits, initialization, batching, pairing, t-SNE).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker cap for parallel stages; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic multi-speaker corpus and its speaker split.
    MakeToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        utterances: usize,
        /// Speakers held out of training entirely.
        #[arg(long, default_value_t = DEFAULT_UNSEEN)]
        unseen: usize,
    },
    /// Extract mels, encoder features and phoneme prosody into a cache.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a speaker encoder on the cache's training split.
    TrainEncoder {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Arch::Ecapa)]
        arch: Arch,
        /// Overrides train.max_steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the synthesizer conditioned on a speaker encoder.
    TrainTts {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the MOS predictor on degraded copies of training mels.
    TrainMos {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Speak a phoneme file in the averaged voice of reference recordings.
    Synthesize {
        /// Whitespace-separated phoneme symbols.
        #[arg(long)]
        text_phonemes: PathBuf,
        /// Directory of reference WAV files of the target speaker.
        #[arg(long)]
        speaker_wavs: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output WAV; the mel is written next to it with a .vxfm extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired same-speaker cosine similarity per system and test set.
    EvaluateSimilarity {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        tts: PathBuf,
        /// Speaker encoder used for scoring, trained separately from the
        /// synthesizer's conditioning encoder.
        #[arg(long)]
        scorer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [Split::SeenTest, Split::UnseenTest])]
        sets: Vec<Split>,
    },
    /// Predicted MOS per system and test set.
    EvaluateMos {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        tts: PathBuf,
        /// Trained MOS predictor checkpoint.
        #[arg(long)]
        mos: Option<PathBuf>,
        /// External predictor scores as NAME=PATH; ids are `system/utterance_id`.
        #[arg(long, value_name = "NAME=PATH")]
        external: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [Split::SeenTest, Split::UnseenTest])]
        sets: Vec<Split>,
    },
    /// t-SNE scatter of utterance embeddings with per-speaker colors.
    VisualizeEmbeddings {
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Output SVG; point coordinates go to a .tsv beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        per_speaker: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arch {
    Ecapa,
    Xvector,
}

/// Resolved configuration shared by every verb.
struct Settings {
    cfg: FlatConfig,
    seed: u64,
    jobs: usize,
}

impl Settings {
    fn load(g: &GlobalArgs) -> Result<Self> {
        let mut cfg = match &g.config {
            Some(p) => FlatConfig::load(p)?,
            None => FlatConfig::new(),
        };
        for kv in &g.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim());
        }
        cfg.reject_unknown(known_keys().iter().map(String::as_str))?;
        Ok(Self { cfg, seed: g.seed, jobs: g.jobs })
    }

    fn typed<T: FlatFields>(&self, prefix: &str) -> Result<T> {
        T::from_flat(prefix, &self.cfg)
    }

    fn train(&self, steps: Option<usize>) -> Result<TrainConfig> {
        let mut t: TrainConfig = self.typed("train")?;
        t.seed = self.seed;
        if let Some(s) = steps {
            t.max_steps = s;
            t.warmup_steps = t.warmup_steps.min(s);
        }
        t.validate()?;
        Ok(t)
    }

    fn gl_iters(&self) -> Result<usize> {
        Ok(self.cfg.get("vocoder.griffin_lim_iters")?.unwrap_or(DEFAULT_GL_ITERS))
    }
}

/// Every configuration key the front end understands.
pub fn known_keys() -> Vec<String> {
    let mut keys = TrainConfig::known_keys("train");
    keys.extend(EcapaConfig::known_keys("encoder"));
    keys.extend(XvectorConfig::known_keys("encoder"));
    keys.extend(EncoderTrainConfig::known_keys("encoder_train"));
    keys.extend(AcousticConfig::known_keys("acoustic"));
    keys.extend(MosConfig::known_keys("mos"));
    keys.extend(TsneConfig::known_keys("tsne"));
    keys.push("vocoder.griffin_lim_iters".into());
    // Seeds come from --seed only.
    keys.retain(|k| !k.ends_with(".seed"));
    debug_assert!(keys.iter().all(|k| CONFIG_SECTIONS.iter().any(|s| k.starts_with(&format!("{s}.")))));
    keys.sort();
    keys.dedup();
    keys
}

/// Parse `argv` (without the program name), run the verb and return the
/// process exit code. Diagnostics go to stderr as a single line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = std::iter::once(OsString::from("voxclone")).chain(argv.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("voxclone: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let s = Settings::load(&cli.global)?;
    match cli.command {
        Command::MakeToyCorpus { out, speakers, utterances, unseen } => make_toy(&s, &out, speakers, utterances, unseen),
        Command::Preprocess { manifest, out } => {
            let m = CorpusManifest::load(&manifest)?;
            let cache = preprocess_corpus(&m, &PreprocessConfig::default(), &out, s.jobs)?;
            println!("cached {} utterances in {}", cache.len(), out.display());
            Ok(())
        }
        Command::TrainEncoder { cache, out, arch, steps } => train_encoder(&s, &cache, &out, arch, steps),
        Command::TrainTts { cache, encoder, out, steps } => train_tts(&s, &cache, &encoder, &out, steps),
        Command::TrainMos { cache, out, steps } => train_mos(&s, &cache, &out, steps),
        Command::Synthesize { text_phonemes, speaker_wavs, ckpt, out } => {
            synthesize(&s, &text_phonemes, &speaker_wavs, &ckpt, &out)
        }
        Command::EvaluateSimilarity { cache, tts, scorer, out, sets } => {
            let cache = FeatureCache::open(&cache)?;
            let bundle = TtsBundle::from_checkpoint(&load_checkpoint(&tts)?)?;
            let scorer = SpeakerEncoder::from_checkpoint(&load_checkpoint(&scorer)?)?;
            let mut reports = Vec::new();
            for set in sets {
                let outs = system_outputs(&cache, set, Some(&bundle), VoiceRule::Average, s.gl_iters()?, s.jobs)?;
                reports.extend(similarity_reports(&outs, &scorer, s.seed, s.jobs)?);
            }
            write_reports(&out, "similarity", &reports)
        }
        Command::EvaluateMos { cache, tts, mos, external, out, sets } => {
            let mut predictors: Vec<Box<dyn MosPredictor>> = Vec::new();
            if let Some(p) = mos {
                predictors.push(Box::new(MosNet::from_checkpoint(&load_checkpoint(&p)?)?));
            }
            for spec in &external {
                let (name, path) = spec
                    .split_once('=')
                    .ok_or_else(|| Error::Usage(format!("--external expects NAME=PATH, got `{spec}`")))?;
                predictors.push(Box::new(read_score_file(name, Path::new(path))?));
            }
            if predictors.is_empty() {
                return Err(Error::Usage("evaluate-mos needs --mos or at least one --external".into()));
            }
            let cache = FeatureCache::open(&cache)?;
            let bundle = TtsBundle::from_checkpoint(&load_checkpoint(&tts)?)?;
            let mut by_predictor: Vec<Vec<EvalReport>> = vec![Vec::new(); predictors.len()];
            for set in sets {
                let outs = system_outputs(&cache, set, Some(&bundle), VoiceRule::Average, s.gl_iters()?, s.jobs)?;
                for (p, reports) in predictors.iter().zip(&mut by_predictor) {
                    reports.extend(mos_reports(&outs, p.as_ref(), s.jobs)?);
                }
            }
            for (p, reports) in predictors.iter().zip(&by_predictor) {
                write_reports(&out, &format!("mos_{}", p.name()), reports)?;
            }
            Ok(())
        }
        Command::VisualizeEmbeddings { cache, encoder, out, speakers, per_speaker } => {
            let cache = FeatureCache::open(&cache)?;
            let enc = SpeakerEncoder::from_checkpoint(&load_checkpoint(&encoder)?)?;
            let entries: Vec<&CacheEntry> = cache.entries.iter().collect();
            let embs = embed_cached(&enc, &cache, &entries, s.jobs)?;
            let mut tsne: TsneConfig = s.typed("tsne")?;
            tsne.seed = s.seed;
            let vis = visualize_embeddings(&embs, speakers, per_speaker, &tsne, &out)?;
            println!(
                "{} points, silhouette {:.4}, final KL {:.4}; wrote {} and {}",
                vis.points,
                vis.silhouette,
                vis.kl_history.last().copied().unwrap_or(f64::NAN),
                out.display(),
                vis.sidecar.display()
            );
            Ok(())
        }
    }
}

fn make_toy(s: &Settings, out: &Path, speakers: usize, utterances: usize, unseen: usize) -> Result<()> {
    let m = make_toy_corpus(speakers, utterances, s.seed, out, s.jobs)?;
    let m = split_speakers(&m, unseen, s.seed)?.into_manifest(&m)?;
    let path = out.join("manifest.tsv");
    m.save(&path)?;
    let count = |sp| m.split(sp).count();
    println!(
        "wrote {} ({} train, {} seen-test, {} unseen-test)",
        path.display(),
        count(Split::Train),
        count(Split::SeenTest),
        count(Split::UnseenTest)
    );
    Ok(())
}

fn progress(label: &'static str, every: usize) -> impl FnMut(&StepInfo, &crate::nn::ParamStore) -> ControlFlow<()> {
    move |info, _| {
        if every > 0 && info.step % every == 0 {
            eprintln!("{label} step {} loss {:.5} lr {:.2e}", info.step, info.loss, info.learning_rate);
        }
        ControlFlow::Continue(())
    }
}

fn log_every(steps: usize) -> usize {
    (steps / 10).max(1)
}

fn encoder_arch(s: &Settings, arch: Arch) -> Result<EncoderArch> {
    Ok(match arch {
        Arch::Ecapa => EncoderArch::Ecapa(s.typed("encoder")?),
        Arch::Xvector => EncoderArch::XVector(s.typed("encoder")?),
    })
}

fn train_encoder(s: &Settings, cache: &Path, out: &Path, arch: Arch, steps: Option<usize>) -> Result<()> {
    let cache = FeatureCache::open(cache)?;
    let arch = encoder_arch(s, arch)?;
    let train: Vec<&CacheEntry> = cache.split(Split::Train).collect();
    let corpus = encoder_corpus(&cache, &arch, &train)?;
    let tcfg = s.train(steps)?;
    let ecfg: EncoderTrainConfig = s.typed("encoder_train")?;
    let init = SpeakerEncoder::new(arch, s.seed)?;
    let (enc, ckpt) =
        train_speaker_classifier(&init, &corpus, &ecfg, &tcfg, None, progress("encoder", log_every(tcfg.max_steps)))?;
    save_checkpoint(&ckpt, out)?;
    println!(
        "{} encoder: {} speakers, training accuracy {:.4}; wrote {}",
        enc.arch.name(),
        corpus.num_speakers(),
        classification_accuracy(&enc, &corpus)?,
        out.display()
    );
    Ok(())
}

fn train_tts(s: &Settings, cache: &Path, encoder: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let cache = FeatureCache::open(cache)?;
    let enc = SpeakerEncoder::from_checkpoint(&load_checkpoint(encoder)?)?;
    let train: Vec<&CacheEntry> = cache.split(Split::Train).collect();
    let items = tts_items(&cache, &embed_cached(&enc, &cache, &train, s.jobs)?)?;
    let acfg = TtsBundle::acoustic_config(&s.typed("acoustic")?, &enc, &cache.vocab);
    let tcfg = s.train(steps)?;
    let init = AcousticModel::new(acfg, s.seed)?;
    let (model, ckpt) = train_synthesizer(&init, &items, &tcfg, None, progress("synthesizer", log_every(tcfg.max_steps)))?;
    let bundle = TtsBundle::new(model, enc, cache.vocab.clone())?;
    save_checkpoint(&bundle.to_checkpoint(&ckpt), out)?;
    println!(
        "synthesizer on {} utterances, final loss {:.5}; wrote {}",
        items.len(),
        ckpt.loss_history.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn train_mos(s: &Settings, cache: &Path, out: &Path, steps: Option<usize>) -> Result<()> {
    let cache = FeatureCache::open(cache)?;
    let clean = cache
        .split(Split::Train)
        .map(|e| Ok((e.utterance_id.clone(), cache.mel(&e.utterance_id)?)))
        .collect::<Result<Vec<_>>>()?;
    let items = make_quality_corpus(&clean, &QUALITY_LEVELS, s.seed)?;
    let mcfg: MosConfig = s.typed("mos")?;
    let tcfg = s.train(steps)?;
    let (_, ckpt) = train_mos_predictor(&items, &mcfg, &tcfg, progress("mos", log_every(tcfg.max_steps)))?;
    save_checkpoint(&ckpt, out)?;
    println!("MOS predictor on {} labelled mels; wrote {}", items.len(), out.display());
    Ok(())
}

fn synthesize(s: &Settings, phonemes: &Path, refs: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let bundle = TtsBundle::from_checkpoint(&load_checkpoint(ckpt)?)?;
    let symbols = read_tokens(phonemes)?;
    let references = read_wavs(&list_wavs(refs)?)?;
    let voice = bundle.reference_embedding(&references, s.jobs)?;
    let (mel, wav) = bundle.synthesize(&symbols, &voice.values, s.gl_iters()?)?;
    debug_assert_eq!(mel.kind, FeatureKind::Mel);
    write_wav(out, &wav)?;
    let sidecar = out.with_extension("vxfm");
    write_features(&sidecar, &mel.values)?;
    println!(
        "{} phonemes, {} frames, {:.2} s from {} references; wrote {} and {}",
        symbols.len(),
        mel.frames(),
        wav.duration_secs(),
        references.len(),
        out.display(),
        sidecar.display()
    );
    Ok(())
}

fn write_reports(dir: &Path, stem: &str, reports: &[EvalReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let table = ReportTable::from_reports(reports)?;
    let path = dir.join(format!("{stem}.tsv"));
    std::fs::write(&path, table.to_tsv())?;
    std::fs::write(dir.join(format!("{stem}_items.tsv")), EvalReport::items_tsv(reports))?;
    print!("{}", table.render());
    println!("wrote {}", path.display());
    Ok(())
}
