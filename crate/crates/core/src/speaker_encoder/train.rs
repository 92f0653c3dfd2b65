//! Speaker-classification training for the embedding networks.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SpeakerEncoder;
use crate::autograd::{Mat, Var};
use crate::config::{flat_fields, FlatFields};
use crate::error::{Error, Result};
use crate::nn::{normal, Ctx, Mode, ParamStore};
use crate::trainer::{train, Checkpoint, Objective, StepInfo, StepResult, TrainConfig};

const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassifierLoss {
    #[default]
    Softmax,
    /// Additive angular margin on normalized embeddings and class weights.
    Aam,
}

impl fmt::Display for ClassifierLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierLoss::Softmax => "softmax",
            ClassifierLoss::Aam => "aam",
        })
    }
}

impl FromStr for ClassifierLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ClassifierLoss::Softmax),
            "aam" => Ok(ClassifierLoss::Aam),
            other => Err(Error::Config(format!("unknown classifier loss `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrainConfig {
    /// Random crop length in frames; shorter utterances are used whole.
    pub crop_frames: usize,
    pub loss: ClassifierLoss,
    pub aam_margin: f64,
    pub aam_scale: f64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self { crop_frames: 100, loss: ClassifierLoss::Softmax, aam_margin: 0.2, aam_scale: 30.0 }
    }
}

flat_fields!(EncoderTrainConfig { crop_frames, loss, aam_margin, aam_scale });

/// Labelled encoder input features.
#[derive(Clone, Debug)]
pub struct SpeakerCorpus {
    pub features: Vec<Mat>,
    pub labels: Vec<usize>,
    /// Speaker ids indexed by label, sorted.
    pub speakers: Vec<String>,
}

impl SpeakerCorpus {
    pub fn new(items: Vec<(String, Mat)>) -> Result<Self> {
        let mut speakers: Vec<String> = items.iter().map(|(s, _)| s.clone()).collect();
        speakers.sort();
        speakers.dedup();
        let index: BTreeMap<&str, usize> = speakers.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let labels = items.iter().map(|(s, _)| index[s.as_str()]).collect();
        let features = items.into_iter().map(|(_, m)| m).collect();
        Ok(Self { features, labels, speakers })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.num_speakers() < 2 {
            return Err(Error::Config("speaker classification needs at least 2 speakers".into()));
        }
        let mut counts = vec![0usize; self.num_speakers()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        if let Some(i) = counts.iter().position(|&c| c < 2) {
            return Err(Error::Config(format!("speaker `{}` has fewer than 2 utterances", self.speakers[i])));
        }
        for f in &self.features {
            if f.nrows() == 0 || f.ncols() != input_dim {
                return Err(Error::Data(format!(
                    "feature matrix {}×{} does not fit encoder input {input_dim}",
                    f.nrows(),
                    f.ncols()
                )));
            }
        }
        Ok(())
    }
}

fn init_head(params: &mut ParamStore, dim: usize, classes: usize, loss: ClassifierLoss, rng: &mut ChaCha8Rng) {
    params.insert("classifier.weight", normal((dim, classes), HEAD_INIT_STD, rng));
    if loss == ClassifierLoss::Softmax {
        params.insert("classifier.bias", Mat::zeros((1, classes)));
    }
}

/// `B × K` class scores: logits for softmax, cosines for AAM.
fn head_scores(ctx: &mut Ctx, embs: &[Var], loss: ClassifierLoss) -> Result<Var> {
    let e = ctx.g.concat_rows(embs);
    match loss {
        ClassifierLoss::Softmax => ctx.linear(e, "classifier"),
        ClassifierLoss::Aam => {
            let w = ctx.p("classifier.weight")?;
            let e2 = ctx.g.square(e);
            let en = ctx.g.sum_axis(e2, Axis(1));
            let en = ctx.g.add_scalar(en, 1e-12);
            let einv = ctx.g.powf(en, -0.5);
            let eu = ctx.g.mul(e, einv);
            let w2 = ctx.g.square(w);
            let wn = ctx.g.sum_axis(w2, Axis(0));
            let wn = ctx.g.add_scalar(wn, 1e-12);
            let winv = ctx.g.powf(wn, -0.5);
            let wu = ctx.g.mul(w, winv);
            Ok(ctx.g.matmul(eu, wu))
        }
    }
}

struct ClassifierObjective<'a> {
    encoder: &'a SpeakerEncoder,
    corpus: &'a SpeakerCorpus,
    cfg: &'a EncoderTrainConfig,
}

impl Objective for ClassifierObjective<'_> {
    fn num_items(&self) -> usize {
        self.corpus.len()
    }

    fn evaluate(&self, params: &ParamStore, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<StepResult> {
        let mut ctx = Ctx::new(params, Mode::Train);
        let mut feats = Vec::with_capacity(batch.len());
        for &i in batch {
            let f = &self.corpus.features[i];
            let len = self.cfg.crop_frames.max(1).min(f.nrows());
            let start = rng.gen_range(0..=f.nrows() - len);
            feats.push(ctx.constant(f.slice(s![start..start + len, ..]).to_owned()));
        }
        let embs = self.encoder.forward(&mut ctx, &feats)?;
        let labels: Vec<usize> = batch.iter().map(|&i| self.corpus.labels[i]).collect();
        let scores = head_scores(&mut ctx, &embs, self.cfg.loss)?;
        let logits = match self.cfg.loss {
            ClassifierLoss::Softmax => scores,
            ClassifierLoss::Aam => ctx.g.angular_margin(scores, &labels, self.cfg.aam_margin, self.cfg.aam_scale),
        };
        let loss = ctx.g.cross_entropy(logits, &labels);
        let grads = ctx.g.backward(loss);
        Ok(StepResult {
            loss: ctx.g.scalar(loss),
            grads: ctx.g.param_grads(&grads),
            bn_updates: ctx.take_bn_updates(),
        })
    }
}

/// Train the encoder with a classification head over the corpus speakers.
///
/// The returned checkpoint holds encoder and `classifier.*` parameters; the
/// encoder ignores the head when embedding.
pub fn train_speaker_classifier(
    encoder: &SpeakerEncoder,
    corpus: &SpeakerCorpus,
    cfg: &EncoderTrainConfig,
    train_cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    hook: impl FnMut(&StepInfo, &ParamStore) -> ControlFlow<()>,
) -> Result<(SpeakerEncoder, Checkpoint)> {
    corpus.validate(encoder.arch.input_dim())?;
    let mut params = encoder.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed ^ 0x5eed_c1a5);
    init_head(&mut params, encoder.embedding_dim(), corpus.num_speakers(), cfg.loss, &mut rng);
    let objective = ClassifierObjective { encoder, corpus, cfg };
    let mut meta = encoder.arch.to_flat();
    meta.merge(&cfg.to_flat("encoder_train"));
    meta.set("classifier.speakers", corpus.speakers.join(","));
    let ckpt = train(params, &objective, train_cfg, &meta, checkpoint_dir, hook)?;
    let trained = SpeakerEncoder { arch: encoder.arch.clone(), params: ckpt.params.clone() };
    Ok((trained, ckpt))
}

/// Eval-mode classification accuracy over whole utterances, using the
/// `classifier.*` head in `encoder.params`.
pub fn classification_accuracy(encoder: &SpeakerEncoder, corpus: &SpeakerCorpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let loss = if encoder.params.params().contains_key("classifier.bias") {
        ClassifierLoss::Softmax
    } else {
        ClassifierLoss::Aam
    };
    let mut correct = 0;
    for (f, &label) in corpus.features.iter().zip(&corpus.labels) {
        let mut ctx = Ctx::new(&encoder.params, Mode::Eval);
        let x = ctx.constant(f.clone());
        let emb = encoder.forward(&mut ctx, &[x])?;
        let scores = head_scores(&mut ctx, &emb, loss)?;
        let row = ctx.value(scores).row(0).to_owned();
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / corpus.len() as f64)
}
