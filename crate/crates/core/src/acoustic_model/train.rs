//! Teacher-forced synthesizer training.

use std::ops::ControlFlow;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{loss_terms, AcousticModel, Masks, PhonemeSequence, Speaker, SynthesisTargets, VarianceMode};
use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::trainer::{train, Checkpoint, Objective, StepInfo, StepResult, TrainConfig};

/// Speaker conditioning stored with a training item.
#[derive(Clone, Debug, PartialEq)]
pub enum SpeakerRef {
    Embedding(Vec<f64>),
    Id(usize),
}

impl SpeakerRef {
    pub fn as_speaker(&self) -> Speaker<'_> {
        match self {
            SpeakerRef::Embedding(e) => Speaker::Embedding(e),
            SpeakerRef::Id(i) => Speaker::Id(*i),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TtsItem {
    pub phonemes: PhonemeSequence,
    pub targets: SynthesisTargets,
    /// `Σ durations × n_mels` log-mel target.
    pub mel: Mat,
    pub speaker: SpeakerRef,
}

impl TtsItem {
    pub fn validate(&self, n_mels: usize) -> Result<()> {
        self.targets.validate(self.phonemes.len())?;
        if self.mel.nrows() != self.targets.total_frames() || self.mel.ncols() != n_mels {
            return Err(Error::Data(format!(
                "mel target is {}×{}, durations sum to {} frames of {n_mels} bands",
                self.mel.nrows(),
                self.mel.ncols(),
                self.targets.total_frames()
            )));
        }
        Ok(())
    }
}

/// Mean total loss over the items of a batch.
pub struct TtsObjective<'a> {
    pub model: &'a AcousticModel,
    pub items: &'a [TtsItem],
}

impl Objective for TtsObjective<'_> {
    fn num_items(&self) -> usize {
        self.items.len()
    }

    fn evaluate(&self, params: &ParamStore, batch: &[usize], _rng: &mut ChaCha8Rng) -> Result<StepResult> {
        let mut ctx = Ctx::new(params, Mode::Train);
        let mut totals = Vec::with_capacity(batch.len());
        for &i in batch {
            let item = &self.items[i];
            let fw = self.model.forward(
                &mut ctx,
                &item.phonemes,
                item.speaker.as_speaker(),
                Some(&item.targets),
                VarianceMode::Train,
            )?;
            let frames = ctx.g.shape(fw.mel_after).0;
            if frames != item.targets.total_frames() {
                return Err(Error::Model(format!(
                    "teacher-forced output has {frames} frames, durations sum to {}",
                    item.targets.total_frames()
                )));
            }
            let l = loss_terms(&mut ctx, &fw, &item.mel, &item.targets, &Masks::default())?;
            totals.push(l.total);
        }
        let cat = ctx.g.concat_cols(&totals);
        let loss = ctx.g.mean_axis(cat, ndarray::Axis(1));
        let grads = ctx.g.backward(loss);
        Ok(StepResult { loss: ctx.g.scalar(loss), grads: ctx.g.param_grads(&grads), bn_updates: Vec::new() })
    }
}

pub fn train_synthesizer(
    model: &AcousticModel,
    items: &[TtsItem],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    hook: impl FnMut(&StepInfo, &ParamStore) -> ControlFlow<()>,
) -> Result<(AcousticModel, Checkpoint)> {
    for item in items {
        item.validate(model.cfg.n_mels)?;
    }
    let objective = TtsObjective { model, items };
    let ckpt = train(model.params.clone(), &objective, cfg, &model.meta(), checkpoint_dir, hook)?;
    let trained = AcousticModel { cfg: model.cfg.clone(), params: ckpt.params.clone() };
    Ok((trained, ckpt))
}
