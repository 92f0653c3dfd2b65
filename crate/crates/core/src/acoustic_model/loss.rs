//! Training objective: L1 on both mel outputs, MSE on the variance predictors.

use super::layers::column;
use super::{ForwardVars, SynthesisOutput, SynthesisTargets};
use crate::autograd::{Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Mode, ParamStore};

/// Validity masks; `None` means every position counts.
#[derive(Clone, Debug, Default)]
pub struct Masks {
    pub frames: Option<Vec<bool>>,
    pub phonemes: Option<Vec<bool>>,
}

pub struct LossVars {
    pub total: Var,
    pub mel_before: Var,
    pub mel_after: Var,
    pub duration: Var,
    pub pitch: Var,
    pub energy: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub total: f64,
    pub mel_before: f64,
    pub mel_after: f64,
    pub duration: f64,
    pub pitch: f64,
    pub energy: f64,
}

impl LossVars {
    pub fn record(&self, ctx: &Ctx) -> LossRecord {
        LossRecord {
            total: ctx.g.scalar(self.total),
            mel_before: ctx.g.scalar(self.mel_before),
            mel_after: ctx.g.scalar(self.mel_after),
            duration: ctx.g.scalar(self.duration),
            pitch: ctx.g.scalar(self.pitch),
            energy: ctx.g.scalar(self.energy),
        }
    }
}

/// Column of per-row weights averaging over the valid rows.
fn mean_weights(rows: usize, mask: Option<&Vec<bool>>, per_row: usize) -> Result<Mat> {
    let valid = match mask {
        Some(m) if m.len() != rows => {
            return Err(Error::Input(format!("mask length {} for {rows} positions", m.len())));
        }
        Some(m) => m.iter().filter(|&&v| v).count(),
        None => rows,
    };
    if valid == 0 {
        return Err(Error::Input("every position is masked".into()));
    }
    let w = 1.0 / (valid * per_row) as f64;
    Ok(Mat::from_shape_fn((rows, 1), |(i, _)| match mask {
        Some(m) if !m[i] => 0.0,
        _ => w,
    }))
}

fn masked_l1(ctx: &mut Ctx, pred: Var, target: &Mat, mask: Option<&Vec<bool>>) -> Result<Var> {
    if ctx.g.shape(pred) != target.dim() {
        return Err(Error::Input(format!("mel output {:?} vs target {:?}", ctx.g.shape(pred), target.dim())));
    }
    let w = ctx.constant(mean_weights(target.nrows(), mask, target.ncols())?);
    let t = ctx.constant(target.clone());
    let d = ctx.g.sub(pred, t);
    let a = ctx.g.abs(d);
    let wa = ctx.g.mul(a, w);
    Ok(ctx.g.sum_all(wa))
}

fn masked_mse(ctx: &mut Ctx, pred: Var, target: &[f64], mask: Option<&Vec<bool>>) -> Result<Var> {
    if ctx.g.shape(pred) != (target.len(), 1) {
        return Err(Error::Input(format!("{} predictions for {} targets", ctx.g.shape(pred).0, target.len())));
    }
    let w = ctx.constant(mean_weights(target.len(), mask, 1)?);
    let t = ctx.constant(column(target));
    let d = ctx.g.sub(pred, t);
    let sq = ctx.g.square(d);
    let wsq = ctx.g.mul(sq, w);
    Ok(ctx.g.sum_all(wsq))
}

/// Loss nodes for one item.
pub fn loss_terms(
    ctx: &mut Ctx,
    fw: &ForwardVars,
    mel_target: &Mat,
    targets: &SynthesisTargets,
    masks: &Masks,
) -> Result<LossVars> {
    let frames = masks.frames.as_ref();
    let phonemes = masks.phonemes.as_ref();
    let mel_before = masked_l1(ctx, fw.mel_before, mel_target, frames)?;
    let mel_after = masked_l1(ctx, fw.mel_after, mel_target, frames)?;
    let duration = masked_mse(ctx, fw.log_durations, &targets.log_durations(), phonemes)?;
    let pitch = masked_mse(ctx, fw.pitch, &targets.pitch, phonemes)?;
    let energy = masked_mse(ctx, fw.energy, &targets.energy, phonemes)?;
    let parts = ctx.g.concat_cols(&[mel_before, mel_after, duration, pitch, energy]);
    let total = ctx.g.sum_all(parts);
    Ok(LossVars { total, mel_before, mel_after, duration, pitch, energy })
}

/// Loss components of a finished synthesis against its targets.
pub fn compute_losses(
    out: &SynthesisOutput,
    mel_target: &Mat,
    targets: &SynthesisTargets,
    masks: &Masks,
) -> Result<LossRecord> {
    let empty = ParamStore::new();
    let mut ctx = Ctx::new(&empty, Mode::Eval);
    let fw = ForwardVars {
        mel_before: ctx.constant(out.mel_before.values.clone()),
        mel_after: ctx.constant(out.mel_after.values.clone()),
        log_durations: ctx.constant(column(&out.log_durations)),
        pitch: ctx.constant(column(&out.pitch)),
        energy: ctx.constant(column(&out.energy)),
        durations: out.durations.clone(),
        encoder_attention: Vec::new(),
    };
    Ok(loss_terms(&mut ctx, &fw, mel_target, targets, masks)?.record(&ctx))
}
