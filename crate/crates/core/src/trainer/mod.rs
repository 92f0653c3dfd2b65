//! Optimization loop, gradient verification and checkpointing shared by the
//! speaker encoder, the synthesizer and the MOS predictor.

mod checkpoint;
mod gradcheck;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{
    gradient_check, gradient_check_fn, gradient_check_with_floor, GradCheckReport, DEFAULT_FLOOR, NETWORK_FLOOR,
};

use std::collections::BTreeMap;
use std::fmt;
use std::ops::ControlFlow;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::config::flat_fields;
use crate::error::{Error, Result};
use crate::nn::{BnUpdate, ParamStore};

/// Storage precision of parameters. Arithmetic is always `f64`; with `F32`
/// parameters are rounded to `f32` after every update so checkpoints hold
/// them exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    /// Steps between checkpoints; 0 disables periodic checkpointing.
    pub checkpoint_interval: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 8,
            max_steps: 2000,
            warmup_steps: 100,
            learning_rate: 1e-3,
            grad_clip: 1.0,
            checkpoint_interval: 0,
            precision: Precision::F32,
        }
    }
}

flat_fields!(TrainConfig {
    seed,
    batch_size,
    max_steps,
    warmup_steps,
    learning_rate,
    grad_clip,
    checkpoint_interval,
    precision,
});

impl TrainConfig {
    /// Full-scale setting used for the published models: 400k steps, batch 16.
    pub fn full_scale() -> Self {
        Self { batch_size: 16, max_steps: 400_000, warmup_steps: 4000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(Error::Config("batch_size and max_steps must be positive".into()));
        }
        if self.warmup_steps > self.max_steps {
            return Err(Error::Config("warmup_steps must not exceed max_steps".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::Config("learning_rate and grad_clip must be positive".into()));
        }
        Ok(())
    }

    /// Inverse-square-root schedule with linear warmup; `step` is 1-based and
    /// the peak `learning_rate` is reached at `step == warmup_steps`.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        let w = self.warmup_steps as f64;
        self.learning_rate * (s / w).min((w / s).sqrt())
    }
}

/// Adam moments, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

impl AdamState {
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Mat>, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.dim() != g.dim() {
                return Err(Error::Model(format!("gradient shape mismatch for `{name}`")));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.dim()));
            ndarray::Zip::from(&mut *p)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                });
        }
        Ok(())
    }
}

pub fn global_norm(grads: &BTreeMap<String, Mat>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescale so the global norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Mat>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Loss, gradients and batch-norm statistics for one batch.
pub struct StepResult {
    pub loss: f64,
    pub grads: BTreeMap<String, Mat>,
    pub bn_updates: Vec<BnUpdate>,
}

/// A differentiable training objective over an indexed corpus.
pub trait Objective {
    fn num_items(&self) -> usize;

    /// Forward and backward pass on the items in `batch`.
    fn evaluate(&self, params: &ParamStore, batch: &[usize], rng: &mut ChaCha8Rng) -> Result<StepResult>;
}

/// Progress passed to the training hook after every step.
pub struct StepInfo {
    pub step: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub grad_norm: f64,
}

/// Seeded epoch-shuffled batch order.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize) -> Self {
        Self { order: (0..n).collect(), cursor: n }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Run the optimization loop.
///
/// `meta` is stored in the returned checkpoint as its configuration snapshot.
/// When `checkpoint_dir` is given and `checkpoint_interval > 0`, intermediate
/// checkpoints are written there as `ckpt-<step>.vxck`. The hook may stop
/// training early by returning `ControlFlow::Break`.
pub fn train<O: Objective>(
    mut params: ParamStore,
    objective: &O,
    cfg: &TrainConfig,
    meta: &crate::config::FlatConfig,
    checkpoint_dir: Option<&Path>,
    mut hook: impl FnMut(&StepInfo, &ParamStore) -> ControlFlow<()>,
) -> Result<Checkpoint> {
    use crate::config::FlatFields;
    cfg.validate()?;
    if objective.num_items() == 0 {
        return Err(Error::Data("training corpus is empty".into()));
    }
    if cfg.precision == Precision::F32 {
        params.round_to_f32();
    }
    let mut snapshot = meta.clone();
    snapshot.merge(&cfg.to_flat("train"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(objective.num_items());
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut step = 0;
    while step < cfg.max_steps {
        step += 1;
        let batch = sampler.next(cfg.batch_size, &mut rng);
        let StepResult { loss, mut grads, bn_updates } = objective.evaluate(&params, &batch, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step, loss: grad_norm });
        }
        let lr = cfg.learning_rate_at(step);
        adam.step(&mut params, &grads, lr)?;
        for up in &bn_updates {
            up.apply(&mut params)?;
        }
        if cfg.precision == Precision::F32 {
            params.round_to_f32();
        }
        history.push(loss);
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 {
                let ckpt = Checkpoint {
                    step,
                    params: params.clone(),
                    optimizer: adam.clone(),
                    config: snapshot.clone(),
                    loss_history: history.clone(),
                    precision: cfg.precision,
                };
                std::fs::create_dir_all(dir)?;
                save_checkpoint(&ckpt, &dir.join(format!("ckpt-{step:06}.vxck")))?;
            }
        }
        let info = StepInfo { step, loss, learning_rate: lr, grad_norm };
        if hook(&info, &params).is_break() {
            break;
        }
    }
    Ok(Checkpoint {
        step,
        params,
        optimizer: adam,
        config: snapshot,
        loss_history: history,
        precision: cfg.precision,
    })
}
