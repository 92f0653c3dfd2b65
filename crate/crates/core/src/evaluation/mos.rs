//! MOSNet-style automatic quality prediction and external score files.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::Path;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use super::report::{EvalReport, Metric};
use crate::autograd::{Mat, Var};
use crate::config::{flat_fields, FlatConfig, FlatFields};
use crate::dsp::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{glorot, Ctx, Mode, ParamStore};
use crate::trainer::{train, Checkpoint, Objective, StepInfo, StepResult, TrainConfig};

pub const MOS_MIN: f64 = 1.0;
pub const MOS_MAX: f64 = 5.0;
const HEAD_BIAS_INIT: f64 = 3.0;
const INPUT_STD_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct MosConfig {
    pub n_mels: usize,
    pub conv_channels: usize,
    pub conv_layers: usize,
    pub conv_kernel: usize,
    pub rnn_hidden: usize,
    pub head_hidden: usize,
    /// Weight of the frame-level MSE term.
    pub frame_weight: f64,
}

impl Default for MosConfig {
    fn default() -> Self {
        Self { n_mels: 80, conv_channels: 16, conv_layers: 3, conv_kernel: 3, rnn_hidden: 16, head_hidden: 16, frame_weight: 1.0 }
    }
}

flat_fields!(MosConfig { n_mels, conv_channels, conv_layers, conv_kernel, rnn_hidden, head_hidden, frame_weight });

impl MosConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.conv_channels == 0 || self.rnn_hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Config("MOS predictor widths must be positive".into()));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("MOS conv kernel must be odd".into()));
        }
        if !(self.frame_weight >= 0.0) {
            return Err(Error::Config("frame_weight must be non-negative".into()));
        }
        Ok(())
    }
}

/// Anything that scores an utterance on the 1–5 scale.
pub trait MosPredictor {
    fn name(&self) -> &str;
    fn predict(&self, utterance_id: &str, mel: &FeatureMap) -> Result<f64>;
}

/// Conv stack → bidirectional tanh RNN → per-frame head; the utterance
/// score is the clamped mean of frame scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MosNet {
    pub cfg: MosConfig,
    pub params: ParamStore,
}

impl MosNet {
    pub fn new(cfg: MosConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        p.insert_buffer("input.mean", Mat::zeros((1, cfg.n_mels)));
        p.insert_buffer("input.std", Mat::ones((1, cfg.n_mels)));
        let mut width = cfg.n_mels;
        for i in 0..cfg.conv_layers {
            p.init_conv(&format!("conv{i}"), width, cfg.conv_channels, cfg.conv_kernel, &mut rng);
            width = cfg.conv_channels;
        }
        let h = cfg.rnn_hidden;
        for dir in ["fwd", "bwd"] {
            p.init_linear(&format!("rnn.{dir}.input"), width, h, &mut rng);
            p.insert(format!("rnn.{dir}.recurrent"), glorot(h, h, h, h, &mut rng) * 0.5);
        }
        p.init_linear("head.fc1", 2 * h, cfg.head_hidden, &mut rng);
        p.init_linear("head.fc2", cfg.head_hidden, 1, &mut rng);
        p.get_mut("head.fc2.bias")?.fill(HEAD_BIAS_INIT);
        Ok(Self { cfg, params: p })
    }

    /// Set the input standardization from training features.
    pub fn fit_input_stats(&mut self, mels: &[&Mat]) -> Result<()> {
        let n: usize = mels.iter().map(|m| m.nrows()).sum();
        if n == 0 {
            return Err(Error::Data("no frames to fit input statistics".into()));
        }
        let c = self.cfg.n_mels;
        let mut mean = Mat::zeros((1, c));
        let mut sq = Mat::zeros((1, c));
        for m in mels {
            self.check_width(m)?;
            mean += &m.sum_axis(Axis(0)).insert_axis(Axis(0));
            sq += &m.mapv(|v| v * v).sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        mean /= n as f64;
        let std = (sq / n as f64 - mean.mapv(|v| v * v)).mapv(|v| v.max(0.0).sqrt().max(INPUT_STD_FLOOR));
        *self.params.buffer_mut("input.mean")? = mean;
        *self.params.buffer_mut("input.std")? = std;
        Ok(())
    }

    fn check_width(&self, m: &Mat) -> Result<()> {
        if m.ncols() != self.cfg.n_mels {
            return Err(Error::Model(format!("MOS predictor expects {} mel bands, got {}", self.cfg.n_mels, m.ncols())));
        }
        Ok(())
    }

    fn recurrent(&self, ctx: &mut Ctx, x: Var, dir: &str, reverse: bool) -> Result<Var> {
        let xw = ctx.linear(x, &format!("rnn.{dir}.input"))?;
        let wh = ctx.p(&format!("rnn.{dir}.recurrent"))?;
        let t = ctx.g.shape(x).0;
        let mut states: Vec<Var> = Vec::with_capacity(t);
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for (n, &i) in order.iter().enumerate() {
            let inp = ctx.g.slice_rows(xw, i, i + 1);
            let pre = if n == 0 {
                inp
            } else {
                let rec = ctx.g.matmul(states[n - 1], wh);
                ctx.g.add(inp, rec)
            };
            states.push(ctx.g.tanh(pre));
        }
        if reverse {
            states.reverse();
        }
        Ok(ctx.g.concat_rows(&states))
    }

    /// `T × 1` unclamped frame scores for a raw (unstandardized) mel.
    pub fn frame_scores(&self, ctx: &mut Ctx, mel: Var) -> Result<Var> {
        let mean = ctx.constant(self.params.buffer("input.mean")?.clone());
        let inv = ctx.constant(self.params.buffer("input.std")?.mapv(|v| 1.0 / v));
        let centered = ctx.g.sub(mel, mean);
        let mut x = ctx.g.mul(centered, inv);
        for i in 0..self.cfg.conv_layers {
            x = ctx.conv(x, &format!("conv{i}"), 1)?;
            x = ctx.g.relu(x);
        }
        let f = self.recurrent(ctx, x, "fwd", false)?;
        let b = self.recurrent(ctx, x, "bwd", true)?;
        let h = ctx.g.concat_cols(&[f, b]);
        let h = ctx.linear(h, "head.fc1")?;
        let h = ctx.g.relu(h);
        ctx.linear(h, "head.fc2")
    }

    /// Utterance score in `[1, 5]`.
    pub fn predict_mel(&self, mel: &Mat) -> Result<f64> {
        if mel.nrows() == 0 || mel.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("MOS input must be a non-empty finite mel".into()));
        }
        self.check_width(mel)?;
        let mut ctx = Ctx::new(&self.params, Mode::Eval);
        let x = ctx.constant(mel.clone());
        let s = self.frame_scores(&mut ctx, x)?;
        let mean = ctx.value(s).mean().unwrap_or(f64::NAN);
        if !mean.is_finite() {
            return Err(Error::Model("MOS predictor produced a non-finite score".into()));
        }
        Ok(mean.clamp(MOS_MIN, MOS_MAX))
    }

    pub fn meta(&self) -> FlatConfig {
        let mut out = self.cfg.to_flat("mos");
        out.set("model.kind", "mos");
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(self.params.clone(), self.meta())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config.get_str("model.kind") != Some("mos") {
            return Err(Error::Incompatible("not a MOS predictor checkpoint".into()));
        }
        let cfg = MosConfig::from_flat("mos", &ckpt.config)?;
        cfg.validate()?;
        Ok(Self { cfg, params: ckpt.params.clone() })
    }
}

impl MosPredictor for MosNet {
    fn name(&self) -> &str {
        "mosnet"
    }

    fn predict(&self, _id: &str, mel: &FeatureMap) -> Result<f64> {
        self.predict_mel(&mel.values)
    }
}

/// Scores produced by an external predictor, keyed by utterance id.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalScores {
    pub name: String,
    pub scores: BTreeMap<String, f64>,
}

impl MosPredictor for ExternalScores {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, id: &str, _mel: &FeatureMap) -> Result<f64> {
        self.scores.get(id).copied().ok_or_else(|| Error::Data(format!("{}: no score for `{id}`", self.name)))
    }
}

/// Parse `utterance_id  score` lines; `#` comments and blank lines ignored.
pub fn read_score_file(name: &str, path: &Path) -> Result<ExternalScores> {
    let text = std::fs::read_to_string(path)?;
    let mut scores = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Format(format!("{}:{}: expected `utterance_id score`", path.display(), n + 1)));
        };
        let v: f64 = v.parse().map_err(|_| Error::Format(format!("{}:{}: bad score `{v}`", path.display(), n + 1)))?;
        if !(MOS_MIN..=MOS_MAX).contains(&v) {
            return Err(Error::Format(format!("{}:{}: score {v} outside [1, 5]", path.display(), n + 1)));
        }
        if scores.insert(id.to_string(), v).is_some() {
            return Err(Error::Format(format!("{}:{}: duplicate id `{id}`", path.display(), n + 1)));
        }
    }
    Ok(ExternalScores { name: name.into(), scores })
}

/// Score every item with `predictor`.
pub fn mos_report(
    system: &str,
    test_set: &str,
    predictor: &dyn MosPredictor,
    items: &[(String, FeatureMap)],
) -> Result<EvalReport> {
    let scores = items
        .iter()
        .map(|(id, mel)| Ok((id.clone(), predictor.predict(id, mel)?)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::new(system, test_set, Metric::Mos, scores)
}

/// A mel with its quality label.
#[derive(Clone, Debug)]
pub struct MosItem {
    pub id: String,
    pub mel: Mat,
    pub score: f64,
}

/// Degrade every clean log-mel at each level `ℓ ∈ [0, 1]` by adding
/// exponential noise of power `ℓ` times the utterance's mean power, labelled
/// `5 − 4ℓ`.
pub fn make_quality_corpus(clean: &[(String, Mat)], levels: &[f64], seed: u64) -> Result<Vec<MosItem>> {
    if let Some(l) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Config(format!("degradation level {l} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(clean.len() * levels.len());
    for (id, mel) in clean {
        let power = mel.mapv(f64::exp).mean().unwrap_or(0.0);
        for (k, &level) in levels.iter().enumerate() {
            let noisy = mel.mapv(|v| {
                let n: f64 = rng.sample(Exp1);
                (v.exp() + level * power * n).ln()
            });
            out.push(MosItem { id: format!("{id}#q{k}"), mel: noisy, score: MOS_MAX - (MOS_MAX - MOS_MIN) * level });
        }
    }
    Ok(out)
}

/// Mean over a batch of utterance MSE plus weighted frame MSE.
pub(crate) struct MosObjective<'a> {
    pub model: &'a MosNet,
    pub items: &'a [MosItem],
}

impl MosObjective<'_> {
    pub(crate) fn batch_loss(&self, ctx: &mut Ctx, batch: &[usize]) -> Result<Var> {
        let mut losses = Vec::with_capacity(batch.len());
        for &i in batch {
            let item = &self.items[i];
            let x = ctx.constant(item.mel.clone());
            let frames = self.model.frame_scores(ctx, x)?;
            let utt = ctx.g.mean_axis(frames, Axis(0));
            let du = ctx.g.add_scalar(utt, -item.score);
            let lu = ctx.g.square(du);
            let df = ctx.g.add_scalar(frames, -item.score);
            let sq = ctx.g.square(df);
            let lf = ctx.g.mean_axis(sq, Axis(0));
            let lf = ctx.g.scale(lf, self.model.cfg.frame_weight);
            losses.push(ctx.g.add(lu, lf));
        }
        let cat = ctx.g.concat_cols(&losses);
        Ok(ctx.g.mean_axis(cat, Axis(1)))
    }
}

impl Objective for MosObjective<'_> {
    fn num_items(&self) -> usize {
        self.items.len()
    }

    fn evaluate(&self, params: &ParamStore, batch: &[usize], _rng: &mut ChaCha8Rng) -> Result<StepResult> {
        let model = MosNet { cfg: self.model.cfg.clone(), params: params.clone() };
        let obj = MosObjective { model: &model, items: self.items };
        let mut ctx = Ctx::new(params, Mode::Train);
        let loss = obj.batch_loss(&mut ctx, batch)?;
        let grads = ctx.g.backward(loss);
        Ok(StepResult { loss: ctx.g.scalar(loss), grads: ctx.g.param_grads(&grads), bn_updates: Vec::new() })
    }
}

/// Fit input statistics on the corpus, then minimize the MOS objective.
pub fn train_mos_predictor(
    items: &[MosItem],
    cfg: &MosConfig,
    train_cfg: &TrainConfig,
    hook: impl FnMut(&StepInfo, &ParamStore) -> ControlFlow<()>,
) -> Result<(MosNet, Checkpoint)> {
    if items.is_empty() {
        return Err(Error::Data("MOS training corpus is empty".into()));
    }
    if let Some(it) = items.iter().find(|it| !(MOS_MIN..=MOS_MAX).contains(&it.score)) {
        return Err(Error::Data(format!("label {} for `{}` outside [1, 5]", it.score, it.id)));
    }
    let mut model = MosNet::new(cfg.clone(), train_cfg.seed)?;
    for it in items {
        if it.mel.nrows() == 0 || it.mel.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("`{}`: MOS input must be a non-empty finite mel", it.id)));
        }
    }
    model.fit_input_stats(&items.iter().map(|it| &it.mel).collect::<Vec<_>>())?;
    let objective = MosObjective { model: &model, items };
    let ckpt = train(model.params.clone(), &objective, train_cfg, &model.meta(), None, hook)?;
    let trained = MosNet { cfg: cfg.clone(), params: ckpt.params.clone() };
    Ok((trained, ckpt))
}
