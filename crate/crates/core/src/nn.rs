//! Parameter storage and the layer primitives shared by all networks.

use std::collections::BTreeMap;

use ndarray::Axis;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Mat, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Named trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Ordered maps keep iteration and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Mat>,
    buffers: BTreeMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.params.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.params.remove(name)
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Mat) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("missing parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Mat> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing buffer `{name}`")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Model(format!("missing buffer `{name}`")))
    }

    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> &BTreeMap<String, Mat> {
        &self.buffers
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .values()
            .chain(self.buffers.values())
            .all(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Round every tensor to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for m in self.params.values_mut().chain(self.buffers.values_mut()) {
            m.mapv_inplace(|v| v as f32 as f64);
        }
    }

    // ---- initializers -------------------------------------------------

    pub fn init_linear<R: Rng>(&mut self, prefix: &str, input: usize, output: usize, rng: &mut R) {
        self.insert(format!("{prefix}.weight"), glorot(input, output, input, output, rng));
        self.insert(format!("{prefix}.bias"), Mat::zeros((1, output)));
    }

    pub fn init_conv<R: Rng>(
        &mut self,
        prefix: &str,
        input: usize,
        output: usize,
        kernel: usize,
        rng: &mut R,
    ) {
        let w = glorot(kernel * input, output, kernel * input, output, rng);
        self.insert(format!("{prefix}.weight"), w);
        self.insert(format!("{prefix}.bias"), Mat::zeros((1, output)));
    }

    pub fn init_batch_norm(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gamma"), Mat::ones((1, channels)));
        self.insert(format!("{prefix}.beta"), Mat::zeros((1, channels)));
        self.insert_buffer(format!("{prefix}.running_mean"), Mat::zeros((1, channels)));
        self.insert_buffer(format!("{prefix}.running_var"), Mat::ones((1, channels)));
    }

    pub fn init_layer_norm(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gamma"), Mat::ones((1, channels)));
        self.insert(format!("{prefix}.beta"), Mat::zeros((1, channels)));
    }

    pub fn init_embedding<R: Rng>(&mut self, name: &str, rows: usize, dim: usize, rng: &mut R) {
        let std = (1.0 / dim as f64).sqrt();
        self.insert(name, normal((rows, dim), std, rng));
    }
}

/// Glorot-normal matrix of the given shape.
pub fn glorot<R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Mat {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal((rows, cols), std, rng)
}

pub fn normal<R: Rng>(shape: (usize, usize), std: f64, rng: &mut R) -> Mat {
    let dist = Normal::new(0.0, std).expect("finite std");
    Mat::from_shape_simple_fn(shape, || dist.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a train-mode batch-norm layer.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Mat,
    pub var: Mat,
}

impl BnUpdate {
    /// Fold the batch statistics into the running buffers.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        let rm = store.buffer_mut(&format!("{}.running_mean", self.prefix))?;
        *rm = &*rm * (1.0 - BN_MOMENTUM) + &self.mean * BN_MOMENTUM;
        let rv = store.buffer_mut(&format!("{}.running_var", self.prefix))?;
        *rv = &*rv * (1.0 - BN_MOMENTUM) + &self.var * BN_MOMENTUM;
        Ok(())
    }
}

/// One forward evaluation: the tape, the parameters it reads and the mode.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    pub mode: Mode,
    bn_updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self { g: Graph::new(), store, mode, bn_updates: Vec::new() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let value = self.store.get(name)?;
        Ok(self.g.param(name, value))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.get(name).is_ok()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.g.constant(m)
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.g.value(v)
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// `x W + b`; the bias is optional in the store.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let (xin, win) = (self.g.shape(x).1, self.g.shape(w).0);
        if xin != win {
            return Err(Error::Model(format!("{prefix}: input width {xin}, expected {win}")));
        }
        let y = self.g.matmul(x, w);
        self.add_bias(y, prefix)
    }

    fn add_bias(&mut self, y: Var, prefix: &str) -> Result<Var> {
        let name = format!("{prefix}.bias");
        if self.has(&name) {
            let b = self.p(&name)?;
            Ok(self.g.add(y, b))
        } else {
            Ok(y)
        }
    }

    pub fn conv(&mut self, x: Var, prefix: &str, dilation: usize) -> Result<Var> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let (cin, rows) = (self.g.shape(x).1, self.g.shape(w).0);
        if cin == 0 || rows % cin != 0 || (rows / cin) % 2 == 0 {
            return Err(Error::Model(format!(
                "{prefix}: weight has {rows} rows, incompatible with {cin} input channels"
            )));
        }
        let y = self.g.conv1d(x, w, dilation);
        self.add_bias(y, prefix)
    }

    /// Batch normalization over every row of every item in `xs`.
    ///
    /// Train mode normalizes with the joint batch statistics and records them
    /// for the running buffers; eval mode uses the frozen running statistics.
    pub fn batch_norm(&mut self, xs: &[Var], prefix: &str) -> Result<Vec<Var>> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let joined = if xs.len() == 1 { xs[0] } else { self.g.concat_rows(xs) };
                let n = self.g.shape(joined).0;
                let mean = self.g.mean_axis(joined, Axis(0));
                let centered = self.g.sub(joined, mean);
                let sq = self.g.square(centered);
                let var = self.g.mean_axis(sq, Axis(0));
                let shifted = self.g.add_scalar(var, BN_EPS);
                let inv = self.g.powf(shifted, -0.5);
                let normed = self.g.mul(centered, inv);
                let scaled = self.g.mul(normed, gamma);
                let out = self.g.add(scaled, beta);
                let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                self.bn_updates.push(BnUpdate {
                    prefix: prefix.to_string(),
                    mean: self.g.value(mean).clone(),
                    var: self.g.value(var) * unbiased,
                });
                if xs.len() == 1 {
                    return Ok(vec![out]);
                }
                let mut start = 0;
                let mut parts = Vec::with_capacity(xs.len());
                for &x in xs {
                    let rows = self.g.shape(x).0;
                    parts.push(self.g.slice_rows(out, start, start + rows));
                    start += rows;
                }
                Ok(parts)
            }
            Mode::Eval => {
                let rm = self.store.buffer(&format!("{prefix}.running_mean"))?.clone();
                let rv = self.store.buffer(&format!("{prefix}.running_var"))?;
                let inv = rv.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                let rm = self.g.constant(rm);
                let inv = self.g.constant(inv);
                let scale = self.g.mul(inv, gamma);
                xs.iter()
                    .map(|&x| {
                        let c = self.g.sub(x, rm);
                        let s = self.g.mul(c, scale);
                        Ok(self.g.add(s, beta))
                    })
                    .collect()
            }
        }
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let mean = self.g.mean_axis(x, Axis(1));
        let centered = self.g.sub(x, mean);
        let sq = self.g.square(centered);
        let var = self.g.mean_axis(sq, Axis(1));
        let shifted = self.g.add_scalar(var, LN_EPS);
        let inv = self.g.powf(shifted, -0.5);
        let normed = self.g.mul(centered, inv);
        let scaled = self.g.mul(normed, gamma);
        Ok(self.g.add(scaled, beta))
    }
}

/// Sinusoidal position table, `len × dim`.
pub fn sinusoid_table(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn train_batch_norm_normalizes_jointly() {
        let mut store = ParamStore::new();
        store.init_batch_norm("bn", 2);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let a = ctx.constant(array![[1.0, 10.0], [3.0, 20.0]]);
        let b = ctx.constant(array![[5.0, 30.0]]);
        let out = ctx.batch_norm(&[a, b], "bn").unwrap();
        assert_eq!(ctx.value(out[0]).dim(), (2, 2));
        assert_eq!(ctx.value(out[1]).dim(), (1, 2));
        let col0: Vec<f64> = [ctx.value(out[0])[[0, 0]], ctx.value(out[0])[[1, 0]], ctx.value(out[1])[[0, 0]]].to_vec();
        let mean: f64 = col0.iter().sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        let updates = ctx.take_bn_updates();
        assert_eq!(updates.len(), 1);
        assert!((updates[0].mean[[0, 0]] - 3.0).abs() < 1e-12);
        // unbiased variance of {1,3,5}
        assert!((updates[0].var[[0, 0]] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn eval_batch_norm_fresh_is_near_identity() {
        let mut store = ParamStore::new();
        store.init_batch_norm("bn", 1);
        let mut ctx = Ctx::new(&store, Mode::Eval);
        let x = ctx.constant(array![[2.0], [-1.0]]);
        let y = ctx.batch_norm(&[x], "bn").unwrap()[0];
        assert!((ctx.value(y)[[0, 0]] - 2.0 / (1.0 + BN_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn running_stats_update_uses_momentum() {
        let mut store = ParamStore::new();
        store.init_batch_norm("bn", 1);
        let up = BnUpdate { prefix: "bn".into(), mean: array![[1.0]], var: array![[3.0]] };
        up.apply(&mut store).unwrap();
        assert!((store.buffer("bn.running_mean").unwrap()[[0, 0]] - 0.1).abs() < 1e-12);
        assert!((store.buffer("bn.running_var").unwrap()[[0, 0]] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn missing_parameter_is_a_model_error() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, Mode::Eval);
        assert!(matches!(ctx.p("nope"), Err(Error::Model(_))));
    }
}
