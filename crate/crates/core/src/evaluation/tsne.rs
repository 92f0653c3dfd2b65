//! Exact t-SNE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Mat;
use crate::error::{Error, Result};

const ENTROPY_TOL: f64 = 1e-10;
const MAX_BISECTIONS: usize = 200;
const MIN_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Standard deviation of the Gaussian initialization.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

crate::config::flat_fields!(TsneConfig {
    perplexity,
    iterations,
    learning_rate,
    exaggeration,
    exaggeration_iters,
    initial_momentum,
    final_momentum,
    init_std,
    seed,
});

/// Input affinities of an exact t-SNE run.
#[derive(Clone, Debug)]
pub struct Affinities {
    /// Row-stochastic `p(j | i)`, zero diagonal.
    pub conditional: Mat,
    /// `(P + Pᵀ) / 2n`, sums to 1.
    pub joint: Mat,
    /// `exp(H(P_i))` achieved per point, entropy in nats.
    pub perplexities: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TsneOutput {
    pub points: Vec<[f64; 2]>,
    /// `KL(P ‖ Q)` before the first update and after every iteration.
    pub kl_history: Vec<f64>,
}

fn squared_distances(x: &[Vec<f64>]) -> Mat {
    let n = x.len();
    let mut d = Mat::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Gaussian row for precision `beta`; returns probabilities and entropy in nats.
fn gaussian_row(d: &[f64], skip: usize, beta: f64) -> (Vec<f64>, f64) {
    let base = d.iter().enumerate().filter(|&(j, _)| j != skip).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d.iter().enumerate().map(|(j, &v)| if j == skip { 0.0 } else { (-beta * (v - base)).exp() }).collect();
    let z: f64 = p.iter().sum();
    let mut mean_shifted = 0.0;
    for (pj, &v) in p.iter_mut().zip(d) {
        *pj /= z;
        mean_shifted += *pj * (v - base);
    }
    (p, z.ln() + beta * mean_shifted)
}

/// Per-point bandwidths bisected to `perplexity`, then symmetrized.
pub fn input_affinities(x: &[Vec<f64>], perplexity: f64) -> Result<Affinities> {
    validate_inputs(x, perplexity)?;
    let n = x.len();
    let d = squared_distances(x);
    let target = perplexity.ln();
    let mut cond = Mat::zeros((n, n));
    let mut perplexities = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = d.row(i).to_vec();
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        let (mut p, mut h) = gaussian_row(&row, i, beta);
        for _ in 0..MAX_BISECTIONS {
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
            (p, h) = gaussian_row(&row, i, beta);
        }
        perplexities.push(h.exp());
        cond.row_mut(i).assign(&ndarray::Array1::from(p));
    }
    let joint = (&cond + &cond.t()) / (2.0 * n as f64);
    Ok(Affinities { conditional: cond, joint, perplexities })
}

fn validate_inputs(x: &[Vec<f64>], perplexity: f64) -> Result<()> {
    if !(perplexity > 0.0) {
        return Err(Error::Config(format!("perplexity must be positive, got {perplexity}")));
    }
    if x.len() < 2 || (x.len() as f64) < 3.0 * perplexity {
        return Err(Error::Input(format!(
            "t-SNE with perplexity {perplexity} needs at least {} points, got {}",
            (3.0 * perplexity).ceil().max(2.0),
            x.len()
        )));
    }
    let dim = x[0].len();
    if x.iter().any(|v| v.len() != dim) {
        return Err(Error::Input("t-SNE inputs have mixed dimensions".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("t-SNE inputs contain non-finite values".into()));
    }
    Ok(())
}

/// Student-t kernel `1 / (1 + ‖yi − yj‖²)` with zero diagonal, and its sum.
fn student_kernel(y: &[[f64; 2]]) -> (Mat, f64) {
    let n = y.len();
    let mut num = Mat::zeros((n, n));
    let mut z = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[[i, j]] = v;
            num[[j, i]] = v;
            z += 2.0 * v;
        }
    }
    (num, z)
}

fn kl_divergence(p: &Mat, num: &Mat, z: f64) -> f64 {
    p.iter()
        .zip(num.iter())
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij / (nij / z).max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// `∂KL/∂y_i = 4 Σ_j (e·p_ij − q_ij) (1 + ‖yi − yj‖²)⁻¹ (yi − yj)` with
/// exaggeration factor `e`.
fn kl_gradient(p: &Mat, y: &[[f64; 2]], num: &Mat, z: f64, exaggerate: f64) -> Vec<[f64; 2]> {
    let n = y.len();
    let mut grad = vec![[0.0; 2]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let w = (exaggerate * p[[i, j]] - num[[i, j]] / z) * num[[i, j]];
            grad[i][0] += 4.0 * w * (y[i][0] - y[j][0]);
            grad[i][1] += 4.0 * w * (y[i][1] - y[j][1]);
        }
    }
    grad
}

/// Project to 2-D by gradient descent on `KL(P ‖ Q)` with early
/// exaggeration, momentum and per-coordinate adaptive gains.
pub fn tsne_project(x: &[Vec<f64>], cfg: &TsneConfig) -> Result<TsneOutput> {
    let aff = input_affinities(x, cfg.perplexity)?;
    let p = aff.joint;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let (mut num, mut z) = student_kernel(&y);
    let mut kl_history = Vec::with_capacity(cfg.iterations + 1);
    kl_history.push(kl_divergence(&p, &num, z));
    for it in 0..cfg.iterations {
        let exaggerate = if it < cfg.exaggeration_iters { cfg.exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { cfg.initial_momentum } else { cfg.final_momentum };
        if it == cfg.exaggeration_iters {
            // Gains grown under exaggeration would overshoot the unexaggerated objective.
            update = vec![[0.0; 2]; n];
            gains = vec![[1.0; 2]; n];
        }
        let grad = kl_gradient(&p, &y, &num, z, exaggerate);
        for i in 0..n {
            for k in 0..2 {
                let g = &mut gains[i][k];
                *g = if update[i][k] * grad[i][k] < 0.0 { *g + 0.2 } else { *g * 0.8 };
                *g = (*g).max(MIN_GAIN);
                update[i][k] = momentum * update[i][k] - cfg.learning_rate * *g * grad[i][k];
            }
        }
        let mut mean = [0.0; 2];
        for (yi, ui) in y.iter_mut().zip(&update) {
            for k in 0..2 {
                yi[k] += ui[k];
                mean[k] += yi[k] / n as f64;
            }
        }
        for yi in &mut y {
            yi[0] -= mean[0];
            yi[1] -= mean[1];
        }
        (num, z) = student_kernel(&y);
        kl_history.push(kl_divergence(&p, &num, z));
    }
    if y.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Model("t-SNE optimization produced non-finite points".into()));
    }
    Ok(TsneOutput { points: y, kl_history })
}
