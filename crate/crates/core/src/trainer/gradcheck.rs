use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor.
    pub per_param: BTreeMap<String, f64>,
    pub coordinates_checked: usize,
}

/// Default denominator floor of the relative error.
pub const DEFAULT_FLOOR: f64 = 1e-8;

/// Floor for network-level checks. Parameters whose gradient is zero by
/// shift invariance (a bias feeding batch norm or a softmax over time) get
/// central differences of pure rounding noise, around `1e-11`; this floor
/// compares them with an absolute tolerance instead.
pub const NETWORK_FLOOR: f64 = 1e-6;

fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients against central differences
/// `(f(x+ε) − f(x−ε)) / 2ε` on up to `trials` random coordinates of every
/// parameter tensor.
///
/// `f` returns the loss and the analytic gradient of every parameter.
pub fn gradient_check<F>(f: F, params: &ParamStore, eps: f64, trials: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Mat>)>,
{
    gradient_check_with_floor(f, params, eps, trials, seed, DEFAULT_FLOOR)
}

/// [`gradient_check`] with an explicit relative-error denominator floor.
pub fn gradient_check_with_floor<F>(
    f: F,
    params: &ParamStore,
    eps: f64,
    trials: usize,
    seed: u64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Mat>)>,
{
    let (loss, grads) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::GradCheck(format!("non-finite loss {loss}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = BTreeMap::new();
    let mut worst = 0f64;
    let mut checked = 0;
    let mut probe = params.clone();
    for (name, value) in params.params() {
        let analytic = grads
            .get(name)
            .ok_or_else(|| Error::GradCheck(format!("no analytic gradient for `{name}`")))?;
        let n = value.len();
        let picks = sample(&mut rng, n, trials.min(n));
        let mut param_worst = 0f64;
        for flat in picks.iter() {
            let idx = (flat / value.ncols(), flat % value.ncols());
            let original = value[idx];
            probe.get_mut(name)?[idx] = original + eps;
            let plus = f(&probe)?.0;
            probe.get_mut(name)?[idx] = original - eps;
            let minus = f(&probe)?.0;
            probe.get_mut(name)?[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck(format!("non-finite loss perturbing `{name}`")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(analytic[idx], numeric, floor);
            param_worst = param_worst.max(err);
            checked += 1;
        }
        worst = worst.max(param_worst);
        per_param.insert(name.clone(), param_worst);
    }
    Ok(GradCheckReport { max_rel_error: worst, per_param, coordinates_checked: checked })
}

/// Central-difference check of a plain vector function against its gradient.
pub fn gradient_check_fn<F: Fn(&[f64]) -> f64>(f: F, grad: &[f64], x: &[f64], eps: f64) -> Result<f64> {
    let mut probe = x.to_vec();
    let mut worst = 0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::GradCheck(format!("non-finite value at coordinate {i}")));
        }
        worst = worst.max(rel_error(grad[i], (plus - minus) / (2.0 * eps), DEFAULT_FLOOR));
    }
    Ok(worst)
}
