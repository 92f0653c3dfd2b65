use super::*;
use crate::dsp::FeatureKind;
use crate::nn::{normal, BN_EPS};
use crate::trainer::{gradient_check_with_floor, Precision, TrainConfig, NETWORK_FLOOR};
use ndarray::{s, Axis};
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::ops::ControlFlow;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: (usize, usize), seed: u64) -> Mat {
    normal(shape, 1.0, &mut rng(seed))
}

/// Perturb every parameter and running statistic so oracles see non-trivial values.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.params().keys().cloned().collect();
    for n in names {
        let m = store.get_mut(&n).unwrap();
        let noise = normal(m.dim(), 0.2, &mut r);
        *m += &noise;
    }
    let bufs: Vec<String> = store.buffers().keys().cloned().collect();
    for n in bufs {
        let m = store.buffer_mut(&n).unwrap();
        let noise = normal(m.dim(), 0.2, &mut r);
        if n.ends_with("running_var") {
            *m = noise.mapv(|v| 1.0 + v.abs());
        } else {
            *m = noise;
        }
    }
}

// ---- plain ndarray reference implementations (eval mode) ----

fn ref_conv(x: &Mat, p: &ParamStore, prefix: &str, dilation: usize) -> Mat {
    let w = p.get(&format!("{prefix}.weight")).unwrap();
    let b = p.get(&format!("{prefix}.bias")).ok();
    let (t, cin) = x.dim();
    let k = w.nrows() / cin;
    let half = (k / 2) as isize;
    Mat::from_shape_fn((t, w.ncols()), |(row, o)| {
        let mut acc = b.map_or(0.0, |b| b[[0, o]]);
        for tap in 0..k {
            let src = row as isize + (tap as isize - half) * dilation as isize;
            if src < 0 || src >= t as isize {
                continue;
            }
            for c in 0..cin {
                acc += x[[src as usize, c]] * w[[tap * cin + c, o]];
            }
        }
        acc
    })
}

fn ref_bn(x: &Mat, p: &ParamStore, prefix: &str) -> Mat {
    let g = p.get(&format!("{prefix}.gamma")).unwrap();
    let b = p.get(&format!("{prefix}.beta")).unwrap();
    let m = p.buffer(&format!("{prefix}.running_mean")).unwrap();
    let v = p.buffer(&format!("{prefix}.running_var")).unwrap();
    Mat::from_shape_fn(x.dim(), |(t, c)| (x[[t, c]] - m[[0, c]]) / (v[[0, c]] + BN_EPS).sqrt() * g[[0, c]] + b[[0, c]])
}

fn ref_tdnn(x: &Mat, p: &ParamStore, prefix: &str, dilation: usize) -> Mat {
    ref_bn(&ref_conv(x, p, &format!("{prefix}.conv"), dilation).mapv(|v| v.max(0.0)), p, &format!("{prefix}.bn"))
}

fn ref_linear(x: &Mat, p: &ParamStore, prefix: &str) -> Mat {
    x.dot(p.get(&format!("{prefix}.weight")).unwrap()) + p.get(&format!("{prefix}.bias")).unwrap()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn ref_se(x: &Mat, p: &ParamStore, prefix: &str) -> Mat {
    let mean = x.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
    let h = ref_linear(&mean, p, &format!("{prefix}.fc1")).mapv(|v| v.max(0.0));
    let s = ref_linear(&h, p, &format!("{prefix}.fc2")).mapv(sigmoid);
    x * &s
}

/// Shared-attention statistics pooling written out directly.
fn ref_shared_pool(h: &Mat, p: &ParamStore) -> Mat {
    let a = ref_conv(h, p, "pool.attn1", 1).mapv(f64::tanh);
    let logits = ref_conv(&a, p, "pool.attn2", 1);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|v| (v - max).exp());
    let alpha = &e / e.sum();
    let c = h.ncols();
    let mut out = Mat::zeros((1, 2 * c));
    for j in 0..c {
        let mu: f64 = (0..h.nrows()).map(|t| alpha[[t, 0]] * h[[t, j]]).sum();
        let m2: f64 = (0..h.nrows()).map(|t| alpha[[t, 0]] * h[[t, j]] * h[[t, j]]).sum();
        out[[0, j]] = mu;
        out[[0, c + j]] = ((m2 - mu * mu).max(0.0) + POOL_EPS).sqrt();
    }
    out
}

fn eval1(store: &ParamStore, x: &Mat, f: impl FnOnce(&mut Ctx, Var) -> Result<Var>) -> Mat {
    let mut ctx = Ctx::new(store, Mode::Eval);
    let v = ctx.constant(x.clone());
    let out = f(&mut ctx, v).unwrap();
    ctx.value(out).clone()
}

fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn se_store(c: usize, bottleneck: usize, seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    p.init_linear("se.fc1", c, bottleneck, &mut rng(seed));
    p.init_linear("se.fc2", bottleneck, c, &mut rng(seed + 1));
    p
}

fn res2_store(c: usize, kernel: usize, scale: usize, seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    init_se_res2(&mut p, "blk", c, kernel, scale, 4, &mut rng(seed));
    p
}

fn tiny_ecapa() -> EcapaConfig {
    EcapaConfig {
        n_mels: 6,
        channels: 8,
        res2_scale: 2,
        se_bottleneck: 3,
        mfa_channels: 12,
        attention_channels: 4,
        embedding_dim: 5,
        ..EcapaConfig::default()
    }
}

// ---- se_block ----

#[test]
fn se_with_zero_excitation_halves_input() {
    let mut p = se_store(4, 2, 0);
    p.get_mut("se.fc2.weight").unwrap().fill(0.0);
    let x = random((7, 4), 1);
    let y = eval1(&p, &x, |c, v| se_block(c, v, "se"));
    assert!(max_abs_diff(&y, &(&x * 0.5)) < 1e-15);
}

#[test]
fn se_matches_closed_form() {
    let mut p = se_store(4, 2, 3);
    randomize(&mut p, 4);
    let x = random((7, 4), 5);
    let y = eval1(&p, &x, |c, v| se_block(c, v, "se"));
    assert!(max_abs_diff(&y, &ref_se(&x, &p, "se")) < 1e-12);
}

#[test]
fn se_channel_mismatch_is_model_error() {
    let p = se_store(4, 2, 0);
    let mut ctx = Ctx::new(&p, Mode::Eval);
    let x = ctx.constant(Mat::zeros((3, 5)));
    assert!(matches!(se_block(&mut ctx, x, "se"), Err(Error::Model(_))));
}

proptest! {
    #[test]
    fn se_scales_lie_in_unit_interval(vals in proptest::collection::vec(-50.0f64..50.0, 12), seed in 0u64..1000) {
        let mut p = se_store(4, 2, seed);
        randomize(&mut p, seed + 7);
        let x = Mat::from_shape_vec((3, 4), vals).unwrap();
        let mut ctx = Ctx::new(&p, Mode::Eval);
        let v = ctx.constant(x.clone());
        let mean = ctx.g.mean_axis(v, Axis(0));
        let h = ctx.linear(mean, "se.fc1").unwrap();
        let h = ctx.g.relu(h);
        let s = ctx.linear(h, "se.fc2").unwrap();
        let s = ctx.g.sigmoid(s);
        prop_assert!(ctx.value(s).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

// ---- se_res2_block ----

#[test]
fn res2_preserves_shape() {
    let p = res2_store(16, 3, 4, 0);
    let spec = ConvBlockSpec::new(16, 16, 3, 2).unwrap();
    for t in [1, 5, 100] {
        let y = eval1(&p, &random((t, 16), t as u64), |c, v| Ok(se_res2_block(c, &[v], "blk", &spec, 4)?[0]));
        assert_eq!(y.dim(), (t, 16));
    }
}

#[test]
fn res2_zero_input_gives_zero() {
    let p = res2_store(16, 3, 4, 1);
    let spec = ConvBlockSpec::new(16, 16, 3, 3).unwrap();
    let y = eval1(&p, &Mat::zeros((9, 16)), |c, v| Ok(se_res2_block(c, &[v], "blk", &spec, 4)?[0]));
    assert!(y.iter().all(|&v| v == 0.0));
    let mut train = Ctx::new(&p, Mode::Train);
    let x = train.constant(Mat::zeros((9, 16)));
    let out = se_res2_block(&mut train, &[x], "blk", &spec, 4).unwrap()[0];
    assert!(train.value(out).iter().all(|&v| v == 0.0));
}

#[test]
fn res2_scale_one_equals_plain_dilated_block() {
    let mut p = res2_store(6, 3, 1, 2);
    randomize(&mut p, 3);
    let spec = ConvBlockSpec::new(6, 6, 3, 2).unwrap();
    let x = random((11, 6), 4);
    let y = eval1(&p, &x, |c, v| Ok(se_res2_block(c, &[v], "blk", &spec, 1)?[0]));
    let a = ref_tdnn(&x, &p, "blk.conv1", 1);
    let b = ref_bn(&ref_conv(&a, &p, "blk.res2.0", 2).mapv(|v| v.max(0.0)), &p, "blk.res2_bn");
    let c = ref_tdnn(&b, &p, "blk.conv2", 1);
    let want = ref_se(&c, &p, "blk.se") + &x;
    assert!(max_abs_diff(&y, &want) < 1e-12);
}

#[test]
fn res2_hierarchical_groups_match_reference() {
    let mut p = res2_store(8, 3, 4, 5);
    randomize(&mut p, 6);
    let spec = ConvBlockSpec::new(8, 8, 3, 3).unwrap();
    let x = random((10, 8), 7);
    let y = eval1(&p, &x, |c, v| Ok(se_res2_block(c, &[v], "blk", &spec, 4)?[0]));
    let a = ref_tdnn(&x, &p, "blk.conv1", 1);
    let mut groups: Vec<Mat> = Vec::new();
    for g in 0..4 {
        let mut part = a.slice(s![.., g * 2..(g + 1) * 2]).to_owned();
        if let Some(prev) = groups.last() {
            part += prev;
        }
        groups.push(ref_conv(&part, &p, &format!("blk.res2.{g}"), 3));
    }
    let views: Vec<_> = groups.iter().map(|m| m.view()).collect();
    let cat = ndarray::concatenate(Axis(1), &views).unwrap();
    let b = ref_bn(&cat.mapv(|v| v.max(0.0)), &p, "blk.res2_bn");
    let c = ref_tdnn(&b, &p, "blk.conv2", 1);
    let want = ref_se(&c, &p, "blk.se") + &x;
    assert!(max_abs_diff(&y, &want) < 1e-12);
}

#[test]
fn res2_indivisible_scale_is_config_error() {
    let p = res2_store(16, 3, 4, 0);
    let spec = ConvBlockSpec::new(16, 16, 3, 2).unwrap();
    let mut ctx = Ctx::new(&p, Mode::Eval);
    let x = ctx.constant(Mat::zeros((4, 16)));
    assert!(matches!(se_res2_block(&mut ctx, &[x], "blk", &spec, 3), Err(Error::Config(_))));
}

#[test]
fn block_spec_rejects_even_kernel_and_zero_dilation() {
    assert!(ConvBlockSpec::new(4, 4, 4, 1).is_err());
    assert!(ConvBlockSpec::new(4, 4, 3, 0).is_err());
}

// ---- pooling ----

fn pool_store(c: usize, mode: PoolingMode, seed: u64) -> ParamStore {
    let mut p = ParamStore::new();
    init_pool(&mut p, "pool", c, 3, mode, &mut rng(seed));
    randomize(&mut p, seed + 1);
    p
}

fn pool1(p: &ParamStore, h: &Mat, mode: PoolingMode) -> (Mat, Option<Mat>) {
    let mut ctx = Ctx::new(p, Mode::Eval);
    let v = ctx.constant(h.clone());
    let out = attentive_stats_pool(&mut ctx, &[v], None, "pool", mode).unwrap().remove(0);
    (ctx.value(out.vector).clone(), out.weights.map(|w| ctx.value(w).clone()))
}

#[test]
fn single_frame_pool_is_frame_with_floor_std() {
    for mode in [PoolingMode::ChannelContext, PoolingMode::Shared] {
        let p = pool_store(4, mode, 0);
        let h = random((1, 4), 1);
        let (v, w) = pool1(&p, &h, mode);
        assert!(w.unwrap().iter().all(|&a| (a - 1.0).abs() < 1e-15));
        for j in 0..4 {
            assert!((v[[0, j]] - h[[0, j]]).abs() < 1e-12);
            assert!((v[[0, 4 + j]] - POOL_EPS.sqrt()).abs() < 1e-9);
        }
    }
}

#[test]
fn constant_input_pools_to_constant_mean_and_zero_std() {
    let p = pool_store(3, PoolingMode::ChannelContext, 2);
    let h = Mat::from_shape_fn((9, 3), |(_, c)| c as f64 - 0.7);
    let (v, _) = pool1(&p, &h, PoolingMode::ChannelContext);
    for c in 0..3 {
        assert!((v[[0, c]] - (c as f64 - 0.7)).abs() < 1e-12);
        assert!(v[[0, 3 + c]] < 1e-5);
    }
}

#[test]
fn shared_pool_matches_reference() {
    let p = pool_store(4, PoolingMode::Shared, 3);
    let h = random((12, 4), 4);
    let (v, _) = pool1(&p, &h, PoolingMode::Shared);
    assert!(max_abs_diff(&v, &ref_shared_pool(&h, &p)) < 1e-12);
}

#[test]
fn empty_input_is_input_error() {
    let p = pool_store(4, PoolingMode::Shared, 0);
    let mut ctx = Ctx::new(&p, Mode::Eval);
    let v = ctx.constant(Mat::zeros((0, 4)));
    assert!(matches!(attentive_stats_pool(&mut ctx, &[v], None, "pool", PoolingMode::Shared), Err(Error::Input(_))));
    assert!(matches!(frame_average_pool(&mut ctx, v, None), Err(Error::Input(_))));
}

#[test]
fn masked_frames_are_ignored() {
    for mode in [PoolingMode::ChannelContext, PoolingMode::Shared, PoolingMode::FrameAverage] {
        let p = pool_store(3, mode, 5);
        let h = random((6, 3), 6);
        let mut padded = Mat::zeros((9, 3));
        padded.slice_mut(s![..6, ..]).assign(&h);
        let mask: Vec<bool> = (0..9).map(|t| t < 6).collect();
        let (plain, _) = pool1(&p, &h, mode);
        let mut ctx = Ctx::new(&p, Mode::Eval);
        let v = ctx.constant(padded);
        let out = attentive_stats_pool(&mut ctx, &[v], Some(&[mask]), "pool", mode).unwrap().remove(0);
        assert!(max_abs_diff(ctx.value(out.vector), &plain) < 1e-12, "{mode}");
    }
}

#[test]
fn frame_average_matches_oracle_and_uniform_attention() {
    let h = random((5, 3), 8);
    let p = ParamStore::new();
    let avg = eval1(&p, &h, |c, v| frame_average_pool(c, v, None));
    for c in 0..3 {
        let want: f64 = (0..5).map(|t| h[[t, c]]).sum::<f64>() / 5.0;
        assert!((avg[[0, c]] - want).abs() < 1e-14);
    }
    let one = random((1, 3), 9);
    assert!(max_abs_diff(&eval1(&p, &one, |c, v| frame_average_pool(c, v, None)), &one) < 1e-15);

    let mut s = pool_store(3, PoolingMode::Shared, 10);
    s.get_mut("pool.attn2.weight").unwrap().fill(0.0);
    let (v, _) = pool1(&s, &h, PoolingMode::Shared);
    assert!(max_abs_diff(&v.slice(s![.., ..3]).to_owned(), &avg) < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn attention_sums_to_one_and_std_is_floored(
        vals in proptest::collection::vec(-20.0f64..20.0, 4..40),
        seed in 0u64..500,
        shared in any::<bool>(),
    ) {
        let t = vals.len() / 4;
        let h = Mat::from_shape_vec((t, 4), vals[..t * 4].to_vec()).unwrap();
        let mode = if shared { PoolingMode::Shared } else { PoolingMode::ChannelContext };
        let p = pool_store(4, mode, seed);
        let (v, w) = pool1(&p, &h, mode);
        let w = w.unwrap();
        for col in w.sum_axis(Axis(0)).iter() {
            prop_assert!((col - 1.0).abs() < 1e-6);
        }
        for j in 0..4 {
            let sd = v[[0, 4 + j]];
            prop_assert!(sd.is_finite() && sd >= POOL_EPS.sqrt() / 2.0);
        }
    }
}

// ---- full networks ----

#[test]
fn ecapa_default_output_length() {
    let enc = SpeakerEncoder::new(EncoderArch::Ecapa(EcapaConfig::default()), 0).unwrap();
    let feat = FeatureMap::new(random((200, 80), 1), 100.0, FeatureKind::Mel).unwrap();
    let e = enc.embed_features(&feat).unwrap();
    assert_eq!(e.dim(), 128);
    assert!(e.values.iter().all(|v| v.is_finite()));
}

#[test]
fn ecapa_output_length_is_independent_of_t() {
    let enc = SpeakerEncoder::new(EncoderArch::Ecapa(tiny_ecapa()), 1).unwrap();
    for t in [1, 2, 7, 40] {
        let feat = FeatureMap::new(random((t, 6), t as u64), 100.0, FeatureKind::Mel).unwrap();
        assert_eq!(enc.embed_features(&feat).unwrap().dim(), 5);
    }
}

#[test]
fn ecapa_rejects_wrong_feature_dim() {
    let enc = SpeakerEncoder::new(EncoderArch::Ecapa(tiny_ecapa()), 1).unwrap();
    let feat = FeatureMap::new(random((10, 7), 0), 100.0, FeatureKind::Mel).unwrap();
    assert!(matches!(enc.embed_features(&feat), Err(Error::Model(_))));
}

/// Width-1 kernels and zero attention projection make ECAPA a function of
/// per-frame features pooled with uniform weights.
fn degenerate_ecapa() -> SpeakerEncoder {
    let cfg = EcapaConfig { stem_kernel: 1, block_kernel: 1, ..tiny_ecapa() };
    let mut enc = SpeakerEncoder::new(EncoderArch::Ecapa(cfg), 3).unwrap();
    randomize(&mut enc.params, 4);
    enc.params.get_mut("pool.attn2.weight").unwrap().fill(0.0);
    enc
}

fn embed(enc: &SpeakerEncoder, m: Mat) -> Vec<f64> {
    enc.embed_features(&FeatureMap::new(m, 100.0, FeatureKind::Mel).unwrap()).unwrap().values
}

fn vec_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn frame_order_matters_only_in_degenerate_case() {
    let x = random((15, 6), 11);
    let perm: Vec<usize> = (0..15).rev().collect();
    let shuffled = x.select(Axis(0), &perm);

    let mut general = SpeakerEncoder::new(EncoderArch::Ecapa(tiny_ecapa()), 3).unwrap();
    randomize(&mut general.params, 4);
    assert!(vec_diff(&embed(&general, x.clone()), &embed(&general, shuffled.clone())) > 1e-6);

    let degenerate = degenerate_ecapa();
    assert!(vec_diff(&embed(&degenerate, x), &embed(&degenerate, shuffled)) < 1e-10);
}

#[test]
fn exact_repetition_leaves_degenerate_embedding_unchanged() {
    let enc = degenerate_ecapa();
    let x = random((13, 6), 12);
    let doubled = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
    assert!(vec_diff(&embed(&enc, x), &embed(&enc, doubled)) < 1e-10);
}

#[test]
fn xvector_default_output_length() {
    let enc = SpeakerEncoder::new(EncoderArch::XVector(XvectorConfig::default()), 0).unwrap();
    let feat = FeatureMap::new(random((200, 30), 2), 100.0, FeatureKind::Mfcc).unwrap();
    assert_eq!(enc.embed_features(&feat).unwrap().dim(), 512);
}

#[test]
fn xvector_zero_input_gives_zero_embedding() {
    let enc = SpeakerEncoder::new(EncoderArch::XVector(XvectorConfig::default()), 5).unwrap();
    let feat = FeatureMap::new(Mat::zeros((50, 30)), 100.0, FeatureKind::Mfcc).unwrap();
    let e = enc.embed_features(&feat).unwrap();
    // Only the pooled std floor sqrt(eps) survives the zero biases.
    assert!(e.values.iter().all(|v| v.abs() < 1e-4), "{:?}", &e.values[..4]);
}

#[test]
fn xvector_matches_layer_by_layer_reference() {
    let cfg = XvectorConfig {
        n_mfcc: 5,
        layers: LayerList(vec![(6, 5, 1), (6, 3, 2), (4, 1, 1)]),
        attention_channels: 3,
        embedding_dim: 7,
        pooling: PoolingMode::Shared,
    };
    let mut enc = SpeakerEncoder::new(EncoderArch::XVector(cfg), 6).unwrap();
    randomize(&mut enc.params, 7);
    let x = random((20, 5), 8);
    let got = embed(&enc, x.clone());
    let p = &enc.params;
    let h = ref_tdnn(&ref_tdnn(&ref_tdnn(&x, p, "tdnn0", 1), p, "tdnn1", 2), p, "tdnn2", 1);
    let want = ref_linear(&ref_shared_pool(&h, p), p, "head");
    assert!(vec_diff(&got, want.row(0).as_slice().unwrap()) < 1e-12);
}

#[test]
fn layer_list_round_trips() {
    let l: LayerList = "64:5:1,64:3:2".parse().unwrap();
    assert_eq!(l.0, vec![(64, 5, 1), (64, 3, 2)]);
    assert_eq!(l.to_string().parse::<LayerList>().unwrap(), l);
    assert!("64:5".parse::<LayerList>().is_err());
}

#[test]
fn arch_config_round_trips_through_checkpoint() {
    for arch in [EncoderArch::Ecapa(tiny_ecapa()), EncoderArch::XVector(XvectorConfig::default())] {
        let enc = SpeakerEncoder::new(arch, 9).unwrap();
        let bytes = crate::trainer::encode_checkpoint(&enc.to_checkpoint());
        let back = SpeakerEncoder::from_checkpoint(&crate::trainer::decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(back.arch, enc.arch);
        assert_eq!(back.params, enc.params);
    }
}

// ---- gradients ----

/// Loss = Σ R ⊙ out over a train-mode batch of two items.
fn grad_fn<'a>(
    inputs: &'a [Mat],
    weights: &'a [Mat],
    f: impl Fn(&mut Ctx, &[Var]) -> Result<Vec<Var>> + 'a,
) -> impl Fn(&ParamStore) -> Result<(f64, BTreeMap<String, Mat>)> + 'a {
    move |p: &ParamStore| {
        let mut ctx = Ctx::new(p, Mode::Train);
        let xs: Vec<Var> = inputs.iter().map(|m| ctx.constant(m.clone())).collect();
        let outs = f(&mut ctx, &xs)?;
        let mut terms = Vec::new();
        for (o, r) in outs.iter().zip(weights) {
            let r = ctx.constant(r.clone());
            let prod = ctx.g.mul(*o, r);
            terms.push(ctx.g.sum_all(prod));
        }
        let cat = ctx.g.concat_cols(&terms);
        let loss = ctx.g.sum_all(cat);
        let grads = ctx.g.backward(loss);
        Ok((ctx.g.scalar(loss), ctx.g.param_grads(&grads)))
    }
}

fn check_points(
    make: impl Fn(u64) -> ParamStore,
    shapes_in: &[(usize, usize)],
    out_cols: usize,
    f: impl Fn(&mut Ctx, &[Var]) -> Result<Vec<Var>> + Copy,
    out_rows: impl Fn(usize) -> usize,
) {
    for point in 0..10u64 {
        let p = make(point);
        let inputs: Vec<Mat> = shapes_in.iter().enumerate().map(|(i, &s)| random(s, 100 * point + i as u64)).collect();
        let weights: Vec<Mat> = shapes_in
            .iter()
            .enumerate()
            .map(|(i, &(t, _))| random((out_rows(t), out_cols), 1000 + 100 * point + i as u64))
            .collect();
        let report = gradient_check_with_floor(grad_fn(&inputs, &weights, f), &p, 1e-5, 6, point, NETWORK_FLOOR).unwrap();
        assert!(report.max_rel_error < 1e-4, "point {point}: {:?}", report.per_param);
    }
}

#[test]
fn se_block_gradients() {
    check_points(
        |s| {
            let mut p = se_store(5, 3, s);
            randomize(&mut p, s + 50);
            p
        },
        &[(6, 5), (4, 5)],
        5,
        |c, xs| xs.iter().map(|&x| se_block(c, x, "se")).collect(),
        |t| t,
    );
}

#[test]
fn res2_block_gradients() {
    let spec = ConvBlockSpec::new(6, 6, 3, 2).unwrap();
    check_points(
        |s| {
            let mut p = res2_store(6, 3, 3, s);
            randomize(&mut p, s + 50);
            p
        },
        &[(7, 6), (5, 6)],
        6,
        move |c, xs| se_res2_block(c, xs, "blk", &spec, 3),
        |t| t,
    );
}

#[test]
fn pooling_gradients() {
    for mode in [PoolingMode::ChannelContext, PoolingMode::Shared] {
        check_points(
            |s| pool_store(4, mode, s),
            &[(6, 4), (3, 4)],
            8,
            move |c, xs| Ok(attentive_stats_pool(c, xs, None, "pool", mode)?.into_iter().map(|p| p.vector).collect()),
            |_| 1,
        );
    }
}

#[test]
fn affine_head_and_full_network_gradients() {
    let cfg = EcapaConfig { n_mels: 4, channels: 4, res2_scale: 2, se_bottleneck: 2, mfa_channels: 6, attention_channels: 3, embedding_dim: 3, ..EcapaConfig::default() };
    let c2 = cfg.clone();
    let cfg = &cfg;
    check_points(
        move |s| {
            let mut enc = SpeakerEncoder::new(EncoderArch::Ecapa(c2.clone()), s).unwrap();
            randomize(&mut enc.params, s + 50);
            enc.params
        },
        &[(6, 4), (5, 4)],
        3,
        move |c, xs| ecapa_forward(c, cfg, xs),
        |_| 1,
    );
}

// ---- extraction and averaging ----

fn noise_wave(rate: u32, secs: f64, seed: u64, amp: f64) -> Waveform {
    let n = (rate as f64 * secs) as usize;
    let m = normal((1, n), amp, &mut rng(seed));
    Waveform::new(m.iter().map(|&v| v as f32).collect(), rate).unwrap()
}

#[test]
fn extraction_is_deterministic_and_distinguishes_silence() {
    let enc = SpeakerEncoder::new(EncoderArch::Ecapa(EcapaConfig::default()), 0).unwrap();
    let w = noise_wave(22050, 0.5, 1, 0.1);
    let a = enc.extract_utterance_embedding(&w).unwrap();
    let b = enc.extract_utterance_embedding(&w).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim(), 128);
    let silence = Waveform::new(vec![0.0; 8000], 16000).unwrap();
    let s = enc.extract_utterance_embedding(&silence).unwrap();
    let dot: f64 = a.values.iter().zip(&s.values).map(|(x, y)| x * y).sum();
    let na: f64 = a.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    let ns: f64 = s.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(dot / (na * ns) < 1.0 - 1e-9);
}

#[test]
fn short_audio_is_input_error() {
    let enc = SpeakerEncoder::new(EncoderArch::XVector(XvectorConfig::default()), 0).unwrap();
    let w = noise_wave(16000, 0.1, 2, 0.1);
    assert!(matches!(enc.extract_utterance_embedding(&w), Err(Error::Input(_))));
}

#[test]
fn averaging_rules() {
    let one = SpeakerEmbedding::utterance(vec![0.3, -1.0]).with_speaker("s1");
    let avg = average_speaker_embedding(std::slice::from_ref(&one)).unwrap();
    assert_eq!(avg.values, one.values);
    assert_eq!(avg.source, EmbeddingSource::SpeakerAverage);
    assert_eq!(avg.speaker_id.as_deref(), Some("s1"));

    let copies = vec![one.clone(); 7];
    let avg = average_speaker_embedding(&copies).unwrap();
    assert!(vec_diff(&avg.values, &one.values) < 1e-15);

    let pair = [SpeakerEmbedding::utterance(vec![1.0, 0.0]), SpeakerEmbedding::utterance(vec![0.0, 1.0])];
    assert_eq!(average_speaker_embedding(&pair).unwrap().values, vec![0.5, 0.5]);

    assert!(matches!(average_speaker_embedding(&[]), Err(Error::Input(_))));
    let mixed = [SpeakerEmbedding::utterance(vec![1.0]), SpeakerEmbedding::utterance(vec![1.0, 2.0])];
    assert!(matches!(average_speaker_embedding(&mixed), Err(Error::Input(_))));
    let other = [one.clone(), SpeakerEmbedding::utterance(vec![0.0, 0.0]).with_speaker("s2")];
    assert!(matches!(average_speaker_embedding(&other), Err(Error::Input(_))));
}

// ---- training ----

/// Speakers differ by which feature bands carry energy.
fn band_corpus(speakers: usize, per: usize, dim: usize, seed: u64) -> SpeakerCorpus {
    let mut r = rng(seed);
    let mut items = Vec::new();
    for s in 0..speakers {
        for _ in 0..per {
            let mut m = normal((30, dim), 0.3, &mut r);
            for t in 0..30 {
                m[[t, s % dim]] += 2.0;
                m[[t, (s * 3 + 1) % dim]] += 1.0;
            }
            items.push((format!("spk{s}"), m));
        }
    }
    SpeakerCorpus::new(items).unwrap()
}

fn quick_train() -> TrainConfig {
    TrainConfig { max_steps: 40, warmup_steps: 5, learning_rate: 5e-3, batch_size: 4, precision: Precision::F64, ..TrainConfig::default() }
}

#[test]
fn initial_loss_is_log_num_speakers_and_training_is_deterministic() {
    let corpus = band_corpus(4, 3, 6, 0);
    let enc = SpeakerEncoder::new(EncoderArch::Ecapa(tiny_ecapa()), 2).unwrap();
    let cfg = EncoderTrainConfig { crop_frames: 20, ..EncoderTrainConfig::default() };
    let run = || train_speaker_classifier(&enc, &corpus, &cfg, &quick_train(), None, |_, _| ControlFlow::Continue(())).unwrap();
    let (trained, a) = run();
    let (_, b) = run();
    assert!((a.loss_history[0] - 4f64.ln()).abs() < 0.1, "{}", a.loss_history[0]);
    assert_eq!(a.loss_history, b.loss_history);
    let early: f64 = a.loss_history[..5].iter().sum();
    let late: f64 = a.loss_history[35..].iter().sum();
    assert!(late < early);
    assert!(classification_accuracy(&trained, &corpus).unwrap() > 0.25);
}

#[test]
fn aam_loss_trains() {
    let corpus = band_corpus(3, 3, 6, 1);
    let enc = SpeakerEncoder::new(EncoderArch::XVector(XvectorConfig { n_mfcc: 6, attention_channels: 4, embedding_dim: 8, layers: LayerList(vec![(8, 3, 1), (8, 1, 1)]), ..XvectorConfig::default() }), 3).unwrap();
    let cfg = EncoderTrainConfig { loss: ClassifierLoss::Aam, crop_frames: 20, ..EncoderTrainConfig::default() };
    let (trained, ck) = train_speaker_classifier(&enc, &corpus, &cfg, &quick_train(), None, |_, _| ControlFlow::Continue(())).unwrap();
    assert!(ck.loss_history.iter().all(|v| v.is_finite()));
    assert!(classification_accuracy(&trained, &corpus).unwrap() >= 0.0);
}

#[test]
fn single_speaker_corpus_is_config_error() {
    let corpus = band_corpus(1, 4, 6, 2);
    let enc = SpeakerEncoder::new(EncoderArch::Ecapa(tiny_ecapa()), 0).unwrap();
    let err = train_speaker_classifier(&enc, &corpus, &EncoderTrainConfig::default(), &quick_train(), None, |_, _| ControlFlow::Continue(())).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

