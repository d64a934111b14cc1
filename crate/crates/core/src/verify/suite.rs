//! Registered property checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::attention::{attention_bruteforce, eq5_weights};
use super::{ErrorStats, OracleReport};
use crate::controls::{
    spatial_control_features, style_interpolate_features, tradeoff_features, MaskSet,
};
use crate::graph::Graph;
use crate::image_io::{synth_image, Image, SynthKind};
use crate::kernels::{self, Padding};
use crate::losses::{content_loss, identity_loss, style_loss};
use crate::network::checkpoint::{load_checkpoint, save_checkpoint};
use crate::network::{
    multi_level_combine, sanet_attend, sanet_fuse, sanet_scores, FeatureMap, Level, NetConfig,
    SanetParams, Taps, TransformNet, NORM_EPS, TAP_COUNT,
};
use crate::tensor::{Shape, Tensor};
use crate::training::{adam_step, AdamState};

/// Maximum absolute deviation allowed in the attention comparisons.
pub const ATTENTION_TOL: f64 = 1e-5;

/// Row softmax used by the normalisation checks; replaceable for mutation tests.
pub type SoftmaxFn = fn(&Tensor<f32>) -> Tensor<f32>;

#[derive(Debug, Clone, Copy)]
pub struct SuiteHooks {
    pub softmax: SoftmaxFn,
}

impl Default for SuiteHooks {
    fn default() -> Self {
        Self {
            softmax: kernels::softmax_rows::<f32>,
        }
    }
}

/// Names of the registered checks, in report order.
pub const CHECK_NAMES: &[&str] = &[
    "softmax_row_sums",
    "softmax_shift_invariance",
    "mvn_mean_zero",
    "mvn_std_one",
    "conv_identity_bit_exact",
    "upsample_preserves_mean",
    "attention_bruteforce",
    "attention_row_sums",
    "bruteforce_shift_invariance",
    "style_permutation_invariance",
    "content_permutation_equivariance",
    "score_affine_invariance",
    "value_path_not_affine_invariant",
    "zero_wcs_fuse_passthrough",
    "zero_wcs_network_reduction",
    "losses_zero_on_identical",
    "content_affine_invariance",
    "style_loss_permutation_invariance",
    "tradeoff_endpoints_bit_exact",
    "interpolation_reduces_to_tradeoff",
    "spatial_identical_styles_bit_exact",
    "checkpoint_round_trip_bit_exact",
    "adam_first_step",
];

fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4], scale: f32) -> Tensor<f32> {
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).expect("valid dims");
    let data = (0..shape.numel())
        .map(|_| scale * rng.gen_range(-1.0..1.0f32))
        .collect();
    Tensor::new(shape, data).expect("length")
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Random attention parameters and feature maps.
#[derive(Debug, Clone)]
pub struct AttentionInstance {
    pub params: SanetParams<f32>,
    pub content: FeatureMap<f32>,
    pub style: FeatureMap<f32>,
}

fn extents(rng: &mut ChaCha8Rng, max_hw: usize) -> (usize, usize) {
    let h = rng.gen_range(1..=max_hw.min(4));
    let w = rng.gen_range(1..=max_hw / h);
    (h, w)
}

/// Instance with `C_feat ≤ max_feat` and at most `max_hw` positions per map.
pub fn random_instance(rng: &mut ChaCha8Rng, max_feat: usize, max_hw: usize) -> AttentionInstance {
    let feat = rng.gen_range(1..=max_feat);
    let attn = rng.gen_range(1..=feat);
    let mut params = SanetParams::init(rng, feat, attn);
    params.h_bias = uniform(rng, [feat, 1, 1, 1], 1.0);
    params.out = uniform(rng, [feat, feat, 1, 1], 1.0);
    params.out_bias = uniform(rng, [feat, 1, 1, 1], 1.0);
    let n = rng.gen_range(1..=2);
    let (hc, wc) = extents(rng, max_hw);
    let (hs, ws) = extents(rng, max_hw);
    AttentionInstance {
        content: FeatureMap::new(uniform(rng, [n, feat, hc, wc], 1.0), Level::A),
        style: FeatureMap::new(uniform(rng, [n, feat, hs, ws], 1.0), Level::A),
        params,
    }
}

/// `sanet_attend` against the nested-loop oracle over `instances` random cases.
pub fn attention_oracle_check(seed: u64, instances: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = ErrorStats::new(1e-6);
    for _ in 0..instances {
        let inst = random_instance(&mut rng, 16, 16);
        match (
            sanet_attend(&inst.params, &inst.content, &inst.style),
            attention_bruteforce(&inst.params, &inst.content, &inst.style),
        ) {
            (Ok(fast), Ok(slow)) => stats.add_all(&to_f64(&fast.tensor), slow.tensor.data()),
            _ => stats.add(f64::NAN, 0.0),
        }
    }
    stats.abs_report("attention_bruteforce".into(), ATTENTION_TOL)
}

/// Row sums of the attention weights produced through `softmax`.
pub fn row_normalization_check(seed: u64, instances: usize, softmax: SoftmaxFn) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = ErrorStats::new(1.0);
    for _ in 0..instances {
        let inst = random_instance(&mut rng, 16, 16);
        let Ok(scores) = sanet_scores(&inst.params, &inst.content, &inst.style) else {
            stats.add(f64::NAN, 0.0);
            continue;
        };
        let w = softmax(&scores);
        for row in w.data().chunks(scores.shape().w) {
            stats.add(row.iter().map(|&v| v as f64).sum(), 1.0);
        }
    }
    stats.abs_report("attention_row_sums".into(), ATTENTION_TOL)
}

fn permute_positions(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let s = t.shape();
    let mut out = t.clone();
    for (plane, dst) in out.data_mut().chunks_mut(s.plane()).enumerate() {
        let src = &t.data()[plane * s.plane()..(plane + 1) * s.plane()];
        for (j, &p) in perm.iter().enumerate() {
            dst[j] = src[p];
        }
    }
    out
}

fn shuffled(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(rng);
    p
}

/// Output change under `count` random permutations of style positions.
pub fn style_permutation_check(seed: u64, count: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = ErrorStats::new(1e-6);
    for _ in 0..count {
        let inst = random_instance(&mut rng, 16, 16);
        let perm = shuffled(&mut rng, inst.style.tensor.shape().plane());
        let moved = FeatureMap::new(permute_positions(&inst.style.tensor, &perm), Level::A);
        match (
            sanet_attend(&inst.params, &inst.content, &inst.style),
            sanet_attend(&inst.params, &inst.content, &moved),
        ) {
            (Ok(a), Ok(b)) => stats.add_all(&to_f64(&b.tensor), &to_f64(&a.tensor)),
            _ => stats.add(f64::NAN, 0.0),
        }
    }
    stats.abs_report("style_permutation_invariance".into(), ATTENTION_TOL)
}

fn content_equivariance_check(rng: &mut ChaCha8Rng, count: usize) -> OracleReport {
    let mut stats = ErrorStats::new(1e-6);
    for _ in 0..count {
        let inst = random_instance(rng, 16, 16);
        let perm = shuffled(rng, inst.content.tensor.shape().plane());
        let moved = FeatureMap::new(permute_positions(&inst.content.tensor, &perm), Level::A);
        match (
            sanet_attend(&inst.params, &inst.content, &inst.style),
            sanet_attend(&inst.params, &moved, &inst.style),
        ) {
            (Ok(a), Ok(b)) => stats.add_all(
                &to_f64(&b.tensor),
                &to_f64(&permute_positions(&a.tensor, &perm)),
            ),
            _ => stats.add(f64::NAN, 0.0),
        }
    }
    stats.abs_report("content_permutation_equivariance".into(), ATTENTION_TOL)
}

/// Per-channel `a·x + b` with `a ∈ [1, 2)`, `b ∈ [-1, 1)`.
fn affine_per_channel(rng: &mut ChaCha8Rng, t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let mut out = t.clone();
    for plane in out.data_mut().chunks_mut(s.plane()) {
        let (a, b) = (rng.gen_range(1.0..2.0f32), rng.gen_range(-1.0..1.0f32));
        for v in plane {
            *v = a * *v + b;
        }
    }
    out
}

fn affine_checks(rng: &mut ChaCha8Rng) -> [OracleReport; 2] {
    let mut scores = ErrorStats::new(1e-6);
    let mut changed = true;
    for _ in 0..20 {
        let feat = rng.gen_range(2..=16);
        let mut p = SanetParams::init(rng, feat, feat.div_ceil(2));
        p.h_bias = uniform(rng, [feat, 1, 1, 1], 1.0);
        let fc = FeatureMap::new(uniform(rng, [1, feat, 3, 3], 1.0), Level::A);
        // Unit variance keeps the eps term of the normalisation negligible.
        let raw = uniform(rng, [1, feat, 4, 4], 3f32.sqrt());
        let fs = FeatureMap::new(raw.clone(), Level::A);
        let moved = FeatureMap::new(affine_per_channel(rng, &raw), Level::A);
        let (Ok(s0), Ok(s1)) = (sanet_scores(&p, &fc, &fs), sanet_scores(&p, &fc, &moved)) else {
            scores.add(f64::NAN, 0.0);
            continue;
        };
        scores.add_all(&to_f64(&s1), &to_f64(&s0));
        let (Ok(o0), Ok(o1)) = (sanet_attend(&p, &fc, &fs), sanet_attend(&p, &fc, &moved)) else {
            changed = false;
            continue;
        };
        changed &= o0.tensor.max_abs_diff(&o1.tensor).unwrap_or(0.0) > 1e-3;
    }
    [
        scores.abs_report("score_affine_invariance".into(), 1e-4),
        OracleReport::flag("value_path_not_affine_invariant", changed),
    ]
}

fn small_net(rng: &mut ChaCha8Rng) -> TransformNet<f32> {
    let mut net = TransformNet::new(NetConfig::with_feat(8), rng.gen());
    for (_, t) in net.named_params_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    net
}

fn image(rng: &mut ChaCha8Rng, kind: SynthKind) -> Image {
    synth_image(rng.gen(), 32, 32, kind).expect("32 ≥ 8")
}

/// Five tap tensors with the extents of a 32×32 input and unit variance.
fn random_taps(rng: &mut ChaCha8Rng) -> Vec<Tensor<f32>> {
    [[16, 32, 32], [32, 16, 16], [32, 8, 8], [8, 4, 4], [8, 2, 2]]
        .iter()
        .map(|&[c, h, w]| uniform(rng, [1, c, h, w], 3f32.sqrt()))
        .collect()
}

fn loss_checks(rng: &mut ChaCha8Rng) -> [OracleReport; 3] {
    let layers: Vec<usize> = (0..TAP_COUNT).collect();
    let taps = random_taps(rng);
    let img = image(rng, SynthKind::Blobs).to_tensor::<f32>();
    let mut g = Graph::new();
    let t = Taps(taps.iter().map(|x| g.constant(x.clone())).collect());
    let iv = g.constant(img);
    let zero = content_loss(&mut g, &t, &t)
        .and_then(|c| style_loss(&mut g, &t, &t, &layers).map(|(s, _)| (c, s)))
        .and_then(|(c, s)| {
            identity_loss(&mut g, iv, iv, iv, iv, [&t, &t, &t, &t], &layers)
                .map(|(a, b)| [c, s, a, b])
        })
        .map(|vars| vars.iter().all(|&v| g.value(v).item() == 0.0))
        .unwrap_or(false);

    let moved: Vec<Tensor<f32>> = taps.iter().map(|x| affine_per_channel(rng, x)).collect();
    let mut g = Graph::new();
    let a = Taps(taps.iter().map(|x| g.constant(x.clone())).collect());
    let b = Taps(moved.iter().map(|x| g.constant(x.clone())).collect());
    let content = content_loss(&mut g, &b, &a).map_or(f64::NAN, |v| g.value(v).item() as f64);

    let other: Vec<Tensor<f64>> = random_taps(rng).iter().map(Tensor::cast).collect();
    let base: Vec<Tensor<f64>> = taps.iter().map(Tensor::cast).collect();
    let mut permuted = base.clone();
    for t in &mut permuted {
        let plane = t.shape().plane();
        let perm = shuffled(rng, plane);
        for chunk in t.data_mut().chunks_mut(plane) {
            let src = chunk.to_vec();
            for (j, &p) in perm.iter().enumerate() {
                chunk[j] = src[p];
            }
        }
    }
    let style_of = |x: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let tx = Taps(x.iter().map(|t| g.constant(t.clone())).collect());
        let to = Taps(other.iter().map(|t| g.constant(t.clone())).collect());
        style_loss(&mut g, &tx, &to, &layers).map_or(f64::NAN, |(v, _)| g.value(v).item())
    };
    let (s0, s1) = (style_of(&base), style_of(&permuted));
    [
        OracleReport::flag("losses_zero_on_identical", zero),
        OracleReport::abs("content_affine_invariance", content, content, 1e-4),
        OracleReport::rel(
            "style_loss_permutation_invariance",
            (s0 - s1).abs(),
            (s0 - s1).abs() / s0.abs().max(1e-12),
            1e-12,
        ),
    ]
}

fn control_checks(rng: &mut ChaCha8Rng) -> [OracleReport; 4] {
    let net = small_net(rng);
    let c = image(rng, SynthKind::Blobs);
    let s = image(rng, SynthKind::Stripes);
    let run = || -> Option<[bool; 4]> {
        let f1 = net.stylized_features(&c.to_tensor(), &s.to_tensor()).ok()?;
        let f0 = net.stylized_features(&c.to_tensor(), &c.to_tensor()).ok()?;
        let ends = tradeoff_features(&net, &c, &s, 1.0)
            .ok()?
            .tensor
            .bit_eq(&f1.tensor)
            && tradeoff_features(&net, &c, &s, 0.0)
                .ok()?
                .tensor
                .bit_eq(&f0.tensor);
        let a = 0.4;
        let reduces = tradeoff_features(&net, &c, &s, a).ok()?.tensor.bit_eq(
            &style_interpolate_features(&net, &c, &[s.clone(), c.clone()], &[a, 1.0 - a])
                .ok()?
                .tensor,
        );
        let halves: Vec<Vec<bool>> = (0..2)
            .map(|k| (0..16).map(|i| (i % 4 < 2) == (k == 0)).collect())
            .collect();
        let masks = MaskSet::new(4, 4, halves).ok()?;
        let spatial = spatial_control_features(&net, &c, &[s.clone(), s.clone()], &masks)
            .ok()?
            .tensor
            .bit_eq(&f1.tensor);
        let reloaded = load_checkpoint(&save_checkpoint(&net)).ok()?;
        let round_trip = reloaded.stylize(&c, &s).ok()?.0 == net.stylize(&c, &s).ok()?.0;
        Some([ends, reduces, spatial, round_trip])
    };
    let r = run().unwrap_or([false; 4]);
    [
        OracleReport::flag("tradeoff_endpoints_bit_exact", r[0]),
        OracleReport::flag("interpolation_reduces_to_tradeoff", r[1]),
        OracleReport::flag("spatial_identical_styles_bit_exact", r[2]),
        OracleReport::flag("checkpoint_round_trip_bit_exact", r[3]),
    ]
}

/// Runs every registered check with the default primitives.
pub fn run_property_suite(seed: u64) -> Vec<OracleReport> {
    run_property_suite_with(seed, &SuiteHooks::default())
}

/// Runs every registered check; one report per entry of [`CHECK_NAMES`].
pub fn run_property_suite_with(seed: u64, hooks: &SuiteHooks) -> Vec<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(CHECK_NAMES.len());

    let scores = uniform(&mut rng, [1, 1, 8, 10], 10.0);
    let w = (hooks.softmax)(&scores);
    let mut sums = ErrorStats::new(1.0);
    for row in w.data().chunks(10) {
        sums.add(row.iter().map(|&v| v as f64).sum(), 1.0);
    }
    out.push(sums.abs_report("softmax_row_sums".into(), 1e-5));
    let mut shifted = scores.clone();
    for row in shifted.data_mut().chunks_mut(10) {
        let c = rng.gen_range(-5.0..5.0f32);
        row.iter_mut().for_each(|v| *v += c);
    }
    let mut shift = ErrorStats::new(1.0);
    shift.add_all(&to_f64(&(hooks.softmax)(&shifted)), &to_f64(&w));
    out.push(shift.abs_report("softmax_shift_invariance".into(), 1e-6));

    let x = uniform(&mut rng, [2, 4, 5, 5], 2.0);
    let eps = NORM_EPS as f32;
    let (mu, sigma) = kernels::channel_stats(&kernels::mean_var_normalize(&x, eps).output, eps);
    let mut m = ErrorStats::new(1.0);
    mu.data().iter().for_each(|&v| m.add(v as f64, 0.0));
    out.push(m.abs_report("mvn_mean_zero".into(), 1e-5));
    let mut sd = ErrorStats::new(1.0);
    sigma.data().iter().for_each(|&v| sd.add(v as f64, 1.0));
    out.push(sd.abs_report("mvn_std_one".into(), 1e-3));

    let x = uniform(&mut rng, [2, 5, 3, 4], 1.0);
    let eye = Tensor::from_fn(Shape::new(5, 5, 1, 1).expect("dims"), |o, i, _, _| {
        if o == i {
            1.0
        } else {
            0.0
        }
    });
    let ident = kernels::conv2d(&x, &eye, None, 1, Padding::Zero).is_ok_and(|y| y.bit_eq(&x));
    out.push(OracleReport::flag("conv_identity_bit_exact", ident));

    // Multiples of 1/64 keep every sum exact.
    let x = uniform(&mut rng, [1, 3, 5, 7], 1.0).map(|v| (v * 64.0).round() / 64.0);
    let mean = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
    let up = kernels::upsample_nearest(&x, 2).map_or(f64::NAN, |u| mean(&u));
    out.push(OracleReport::abs(
        "upsample_preserves_mean",
        (up - mean(&x)).abs(),
        0.0,
        0.0,
    ));

    out.push(attention_oracle_check(rng.gen(), 100));
    out.push(row_normalization_check(rng.gen(), 100, hooks.softmax));
    let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let moved: Vec<f64> = row.iter().map(|v| v + 2.5).collect();
    let mut bs = ErrorStats::new(1.0);
    bs.add_all(&eq5_weights(&moved), &eq5_weights(&row));
    out.push(bs.abs_report("bruteforce_shift_invariance".into(), 1e-12));
    out.push(style_permutation_check(rng.gen(), 50));
    out.push(content_equivariance_check(&mut rng, 20));
    out.extend(affine_checks(&mut rng));

    let inst = random_instance(&mut rng, 16, 16);
    let mut p = inst.params.clone();
    p.out = Tensor::zeros(p.out.shape());
    p.out_bias = Tensor::zeros(p.out_bias.shape());
    let fuse_ok = sanet_attend(&p, &inst.content, &inst.style)
        .and_then(|fcs| sanet_fuse(&p, &inst.content, &fcs))
        .is_ok_and(|f| f.tensor.bit_eq(&inst.content.tensor));
    out.push(OracleReport::flag("zero_wcs_fuse_passthrough", fuse_ok));

    let net = TransformNet::<f32>::new(NetConfig::with_feat(8), rng.gen());
    let c = image(&mut rng, SynthKind::Blobs).to_tensor::<f32>();
    let s = image(&mut rng, SynthKind::Checker { cell: 4 }).to_tensor::<f32>();
    let reduction = (|| {
        let fm = net.stylized_features(&c, &s).ok()?;
        let enc = net.encode(&c).ok()?;
        let expected = multi_level_combine(&enc.level_a(), &enc.level_b(), &net.fuse).ok()?;
        Some(fm.tensor.bit_eq(&expected.tensor))
    })()
    .unwrap_or(false);
    out.push(OracleReport::flag("zero_wcs_network_reduction", reduction));

    out.extend(loss_checks(&mut rng));
    out.extend(control_checks(&mut rng));

    let mut param = Tensor::scalar(1.0f64);
    let mut state = AdamState::new([Shape::scalar()]);
    let stepped = adam_step(&mut [&mut param], &[&Tensor::scalar(1.0)], &mut state, 0.1).is_ok();
    let d = if stepped {
        (param.item() - 0.9).abs()
    } else {
        f64::NAN
    };
    out.push(OracleReport::abs("adam_first_step", d, d / 0.9, 1e-7));

    debug_assert_eq!(out.len(), CHECK_NAMES.len());
    out
}
