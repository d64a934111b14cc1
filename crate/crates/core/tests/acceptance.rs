//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sanet_core::bench::bench;
use sanet_core::controls::{
    spatial_control, spatial_control_features, style_interpolate, style_interpolate_features,
    tradeoff, tradeoff_features, MaskSet,
};
use sanet_core::graph::Graph;
use sanet_core::image_io::{synth_image, Image, SynthKind};
use sanet_core::kernels::softmax_rows;
use sanet_core::losses::{content_loss, LossWeights};
use sanet_core::network::checkpoint::{load_checkpoint, save_checkpoint};
use sanet_core::network::{NetConfig, Taps, TransformNet};
use sanet_core::training::{train, TrainConfig};
use sanet_core::verify::{
    attention_oracle_check, row_normalization_check, run_gradcheck, run_property_suite,
    style_permutation_check, OracleReport,
};

const SEED: u64 = 2024;

const ATTENTION_TOL: f64 = 1e-5;
const ORACLE_INSTANCES: usize = 100;
const ORACLE_BUDGET: Duration = Duration::from_secs(10);
const ROW_INSTANCES: usize = 100;
const PERMUTATIONS: usize = 50;
const GRAD_TOL: f64 = 1e-3;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const AFFINE_TOL: f64 = 1e-4;
const SMOKE_STEPS: u64 = 500;
const SMOKE_LR: f64 = 1e-4;
const SMOKE_RATIO: f64 = 0.5;
const SMOKE_BUDGET: Duration = Duration::from_secs(300);
const RESUME_TOTAL: u64 = 20;
const RESUME_AT: u64 = 8;
const BENCH_SIZES: [usize; 2] = [256, 512];
const BENCH_REPEATS: usize = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn failed(reports: &[OracleReport]) -> Vec<String> {
    reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("{r:?}"))
        .collect()
}

fn image(seed: u64, size: usize, kind: SynthKind) -> Image {
    synth_image(seed, size, size, kind).expect("extent ≥ 8")
}

fn attention_oracle() -> Outcome {
    let t = Instant::now();
    let r = attention_oracle_check(SEED, ORACLE_INSTANCES);
    let took = t.elapsed();
    outcome(
        r.pass && r.tol == ATTENTION_TOL && took < ORACLE_BUDGET,
        format!(
            "{ORACLE_INSTANCES} instances, max abs {:.2e} (tol {ATTENTION_TOL:e}), {took:.2?}",
            r.max_abs
        ),
    )
}

fn row_normalization() -> Outcome {
    let r = row_normalization_check(SEED, ROW_INSTANCES, softmax_rows::<f32>);
    outcome(
        r.pass && r.tol == ATTENTION_TOL,
        format!(
            "{ROW_INSTANCES} instances, max |row sum − 1| {:.2e} (tol {ATTENTION_TOL:e})",
            r.max_abs
        ),
    )
}

fn style_permutation() -> Outcome {
    let r = style_permutation_check(SEED, PERMUTATIONS);
    outcome(
        r.pass && r.tol == ATTENTION_TOL,
        format!(
            "{PERMUTATIONS} permutations, max abs change {:.2e} (tol {ATTENTION_TOL:e})",
            r.max_abs
        ),
    )
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let reports = match run_gradcheck(SEED) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("gradcheck error: {e}")),
    };
    let took = t.elapsed();
    let worst = |prefix: &str| {
        reports
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.max_rel)
            .fold(0.0f64, f64::max)
    };
    let total: Vec<&OracleReport> = reports
        .iter()
        .filter(|r| r.name.starts_with("total_loss/"))
        .collect();
    let expected = TransformNet::<f64>::new(NetConfig::with_feat(8), 0)
        .named_params()
        .len();
    let tols_ok = reports.iter().all(|r| r.tol <= GRAD_TOL);
    let bad = failed(&reports);
    let w = LossWeights::default();
    let weights_ok = (
        w.lambda_c,
        w.lambda_s,
        w.lambda_identity1,
        w.lambda_identity2,
    ) == (1.0, 3.0, 1.0, 50.0);
    outcome(
        bad.is_empty() && tols_ok && weights_ok && total.len() == expected && took < GRAD_BUDGET,
        format!(
            "{} checks ({} total-loss tensors), max rel f32 {:.2e}, f64 {:.2e}, total loss {:.2e} (tol {GRAD_TOL:e}), {took:.2?}{}",
            reports.len(),
            total.len(),
            worst("f32/"),
            worst("f64/"),
            worst("total_loss/"),
            if bad.is_empty() { String::new() } else { format!("; failed {}", bad.join(", ")) }
        ),
    )
}

/// Content loss between encoder taps and their per-channel affine image.
fn encoder_feature_affine() -> f64 {
    let net = TransformNet::<f32>::new(NetConfig::default(), SEED);
    let enc = net
        .encode_image(&image(SEED, 64, SynthKind::Blobs))
        .expect("valid extent");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut g = Graph::new();
    let a = Taps(enc.taps.iter().map(|t| g.constant(t.clone())).collect());
    let b = Taps(
        enc.taps
            .iter()
            .map(|t| {
                let mut o = t.clone();
                for plane in o.data_mut().chunks_mut(t.shape().plane()) {
                    let (s, d) = (rng.gen_range(1.0..2.0f32), rng.gen_range(-1.0..1.0f32));
                    plane.iter_mut().for_each(|v| *v = s * *v + d);
                }
                g.constant(o)
            })
            .collect(),
    );
    content_loss(&mut g, &b, &a).map_or(f64::NAN, |v| g.value(v).item() as f64)
}

fn loss_zeros() -> Outcome {
    let reports = run_property_suite(SEED);
    let get = |name: &str| reports.iter().find(|r| r.name == name).cloned();
    let (Some(zero), Some(affine)) = (
        get("losses_zero_on_identical"),
        get("content_affine_invariance"),
    ) else {
        return outcome(false, "checks missing from the property suite");
    };
    outcome(
        zero.pass && affine.pass && affine.tol == AFFINE_TOL,
        format!(
            "identical inputs give exact zeros: {}; affine content loss {:.2e} (tol {AFFINE_TOL:e}); \
             encoder taps, for reference: {:.2e}",
            zero.pass,
            affine.max_abs,
            encoder_feature_affine()
        ),
    )
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        learning_rate: SMOKE_LR,
        batch_size: 2,
        steps: SMOKE_STEPS,
        seed: 7,
        image_size: 32,
        fixed_batch: true,
        ..TrainConfig::default()
    }
}

fn training_smoke() -> (Outcome, Option<TransformNet<f32>>) {
    let t = Instant::now();
    let (a, b) = match (train(&smoke_config()), train(&smoke_config())) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return (outcome(false, format!("training error: {e}")), None),
    };
    let took = t.elapsed();
    let first = a.reports.first().map_or(f64::NAN, |r| r.total);
    let last = a.reports.last().map_or(f64::NAN, |r| r.total);
    let ratio = last / first;
    let same = a.checkpoint == b.checkpoint
        && a.reports
            .iter()
            .zip(&b.reports)
            .all(|(x, y)| x.total.to_bits() == y.total.to_bits());
    let pass = ratio <= SMOKE_RATIO
        && same
        && a.reports.len() as u64 == SMOKE_STEPS
        && took < SMOKE_BUDGET;
    (
        outcome(
            pass,
            format!(
                "loss {first:.4} → {last:.4}, ratio {ratio:.3} (≤ {SMOKE_RATIO}), bit-identical reruns: {same}, two runs {took:.1?}"
            ),
        ),
        Some(a.net),
    )
}

fn controls(net: &TransformNet<f32>) -> Outcome {
    let c = image(11, 64, SynthKind::Blobs);
    let s1 = image(12, 64, SynthKind::Stripes);
    let s2 = image(13, 64, SynthKind::Checker { cell: 5 });
    let run = || -> Result<Vec<(&'static str, bool)>, Box<dyn std::error::Error>> {
        let plain = net.stylize(&c, &s1)?;
        let own = net.stylize(&c, &c)?;
        let f2 = net.stylized_features(&c.to_tensor(), &s2.to_tensor())?;
        let ones = MaskSet::new(8, 8, vec![vec![true; 64]])?;
        let left: Vec<bool> = (0..64).map(|i| i % 8 < 4).collect();
        let halves = MaskSet::new(8, 8, vec![left.clone(), left.iter().map(|b| !b).collect()])?;
        let split = spatial_control_features(net, &c, &[s1.clone(), s2.clone()], &halves)?;
        let blockwise = (0..64).all(|i| {
            let src = if left[i] { &plain.1 } else { &f2 };
            let (y, x) = (i / 8, i % 8);
            let s = split.tensor.shape();
            (0..s.c).all(|ch| {
                split.tensor.get(0, ch, y, x).to_bits() == src.tensor.get(0, ch, y, x).to_bits()
            })
        });
        let alpha = 0.3;
        let f1 = tradeoff_features(net, &c, &s1, 1.0)?;
        let f0 = tradeoff_features(net, &c, &s1, 0.0)?;
        let fa = tradeoff_features(net, &c, &s1, alpha)?;
        let linear = fa
            .tensor
            .data()
            .iter()
            .zip(f1.tensor.data())
            .zip(f0.tensor.data())
            .all(|((&m, &a), &b)| m == (alpha * a as f64 + (1.0 - alpha) * b as f64) as f32);
        Ok(vec![
            (
                "alpha 1 = stylize",
                tradeoff(net, &c, &s1, 1.0)? == plain.0 && f1.tensor.bit_eq(&plain.1.tensor),
            ),
            (
                "alpha 0 = stylize(c, c)",
                tradeoff(net, &c, &s1, 0.0)? == own.0 && f0.tensor.bit_eq(&own.1.tensor),
            ),
            ("feature linearity in alpha", linear),
            (
                "single style weight 1",
                style_interpolate(net, &c, std::slice::from_ref(&s1), &[1.0])? == plain.0,
            ),
            (
                "[s, c] with [a, 1 − a] = tradeoff",
                style_interpolate_features(
                    net,
                    &c,
                    &[s1.clone(), c.clone()],
                    &[alpha, 1.0 - alpha],
                )?
                .tensor
                .bit_eq(&fa.tensor),
            ),
            (
                "one all-ones mask",
                spatial_control(net, &c, std::slice::from_ref(&s1), &ones)? == plain.0,
            ),
            (
                "identical styles under two masks",
                spatial_control_features(net, &c, &[s1.clone(), s1.clone()], &halves)?
                    .tensor
                    .bit_eq(&plain.1.tensor),
            ),
            ("left/right halves blockwise", blockwise),
        ])
    };
    match run() {
        Ok(cases) => {
            let bad: Vec<&str> = cases.iter().filter(|c| !c.1).map(|c| c.0).collect();
            outcome(
                bad.is_empty(),
                if bad.is_empty() {
                    format!("{} bit-exact cases on the trained network", cases.len())
                } else {
                    format!("mismatch: {}", bad.join(", "))
                },
            )
        }
        Err(e) => outcome(false, format!("control error: {e}")),
    }
}

fn serialization(net: &TransformNet<f32>) -> Outcome {
    let c = image(21, 64, SynthKind::Stripes);
    let s = image(22, 64, SynthKind::Checker { cell: 3 });
    let round_trip = match load_checkpoint(&save_checkpoint(net)) {
        Ok(back) => {
            matches!((net.stylize(&c, &s), back.stylize(&c, &s)), (Ok(a), Ok(b)) if a.0 == b.0)
        }
        Err(_) => false,
    };
    let resumed = (|| -> Result<bool, Box<dyn std::error::Error>> {
        let dir = tempfile::tempdir()?;
        let base = TrainConfig {
            steps: RESUME_TOTAL,
            feat_channels: 16,
            attn_channels: 8,
            checkpoint_every: 5,
            ..TrainConfig::default()
        };
        let full = train(&TrainConfig {
            checkpoint_path: Some(dir.path().join("full.ckpt")),
            ..base.clone()
        })?;
        let part = dir.path().join("part.ckpt");
        train(&TrainConfig {
            steps: RESUME_AT,
            checkpoint_path: Some(part.clone()),
            ..base.clone()
        })?;
        let rest = train(&TrainConfig {
            resume_from: Some(part),
            checkpoint_path: Some(dir.path().join("rest.ckpt")),
            ..base
        })?;
        Ok(full.checkpoint == rest.checkpoint
            && std::fs::read(dir.path().join("rest.ckpt"))? == full.checkpoint)
    })()
    .unwrap_or(false);
    outcome(
        round_trip && resumed,
        format!(
            "round-trip stylize bit-identical: {round_trip}; resume at {RESUME_AT} to {RESUME_TOTAL} equals uninterrupted: {resumed}"
        ),
    )
}

fn benchmark() -> Outcome {
    let net = TransformNet::new(NetConfig::default(), SEED);
    let mut pass = true;
    let mut parts = Vec::new();
    for size in BENCH_SIZES {
        match bench(&net, size, BENCH_REPEATS) {
            Ok(r) => {
                pass &= r.single < r.multi;
                parts.push(format!(
                    "{size}px single {:.1} ms vs multi {:.1} ms (×{:.3})",
                    r.single.as_secs_f64() * 1e3,
                    r.multi.as_secs_f64() * 1e3,
                    r.ratio()
                ));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{size}px error: {e}"));
            }
        }
    }
    outcome(pass, parts.join("; "))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("attention oracle equivalence", attention_oracle()),
        ("attention row normalization", row_normalization()),
        ("style permutation invariance", style_permutation()),
        ("gradient correctness", gradients()),
        ("loss zeros and affine invariance", loss_zeros()),
    ];
    let (smoke, trained) = training_smoke();
    results.push(("training smoke", smoke));
    match trained {
        Some(net) => {
            results.push(("runtime controls", controls(&net)));
            results.push(("serialization", serialization(&net)));
        }
        None => {
            results.push(("runtime controls", outcome(false, "no trained network")));
            results.push(("serialization", outcome(false, "no trained network")));
        }
    }
    results.push(("relative benchmark", benchmark()));

    let mut all = true;
    for (i, (name, o)) in results.iter().enumerate() {
        all &= o.pass;
        println!(
            "{} {}. {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
