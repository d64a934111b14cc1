//! Central finite differences against the reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ErrorStats, OracleReport, VerifyError};
use crate::graph::{Graph, Var};
use crate::image_io::{synth_image, SynthKind};
use crate::kernels::Padding;
use crate::losses::{training_loss, LossWeights};
use crate::network::{NetConfig, TransformNet, NORM_EPS};
use crate::tensor::{Scalar, Shape, Tensor};

/// Step for the f32 pathway.
pub const H_F32: f64 = 1e-3;
/// Step for the f64 pathway.
pub const H_F64: f64 = 1e-6;
/// Relative error tolerance of the f32 and total-loss gradient checks.
pub const GRAD_TOL: f64 = 1e-3;
/// Relative error tolerance of the f64 primitive checks.
pub const GRAD_TOL_F64: f64 = 1e-6;
/// Denominator floor of the f32 relative error.
pub const REL_FLOOR_F32: f64 = 1e-3;
/// Denominator floor of the f64 relative error.
pub const REL_FLOOR_F64: f64 = 1e-3;
/// Denominator floor of the total-loss relative error.
pub const LOSS_REL_FLOOR: f64 = 1e-6;
/// Upper bound on sampled coordinates per check.
pub const MAX_COORDS: usize = 200;

/// Seeded sample of at most `max` distinct indices below `len`, ascending.
pub fn sample_coords(len: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = sample(rng, len, max.min(len)).into_vec();
    v.sort_unstable();
    v
}

/// Central-difference estimate of `∂loss/∂x[i]` for each `i` in `coords`.
///
/// The denominator is the step actually taken after rounding `x ± h` to `T`.
pub fn finite_diff_grad<T: Scalar, F>(
    mut loss: F,
    x: &[T],
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>, VerifyError>
where
    F: FnMut(&[T]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(VerifyError::BadStep(h));
    }
    let mut work = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let x0 = x[i];
            let xp = T::from_f64_lossy(x0.to_f64_lossless() + h);
            let xm = T::from_f64_lossy(x0.to_f64_lossless() - h);
            work[i] = xp;
            let lp = loss(&work);
            work[i] = xm;
            let lm = loss(&work);
            work[i] = x0;
            if !(lp.is_finite() && lm.is_finite()) {
                return Err(VerifyError::NonFiniteLoss { coord: i });
            }
            Ok((lp - lm) / (xp.to_f64_lossless() - xm.to_f64_lossless()))
        })
        .collect()
}

type Build<T> = Box<dyn Fn(&mut Graph<T>, &[Var]) -> crate::tensor::Result<Var>>;

/// One primitive under test: its inputs and how to apply it.
pub struct Case<T: Scalar> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    build: Build<T>,
}

fn uniform(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
    let shape = Shape::try_from(dims).expect("valid dims");
    Tensor::new(
        shape,
        (0..shape.numel())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )
    .expect("length")
}

/// Magnitudes in [0.1, 1] with random sign, clear of the ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
    uniform(rng, dims).map(|v| v.signum() * (0.1 + 0.9 * v.abs()))
}

/// Every primitive of the engine with seeded inputs of magnitude ≤ 1.
pub fn primitive_cases<T: Scalar>(rng: &mut ChaCha8Rng) -> Vec<Case<T>> {
    let eps = T::from_f64_lossy(NORM_EPS);
    let mut cases: Vec<Case<T>> = Vec::new();
    let mut add = |name, inputs, build: Build<T>| {
        cases.push(Case {
            name,
            inputs,
            build,
        })
    };
    add(
        "conv3x3_reflect",
        vec![
            uniform(rng, [2, 3, 5, 4]),
            uniform(rng, [4, 3, 3, 3]),
            uniform(rng, [4, 1, 1, 1]),
        ],
        Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Reflect)),
    );
    add(
        "conv3x3_zero_stride2",
        vec![
            uniform(rng, [1, 2, 6, 5]),
            uniform(rng, [3, 2, 3, 3]),
            uniform(rng, [3, 1, 1, 1]),
        ],
        Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Zero)),
    );
    add(
        "conv3x3_reflect_stride2",
        vec![uniform(rng, [1, 2, 6, 6]), uniform(rng, [2, 2, 3, 3])],
        Box::new(|g, v| g.conv2d(v[0], v[1], None, 2, Padding::Reflect)),
    );
    add(
        "conv1x1",
        vec![uniform(rng, [1, 4, 3, 3]), uniform(rng, [2, 4, 1, 1])],
        Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, Padding::Zero)),
    );
    add(
        "relu",
        vec![off_kink(rng, [1, 2, 4, 4])],
        Box::new(|g, v| Ok(g.relu(v[0]))),
    );
    add(
        "upsample_nearest",
        vec![uniform(rng, [1, 2, 3, 3])],
        Box::new(|g, v| g.upsample_nearest(v[0], 2)),
    );
    add(
        "softmax_rows",
        vec![uniform(rng, [1, 1, 4, 6])],
        Box::new(|g, v| Ok(g.softmax_rows(v[0]))),
    );
    add(
        "mean_var_normalize",
        vec![uniform(rng, [2, 3, 4, 4])],
        Box::new(move |g, v| Ok(g.mean_var_normalize(v[0], eps))),
    );
    add(
        "channel_mean",
        vec![uniform(rng, [2, 3, 4, 4])],
        Box::new(move |g, v| Ok(g.channel_stats(v[0], eps).0)),
    );
    add(
        "channel_std",
        vec![uniform(rng, [2, 3, 4, 4])],
        Box::new(move |g, v| Ok(g.channel_stats(v[0], eps).1)),
    );
    add(
        "matmul",
        vec![uniform(rng, [2, 1, 3, 4]), uniform(rng, [2, 1, 4, 5])],
        Box::new(|g, v| g.matmul(v[0], v[1])),
    );
    add(
        "transpose_last2",
        vec![uniform(rng, [1, 2, 3, 4])],
        Box::new(|g, v| Ok(g.transpose_last2(v[0]))),
    );
    add(
        "reshape",
        vec![uniform(rng, [1, 2, 3, 4])],
        Box::new(|g, v| g.reshape(v[0], [1, 1, 6, 4])),
    );
    add(
        "add",
        vec![uniform(rng, [1, 2, 3, 3]), uniform(rng, [1, 2, 3, 3])],
        Box::new(|g, v| g.add(v[0], v[1])),
    );
    add(
        "sub",
        vec![uniform(rng, [1, 2, 3, 3]), uniform(rng, [1, 2, 3, 3])],
        Box::new(|g, v| g.sub(v[0], v[1])),
    );
    add(
        "mul",
        vec![uniform(rng, [1, 2, 3, 3]), uniform(rng, [1, 2, 3, 3])],
        Box::new(|g, v| g.mul(v[0], v[1])),
    );
    add(
        "scale",
        vec![uniform(rng, [1, 2, 3, 3])],
        Box::new(|g, v| Ok(g.scale(v[0], T::from_f64_lossy(0.7)))),
    );
    add(
        "square",
        vec![uniform(rng, [1, 2, 3, 3])],
        Box::new(|g, v| Ok(g.square(v[0]))),
    );
    add(
        "sum",
        vec![uniform(rng, [1, 2, 3, 3])],
        Box::new(|g, v| Ok(g.sum(v[0]))),
    );
    add(
        "mean",
        vec![uniform(rng, [1, 2, 3, 3])],
        Box::new(|g, v| Ok(g.mean(v[0]))),
    );
    cases
}

fn dot(a: &Tensor<impl Scalar>, r: &Tensor<f64>) -> f64 {
    a.data()
        .iter()
        .zip(r.data())
        .map(|(x, y)| x.to_f64_lossless() * y)
        .sum()
}

/// Checks one case on `Σ out ⊙ R` for a seeded random `R`.
///
/// Backward runs on `case` in `A`; the central differences run on
/// `reference`, the same primitive in `F`, at the `A`-rounded inputs. The
/// projection is accumulated in f64.
pub fn check_case<A: Scalar, F: Scalar>(
    prefix: &str,
    case: &Case<A>,
    reference: &Case<F>,
    rng: &mut ChaCha8Rng,
    step: Step,
) -> Result<OracleReport, VerifyError> {
    let xs: Vec<Tensor<A>> = case.inputs.iter().map(Tensor::cast).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let r = uniform(rng, g.shape(out).dims());
    let rv = g.constant(r.cast());
    let prod = g.mul(out, rv)?;
    let loss = g.sum(prod);
    let grads = g.backward(loss)?;

    let at: Vec<Tensor<F>> = xs.iter().map(Tensor::cast).collect();
    let mut stats = ErrorStats::new(step.floor);
    for (k, x) in at.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .ok_or(VerifyError::MissingGradient(case.name.into()))?;
        let coords = sample_coords(x.numel(), MAX_COORDS, rng);
        let numeric = finite_diff_grad(
            |d: &[F]| {
                let mut g = Graph::new();
                let vars: Vec<Var> = at
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            g.constant(Tensor::new(t.shape(), d.to_vec()).expect("same length"))
                        } else {
                            g.constant(t.clone())
                        }
                    })
                    .collect();
                match (reference.build)(&mut g, &vars) {
                    Ok(o) => dot(g.value(o), &r),
                    Err(_) => f64::NAN,
                }
            },
            x.data(),
            &coords,
            step.h,
        )?;
        for (&i, n) in coords.iter().zip(numeric) {
            stats.add(analytic.data()[i].to_f64_lossless(), n);
        }
    }
    Ok(stats.rel_report(format!("{prefix}/{}", case.name), step.tol))
}

/// Finite-difference step, relative-error floor and tolerance of one pathway.
#[derive(Debug, Clone, Copy)]
pub struct Step {
    pub h: f64,
    pub floor: f64,
    pub tol: f64,
}

/// f32 backward against differences of the f64 forward taken with step 1e-3.
pub const F32_PATHWAY: Step = Step {
    h: H_F32,
    floor: REL_FLOOR_F32,
    tol: GRAD_TOL,
};

/// f64 backward against f64 differences with step 1e-6.
pub const F64_PATHWAY: Step = Step {
    h: H_F64,
    floor: REL_FLOOR_F64,
    tol: GRAD_TOL_F64,
};

/// Gradient checks of every primitive on both pathways.
pub fn check_primitives(seed: u64) -> Result<Vec<OracleReport>, VerifyError> {
    let mut out = Vec::new();
    // Identical seeds give identical inputs, whatever the scalar type.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f32_cases = primitive_cases::<f32>(&mut rng);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f64_cases = primitive_cases::<f64>(&mut rng);
    for (a, b) in f32_cases.iter().zip(&f64_cases) {
        out.push(check_case("f32", a, b, &mut rng, F32_PATHWAY)?);
    }
    for case in &f64_cases {
        out.push(check_case("f64", case, case, &mut rng, F64_PATHWAY)?);
    }
    Ok(out)
}

/// Small network with every trainable tensor perturbed away from its
/// initialisation, so the attention paths carry gradient.
pub fn perturbed_net(seed: u64, feat: usize) -> TransformNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = TransformNet::<f32>::new(NetConfig::with_feat(feat), seed);
    for (_, t) in net.named_params_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    net.cast()
}

/// Content/style pair used by the total-loss check.
pub fn check_pair(seed: u64, size: usize) -> (Tensor<f64>, Tensor<f64>) {
    let c = synth_image(seed, size, size, SynthKind::Blobs).expect("size ≥ 8");
    let s = synth_image(seed ^ 0xa5a5, size, size, SynthKind::Stripes).expect("size ≥ 8");
    (c.to_tensor(), s.to_tensor())
}

fn loss_value(net: &TransformNet<f64>, c: &Tensor<f64>, s: &Tensor<f64>, w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let (cv, sv) = (g.constant(c.clone()), g.constant(s.clone()));
    match training_loss(&mut g, &bound, cv, sv, w) {
        Ok(l) => g.value(l.total).item(),
        Err(_) => f64::NAN,
    }
}

/// Total loss with the default weights on a 32×32 pair, in f64, against
/// finite differences on a seeded sample of every trainable tensor.
///
/// One report per tensor; `per_tensor` coordinates are sampled from each
/// (at most [`MAX_COORDS`] in total).
pub fn check_total_loss(
    seed: u64,
    feat: usize,
    per_tensor: usize,
) -> Result<Vec<OracleReport>, VerifyError> {
    let net = perturbed_net(seed, feat);
    let (c, s) = check_pair(seed, 32);
    let weights = LossWeights::default();

    let mut g = Graph::new();
    let bound = net.bind(&mut g, true);
    let (cv, sv) = (g.constant(c.clone()), g.constant(s.clone()));
    let loss = training_loss(&mut g, &bound, cv, sv, &weights)?;
    let mut grads = g.backward(loss.total)?;
    let analytic: Vec<Tensor<f64>> = bound
        .param_vars()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let names: Vec<String> = net.named_params().into_iter().map(|(n, _)| n).collect();
    let per_tensor = per_tensor.min(MAX_COORDS / names.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut reports = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let x = net.named_params()[k].1.clone();
        let coords = sample_coords(x.numel(), per_tensor, &mut rng);
        let mut probe = net.clone();
        let numeric = finite_diff_grad(
            |d: &[f64]| {
                probe.named_params_mut()[k].1.data_mut().copy_from_slice(d);
                loss_value(&probe, &c, &s, &weights)
            },
            x.data(),
            &coords,
            H_F64,
        )?;
        let mut stats = ErrorStats::new(LOSS_REL_FLOOR);
        for (&i, n) in coords.iter().zip(numeric) {
            stats.add(analytic[k].data()[i], n);
        }
        reports.push(stats.rel_report(format!("total_loss/{name}"), GRAD_TOL));
    }
    Ok(reports)
}

/// Gradient of `mean(decode(F))` with respect to the feature map, in f64.
pub fn check_decoder_input(seed: u64, feat: usize) -> Result<OracleReport, VerifyError> {
    let net = perturbed_net(seed, feat);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6465_636f);
    let f = uniform(&mut rng, [1, feat, 4, 4]);
    let decode_mean =
        |f: &Tensor<f64>, trainable: bool| -> Result<(Graph<f64>, Var, Var), VerifyError> {
            let mut g = Graph::new();
            let dec = net.decoder.bind(&mut g, false);
            let fv = if trainable {
                g.param(f.clone())
            } else {
                g.constant(f.clone())
            };
            let out = dec.decode(&mut g, fv)?;
            let m = g.mean(out);
            Ok((g, fv, m))
        };
    let (g, fv, m) = decode_mean(&f, true)?;
    let grads = g.backward(m)?;
    let analytic = grads
        .get(fv)
        .ok_or(VerifyError::MissingGradient("decoder input".into()))?;
    let coords = sample_coords(f.numel(), MAX_COORDS, &mut rng);
    let numeric = finite_diff_grad(
        |d: &[f64]| {
            let t = Tensor::new(f.shape(), d.to_vec()).expect("same length");
            decode_mean(&t, false).map_or(f64::NAN, |(g, _, m)| g.value(m).item())
        },
        f.data(),
        &coords,
        H_F64,
    )?;
    let mut stats = ErrorStats::new(1e-8);
    for (&i, n) in coords.iter().zip(numeric) {
        stats.add(analytic.data()[i], n);
    }
    Ok(stats.rel_report("decoder_input/mean".into(), GRAD_TOL))
}

/// Every gradient check: primitives, decoder input and total loss.
pub fn run_gradcheck(seed: u64) -> Result<Vec<OracleReport>, VerifyError> {
    let mut out = check_primitives(seed)?;
    out.push(check_decoder_input(seed, 8)?);
    out.extend(check_total_loss(seed, 8, 8)?);
    Ok(out)
}
