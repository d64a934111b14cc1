//! Content, style and identity losses.
//!
//! Every distance is the mean of squared elementwise differences, so loss
//! magnitudes do not depend on tensor sizes. Content compares normalised
//! features at levels A and B; style compares per-channel means and standard
//! deviations at each configured tap; identity compares the two
//! self-reconstructions with their inputs in pixel and feature space.

use serde::Serialize;
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::network::{BoundNet, NetworkError, Taps, LEVEL_A_TAP, LEVEL_B_TAP, NORM_EPS, TAP_COUNT};
use crate::tensor::{Scalar, TensorError};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("tap {index} requested but only {available} taps present")]
    MissingTap { index: usize, available: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_s: f64,
    pub lambda_identity1: f64,
    pub lambda_identity2: f64,
    /// Taps used by the style and feature-identity terms, equally weighted.
    pub style_layers: Vec<usize>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_s: 3.0,
            lambda_identity1: 1.0,
            lambda_identity2: 50.0,
            style_layers: (0..TAP_COUNT).collect(),
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let lambdas = [
            ("lambda_c", self.lambda_c),
            ("lambda_s", self.lambda_s),
            ("lambda_identity1", self.lambda_identity1),
            ("lambda_identity2", self.lambda_identity2),
        ];
        for (name, v) in lambdas {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        if let Some(&bad) = self.style_layers.iter().find(|&&i| i >= TAP_COUNT) {
            return Err(LossError::MissingTap {
                index: bad,
                available: TAP_COUNT,
            });
        }
        Ok(())
    }
}

/// Loss values of one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub identity1: f64,
    pub identity2: f64,
    /// Style term per entry of [`LossWeights::style_layers`].
    pub style_terms: Vec<f64>,
}

/// One line of the training report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CsvRow {
    pub step: u64,
    pub total: f64,
    pub content: f64,
    pub style: f64,
    pub identity1: f64,
    pub identity2: f64,
}

impl LossReport {
    pub fn csv_row(&self, step: u64) -> CsvRow {
        CsvRow {
            step,
            total: self.total,
            content: self.content,
            style: self.style,
            identity1: self.identity1,
            identity2: self.identity2,
        }
    }
}

/// `λ_c·content + λ_s·style + λ_id1·identity1 + λ_id2·identity2`.
pub fn total_loss(
    weights: &LossWeights,
    content: f64,
    style: f64,
    identity1: f64,
    identity2: f64,
    style_terms: Vec<f64>,
) -> LossReport {
    LossReport {
        total: weights.lambda_c * content
            + weights.lambda_s * style
            + weights.lambda_identity1 * identity1
            + weights.lambda_identity2 * identity2,
        content,
        style,
        identity1,
        identity2,
        style_terms,
    }
}

fn tap(taps: &Taps, index: usize) -> Result<Var, LossError> {
    taps.0.get(index).copied().ok_or(LossError::MissingTap {
        index,
        available: taps.0.len(),
    })
}

fn eps<T: Scalar>() -> T {
    T::from_f64_lossy(NORM_EPS)
}

/// Distance between normalised level-A and level-B features.
pub fn content_loss<T: Scalar>(
    g: &mut Graph<T>,
    output: &Taps,
    content: &Taps,
) -> Result<Var, LossError> {
    let mut total = None;
    for index in [LEVEL_A_TAP, LEVEL_B_TAP] {
        let a = g.mean_var_normalize(tap(output, index)?, eps());
        let b = g.mean_var_normalize(tap(content, index)?, eps());
        let d = g.mse(a, b)?;
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d)?,
        });
    }
    Ok(total.expect("two levels"))
}

/// Style loss and its per-layer terms.
pub fn style_loss<T: Scalar>(
    g: &mut Graph<T>,
    output: &Taps,
    style: &Taps,
    layers: &[usize],
) -> Result<(Var, Vec<Var>), LossError> {
    let mut terms = Vec::with_capacity(layers.len());
    for &index in layers {
        let (mu_o, sigma_o) = g.channel_stats(tap(output, index)?, eps());
        let (mu_s, sigma_s) = g.channel_stats(tap(style, index)?, eps());
        let dm = g.mse(mu_o, mu_s)?;
        let ds = g.mse(sigma_o, sigma_s)?;
        terms.push(g.add(dm, ds)?);
    }
    Ok((sum_vars(g, &terms)?, terms))
}

/// Pixel and feature identity terms for the reconstructions `cc` of `c` and `ss` of `s`.
#[allow(clippy::too_many_arguments)]
pub fn identity_loss<T: Scalar>(
    g: &mut Graph<T>,
    cc: Var,
    c: Var,
    ss: Var,
    s: Var,
    taps: [&Taps; 4],
    layers: &[usize],
) -> Result<(Var, Var), LossError> {
    let [taps_cc, taps_c, taps_ss, taps_s] = taps;
    let pc = g.mse(cc, c)?;
    let ps = g.mse(ss, s)?;
    let pixel = g.add(pc, ps)?;
    let mut terms = Vec::with_capacity(2 * layers.len());
    for &index in layers {
        terms.push(g.mse(tap(taps_cc, index)?, tap(taps_c, index)?)?);
        terms.push(g.mse(tap(taps_ss, index)?, tap(taps_s, index)?)?);
    }
    Ok((pixel, sum_vars(g, &terms)?))
}

fn sum_vars<T: Scalar>(g: &mut Graph<T>, vars: &[Var]) -> Result<Var, LossError> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(g.constant(crate::tensor::Tensor::scalar(T::zero())));
    };
    let mut acc = first;
    for &v in rest {
        acc = g.add(acc, v)?;
    }
    Ok(acc)
}

/// Graph handles of every loss component.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub content: Var,
    pub style: Var,
    pub identity1: Var,
    pub identity2: Var,
    pub style_terms: Vec<Var>,
}

impl LossVars {
    /// Reads the values; `total` is the graph's own weighted sum.
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        let v = |x: Var| g.value(x).item().to_f64_lossless();
        LossReport {
            total: v(self.total),
            content: v(self.content),
            style: v(self.style),
            identity1: v(self.identity1),
            identity2: v(self.identity2),
            style_terms: self.style_terms.iter().map(|&x| v(x)).collect(),
        }
    }
}

/// Weighted total recorded in the graph so it can be differentiated.
pub fn weighted_total<T: Scalar>(
    g: &mut Graph<T>,
    weights: &LossWeights,
    parts: [Var; 4],
) -> Result<Var, LossError> {
    let lambdas = [
        weights.lambda_c,
        weights.lambda_s,
        weights.lambda_identity1,
        weights.lambda_identity2,
    ];
    let scaled: Vec<Var> = parts
        .iter()
        .zip(lambdas)
        .map(|(&p, l)| g.scale(p, T::from_f64_lossy(l)))
        .collect();
    sum_vars(g, &scaled)
}

/// Full training objective for a content/style batch already in `g`.
///
/// Runs the stylisation pass and both identity passes through the same
/// multi-level path, then encodes the three outputs.
pub fn training_loss<T: Scalar>(
    g: &mut Graph<T>,
    net: &BoundNet,
    content: Var,
    style: Var,
    weights: &LossWeights,
) -> Result<LossVars, LossError> {
    let tc = net.encoder.encode(g, content)?;
    let ts = net.encoder.encode(g, style)?;
    let (cs, _) = net.stylize(g, &tc, &ts)?;
    let (cc, _) = net.stylize(g, &tc, &tc)?;
    let (ss, _) = net.stylize(g, &ts, &ts)?;
    let t_cs = net.encoder.encode(g, cs)?;
    let t_cc = net.encoder.encode(g, cc)?;
    let t_ss = net.encoder.encode(g, ss)?;

    let content_l = content_loss(g, &t_cs, &tc)?;
    let (style_l, style_terms) = style_loss(g, &t_cs, &ts, &weights.style_layers)?;
    let (id1, id2) = identity_loss(
        g,
        cc,
        content,
        ss,
        style,
        [&t_cc, &tc, &t_ss, &ts],
        &weights.style_layers,
    )?;
    let total = weighted_total(g, weights, [content_l, style_l, id1, id2])?;
    Ok(LossVars {
        total,
        content: content_l,
        style: style_l,
        identity1: id1,
        identity2: id2,
        style_terms,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn random(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor<f64> {
        let shape = Shape::try_from(dims).unwrap();
        Tensor::new(
            shape,
            (0..shape.numel())
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    /// Five taps with the level layout of a 32×32 input.
    fn random_taps(rng: &mut ChaCha8Rng, n: usize) -> Vec<Tensor<f64>> {
        [[4, 32, 32], [6, 16, 16], [6, 8, 8], [5, 4, 4], [5, 2, 2]]
            .iter()
            .map(|&[c, h, w]| random(rng, [n, c, h, w]))
            .collect()
    }

    fn constants(g: &mut Graph<f64>, taps: &[Tensor<f64>]) -> Taps {
        Taps(taps.iter().map(|t| g.constant(t.clone())).collect())
    }

    fn value(g: &Graph<f64>, v: Var) -> f64 {
        g.value(v).item()
    }

    fn content_of(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
        let mut g = Graph::new();
        let (ta, tb) = (constants(&mut g, a), constants(&mut g, b));
        let v = content_loss(&mut g, &ta, &tb).unwrap();
        value(&g, v)
    }

    fn style_of(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> (f64, Vec<f64>) {
        let mut g = Graph::new();
        let (ta, tb) = (constants(&mut g, a), constants(&mut g, b));
        let layers: Vec<usize> = (0..TAP_COUNT).collect();
        let (v, terms) = style_loss(&mut g, &ta, &tb, &layers).unwrap();
        (value(&g, v), terms.iter().map(|&t| value(&g, t)).collect())
    }

    /// Per-channel `(mean, sqrt(var + eps))` by direct loops.
    fn stats_oracle(t: &Tensor<f64>) -> Vec<(f64, f64)> {
        let s = t.shape();
        let mut out = Vec::new();
        for n in 0..s.n {
            for c in 0..s.c {
                let p = t.plane(n, c);
                let mu = p.iter().sum::<f64>() / p.len() as f64;
                let var = p.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / p.len() as f64;
                out.push((mu, (var + NORM_EPS).sqrt()));
            }
        }
        out
    }

    fn normalized_oracle(t: &Tensor<f64>) -> Vec<f64> {
        let s = t.shape();
        let stats = stats_oracle(t);
        t.data()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let (mu, sd) = stats[i / s.plane()];
                (v - mu) / sd
            })
            .collect()
    }

    fn mse_oracle(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!(
            (
                w.lambda_c,
                w.lambda_s,
                w.lambda_identity1,
                w.lambda_identity2
            ),
            (1.0, 3.0, 1.0, 50.0)
        );
        assert_eq!(w.style_layers, vec![0, 1, 2, 3, 4]);
        assert!(w.validate().is_ok());
        let bad = LossWeights {
            lambda_s: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn identical_inputs_give_exact_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let taps = random_taps(&mut rng, 2);
        assert_eq!(content_of(&taps, &taps), 0.0);
        let (s, terms) = style_of(&taps, &taps);
        assert_eq!(s, 0.0);
        assert!(terms.iter().all(|&t| t == 0.0));

        let mut g = Graph::new();
        let img = g.constant(random(&mut rng, [2, 3, 32, 32]));
        let t = constants(&mut g, &taps);
        let (id1, id2) = identity_loss(
            &mut g,
            img,
            img,
            img,
            img,
            [&t, &t, &t, &t],
            &[0, 1, 2, 3, 4],
        )
        .unwrap();
        assert_eq!((value(&g, id1), value(&g, id2)), (0.0, 0.0));
    }

    #[test]
    fn content_ignores_positive_affine_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_taps(&mut rng, 1);
        let b = random_taps(&mut rng, 1);
        let base = content_of(&a, &b);
        let mut moved = a.clone();
        for t in &mut moved {
            let s = t.shape();
            for c in 0..s.c {
                let (scale, shift) = (rng.gen_range(1.0..3.0), rng.gen_range(-2.0..2.0));
                let start = s.index(0, c, 0, 0);
                for v in &mut t.data_mut()[start..start + s.plane()] {
                    *v = scale * *v + shift;
                }
            }
        }
        assert!((content_of(&moved, &b) - base).abs() <= 1e-4);
        assert!(content_of(&moved, &a) <= 1e-4);
    }

    #[test]
    fn content_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_taps(&mut rng, 2);
        let b = random_taps(&mut rng, 2);
        let expected: f64 = [LEVEL_A_TAP, LEVEL_B_TAP]
            .iter()
            .map(|&i| mse_oracle(&normalized_oracle(&a[i]), &normalized_oracle(&b[i])))
            .sum();
        assert!((content_of(&a, &b) - expected).abs() <= 1e-12);
    }

    #[test]
    fn style_matches_statistics_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_taps(&mut rng, 2);
        let b = random_taps(&mut rng, 2);
        let (total, terms) = style_of(&a, &b);
        let mut expected_total = 0.0;
        for i in 0..TAP_COUNT {
            let (sa, sb) = (stats_oracle(&a[i]), stats_oracle(&b[i]));
            let mu: Vec<(f64, f64)> = sa.iter().zip(&sb).map(|(x, y)| (x.0, y.0)).collect();
            let sd: Vec<(f64, f64)> = sa.iter().zip(&sb).map(|(x, y)| (x.1, y.1)).collect();
            let m = |v: &[(f64, f64)]| {
                v.iter().map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / v.len() as f64
            };
            let term = m(&mu) + m(&sd);
            assert!((terms[i] - term).abs() <= 1e-12);
            expected_total += term;
        }
        assert!((total - expected_total).abs() <= 1e-12);
    }

    #[test]
    fn style_term_survives_spatial_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_taps(&mut rng, 1);
        let b = random_taps(&mut rng, 1);
        let (_, base) = style_of(&a, &b);
        let mut permuted = a.clone();
        let t = &mut permuted[1];
        let plane = t.shape().plane();
        for chunk in t.data_mut().chunks_mut(plane) {
            chunk.reverse();
        }
        let (_, after) = style_of(&permuted, &b);
        for (x, y) in base.iter().zip(&after) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn identity_pixel_term_is_quadratic_in_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random(&mut rng, [1, 3, 32, 32]);
        let taps = random_taps(&mut rng, 1);
        let pixel = |d: f64| {
            let mut g = Graph::new();
            let c = g.constant(img.clone());
            let cc = g.constant(img.map(|v| v + d));
            let t = constants(&mut g, &taps);
            let (id1, _) = identity_loss(&mut g, cc, c, c, c, [&t, &t, &t, &t], &[]).unwrap();
            value(&g, id1)
        };
        for d in [0.1, 0.25, 0.5] {
            assert!((pixel(d) - d * d).abs() <= 1e-12);
            assert!((pixel(2.0 * d) / pixel(d) - 4.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn identity_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let imgs: Vec<Tensor<f64>> = (0..4).map(|_| random(&mut rng, [2, 3, 32, 32])).collect();
        let taps: Vec<Vec<Tensor<f64>>> = (0..4).map(|_| random_taps(&mut rng, 2)).collect();
        let layers = [0, 2, 4];
        let mut g = Graph::new();
        let v: Vec<Var> = imgs.iter().map(|t| g.constant(t.clone())).collect();
        let t: Vec<Taps> = taps.iter().map(|x| constants(&mut g, x)).collect();
        let (id1, id2) = identity_loss(
            &mut g,
            v[0],
            v[1],
            v[2],
            v[3],
            [&t[0], &t[1], &t[2], &t[3]],
            &layers,
        )
        .unwrap();
        let e1 =
            mse_oracle(imgs[0].data(), imgs[1].data()) + mse_oracle(imgs[2].data(), imgs[3].data());
        let e2: f64 = layers
            .iter()
            .map(|&i| {
                mse_oracle(taps[0][i].data(), taps[1][i].data())
                    + mse_oracle(taps[2][i].data(), taps[3][i].data())
            })
            .sum();
        assert!((value(&g, id1) - e1).abs() <= 1e-12);
        assert!((value(&g, id2) - e2).abs() <= 1e-12);
    }

    #[test]
    fn missing_tap_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 1, 2, 2).unwrap()));
        let short = Taps(vec![x; 3]);
        assert!(matches!(
            content_loss(&mut g, &short, &short),
            Err(LossError::MissingTap {
                index: 3,
                available: 3
            })
        ));
        assert!(matches!(
            style_loss(&mut g, &short, &short, &[0, 4]),
            Err(LossError::MissingTap { index: 4, .. })
        ));
    }

    #[test]
    fn total_combines_with_default_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&w, 1.0, 1.0, 0.0, 0.0, vec![]).total, 4.0);
        assert_eq!(total_loss(&w, 0.0, 0.0, 0.0, 0.0, vec![]).total, 0.0);
        let doubled = LossWeights {
            lambda_s: 6.0,
            ..w.clone()
        };
        let (a, b) = (
            total_loss(&w, 0.7, 0.4, 0.2, 0.1, vec![]),
            total_loss(&doubled, 0.7, 0.4, 0.2, 0.1, vec![]),
        );
        assert!((b.total - a.total - 3.0 * 0.4).abs() <= 1e-12);
    }

    #[test]
    fn graph_total_matches_report_arithmetic() {
        let mut g = Graph::<f64>::new();
        let parts = [0.5, 0.25, 0.125, 0.0625].map(|v| g.constant(Tensor::scalar(v)));
        let w = LossWeights::default();
        let t = weighted_total(&mut g, &w, parts).unwrap();
        let r = total_loss(&w, 0.5, 0.25, 0.125, 0.0625, vec![]);
        assert_eq!(value(&g, t), r.total);
    }
}
