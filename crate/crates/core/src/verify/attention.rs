//! Literal nested-loop evaluation of the attention output.

use crate::kernels::{conv2d, Padding};
use crate::network::{FeatureMap, NetworkError, SanetParams, NORM_EPS};
use crate::tensor::{Scalar, Tensor};

/// Softmax weights of one row of scores, as `exp(s_j) / Σ_k exp(s_k)`.
///
/// No max subtraction: the oracle follows the written formula and relies on
/// small inputs.
pub fn eq5_weights(scores: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
    let c: f64 = e.iter().sum();
    e.iter().map(|v| v / c).collect()
}

/// Per-channel standardisation by explicit loops over positions.
fn normalize(data: &[f64], channels: usize, positions: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for c in 0..channels {
        let row = &data[c * positions..(c + 1) * positions];
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= positions as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= positions as f64;
        let sd = (var + NORM_EPS).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out[c * positions + j] = (v - mean) / sd;
        }
    }
    out
}

fn project(
    x: &[f64],
    positions: usize,
    kernel: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
) -> Result<Vec<f64>, NetworkError> {
    let cin = kernel.shape().c;
    let t = Tensor::from_dims([1, cin, 1, positions], x.to_vec())?;
    Ok(conv2d(&t, kernel, bias, 1, Padding::Zero)?.into_data())
}

/// Attention output computed position by position in f64.
///
/// For every batch item and content position `i`, forms the score against
/// each style position `j`, exponentiates, normalises by the sum, and
/// accumulates the weighted value vectors. Only the 1×1 projections reuse
/// the library's convolution.
pub fn attention_bruteforce<T: Scalar>(
    params: &SanetParams<T>,
    content: &FeatureMap<T>,
    style: &FeatureMap<T>,
) -> Result<FeatureMap<f64>, NetworkError> {
    let p = params.cast::<f64>();
    let (sc, ss) = (content.tensor.shape(), style.tensor.shape());
    let feat = p.feat_channels();
    for s in [sc, ss] {
        if s.c != feat {
            return Err(NetworkError::ChannelMismatch {
                expected: feat,
                found: s.c,
            });
        }
    }
    if sc.n != ss.n {
        return Err(NetworkError::BatchMismatch {
            content: sc.n,
            style: ss.n,
        });
    }
    if content.level != style.level {
        return Err(NetworkError::LevelMismatch {
            expected: content.level,
            found: style.level,
        });
    }
    let attn = p.attn_channels();
    let (nc, ns) = (sc.plane(), ss.plane());
    let mut out = vec![0.0; sc.numel()];
    for n in 0..sc.n {
        let fc: Vec<f64> = content.tensor.cast::<f64>().batch_item(n).into_data();
        let fs: Vec<f64> = style.tensor.cast::<f64>().batch_item(n).into_data();
        let q = project(&normalize(&fc, feat, nc), nc, &p.f, None)?;
        let k = project(&normalize(&fs, feat, ns), ns, &p.g, None)?;
        let v = project(&fs, ns, &p.h, Some(&p.h_bias))?;
        for i in 0..nc {
            let mut scores = vec![0.0; ns];
            for (j, s) in scores.iter_mut().enumerate() {
                for a in 0..attn {
                    *s += q[a * nc + i] * k[a * ns + j];
                }
            }
            let w = eq5_weights(&scores);
            for c in 0..feat {
                let mut acc = 0.0;
                for j in 0..ns {
                    acc += w[j] * v[c * ns + j];
                }
                out[(n * feat + c) * nc + i] = acc;
            }
        }
    }
    Ok(FeatureMap::new(Tensor::new(sc, out)?, content.level))
}
