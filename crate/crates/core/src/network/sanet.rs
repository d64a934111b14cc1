//! Style-attentional module.
//!
//! For each content position `i`, the output is a softmax-weighted sum over
//! all style positions `j` of `h(F_s^j)`, with weights from the scores
//! `f(norm(F_c)^i) · g(norm(F_s)^j)`. `norm` is per-channel mean-variance
//! normalisation; the value path `h` sees the raw style features.

use rand_chacha::ChaCha8Rng;

use super::init::uniform;
use super::{NetworkError, NORM_EPS};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::tensor::{Scalar, Shape, Tensor};

/// Learnable kernels of one attention module.
///
/// `f` and `g` project `C_feat → C_attn` without bias, `h` projects
/// `C_feat → C_feat` with bias, and `out` is the residual projection `W_cs`.
#[derive(Debug, Clone, PartialEq)]
pub struct SanetParams<T: Scalar = f32> {
    pub f: Tensor<T>,
    pub g: Tensor<T>,
    pub h: Tensor<T>,
    pub h_bias: Tensor<T>,
    pub out: Tensor<T>,
    pub out_bias: Tensor<T>,
}

impl<T: Scalar> SanetParams<T> {
    /// Random `f`, `g`, `h`; zero `W_cs` so the residual starts as a passthrough.
    pub fn init(rng: &mut ChaCha8Rng, feat: usize, attn: usize) -> Self {
        let kernel = |rng: &mut ChaCha8Rng, cout: usize, cin: usize| {
            let bound = (3.0 / cin as f64).sqrt();
            Tensor::<f32>::new(
                Shape::new(cout, cin, 1, 1).unwrap(),
                uniform(rng, cout * cin, bound),
            )
            .unwrap()
            .cast()
        };
        let f = kernel(rng, attn, feat);
        let g = kernel(rng, attn, feat);
        let h = kernel(rng, feat, feat);
        let square = Shape::new(feat, feat, 1, 1).unwrap();
        let bias = Shape::new(feat, 1, 1, 1).unwrap();
        Self {
            f,
            g,
            h,
            h_bias: Tensor::zeros(bias),
            out: Tensor::zeros(square),
            out_bias: Tensor::zeros(bias),
        }
    }

    pub fn feat_channels(&self) -> usize {
        self.h.shape().n
    }

    pub fn attn_channels(&self) -> usize {
        self.f.shape().n
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            ("f", &self.f),
            ("g", &self.g),
            ("h", &self.h),
            ("h_bias", &self.h_bias),
            ("out", &self.out),
            ("out_bias", &self.out_bias),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 6] {
        [
            ("f", &mut self.f),
            ("g", &mut self.g),
            ("h", &mut self.h),
            ("h_bias", &mut self.h_bias),
            ("out", &mut self.out),
            ("out_bias", &mut self.out_bias),
        ]
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundSanet {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundSanet {
            f: leaf(&self.f),
            g: leaf(&self.g),
            h: leaf(&self.h),
            h_bias: leaf(&self.h_bias),
            out: leaf(&self.out),
            out_bias: leaf(&self.out_bias),
        }
    }

    pub fn cast<U: Scalar>(&self) -> SanetParams<U> {
        SanetParams {
            f: self.f.cast(),
            g: self.g.cast(),
            h: self.h.cast(),
            h_bias: self.h_bias.cast(),
            out: self.out.cast(),
            out_bias: self.out_bias.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundSanet {
    pub f: Var,
    pub g: Var,
    pub h: Var,
    pub h_bias: Var,
    pub out: Var,
    pub out_bias: Var,
}

impl BoundSanet {
    pub fn vars(&self) -> [Var; 6] {
        [self.f, self.g, self.h, self.h_bias, self.out, self.out_bias]
    }

    fn check_pair<T: Scalar>(
        &self,
        g: &Graph<T>,
        content: Var,
        style: Var,
    ) -> Result<(Shape, Shape), NetworkError> {
        let (sc, ss) = (g.shape(content), g.shape(style));
        let feat = g.shape(self.h).c;
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
        Ok((sc, ss))
    }

    /// Score matrix `[N, 1, HW_c, HW_s]` before the softmax.
    pub fn scores<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        content: Var,
        style: Var,
    ) -> Result<Var, NetworkError> {
        let (sc, ss) = self.check_pair(g, content, style)?;
        let eps = T::from_f64_lossy(NORM_EPS);
        let cn = g.mean_var_normalize(content, eps);
        let sn = g.mean_var_normalize(style, eps);
        let q = g.conv2d(cn, self.f, None, 1, Padding::Zero)?;
        let k = g.conv2d(sn, self.g, None, 1, Padding::Zero)?;
        let attn = g.shape(q).c;
        let q = g.reshape(q, [sc.n, 1, attn, sc.plane()])?;
        let q = g.transpose_last2(q);
        let k = g.reshape(k, [ss.n, 1, attn, ss.plane()])?;
        Ok(g.matmul(q, k)?)
    }

    /// Attention weights `[N, 1, HW_c, HW_s]`; every row sums to one.
    pub fn weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        content: Var,
        style: Var,
    ) -> Result<Var, NetworkError> {
        let s = self.scores(g, content, style)?;
        Ok(g.softmax_rows(s))
    }

    /// `F_cs`: content-shaped map of attention-weighted style values.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        content: Var,
        style: Var,
    ) -> Result<Var, NetworkError> {
        let (sc, ss) = self.check_pair(g, content, style)?;
        let weights = self.weights(g, content, style)?;
        let v = g.conv2d(style, self.h, Some(self.h_bias), 1, Padding::Zero)?;
        let v = g.reshape(v, [ss.n, 1, ss.c, ss.plane()])?;
        let v = g.transpose_last2(v);
        let out = g.matmul(weights, v)?;
        let out = g.transpose_last2(out);
        Ok(g.reshape(out, [sc.n, sc.c, sc.h, sc.w])?)
    }

    /// `F_csc = F_c + W_cs F_cs`.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        content: Var,
        attended: Var,
    ) -> Result<Var, NetworkError> {
        let (sc, sa) = (g.shape(content), g.shape(attended));
        if sc != sa {
            return Err(NetworkError::Tensor(
                crate::tensor::TensorError::ShapeMismatch {
                    op: "sanet_fuse",
                    detail: format!("{sc} vs {sa}"),
                },
            ));
        }
        let proj = g.conv2d(attended, self.out, Some(self.out_bias), 1, Padding::Zero)?;
        Ok(g.add(content, proj)?)
    }

    /// Attention followed by the residual fusion.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        content: Var,
        style: Var,
    ) -> Result<Var, NetworkError> {
        let fcs = self.attend(g, content, style)?;
        self.fuse(g, content, fcs)
    }
}
