//! The style transfer network: fixed encoder, two attention modules at
//! levels A and B, multi-level fusion and a trainable decoder.

pub mod checkpoint;
mod decoder;
mod encoder;
mod init;
mod layers;
mod sanet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use decoder::{BoundDecoder, Decoder, DECODER_SCALE};
pub use encoder::{
    check_input_extents, BoundEncoder, Encoder, Taps, INPUT_MULTIPLE, LEVEL_A_TAP, LEVEL_B_TAP,
    MIN_INPUT_EXTENT, TAP_COUNT,
};
pub use layers::{BoundConv, ConvLayer};
pub use sanet::{BoundSanet, SanetParams};

use crate::graph::{Graph, Var};
use crate::image_io::{Image, ImageError};
use crate::kernels::Padding;
use crate::tensor::{Scalar, Shape, Tensor, TensorError};

/// Variance epsilon of every mean-variance normalisation and std.
pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_ENCODER_SEED: u64 = 0x5eed_e4c0;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(
        "input extents {width}x{height} invalid: both must be multiples of {INPUT_MULTIPLE} and at least {MIN_INPUT_EXTENT}"
    )]
    BadExtents { width: usize, height: usize },
    #[error("expected {expected} channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("content batch {content} and style batch {style} differ")]
    BatchMismatch { content: usize, style: usize },
    #[error("expected a level {expected:?} feature map, got level {found:?}")]
    LevelMismatch { expected: Level, found: Level },
    #[error("level extents disagree: {0}")]
    ExtentMismatch(String),
}

/// Encoder tap at which an attention module operates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    /// Stride 8.
    A,
    /// Stride 16.
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar = f32> {
    pub tensor: Tensor<T>,
    pub level: Level,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>, level: Level) -> Self {
        Self { tensor, level }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub feat_channels: usize,
    pub attn_channels: usize,
    pub encoder_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::with_feat(32)
    }
}

impl NetConfig {
    /// Attention width defaults to half the feature width.
    pub fn with_feat(feat_channels: usize) -> Self {
        Self {
            feat_channels,
            attn_channels: (feat_channels / 2).max(1),
            encoder_seed: DEFAULT_ENCODER_SEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformNet<T: Scalar = f32> {
    config: NetConfig,
    encoder: Encoder<T>,
    pub sanet_a: SanetParams<T>,
    pub sanet_b: SanetParams<T>,
    /// 3×3 convolution combining the two levels.
    pub fuse: ConvLayer<T>,
    pub decoder: Decoder<T>,
}

/// Encoder activations of one image batch.
#[derive(Debug, Clone)]
pub struct Encoded<T: Scalar = f32> {
    pub taps: Vec<Tensor<T>>,
}

impl<T: Scalar> Encoded<T> {
    pub fn level_a(&self) -> FeatureMap<T> {
        FeatureMap::new(self.taps[LEVEL_A_TAP].clone(), Level::A)
    }

    pub fn level_b(&self) -> FeatureMap<T> {
        FeatureMap::new(self.taps[LEVEL_B_TAP].clone(), Level::B)
    }
}

impl<T: Scalar> TransformNet<T> {
    /// Fresh network: encoder from `config.encoder_seed`, trainable parts from `init_seed`.
    pub fn new(config: NetConfig, init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let feat = config.feat_channels;
        let sanet_a = SanetParams::init(&mut rng, feat, config.attn_channels);
        let sanet_b = SanetParams::init(&mut rng, feat, config.attn_channels);
        let bound = (3.0 / (feat * 9) as f64).sqrt();
        let fuse = ConvLayer {
            weight: Tensor::<f32>::new(
                Shape::new(feat, feat, 3, 3).unwrap(),
                init::uniform(&mut rng, feat * feat * 9, bound),
            )
            .unwrap()
            .cast(),
            bias: Tensor::zeros(Shape::new(feat, 1, 1, 1).unwrap()),
            stride: 1,
            padding: Padding::Reflect,
            relu: false,
        };
        let decoder = Decoder::init(&mut rng, feat);
        Self {
            config,
            encoder: Encoder::new(config.encoder_seed, feat),
            sanet_a,
            sanet_b,
            fuse,
            decoder,
        }
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    pub fn encoder(&self) -> &Encoder<T> {
        &self.encoder
    }

    /// Trainable tensors with stable names, in optimizer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, s) in [("sanet_a", &self.sanet_a), ("sanet_b", &self.sanet_b)] {
            for (name, t) in s.tensors() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out.push(("fuse.weight".into(), &self.fuse.weight));
        out.push(("fuse.bias".into(), &self.fuse.bias));
        for (i, l) in self.decoder.layers().iter().enumerate() {
            out.push((format!("decoder.{i}.weight"), &l.weight));
            out.push((format!("decoder.{i}.bias"), &l.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, s) in [
            ("sanet_a", &mut self.sanet_a),
            ("sanet_b", &mut self.sanet_b),
        ] {
            for (name, t) in s.tensors_mut() {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        out.push(("fuse.weight".into(), &mut self.fuse.weight));
        out.push(("fuse.bias".into(), &mut self.fuse.bias));
        for (i, l) in self.decoder.layers_mut().iter_mut().enumerate() {
            out.push((format!("decoder.{i}.weight"), &mut l.weight));
            out.push((format!("decoder.{i}.bias"), &mut l.bias));
        }
        out
    }

    /// Registers all weights in `g`; trainable parts become params when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundNet {
        BoundNet {
            encoder: self.encoder.bind(g),
            sanet_a: self.sanet_a.bind(g, trainable),
            sanet_b: self.sanet_b.bind(g, trainable),
            fuse: self.fuse.bind(g, trainable),
            decoder: self.decoder.bind(g, trainable),
        }
    }

    pub fn cast<U: Scalar>(&self) -> TransformNet<U> {
        TransformNet {
            config: self.config,
            encoder: self.encoder.cast(),
            sanet_a: self.sanet_a.cast(),
            sanet_b: self.sanet_b.cast(),
            fuse: self.fuse.cast(),
            decoder: self.decoder.cast(),
        }
    }

    pub fn sanet(&self, level: Level) -> &SanetParams<T> {
        match level {
            Level::A => &self.sanet_a,
            Level::B => &self.sanet_b,
        }
    }

    /// Encoder taps of an `[N, 3, H, W]` batch.
    pub fn encode(&self, images: &Tensor<T>) -> Result<Encoded<T>, NetworkError> {
        let mut g = Graph::new();
        let enc = self.encoder.bind(&mut g);
        let x = g.constant(images.clone());
        let taps = enc.encode(&mut g, x)?;
        Ok(Encoded {
            taps: taps.0.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    pub fn encode_image(&self, image: &Image) -> Result<Encoded<T>, NetworkError> {
        self.encode(&image.to_tensor())
    }

    /// `F_csc^m` for a content/style batch pair.
    pub fn stylized_features(
        &self,
        content: &Tensor<T>,
        style: &Tensor<T>,
    ) -> Result<FeatureMap<T>, NetworkError> {
        let mut g = Graph::new();
        let net = self.bind(&mut g, false);
        let c = g.constant(content.clone());
        let s = g.constant(style.clone());
        let tc = net.encoder.encode(&mut g, c)?;
        let ts = net.encoder.encode(&mut g, s)?;
        let fm = net.stylized_features(&mut g, &tc, &ts)?;
        Ok(FeatureMap::new(g.value(fm).clone(), Level::A))
    }

    /// Decodes a level-A map to an `[N, 3, 8h, 8w]` tensor (unclamped).
    pub fn decode(&self, features: &FeatureMap<T>) -> Result<Tensor<T>, NetworkError> {
        if features.level != Level::A {
            return Err(NetworkError::LevelMismatch {
                expected: Level::A,
                found: features.level,
            });
        }
        let c = features.tensor.shape().c;
        if c != self.config.feat_channels {
            return Err(NetworkError::ChannelMismatch {
                expected: self.config.feat_channels,
                found: c,
            });
        }
        let mut g = Graph::new();
        let dec = self.decoder.bind(&mut g, false);
        let f = g.constant(features.tensor.clone());
        let out = dec.decode(&mut g, f)?;
        Ok(g.value(out).clone())
    }

    /// Full pipeline on tensors: `(I_cs, F_csc^m)`.
    pub fn stylize_tensor(
        &self,
        content: &Tensor<T>,
        style: &Tensor<T>,
    ) -> Result<(Tensor<T>, FeatureMap<T>), NetworkError> {
        let fm = self.stylized_features(content, style)?;
        let out = self.decode(&fm)?;
        Ok((out, fm))
    }

    /// Full pipeline on images. The output is not clamped.
    pub fn stylize(
        &self,
        content: &Image,
        style: &Image,
    ) -> Result<(Image, FeatureMap<T>), NetworkError> {
        let (out, fm) = self.stylize_tensor(&content.to_tensor(), &style.to_tensor())?;
        Ok((Image::from_tensor(&out)?, fm))
    }
}

/// Attention output `F_cs` of one module on plain feature maps.
pub fn sanet_attend<T: Scalar>(
    params: &SanetParams<T>,
    content: &FeatureMap<T>,
    style: &FeatureMap<T>,
) -> Result<FeatureMap<T>, NetworkError> {
    check_levels(content, style)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let c = g.constant(content.tensor.clone());
    let s = g.constant(style.tensor.clone());
    let out = p.attend(&mut g, c, s)?;
    Ok(FeatureMap::new(g.value(out).clone(), content.level))
}

/// Attention weights `[N, 1, HW_c, HW_s]` of one module.
pub fn sanet_weights<T: Scalar>(
    params: &SanetParams<T>,
    content: &FeatureMap<T>,
    style: &FeatureMap<T>,
) -> Result<Tensor<T>, NetworkError> {
    check_levels(content, style)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let c = g.constant(content.tensor.clone());
    let s = g.constant(style.tensor.clone());
    let w = p.weights(&mut g, c, s)?;
    Ok(g.value(w).clone())
}

/// Pre-softmax score matrix `[N, 1, HW_c, HW_s]` of one module.
pub fn sanet_scores<T: Scalar>(
    params: &SanetParams<T>,
    content: &FeatureMap<T>,
    style: &FeatureMap<T>,
) -> Result<Tensor<T>, NetworkError> {
    check_levels(content, style)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let c = g.constant(content.tensor.clone());
    let s = g.constant(style.tensor.clone());
    let w = p.scores(&mut g, c, s)?;
    Ok(g.value(w).clone())
}

/// `F_csc = F_c + W_cs F_cs`.
pub fn sanet_fuse<T: Scalar>(
    params: &SanetParams<T>,
    content: &FeatureMap<T>,
    attended: &FeatureMap<T>,
) -> Result<FeatureMap<T>, NetworkError> {
    check_levels(content, attended)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let c = g.constant(content.tensor.clone());
    let a = g.constant(attended.tensor.clone());
    let out = p.fuse(&mut g, c, a)?;
    Ok(FeatureMap::new(g.value(out).clone(), content.level))
}

/// `conv3x3(A + upsample2(B))`.
pub fn multi_level_combine<T: Scalar>(
    level_a: &FeatureMap<T>,
    level_b: &FeatureMap<T>,
    fuse: &ConvLayer<T>,
) -> Result<FeatureMap<T>, NetworkError> {
    if level_a.level != Level::A {
        return Err(NetworkError::LevelMismatch {
            expected: Level::A,
            found: level_a.level,
        });
    }
    if level_b.level != Level::B {
        return Err(NetworkError::LevelMismatch {
            expected: Level::B,
            found: level_b.level,
        });
    }
    let mut g = Graph::new();
    let f = fuse.bind(&mut g, false);
    let a = g.constant(level_a.tensor.clone());
    let b = g.constant(level_b.tensor.clone());
    let out = combine(&mut g, f, a, b)?;
    Ok(FeatureMap::new(g.value(out).clone(), Level::A))
}

fn check_levels<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<(), NetworkError> {
    if a.level != b.level {
        return Err(NetworkError::LevelMismatch {
            expected: a.level,
            found: b.level,
        });
    }
    Ok(())
}

fn combine<T: Scalar>(
    g: &mut Graph<T>,
    fuse: BoundConv,
    a: Var,
    b: Var,
) -> Result<Var, NetworkError> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.n != sb.n || sa.c != sb.c || sa.h != 2 * sb.h || sa.w != 2 * sb.w {
        return Err(NetworkError::ExtentMismatch(format!(
            "level A {sa} is not twice level B {sb}"
        )));
    }
    let up = g.upsample_nearest(b, 2)?;
    let sum = g.add(a, up)?;
    Ok(fuse.apply(g, sum)?)
}

/// Every network weight registered in one graph.
#[derive(Debug, Clone)]
pub struct BoundNet {
    pub encoder: BoundEncoder,
    pub sanet_a: BoundSanet,
    pub sanet_b: BoundSanet,
    pub fuse: BoundConv,
    pub decoder: BoundDecoder,
}

impl BoundNet {
    /// Vars of the trainable tensors, in [`TransformNet::named_params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        out.extend(self.sanet_a.vars());
        out.extend(self.sanet_b.vars());
        out.push(self.fuse.weight);
        out.push(self.fuse.bias);
        out.extend(self.decoder.vars());
        out
    }

    pub fn combine<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        a: Var,
        b: Var,
    ) -> Result<Var, NetworkError> {
        combine(g, self.fuse, a, b)
    }

    /// `F_csc^m` from content and style taps.
    pub fn stylized_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        content: &Taps,
        style: &Taps,
    ) -> Result<Var, NetworkError> {
        let a = self
            .sanet_a
            .forward(g, content.level_a(), style.level_a())?;
        let b = self
            .sanet_b
            .forward(g, content.level_b(), style.level_b())?;
        self.combine(g, a, b)
    }

    /// `(I_cs, F_csc^m)`.
    pub fn stylize<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        content: &Taps,
        style: &Taps,
    ) -> Result<(Var, Var), NetworkError> {
        let fm = self.stylized_features(g, content, style)?;
        let out = self.decoder.decode(g, fm)?;
        Ok((out, fm))
    }
}

/// Stacks same-sized images into an `[N, 3, H, W]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>, NetworkError> {
    let items: Vec<Tensor<T>> = images.iter().map(Image::to_tensor).collect();
    Ok(Tensor::stack_batch(&items)?)
}
