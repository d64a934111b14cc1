//! Fixed feature extractor.
//!
//! Ten stages: a 1×1 colour projection followed by nine 3×3 convolutions,
//! every one but the first followed by ReLU. Stages 2, 4, 6 and 8 have
//! stride 2. Five taps sit after stages 1, 3, 5, 7 and 9; the last two are
//! the attention levels A (stride 8) and B (stride 16).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::init::orthogonal;
use super::layers::{BoundConv, ConvLayer};
use super::NetworkError;
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::tensor::{Scalar, Shape, Tensor};

pub const TAP_COUNT: usize = 5;
pub const LEVEL_A_TAP: usize = 3;
pub const LEVEL_B_TAP: usize = 4;
/// Input extents must be multiples of the level-B stride.
pub const INPUT_MULTIPLE: usize = 16;
pub const MIN_INPUT_EXTENT: usize = 32;

const TAP_STAGES: [usize; TAP_COUNT] = [1, 3, 5, 7, 9];

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T: Scalar = f32> {
    seed: u64,
    stages: Vec<ConvLayer<T>>,
}

/// Encoder stage layout for a given feature width: `(cin, cout, kernel, stride)`.
fn stage_specs(feat: usize) -> [(usize, usize, usize, usize); 10] {
    [
        (3, 3, 1, 1),
        (3, 16, 3, 1),
        (16, 16, 3, 2),
        (16, 32, 3, 1),
        (32, 32, 3, 2),
        (32, 32, 3, 1),
        (32, 32, 3, 2),
        (32, feat, 3, 1),
        (feat, feat, 3, 2),
        (feat, feat, 3, 1),
    ]
}

impl<T: Scalar> Encoder<T> {
    /// Weights are generated once from `seed` and never trained.
    pub fn new(seed: u64, feat_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = stage_specs(feat_channels)
            .into_iter()
            .enumerate()
            .map(|(i, (cin, cout, k, stride))| {
                let relu = i > 0;
                let gain = if relu { std::f64::consts::SQRT_2 } else { 1.0 };
                let w = orthogonal(&mut rng, cout, cin * k * k, gain);
                let weight = Tensor::<f32>::new(Shape::new(cout, cin, k, k).unwrap(), w)
                    .unwrap()
                    .cast();
                ConvLayer {
                    weight,
                    bias: Tensor::zeros(Shape::new(cout, 1, 1, 1).unwrap()),
                    stride,
                    padding: Padding::Reflect,
                    relu,
                }
            })
            .collect();
        Self { seed, stages }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stages(&self) -> &[ConvLayer<T>] {
        &self.stages
    }

    /// Tap widths in order.
    pub fn tap_channels(&self) -> [usize; TAP_COUNT] {
        TAP_STAGES.map(|s| self.stages[s].weight.shape().n)
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundEncoder {
        BoundEncoder {
            stages: self.stages.iter().map(|s| s.bind(g, false)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            seed: self.seed,
            stages: self.stages.iter().map(ConvLayer::cast).collect(),
        }
    }
}

/// Encoder weights registered as constants of one graph.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    stages: Vec<BoundConv>,
}

/// Activations at the five taps of one encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Taps(pub Vec<Var>);

impl Taps {
    pub fn level_a(&self) -> Var {
        self.0[LEVEL_A_TAP]
    }

    pub fn level_b(&self) -> Var {
        self.0[LEVEL_B_TAP]
    }
}

pub fn check_input_extents(width: usize, height: usize) -> Result<(), NetworkError> {
    let ok = |v: usize| v >= MIN_INPUT_EXTENT && v.is_multiple_of(INPUT_MULTIPLE);
    if ok(width) && ok(height) {
        Ok(())
    } else {
        Err(NetworkError::BadExtents { width, height })
    }
}

impl BoundEncoder {
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<Taps, NetworkError> {
        let s = g.shape(image);
        if s.c != 3 {
            return Err(NetworkError::ChannelMismatch {
                expected: 3,
                found: s.c,
            });
        }
        check_input_extents(s.w, s.h)?;
        let mut x = image;
        let mut taps = Vec::with_capacity(TAP_COUNT);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.apply(g, x)?;
            if TAP_STAGES.contains(&i) {
                taps.push(x);
            }
        }
        Ok(Taps(taps))
    }
}
