//! Decoder from level-A features back to RGB.
//!
//! Three (conv3x3 + ReLU, 2× nearest upsample) blocks undo the stride-8
//! encoding, then one more conv3x3 + ReLU and a final conv3x3 to three
//! channels with no activation.

use rand_chacha::ChaCha8Rng;

use super::init::uniform;
use super::layers::{BoundConv, ConvLayer};
use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::tensor::{Result, Scalar, Shape, Tensor};

/// Total spatial upsampling of the decoder.
pub const DECODER_SCALE: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T: Scalar = f32> {
    layers: Vec<ConvLayer<T>>,
}

/// `(cin, cout, relu, upsample_after)` per layer.
fn layer_specs(feat: usize) -> [(usize, usize, bool, bool); 5] {
    [
        (feat, 32, true, true),
        (32, 32, true, true),
        (32, 16, true, true),
        (16, 16, true, false),
        (16, 3, false, false),
    ]
}

impl<T: Scalar> Decoder<T> {
    pub fn init(rng: &mut ChaCha8Rng, feat: usize) -> Self {
        let layers = layer_specs(feat)
            .into_iter()
            .map(|(cin, cout, relu, _)| {
                let fan_in = cin * 9;
                let bound = if relu { 6.0 } else { 3.0 } / fan_in as f64;
                let weight = Tensor::<f32>::new(
                    Shape::new(cout, cin, 3, 3).unwrap(),
                    uniform(rng, cout * fan_in, bound.sqrt()),
                )
                .unwrap()
                .cast();
                ConvLayer {
                    weight,
                    bias: Tensor::zeros(Shape::new(cout, 1, 1, 1).unwrap()),
                    stride: 1,
                    padding: Padding::Reflect,
                    relu,
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundDecoder {
        let feat = self.layers[0].weight.shape().c;
        BoundDecoder {
            layers: self.layers.iter().map(|l| l.bind(g, trainable)).collect(),
            upsample_after: layer_specs(feat).map(|s| s.3).to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Decoder<U> {
        Decoder {
            layers: self.layers.iter().map(ConvLayer::cast).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundDecoder {
    layers: Vec<BoundConv>,
    upsample_after: Vec<bool>,
}

impl BoundDecoder {
    pub fn vars(&self) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let mut x = features;
        for (layer, &up) in self.layers.iter().zip(&self.upsample_after) {
            x = layer.apply(g, x)?;
            if up {
                x = g.upsample_nearest(x, 2)?;
            }
        }
        Ok(x)
    }
}
