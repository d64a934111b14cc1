use crate::graph::{Graph, Var};
use crate::kernels::Padding;
use crate::tensor::{Result, Scalar, Tensor};

/// Convolution with bias and optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: Padding,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: Padding,
    relu: bool,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundConv {
        let (weight, bias) = if trainable {
            (g.param(self.weight.clone()), g.param(self.bias.clone()))
        } else {
            (
                g.constant(self.weight.clone()),
                g.constant(self.bias.clone()),
            )
        };
        BoundConv {
            weight,
            bias,
            stride: self.stride,
            padding: self.padding,
            relu: self.relu,
        }
    }

    pub fn cast<U: Scalar>(&self) -> ConvLayer<U> {
        ConvLayer {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
            relu: self.relu,
        }
    }
}

impl BoundConv {
    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.conv2d(x, self.weight, Some(self.bias), self.stride, self.padding)?;
        Ok(if self.relu { g.relu(y) } else { y })
    }
}
