//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its variables. Nodes are
//! appended in evaluation order, so the node list is already topologically
//! sorted and [`Graph::backward`] simply walks it in reverse. Nodes that do
//! not depend on any trainable leaf are never differentiated.
//!
//! A graph is confined to one thread; independent graphs may run in parallel.

use crate::kernels::{self, Padding};
use crate::tensor::{Result, Scalar, Shape, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    },
    Relu(Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    SoftmaxRows(Var),
    MeanVarNorm {
        input: Var,
        inv_std: Vec<T>,
    },
    ChannelMean(Var),
    ChannelStd(Var),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of primitive applications.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves a gradient out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf; [`Graph::backward`] populates its gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = kernels::relu(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let value = kernels::upsample_nearest(self.value(x), factor)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Upsample { input: x, factor }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = kernels::softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    pub fn mean_var_normalize(&mut self, x: Var, eps: T) -> Var {
        let n = kernels::mean_var_normalize(self.value(x), eps);
        let rg = self.rg(x);
        self.push(
            n.output,
            Op::MeanVarNorm {
                input: x,
                inv_std: n.inv_std,
            },
            rg,
        )
    }

    /// Per-channel `(mean, std)`, each shaped `[N, C, 1, 1]`.
    pub fn channel_stats(&mut self, x: Var, eps: T) -> (Var, Var) {
        let (mu, sigma) = kernels::channel_stats(self.value(x), eps);
        let rg = self.rg(x);
        (
            self.push(mu, Op::ChannelMean(x), rg),
            self.push(sigma, Op::ChannelStd(x), rg),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let value = kernels::transpose_last2(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::TransposeLast2(x), rg)
    }

    pub fn reshape(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let value = self.value(x).reshape(dims)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(value, Op::Square(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let count = T::from_usize(t.numel()).expect("element count fits");
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v) / count;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need = (
                    self.rg(input),
                    self.rg(weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                let cg = kernels::conv2d_backward(
                    self.value(input),
                    self.value(weight),
                    stride,
                    padding,
                    g,
                    need,
                )?;
                if let Some(dx) = cg.input {
                    accumulate(grads, input, dx);
                }
                if let Some(dw) = cg.weight {
                    accumulate(grads, weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    let db = Tensor::new(self.shape(b), db)?;
                    accumulate(grads, b, db);
                }
            }
            Op::Relu(x) => {
                accumulate(grads, x, kernels::relu_backward(self.value(x), g));
            }
            Op::Upsample { input, factor } => {
                let dx = kernels::upsample_nearest_backward(self.shape(input), factor, g);
                accumulate(grads, input, dx);
            }
            Op::SoftmaxRows(x) => {
                accumulate(grads, x, kernels::softmax_rows_backward(out, g));
            }
            Op::MeanVarNorm { input, ref inv_std } => {
                let dx = kernels::mean_var_normalize_backward(out, inv_std, g);
                accumulate(grads, input, dx);
            }
            Op::ChannelMean(x) => {
                accumulate(grads, x, kernels::channel_mean_backward(self.shape(x), g));
            }
            Op::ChannelStd(x) => {
                let dx = kernels::channel_std_backward(self.value(x), out, g);
                accumulate(grads, x, dx);
            }
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(
                    self.value(a),
                    self.value(b),
                    g,
                    (self.rg(a), self.rg(b)),
                )?;
                if let Some(da) = da {
                    accumulate(grads, a, da);
                }
                if let Some(db) = db {
                    accumulate(grads, b, db);
                }
            }
            Op::TransposeLast2(x) => {
                accumulate(grads, x, kernels::transpose_last2(g));
            }
            Op::Reshape(x) => {
                accumulate(grads, x, g.reshape(self.shape(x).dims())?);
            }
            Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.clone());
                }
                if self.rg(b) {
                    accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    accumulate(grads, a, g.zip_map(self.value(b), "mul", |x, y| x * y)?);
                }
                if self.rg(b) {
                    accumulate(grads, b, g.zip_map(self.value(a), "mul", |x, y| x * y)?);
                }
            }
            Op::Scale(x, factor) => {
                accumulate(grads, x, g.map(|v| v * factor));
            }
            Op::Square(x) => {
                let two = T::one() + T::one();
                let dx = g.zip_map(self.value(x), "square", |gv, xv| two * xv * gv)?;
                accumulate(grads, x, dx);
            }
            Op::Sum(x) => {
                accumulate(grads, x, Tensor::full(self.shape(x), g.item()));
            }
            Op::Mean(x) => {
                let s = self.shape(x);
                let count = T::from_usize(s.numel()).expect("element count fits");
                accumulate(grads, x, Tensor::full(s, g.item() / count));
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e = *e + *d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_dims([1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap());
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(3.0));
        let sq = g.square(x);
        let l = g.sum(sq);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros(Shape::new(1, 1, 2, 1).unwrap()));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.param(Tensor::scalar(5.0));
        let p = g.mul(c, x).unwrap();
        let grads = g.backward(p).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(1.5));
        let a = g.add(x, x).unwrap();
        let m = g.mul(a, x).unwrap(); // 2x^2
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn relu_gradient_of_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_dims([1, 1, 1, 2], vec![-1.0, 2.0]).unwrap());
        let r = g.relu(x);
        let l = g.sum(r);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn matmul_gradient_is_row_broadcast_of_column_sums() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::from_dims([1, 1, 2, 3], vec![0.1; 6]).unwrap());
        let b = g
            .constant(Tensor::from_dims([1, 1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.matmul(a, b).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        // Row sums of B: [3, 7, 11], broadcast over the rows of A.
        assert_eq!(
            grads.get(a).unwrap().data(),
            &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]
        );
    }
}
