//! Dense 4-D tensors in (batch, channel, height, width) layout.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Floating-point element type of the engine.
///
/// Training runs in `f32`; gradient checking may run the same code in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any Scalar")
    }

    fn to_f64_lossless(self) -> f64 {
        self.to_f64().expect("Scalar always converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape([usize; 4]),
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength {
        shape: Shape,
        len: usize,
        expected: usize,
    },
    #[error("{op}: unsupported argument: {detail}")]
    Unsupported { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(TensorError::InvalidShape([n, c, h, w]));
        }
        Ok(Self { n, c, h, w })
    }

    pub const fn scalar() -> Self {
        Self {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Spatial positions per channel plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl TryFrom<[usize; 4]> for Shape {
    type Error = TensorError;

    fn try_from(d: [usize; 4]) -> Result<Self> {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Row-major (N, C, H, W) array with an optional gradient buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
                expected: shape.numel(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn from_dims(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        Self::new(Shape::try_from(dims)?, data)
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every position.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    /// One (H, W) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(&self, dims: [usize; 4]) -> Result<Self> {
        let shape = Shape::try_from(dims)?;
        if shape.numel() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{} elements cannot become {shape}", self.numel()),
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
            grad: None,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        ensure_same_shape(op, self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad: None,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        ensure_same_shape("max_abs_diff", self.shape, other.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64_lossless() - b.to_f64_lossless()).abs())
            .fold(0.0, f64::max))
    }

    /// True when both tensors hold the same shape and identical bit patterns.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_f64_lossless().to_bits() == b.to_f64_lossless().to_bits())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossless()))
                .collect(),
            grad: None,
        }
    }

    /// Selects one batch item, keeping the 4-D layout.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.shape.c * self.shape.plane();
        Self {
            shape: Shape { n: 1, ..self.shape },
            data: self.data[n * per..(n + 1) * per].to_vec(),
            grad: None,
        }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| TensorError::Unsupported {
            op: "stack_batch",
            detail: "no tensors given".into(),
        })?;
        let mut data = Vec::new();
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.shape.c, first.shape.h, first.shape.w) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_batch",
                    detail: format!("{} vs {}", first.shape, t.shape),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let n = data.len() / (first.shape.c * first.shape.plane());
        Tensor::new(Shape { n, ..first.shape }, data)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &preview)
            .field("grad", &self.grad.is_some())
            .finish()
    }
}

pub(crate) fn ensure_same_shape(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            detail: format!("{a} vs {b}"),
        });
    }
    Ok(())
}
