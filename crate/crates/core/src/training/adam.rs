//! Adam with bias-corrected moments.

use crate::tensor::{Scalar, Shape, Tensor};

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment buffers for an ordered parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    /// Number of completed updates.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: impl IntoIterator<Item = Shape>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Self {
            t: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One update of every parameter, in list order.
///
/// Gradients are checked for NaN and infinity first; on rejection nothing
/// is modified.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Optimizer(format!(
            "{} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, ((p, g), m)) in params.iter().zip(grads).zip(&state.m).enumerate() {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TrainError::Optimizer(format!(
                "parameter {i}: shape {} vs gradient {} vs moments {}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
        if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                param: i,
                index: pos,
                value: g.data()[pos].to_f64_lossless(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c = |x: f64| T::from_f64_lossy(x);
    let (b1, b2) = (c(BETA1), c(BETA2));
    let (one_b1, one_b2) = (c(1.0 - BETA1), c(1.0 - BETA2));
    let bc1 = c(1.0 - BETA1.powi(t));
    let bc2 = c(1.0 - BETA2.powi(t));
    let (lr, eps) = (c(lr), c(EPSILON));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (k, &gk) in g.data().iter().enumerate() {
            let mk = b1 * m.data()[k] + one_b1 * gk;
            let vk = b2 * v.data()[k] + one_b2 * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk / bc1;
            let v_hat = vk / bc2;
            pd[k] = pd[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state() -> AdamState<f64> {
        AdamState::new([Shape::scalar()])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_dims([1, 1, 1, 3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(p.shape());
        let mut s = AdamState::new([p.shape()]);
        adam_step(&mut [&mut p], &[&g], &mut s, 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + eps).
        let mut p = Tensor::scalar(1.0f64);
        let g = Tensor::scalar(1.0f64);
        let mut s = scalar_state();
        adam_step(&mut [&mut p], &[&g], &mut s, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.item() - expected).abs() <= 1e-15);
        assert!((p.item() - 0.9).abs() <= 1e-8);
    }

    #[test]
    fn matches_hand_evaluated_recurrence() {
        let grads = [0.5f64, -0.25, 1.5];
        let mut p = Tensor::scalar(0.0f64);
        let mut s = scalar_state();
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            adam_step(&mut [&mut p], &[&Tensor::scalar(g)], &mut s, 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((p.item() - x).abs() <= 1e-15);
        }
        assert_eq!(s.t, 3);
    }

    #[test]
    fn nan_gradient_is_rejected_without_side_effects() {
        let mut p = Tensor::scalar(1.0f32);
        let mut s = AdamState::new([Shape::scalar()]);
        let err = adam_step(&mut [&mut p], &[&Tensor::scalar(f32::NAN)], &mut s, 0.1).unwrap_err();
        assert!(matches!(
            err,
            TrainError::NonFiniteGradient {
                param: 0,
                index: 0,
                ..
            }
        ));
        assert_eq!(p.item(), 1.0);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::scalar(1.0f32);
        let g = Tensor::zeros(Shape::new(1, 1, 1, 2).unwrap());
        let mut s = AdamState::new([Shape::scalar()]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut s, 0.1).is_err());
    }
}
