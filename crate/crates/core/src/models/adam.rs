//! Adam with lazy (row-sparse) updates for embedding tables.

use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Moments {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// Optimizer state for one model. Moment buffers are laid out like the
/// model's parameter groups (see `Model::param_groups`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub learning_rate: T,
    pub l2_weight: T,
    pub beta1: T,
    pub beta2: T,
    pub epsilon: T,
    step: u64,
    pub(crate) moments: Vec<Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub(crate) fn new(learning_rate: f64, l2_weight: f64, group_sizes: &[usize]) -> Self {
        AdamState {
            learning_rate: T::lit(learning_rate),
            l2_weight: T::lit(l2_weight),
            beta1: T::lit(BETA1),
            beta2: T::lit(BETA2),
            epsilon: T::lit(EPSILON),
            step: 0,
            moments: group_sizes.iter().map(|&n| Moments::zeros(n)).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Advances the step counter; returns the bias-correction factors.
    pub(crate) fn begin_step(&mut self) -> (T, T) {
        self.step += 1;
        let t = self.step as i32;
        (
            T::one() - self.beta1.powi(t),
            T::one() - self.beta2.powi(t),
        )
    }

    /// Updates `params[range]` from `grads` (same length as the range).
    #[inline]
    pub(crate) fn update_slice(
        &mut self,
        group: usize,
        offset: usize,
        params: &mut [T],
        grads: &[T],
        corrections: (T, T),
        scale: T,
    ) {
        let (c1, c2) = corrections;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let mo = &mut self.moments[group];
        let m = &mut mo.m[offset..offset + params.len()];
        let v = &mut mo.v[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i] * scale;
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
