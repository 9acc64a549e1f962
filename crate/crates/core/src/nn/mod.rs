//! Minimal neural-network kernel with hand-written gradients.
//!
//! Sequences are stored time-major: a `T × C` matrix holds `T` frames of
//! `C` channels. Gradients for a layer or model are stored in a value of
//! the same type, so parameter updates are a zip over [`Parameterized`]
//! views.

mod conv;
mod dense;
mod ops;
mod sgd;

pub use conv::Conv1d;
pub use dense::Dense;
pub use ops::{
    cosine, cosine_backward, global_average_pool, global_average_pool_backward, relu, relu_backward,
    relu_inplace, softmax, softmax_cross_entropy,
};
pub use sgd::{sgd_step, SgdConfig};

use rand::Rng;

use crate::scalar::Real;

/// Borrowed parameter tensor with its name and logical shape.
#[derive(Debug)]
pub struct ParamView<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

pub trait Parameterized<T: Real> {
    /// All parameter tensors in a fixed order.
    fn params(&self) -> Vec<ParamView<'_, T>>;

    /// Mutable views in the same order as [`Parameterized::params`].
    fn params_mut(&mut self) -> Vec<(String, &mut [T])>;

    /// Same-shaped value with every parameter set to zero.
    fn zeros_like(&self) -> Self
    where
        Self: Sized;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// `self += scale * other`, used to accumulate gradients.
    fn add_scaled(&mut self, other: &Self, scale: T)
    where
        Self: Sized,
    {
        let src = other.params();
        for ((_, dst), p) in self.params_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(p.data) {
                *d += scale * s;
            }
        }
    }

    /// Round every parameter to checkpoint storage precision (`f32`).
    fn round_to_storage(&mut self) {
        for (_, data) in self.params_mut() {
            for v in data.iter_mut() {
                *v = v.to_storage();
            }
        }
    }
}

/// He-uniform sample for a layer with `fan_in` inputs.
pub(crate) fn he_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize) -> T {
    let limit = (6.0 / fan_in as f64).sqrt();
    T::lit(rng.random_range(-limit..limit))
}

/// Glorot-uniform sample, used for the linear output layer.
pub(crate) fn glorot_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> T {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    T::lit(rng.random_range(-limit..limit))
}
