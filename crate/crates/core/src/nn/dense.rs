use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{glorot_uniform, he_uniform, ParamView, Parameterized};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Fully connected layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    name: String,
}

impl<T: Real> Dense<T> {
    pub fn zeros(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        assert!(in_dim > 0 && out_dim > 0);
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
            name: name.into(),
        }
    }

    /// He-uniform weights for a layer feeding a ReLU.
    pub fn new_relu<R: Rng + ?Sized>(name: impl Into<String>, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(name, in_dim, out_dim);
        layer.weight.mapv_inplace(|_| he_uniform(rng, in_dim));
        layer
    }

    /// Glorot-uniform weights for a linear output layer.
    pub fn new_linear<R: Rng + ?Sized>(name: impl Into<String>, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut layer = Self::zeros(name, in_dim, out_dim);
        layer
            .weight
            .mapv_inplace(|_| glorot_uniform(rng, in_dim, out_dim));
        layer
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Batch forward: `B × in` → `B × out`.
    pub fn forward(&self, input: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if input.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "{}: expected input width {}, got {}",
                self.name,
                self.in_dim(),
                input.ncols()
            )));
        }
        let mut out = input.dot(&self.weight.t());
        out += &self.bias;
        Ok(out)
    }

    /// Accumulate parameter gradients into `grad`; returns the input gradient.
    pub fn backward(&self, input: ArrayView2<'_, T>, grad_out: ArrayView2<'_, T>, grad: &mut Dense<T>) -> Array2<T> {
        ndarray::linalg::general_mat_mul(T::one(), &grad_out.t(), &input, T::one(), &mut grad.weight);
        grad.bias += &grad_out.sum_axis(Axis(0));
        grad_out.dot(&self.weight)
    }
}

impl<T: Real> Parameterized<T> for Dense<T> {
    fn params(&self) -> Vec<ParamView<'_, T>> {
        vec![
            ParamView {
                name: format!("{}.weight", self.name),
                shape: vec![self.out_dim(), self.in_dim()],
                data: self.weight.as_slice().expect("contiguous"),
            },
            ParamView {
                name: format!("{}.bias", self.name),
                shape: vec![self.out_dim()],
                data: self.bias.as_slice().expect("contiguous"),
            },
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        vec![
            (format!("{}.weight", self.name), self.weight.as_slice_mut().expect("contiguous")),
            (format!("{}.bias", self.name), self.bias.as_slice_mut().expect("contiguous")),
        ]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.name.clone(), self.in_dim(), self.out_dim())
    }
}
