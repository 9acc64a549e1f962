use ndarray::{Array1, Array2, ArrayView2, Axis, ShapeBuilder};
use rand::Rng;

use super::{he_uniform, ParamView, Parameterized};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Valid (unpadded) 1-d convolution along time.
///
/// `weight` is `out × (width · in)`; row `o` holds the kernel taps in
/// time-major order, so tap `k` for input channel `c` sits at
/// column `k · in + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_width: usize,
    pub stride: usize,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    name: String,
}

impl<T: Real> Conv1d<T> {
    pub fn zeros(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel_width: usize,
        stride: usize,
    ) -> Self {
        assert!(in_channels > 0 && out_channels > 0 && kernel_width > 0 && stride > 0);
        Self {
            in_channels,
            out_channels,
            kernel_width,
            stride,
            weight: Array2::zeros((out_channels, kernel_width * in_channels)),
            bias: Array1::zeros(out_channels),
            name: name.into(),
        }
    }

    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel_width: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::zeros(name, in_channels, out_channels, kernel_width, stride);
        let fan_in = in_channels * kernel_width;
        layer.weight.mapv_inplace(|_| he_uniform(rng, fan_in));
        layer
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        if input_len < self.kernel_width {
            return Err(Error::InputTooShort {
                got: input_len,
                min: self.kernel_width,
            });
        }
        Ok((input_len - self.kernel_width) / self.stride + 1)
    }

    /// Overlapping `T' × (width · in)` view of `flat` (im2col without copying).
    fn unfold<'a>(&self, flat: &'a [T], out_len: usize) -> ArrayView2<'a, T> {
        let row_stride = self.stride * self.in_channels;
        ArrayView2::from_shape(
            (out_len, self.kernel_width * self.in_channels).strides((row_stride, 1)),
            flat,
        )
        .expect("unfold view within bounds")
    }

    fn check_input(&self, input: &ArrayView2<'_, T>) -> Result<usize> {
        if input.ncols() != self.in_channels {
            return Err(Error::Shape(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.in_channels,
                input.ncols()
            )));
        }
        self.output_len(input.nrows())
    }

    /// `T × in` → `T' × out`.
    pub fn forward(&self, input: ArrayView2<'_, T>) -> Result<Array2<T>> {
        let out_len = self.check_input(&input)?;
        let owned;
        let flat = match input.as_slice() {
            Some(s) => s,
            None => {
                owned = input.as_standard_layout().into_owned();
                owned.as_slice().expect("standard layout")
            }
        };
        let mut out = self.unfold(flat, out_len).dot(&self.weight.t());
        out += &self.bias;
        Ok(out)
    }

    /// Accumulate parameter gradients into `grad` and return the input gradient.
    pub fn backward(
        &self,
        input: ArrayView2<'_, T>,
        grad_out: ArrayView2<'_, T>,
        grad: &mut Conv1d<T>,
    ) -> Result<Array2<T>> {
        let out_len = self.check_input(&input)?;
        if grad_out.dim() != (out_len, self.out_channels) {
            return Err(Error::Shape(format!(
                "{}: output gradient shape {:?}, expected {:?}",
                self.name,
                grad_out.dim(),
                (out_len, self.out_channels)
            )));
        }
        let owned;
        let flat = match input.as_slice() {
            Some(s) => s,
            None => {
                owned = input.as_standard_layout().into_owned();
                owned.as_slice().expect("standard layout")
            }
        };
        let unfolded = self.unfold(flat, out_len);
        ndarray::linalg::general_mat_mul(T::one(), &grad_out.t(), &unfolded, T::one(), &mut grad.weight);
        grad.bias += &grad_out.sum_axis(Axis(0));

        let grad_cols = grad_out.dot(&self.weight);
        let mut grad_in = Array2::<T>::zeros(input.raw_dim());
        let row = self.kernel_width * self.in_channels;
        let dst = grad_in.as_slice_mut().expect("fresh array is contiguous");
        for (t, g) in grad_cols.axis_iter(Axis(0)).enumerate() {
            let start = t * self.stride * self.in_channels;
            for (d, &v) in dst[start..start + row].iter_mut().zip(g.iter()) {
                *d += v;
            }
        }
        Ok(grad_in)
    }
}

impl<T: Real> Parameterized<T> for Conv1d<T> {
    fn params(&self) -> Vec<ParamView<'_, T>> {
        vec![
            ParamView {
                name: format!("{}.weight", self.name),
                shape: vec![self.out_channels, self.kernel_width, self.in_channels],
                data: self.weight.as_slice().expect("contiguous"),
            },
            ParamView {
                name: format!("{}.bias", self.name),
                shape: vec![self.out_channels],
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
        Self::zeros(
            self.name.clone(),
            self.in_channels,
            self.out_channels,
            self.kernel_width,
            self.stride,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct summation: out[t][o] = b[o] + Σ_k Σ_c w[o][k][c] · x[t·s + k][c].
    fn conv_oracle(layer: &Conv1d<f64>, x: &Array2<f64>) -> Array2<f64> {
        let t_out = (x.nrows() - layer.kernel_width) / layer.stride + 1;
        Array2::from_shape_fn((t_out, layer.out_channels), |(t, o)| {
            let mut acc = layer.bias[o];
            for k in 0..layer.kernel_width {
                for c in 0..layer.in_channels {
                    acc += layer.weight[[o, k * layer.in_channels + c]] * x[[t * layer.stride + k, c]];
                }
            }
            acc
        })
    }

    #[test]
    fn two_tap_sum() {
        let mut layer = Conv1d::<f64>::zeros("c", 1, 1, 2, 1);
        layer.weight.fill(1.0);
        let x = array![[1.0], [2.0], [3.0], [4.0]];
        assert_eq!(layer.forward(x.view()).unwrap(), array![[3.0], [5.0], [7.0]]);
    }

    #[test]
    fn identity_kernel() {
        let mut layer = Conv1d::<f64>::zeros("c", 3, 3, 1, 1);
        for i in 0..3 {
            layer.weight[[i, i]] = 1.0;
        }
        let x = Array2::from_shape_fn((5, 3), |(t, c)| (t * 3 + c) as f64 - 4.0);
        assert_eq!(layer.forward(x.view()).unwrap(), x);
    }

    #[test]
    fn boundary_and_too_short() {
        let layer = Conv1d::<f64>::new("c", 2, 4, 5, 2, &mut seeded_rng(0));
        let x = Array2::zeros((5, 2));
        assert_eq!(layer.forward(x.view()).unwrap().nrows(), 1);
        let short = Array2::zeros((4, 2));
        assert!(matches!(
            layer.forward(short.view()),
            Err(Error::InputTooShort { got: 4, min: 5 })
        ));
    }

    #[test]
    fn non_contiguous_input() {
        let mut rng = seeded_rng(5);
        let layer = Conv1d::<f64>::new("c", 3, 2, 3, 2, &mut rng);
        let x = Array2::from_shape_fn((3, 9), |(c, t)| (c * 9 + t) as f64 * 0.1);
        let xt = x.t();
        let out = layer.forward(xt).unwrap();
        let oracle = conv_oracle(&layer, &xt.to_owned());
        assert_eq!(out.dim(), oracle.dim());
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_direct_summation(
            t in 1usize..30, width in 1usize..6, stride in 1usize..4,
            cin in 1usize..4, cout in 1usize..4, seed in 0u64..1000,
        ) {
            let mut rng = seeded_rng(seed);
            let mut layer = Conv1d::<f64>::new("c", cin, cout, width, stride, &mut rng);
            layer.bias.mapv_inplace(|_| rng.random_range(-1.0..1.0));
            let x = Array2::from_shape_fn((t, cin), |_| rng.random_range(-1.0..1.0));
            match layer.forward(x.view()) {
                Ok(out) => {
                    prop_assert_eq!(out.nrows(), (t - width) / stride + 1);
                    let oracle = conv_oracle(&layer, &x);
                    for (a, b) in out.iter().zip(oracle.iter()) {
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
                Err(Error::InputTooShort { got, min }) => {
                    prop_assert!(t < width);
                    prop_assert_eq!((got, min), (t, width));
                }
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
