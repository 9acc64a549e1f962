use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub fn relu<T: Real>(x: ArrayView2<'_, T>) -> Array2<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_inplace<T: Real>(x: &mut Array2<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Real>(activated: ArrayView2<'_, T>, grad: &mut Array2<T>) {
    ndarray::Zip::from(grad)
        .and(activated)
        .for_each(|g, &a| {
            if a <= T::zero() {
                *g = T::zero();
            }
        });
}

/// Per-channel mean over time of a `T × C` matrix.
pub fn global_average_pool<T: Real>(x: ArrayView2<'_, T>) -> Result<Array1<T>> {
    if x.nrows() == 0 {
        return Err(Error::InputTooShort { got: 0, min: 1 });
    }
    Ok(x.sum_axis(Axis(0)) / T::from_usize_lossy(x.nrows()))
}

/// Spread a pooled gradient evenly over `frames` time steps.
pub fn global_average_pool_backward<T: Real>(grad: ArrayView1<'_, T>, frames: usize) -> Array2<T> {
    let scaled = grad.mapv(|g| g / T::from_usize_lossy(frames));
    scaled
        .broadcast((frames, grad.len()))
        .expect("broadcast pooled gradient")
        .to_owned()
}

/// Numerically stable softmax.
pub fn softmax<T: Real>(logits: ArrayView1<'_, T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Returns `(−log p[label], p)`.
pub fn softmax_cross_entropy<T: Real>(logits: ArrayView1<'_, T>, label: usize) -> Result<(T, Array1<T>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    let probs = logits.mapv(|v| (v - log_sum).exp());
    Ok((log_sum - logits[label], probs))
}

/// Cosine similarity, defined as 0 when either vector is zero.
pub fn cosine<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return T::zero();
    }
    a.dot(&b) / (na * nb)
}

/// Gradients of `cosine(a, b)` with respect to `a` and `b`; zero at the
/// zero-vector convention point.
pub fn cosine_backward<T: Real>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> (Array1<T>, Array1<T>) {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return (Array1::zeros(a.len()), Array1::zeros(b.len()));
    }
    let c = a.dot(&b) / (na * nb);
    let inv = T::one() / (na * nb);
    let ga = &b * inv - &a * (c / (na * na));
    let gb = &a * inv - &b * (c / (nb * nb));
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pooling_examples() {
        let one = array![[1.0, -2.0, 3.0]];
        assert_eq!(global_average_pool(one.view()).unwrap(), array![1.0, -2.0, 3.0]);
        let x = array![[2.0], [4.0], [6.0]];
        assert_eq!(global_average_pool(x.view()).unwrap(), array![4.0]);
        let twice = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        assert_eq!(global_average_pool(twice.view()).unwrap(), array![4.0]);
    }

    #[test]
    fn softmax_examples() {
        let (loss, p) = softmax_cross_entropy(Array1::<f64>::zeros(5).view(), 2).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        assert!((loss - 5f64.ln()).abs() < 1e-12);

        let (loss, p) = softmax_cross_entropy(array![1000.0f64, 0.0].view(), 0).unwrap();
        assert!(p[0] > 1.0 - 1e-12 && p[1] < 1e-300 + 1e-12);
        assert!(loss.is_finite() && loss.abs() < 1e-12);

        assert!(matches!(
            softmax_cross_entropy(array![0.0f64, 1.0].view(), 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    /// exp-normalize in 80-bit-free "extended" style: sort terms and sum
    /// with compensated (Kahan) summation, no max shift.
    fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let mut sorted = exps.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for v in sorted {
            let y = v - comp;
            let t = sum + y;
            comp = (t - sum) - y;
            sum = t;
        }
        exps.iter().map(|e| e / sum).collect()
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = seeded_rng(17);
        for _ in 0..200 {
            let n = rng.random_range(2..12);
            let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-20.0..20.0)).collect();
            let p = softmax(ArrayView1::from(&logits));
            for (a, b) in p.iter().zip(softmax_oracle(&logits)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_examples() {
        let a = array![1.0f64, 2.0, 0.0];
        assert!((cosine(a.view(), a.view()) - 1.0).abs() < 1e-15);
        assert_eq!(cosine(a.view(), array![0.0, 0.0, 3.0].view()), 0.0);
        assert_eq!(cosine(a.view(), Array1::zeros(3).view()), 0.0);
    }

    #[test]
    fn cosine_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(4);
        let a = Array1::from_iter((0..6).map(|_| rng.random_range(-1.0f64..1.0)));
        let b = Array1::from_iter((0..6).map(|_| rng.random_range(-1.0f64..1.0)));
        let (ga, gb) = cosine_backward(a.view(), b.view());
        let h = 1e-6;
        for i in 0..6 {
            let mut ap = a.clone();
            ap[i] += h;
            let mut am = a.clone();
            am[i] -= h;
            let fd = (cosine(ap.view(), b.view()) - cosine(am.view(), b.view())) / (2.0 * h);
            assert!((fd - ga[i]).abs() < 1e-8);
            let mut bp = b.clone();
            bp[i] += h;
            let mut bm = b.clone();
            bm[i] -= h;
            let fd = (cosine(a.view(), bp.view()) - cosine(a.view(), bm.view())) / (2.0 * h);
            assert!((fd - gb[i]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_simplex(logits in proptest::collection::vec(-1e3f64..1e3, 2..20)) {
            let p = softmax(ArrayView1::from(&logits));
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_is_symmetric(a in proptest::collection::vec(-10f64..10.0, 5), b in proptest::collection::vec(-10f64..10.0, 5)) {
            let a = Array1::from(a);
            let b = Array1::from(b);
            prop_assert!((cosine(a.view(), b.view()) - cosine(b.view(), a.view())).abs() < 1e-12);
        }

        #[test]
        fn cosine_is_scale_invariant(a in proptest::collection::vec(-10f64..10.0, 5), b in proptest::collection::vec(-10f64..10.0, 5), alpha in 0.01f64..100.0) {
            let a = Array1::from(a);
            let b = Array1::from(b);
            let scaled = &a * alpha;
            prop_assert!((cosine(scaled.view(), b.view()) - cosine(a.view(), b.view())).abs() < 1e-12);
        }
    }
}
