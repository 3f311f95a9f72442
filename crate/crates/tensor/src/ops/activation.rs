use crate::scalar::Scalar;

pub fn relu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(x: &[T], grad_out: &[T]) -> Vec<T> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| sigmoid_scalar(v)).collect()
}

pub fn sigmoid_backward<T: Scalar>(y: &[T], grad_out: &[T]) -> Vec<T> {
    y.iter().zip(grad_out).map(|(&s, &g)| g * s * (T::one() - s)).collect()
}

/// Softmax over the channel axis of a `[outer, channels, inner]` layout.
pub fn softmax<T: Scalar>(x: &[T], channels: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(channels * inner).zip(out.chunks_mut(channels * inner)) {
        for i in 0..inner {
            let max = (0..channels).map(|c| src[c * inner + i]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for c in 0..channels {
                let e = (src[c * inner + i] - max).exp();
                dst[c * inner + i] = e;
                total += e;
            }
            for c in 0..channels {
                dst[c * inner + i] /= total;
            }
        }
    }
    out
}

pub fn softmax_backward<T: Scalar>(y: &[T], grad_out: &[T], channels: usize, inner: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    let block = channels * inner;
    for ((ys, gs), ds) in y.chunks(block).zip(grad_out.chunks(block)).zip(dx.chunks_mut(block)) {
        for i in 0..inner {
            let dot: T = (0..channels).map(|c| ys[c * inner + i] * gs[c * inner + i]).sum();
            for c in 0..channels {
                ds[c * inner + i] = ys[c * inner + i] * (gs[c * inner + i] - dot);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(relu(&[-1.0f32, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&[-1.0f32, 0.0, 2.0], &[1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_is_half_at_origin_and_stable() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!(sigmoid_scalar(-1000.0f32).is_finite());
        assert_eq!(sigmoid_scalar(1000.0f32), 1.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(softmax(&[0.0f64, 0.0], 2, 1), vec![0.5, 0.5]);
        let y = softmax(&[1.0f64, -3.0, 250.0, 2.0, 0.5, 249.0], 3, 2);
        for i in 0..2 {
            let s: f64 = (0..3).map(|c| y[c * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
