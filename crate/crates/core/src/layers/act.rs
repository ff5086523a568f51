//! Pointwise activations and their derivatives.

use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Self-normalizing constants for the scaled exponential linear unit.
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;

/// Classical scaled-tanh constants: 1.7159 * tanh(2x/3).
pub const TANH_SCALE: f64 = 1.7159;
pub const TANH_SLOPE: f64 = 2.0 / 3.0;

#[inline]
pub fn selu<T: Scalar>(x: T) -> T {
    let lambda = lit::<T>(SELU_LAMBDA);
    if x > T::zero() {
        lambda * x
    } else {
        lambda * lit::<T>(SELU_ALPHA) * (x.exp() - T::one())
    }
}

/// d selu / dx at input x.
#[inline]
pub fn selu_grad<T: Scalar>(x: T) -> T {
    let lambda = lit::<T>(SELU_LAMBDA);
    if x > T::zero() {
        lambda
    } else {
        lambda * lit::<T>(SELU_ALPHA) * x.exp()
    }
}

#[inline]
pub fn scaled_tanh<T: Scalar>(x: T, scale: T, slope: T) -> T {
    scale * (slope * x).tanh()
}

/// Derivative expressed through the output value y = scaled_tanh(x).
#[inline]
pub fn scaled_tanh_grad_from_output<T: Scalar>(y: T, scale: T, slope: T) -> T {
    slope * (scale - y * y / scale)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn selu_map<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(selu)
}

/// Elementwise dy * selu'(x).
pub fn selu_backward_map<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    assert!(x.same_shape(dy));
    let mut out = dy.clone();
    for (g, &v) in out.data_mut().iter_mut().zip(x.data()) {
        *g *= selu_grad(v);
    }
    out
}

pub fn sigmoid_map<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selu_reference_points() {
        assert_eq!(selu(0.0f64), 0.0);
        assert!((selu(1.0f64) - SELU_LAMBDA).abs() < 1e-12);
        // Deep negative limit approaches -lambda * alpha.
        assert!((selu(-20.0f64) + SELU_LAMBDA * SELU_ALPHA).abs() < 1e-6);
    }

    #[test]
    fn scaled_tanh_reference_points() {
        let s = TANH_SCALE;
        let k = TANH_SLOPE;
        assert_eq!(scaled_tanh(0.0f64, s, k), 0.0);
        assert!((scaled_tanh(1.5f64, s, k) - 1.7159 * 1.0f64.tanh()).abs() < 1e-12);
        for x in [-2.0f64, -0.3, 0.7, 5.0] {
            let odd = scaled_tanh(x, s, k) + scaled_tanh(-x, s, k);
            assert!(odd.abs() < 1e-12);
        }
    }

    #[test]
    fn activations_are_monotone() {
        let grid: Vec<f64> = (-500..=500).map(|i| i as f64 * 0.02).collect();
        for pair in grid.windows(2) {
            assert!(selu(pair[0]) <= selu(pair[1]));
            assert!(
                scaled_tanh(pair[0], TANH_SCALE, TANH_SLOPE)
                    <= scaled_tanh(pair[1], TANH_SCALE, TANH_SLOPE)
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for x in [-1.3f64, -0.2, 0.4, 2.0] {
            let num = (selu(x + h) - selu(x - h)) / (2.0 * h);
            assert!((num - selu_grad(x)).abs() < 1e-8);

            let y = scaled_tanh(x, TANH_SCALE, TANH_SLOPE);
            let num = (scaled_tanh(x + h, TANH_SCALE, TANH_SLOPE)
                - scaled_tanh(x - h, TANH_SCALE, TANH_SLOPE))
                / (2.0 * h);
            let ana = scaled_tanh_grad_from_output(y, TANH_SCALE, TANH_SLOPE);
            assert!((num - ana).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_saturation() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(30.0f64) > 1.0 - 1e-12);
        assert!(sigmoid(-30.0f64) < 1e-12);
    }
}
