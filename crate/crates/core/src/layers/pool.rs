//! Average pooling over frequency, stride = width.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn avg_pool_freq<T: Scalar>(x: &Tensor<T>, width: usize) -> Tensor<T> {
    assert!(width >= 1, "pool width must be >= 1");
    let bins = x.cols();
    assert_eq!(bins % width, 0, "pool width {width} does not divide {bins} bins");
    let ch = x.rows();
    let out_bins = bins / width;
    let inv = T::one() / T::from_f64(width as f64);
    let mut out = Tensor::zeros(&[ch, out_bins]);
    for c in 0..ch {
        let src = x.row(c);
        let dst = out.row_mut(c);
        for (g, slot) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &v in &src[g * width..(g + 1) * width] {
                acc += v;
            }
            *slot = acc * inv;
        }
    }
    out
}

/// Distributes each output-bin gradient uniformly over its input group.
pub fn avg_pool_freq_backward<T: Scalar>(dy: &Tensor<T>, width: usize) -> Tensor<T> {
    let ch = dy.rows();
    let out_bins = dy.cols();
    let inv = T::one() / T::from_f64(width as f64);
    let mut dx = Tensor::zeros(&[ch, out_bins * width]);
    for c in 0..ch {
        let src = dy.row(c);
        let dst = dx.row_mut(c);
        for (g, &gval) in src.iter().enumerate() {
            let share = gval * inv;
            for slot in &mut dst[g * width..(g + 1) * width] {
                *slot = share;
            }
        }
    }
    dx
}
