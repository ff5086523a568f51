//! 1-D convolution along the frequency axis, with exact hand-written
//! gradients. "Same" zero padding, stride 1, odd kernel widths.
//!
//! Feature maps are `[channels, freq_bins]`, kernels `[out_ch, in_ch, k]`.
//! The inner loops are shifted-slice accumulations over contiguous rows so
//! they autovectorize.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Overlap window between an output row and an input row shifted by `s`:
/// returns `(out_start, in_start, len)`.
#[inline]
fn overlap(bins: usize, s: i64) -> (usize, usize, usize) {
    if s >= 0 {
        let s = s as usize;
        if s >= bins {
            return (0, 0, 0);
        }
        (0, s, bins - s)
    } else {
        let s = (-s) as usize;
        if s >= bins {
            return (0, 0, 0);
        }
        (s, 0, bins - s)
    }
}

fn check_shapes<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) {
    assert_eq!(kernel.rank(), 3, "conv kernel must be [out, in, k]");
    assert_eq!(x.rank(), 2, "feature map must be [channels, bins]");
    assert_eq!(
        kernel.shape()[1],
        x.rows(),
        "conv kernel expects {} input channels, map has {}",
        kernel.shape()[1],
        x.rows()
    );
    assert_eq!(kernel.shape()[2] % 2, 1, "conv kernel width must be odd");
    if let Some(b) = bias {
        assert_eq!(b.len(), kernel.shape()[0], "bias length must match out channels");
    }
}

pub fn conv_freq<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Tensor<T> {
    check_shapes(x, kernel, bias);
    let out_ch = kernel.shape()[0];
    let in_ch = kernel.shape()[1];
    let k = kernel.shape()[2];
    let off = (k / 2) as i64;
    let bins = x.cols();

    let mut out = match bias {
        Some(b) => {
            let mut t = Tensor::zeros(&[out_ch, bins]);
            for o in 0..out_ch {
                t.row_mut(o).fill(b.data()[o]);
            }
            t
        }
        None => Tensor::zeros(&[out_ch, bins]),
    };

    for o in 0..out_ch {
        let row_out = out.row_mut(o);
        for i in 0..in_ch {
            let row_x = x.row(i);
            for (d, &w) in kernel.lane(o, i).iter().enumerate() {
                let (os, xs, n) = overlap(bins, d as i64 - off);
                for (dst, &src) in row_out[os..os + n].iter_mut().zip(&row_x[xs..xs + n]) {
                    *dst += w * src;
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. input, kernel and bias given the upstream gradient.
pub fn conv_freq_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    check_shapes(x, kernel, None);
    let out_ch = kernel.shape()[0];
    let in_ch = kernel.shape()[1];
    let k = kernel.shape()[2];
    let off = (k / 2) as i64;
    let bins = x.cols();
    assert_eq!(dy.shape(), &[out_ch, bins], "upstream gradient shape mismatch");

    let mut dx = Tensor::zeros(&[in_ch, bins]);
    let mut dk = Tensor::zeros(&[out_ch, in_ch, k]);
    let mut db = Tensor::zeros(&[out_ch]);

    for o in 0..out_ch {
        let row_dy = dy.row(o);
        let mut sum = T::zero();
        for &g in row_dy {
            sum += g;
        }
        db.data_mut()[o] = sum;
        for i in 0..in_ch {
            let row_x = x.row(i);
            let dk_lane = dk.lane_mut(o, i);
            let k_lane = kernel.lane(o, i);
            let dx_row = dx.row_mut(i);
            for d in 0..k {
                let (os, xs, n) = overlap(bins, d as i64 - off);
                let mut dot = T::zero();
                for (&g, &v) in row_dy[os..os + n].iter().zip(&row_x[xs..xs + n]) {
                    dot += g * v;
                }
                dk_lane[d] = dot;
                let w = k_lane[d];
                for (dst, &g) in dx_row[xs..xs + n].iter_mut().zip(&row_dy[os..os + n]) {
                    *dst += w * g;
                }
            }
        }
    }
    (dx, dk, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data)
    }

    /// Direct triple-loop reference, indexing the padded input explicitly.
    fn conv_reference(x: &Tensor<f64>, kernel: &Tensor<f64>, bias: &Tensor<f64>) -> Tensor<f64> {
        let (out_ch, in_ch, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
        let bins = x.cols();
        let mut out = Tensor::zeros(&[out_ch, bins]);
        for o in 0..out_ch {
            for f in 0..bins {
                let mut acc = bias.data()[o];
                for i in 0..in_ch {
                    for d in 0..k {
                        let idx = f as i64 + d as i64 - (k / 2) as i64;
                        if idx >= 0 && (idx as usize) < bins {
                            acc += kernel.at3(o, i, d) * x.at(i, idx as usize);
                        }
                    }
                }
                out.set(o, f, acc);
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let x = Tensor::from_vec(&[1, 4], vec![1.0, -2.0, 3.0, 0.5]);
        let kernel = Tensor::from_vec(&[1, 1, 1], vec![1.0]);
        let bias = Tensor::zeros(&[1]);
        assert_eq!(conv_freq(&x, &kernel, Some(&bias)), x);
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]);
        let kernel = Tensor::zeros(&[2, 1, 3]);
        let bias = Tensor::from_vec(&[2], vec![0.25, -1.0]);
        let y = conv_freq(&x, &kernel, Some(&bias));
        assert_eq!(y.row(0), &[0.25, 0.25, 0.25]);
        assert_eq!(y.row(1), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let x = rand_tensor(&mut rng, &[3, 5]);
            let kernel = rand_tensor(&mut rng, &[2, 3, 3]);
            let bias = rand_tensor(&mut rng, &[2]);
            let fast = conv_freq(&x, &kernel, Some(&bias));
            let slow = conv_reference(&x, &kernel, &bias);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 6]);
        let kernel = rand_tensor(&mut rng, &[3, 2, 5]);
        let bias = rand_tensor(&mut rng, &[3]);
        let proj = rand_tensor(&mut rng, &[3, 6]);
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            conv_freq(x, k, Some(b))
                .data()
                .iter()
                .zip(proj.data())
                .map(|(a, p)| a * p)
                .sum()
        };
        let (dx, dk, db) = conv_freq_backward(&x, &kernel, &proj);

        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let num = (loss(&xp, &kernel, &bias) - loss(&xm, &kernel, &bias)) / (2.0 * h);
            assert!((num - dx.data()[idx]).abs() < 1e-8);
        }
        for idx in 0..kernel.len() {
            let mut kp = kernel.clone();
            let mut km = kernel.clone();
            kp.data_mut()[idx] += h;
            km.data_mut()[idx] -= h;
            let num = (loss(&x, &kp, &bias) - loss(&x, &km, &bias)) / (2.0 * h);
            assert!((num - dk.data()[idx]).abs() < 1e-8);
        }
        for idx in 0..bias.len() {
            let mut bp = bias.clone();
            let mut bm = bias.clone();
            bp.data_mut()[idx] += h;
            bm.data_mut()[idx] -= h;
            let num = (loss(&x, &kernel, &bp) - loss(&x, &kernel, &bm)) / (2.0 * h);
            assert!((num - db.data()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    #[should_panic(expected = "input channels")]
    fn rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 4]);
        let kernel = Tensor::<f64>::zeros(&[1, 3, 3]);
        conv_freq(&x, &kernel, None);
    }
}
