//! Layers that act along the time axis: nearest-neighbor upsampling and the
//! causal temporal convolution that follows it.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Repeats every frame `factor` times, order preserved.
pub fn upsample_time<T: Scalar>(frames: &[Tensor<T>], factor: usize) -> Vec<Tensor<T>> {
    assert!(factor >= 1, "upsample factor must be >= 1");
    let mut out = Vec::with_capacity(frames.len() * factor);
    for f in frames {
        for _ in 0..factor {
            out.push(f.clone());
        }
    }
    out
}

/// Sums the gradient over each repeated group.
pub fn upsample_time_backward<T: Scalar>(d_out: &[Tensor<T>], factor: usize) -> Vec<Tensor<T>> {
    assert!(factor >= 1, "upsample factor must be >= 1");
    assert_eq!(d_out.len() % factor, 0, "gradient stream not a multiple of factor");
    let mut out = Vec::with_capacity(d_out.len() / factor);
    for group in d_out.chunks(factor) {
        let mut acc = group[0].clone();
        for g in &group[1..] {
            acc.add_assign(g);
        }
        out.push(acc);
    }
    out
}

/// Causal convolution over time per frequency bin.
///
/// `window` holds the last `k_t` frames, oldest first; `window[k_t - 1]` is
/// the current frame. The kernel is `[out_ch, in_ch, k_t]` with tap `t`
/// applied to `window[t]`, so only the present and past are consulted.
/// Missing history at stream start is zero frames.
pub fn causal_conv_time<T: Scalar>(
    window: &[&Tensor<T>],
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let (out_ch, in_ch, k_t) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    assert_eq!(window.len(), k_t, "window must hold exactly k_t frames");
    let bins = window[0].cols();
    for w in window {
        assert_eq!(w.shape(), &[in_ch, bins], "window frame shape mismatch");
    }
    assert_eq!(bias.len(), out_ch);

    let mut out = Tensor::zeros(&[out_ch, bins]);
    for o in 0..out_ch {
        let row = out.row_mut(o);
        row.fill(bias.data()[o]);
        for i in 0..in_ch {
            let lane = kernel.lane(o, i);
            for (tap, frame) in window.iter().enumerate() {
                let w = lane[tap];
                if w == T::zero() {
                    continue;
                }
                for (dst, &src) in row.iter_mut().zip(frame.row(i)) {
                    *dst += w * src;
                }
            }
        }
    }
    out
}

/// Gradients w.r.t. each window frame, the kernel, and the bias.
pub fn causal_conv_time_backward<T: Scalar>(
    window: &[&Tensor<T>],
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Vec<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (out_ch, in_ch, k_t) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    assert_eq!(window.len(), k_t);
    let bins = window[0].cols();
    assert_eq!(dy.shape(), &[out_ch, bins]);

    let mut d_window: Vec<Tensor<T>> = window
        .iter()
        .map(|_| Tensor::zeros(&[in_ch, bins]))
        .collect();
    let mut dk = Tensor::zeros(&[out_ch, in_ch, k_t]);
    let mut db = Tensor::zeros(&[out_ch]);

    for o in 0..out_ch {
        let dyr = dy.row(o);
        let mut sum = T::zero();
        for &g in dyr {
            sum += g;
        }
        db.data_mut()[o] = sum;
        for i in 0..in_ch {
            let k_lane = kernel.lane(o, i);
            for tap in 0..k_t {
                let mut dot = T::zero();
                for (&g, &v) in dyr.iter().zip(window[tap].row(i)) {
                    dot += g * v;
                }
                *dk.lane_mut(o, i).get_mut(tap).unwrap() += dot;
                let w = k_lane[tap];
                for (dst, &g) in d_window[tap].row_mut(i).iter_mut().zip(dyr) {
                    *dst += w * g;
                }
            }
        }
    }
    (d_window, dk, db)
}
