//! Per-frame layer normalization.
//!
//! Statistics are computed over every (channel, frequency) element of the
//! current frame only, so the layer never looks across time and stays
//! streaming-safe. The affine map is per channel.

use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNormCache<T> {
    pub mean: T,
    pub inv_std: T,
}

pub fn layer_norm_frame<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
) -> (Tensor<T>, LayerNormCache<T>) {
    let ch = x.rows();
    assert_eq!(gain.len(), ch, "layer norm gain must be per channel");
    assert_eq!(bias.len(), ch, "layer norm bias must be per channel");
    let n = lit::<T>(x.len() as f64);

    let mut sum = T::zero();
    for &v in x.data() {
        sum += v;
    }
    let mean = sum / n;
    let mut var_sum = T::zero();
    for &v in x.data() {
        let d = v - mean;
        var_sum += d * d;
    }
    let var = var_sum / n;
    let inv_std = T::one() / (var + lit::<T>(LN_EPS)).sqrt();

    let mut out = Tensor::zeros(&[ch, x.cols()]);
    for c in 0..ch {
        let g = gain.data()[c];
        let b = bias.data()[c];
        let src = x.row(c);
        for (dst, &v) in out.row_mut(c).iter_mut().zip(src) {
            *dst = g * (v - mean) * inv_std + b;
        }
    }
    (out, LayerNormCache { mean, inv_std })
}

pub fn layer_norm_frame_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    cache: LayerNormCache<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let ch = x.rows();
    let bins = x.cols();
    assert!(dy.same_shape(x), "layer norm upstream gradient shape mismatch");
    let n = lit::<T>(x.len() as f64);

    let mut dgain = Tensor::zeros(&[ch]);
    let mut dbias = Tensor::zeros(&[ch]);
    // dxhat and the two reduced means it feeds.
    let mut dxhat = Tensor::zeros(&[ch, bins]);
    let mut sum_dxhat = T::zero();
    let mut sum_dxhat_xhat = T::zero();
    for c in 0..ch {
        let g = gain.data()[c];
        let mut dg = T::zero();
        let mut db = T::zero();
        let xr = x.row(c);
        let dyr = dy.row(c);
        let dxr = dxhat.row_mut(c);
        for ((&v, &dyv), slot) in xr.iter().zip(dyr).zip(dxr.iter_mut()) {
            let xhat = (v - cache.mean) * cache.inv_std;
            dg += dyv * xhat;
            db += dyv;
            let dxh = dyv * g;
            *slot = dxh;
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xhat;
        }
        dgain.data_mut()[c] = dg;
        dbias.data_mut()[c] = db;
    }

    let mean_dxhat = sum_dxhat / n;
    let mean_dxhat_xhat = sum_dxhat_xhat / n;
    let mut dx = Tensor::zeros(&[ch, bins]);
    for c in 0..ch {
        let xr = x.row(c);
        let dxhr = dxhat.row(c);
        for ((slot, &v), &dxh) in dx.row_mut(c).iter_mut().zip(xr).zip(dxhr) {
            let xhat = (v - cache.mean) * cache.inv_std;
            *slot = cache.inv_std * (dxh - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}
