//! Convolutional LSTM cell over the frequency axis.
//!
//! Gate transformations are `conv_freq` instead of dense matrix multiplies,
//! so the recurrent state keeps its spatial layout. All four gates are kept
//! with an uncoupled forget gate, elementwise peepholes on i/f (reading
//! c_{t-1}) and o (reading c_t), and per-frame layer normalization applied
//! separately to the input-to-hidden and hidden-to-hidden pre-activation
//! branches. The cell nonlinearity is a scaled tanh.
//!
//!   i = sig(LN(Wxi*x) + LN(Whi*h) + wci.c + bi)
//!   f = sig(LN(Wxf*x) + LN(Whf*h) + wcf.c + bf)
//!   g = phi(LN(Wxg*x) + LN(Whg*h) + bg)
//!   c' = f.c + i.g
//!   o = sig(LN(Wxo*x) + LN(Who*h) + wco.c' + bo)
//!   h' = o.phi(c')

use crate::layers::act::{
    scaled_tanh, scaled_tanh_grad_from_output, sigmoid, TANH_SCALE, TANH_SLOPE,
};
use crate::layers::conv::{conv_freq, conv_freq_backward};
use crate::layers::norm::{layer_norm_frame, layer_norm_frame_backward, LayerNormCache};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const GATE_I: usize = 0;
pub const GATE_F: usize = 1;
pub const GATE_G: usize = 2;
pub const GATE_O: usize = 3;
pub const GATE_NAMES: [&str; 4] = ["i", "f", "g", "o"];

pub const PEEP_I: usize = 0;
pub const PEEP_F: usize = 1;
pub const PEEP_O: usize = 2;
pub const PEEP_NAMES: [&str; 3] = ["i", "f", "o"];

/// Per-channel affine parameters of one layer-norm branch.
#[derive(Clone, Debug)]
pub struct LnAffine<T> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LnAffine<T> {
    pub fn identity(ch: usize) -> Self {
        LnAffine {
            gain: Tensor::full(&[ch], T::one()),
            bias: Tensor::zeros(&[ch]),
        }
    }

    pub fn zeros(ch: usize) -> Self {
        LnAffine {
            gain: Tensor::zeros(&[ch]),
            bias: Tensor::zeros(&[ch]),
        }
    }
}

/// All learned tensors of one cell. Forget-gate parameters are separate
/// storage from every other gate (uncoupled gates); kernel widths are odd.
#[derive(Clone, Debug)]
pub struct ConvLstmParams<T> {
    /// Input convolutions per gate, `[out_ch, in_ch, k]`.
    pub w_x: [Tensor<T>; 4],
    /// Recurrent convolutions per gate, `[out_ch, out_ch, k]`.
    pub w_h: [Tensor<T>; 4],
    /// Elementwise peephole weights for i, f, o, `[out_ch, bins]`.
    pub peephole: [Tensor<T>; 3],
    /// Per-channel gate biases.
    pub bias: [Tensor<T>; 4],
    /// Layer-norm affine parameters for the input branches.
    pub ln_x: [LnAffine<T>; 4],
    /// Layer-norm affine parameters for the recurrent branches.
    pub ln_h: [LnAffine<T>; 4],
}

impl<T: Scalar> ConvLstmParams<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, k: usize, bins: usize) -> Self {
        assert_eq!(k % 2, 1, "convlstm kernel width must be odd");
        let wx = || Tensor::zeros(&[out_ch, in_ch, k]);
        let wh = || Tensor::zeros(&[out_ch, out_ch, k]);
        let peep = || Tensor::zeros(&[out_ch, bins]);
        let b = || Tensor::zeros(&[out_ch]);
        ConvLstmParams {
            w_x: [wx(), wx(), wx(), wx()],
            w_h: [wh(), wh(), wh(), wh()],
            peephole: [peep(), peep(), peep()],
            bias: [b(), b(), b(), b()],
            ln_x: [
                LnAffine::identity(out_ch),
                LnAffine::identity(out_ch),
                LnAffine::identity(out_ch),
                LnAffine::identity(out_ch),
            ],
            ln_h: [
                LnAffine::identity(out_ch),
                LnAffine::identity(out_ch),
                LnAffine::identity(out_ch),
                LnAffine::identity(out_ch),
            ],
        }
    }

    /// Shape-congruent zero gradients (layer-norm affines zeroed too).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.w_x.iter_mut().for_each(|t| t.fill(T::zero()));
        z.w_h.iter_mut().for_each(|t| t.fill(T::zero()));
        z.peephole.iter_mut().for_each(|t| t.fill(T::zero()));
        z.bias.iter_mut().for_each(|t| t.fill(T::zero()));
        for ln in z.ln_x.iter_mut().chain(z.ln_h.iter_mut()) {
            ln.gain.fill(T::zero());
            ln.bias.fill(T::zero());
        }
        z
    }

    pub fn out_channels(&self) -> usize {
        self.w_x[0].shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.w_x[0].shape()[1]
    }

    pub fn freq_bins(&self) -> usize {
        self.peephole[0].shape()[1]
    }
}

/// Recurrent carry of one stream through one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState<T> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> ConvLstmState<T> {
    pub fn zeros(ch: usize, bins: usize) -> Self {
        ConvLstmState {
            h: Tensor::zeros(&[ch, bins]),
            c: Tensor::zeros(&[ch, bins]),
        }
    }

    pub fn reset(&mut self) {
        self.h.fill(T::zero());
        self.c.fill(T::zero());
    }
}

/// Non-learned knobs of the cell.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmOpts {
    /// Disable to bypass both layer-norm branches (scalar-oracle tests).
    pub layer_norm: bool,
    pub tanh_scale: f64,
    pub tanh_slope: f64,
}

impl Default for ConvLstmOpts {
    fn default() -> Self {
        ConvLstmOpts {
            layer_norm: true,
            tanh_scale: TANH_SCALE,
            tanh_slope: TANH_SLOPE,
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Clone, Debug)]
pub struct ConvLstmCache<T> {
    pub x: Tensor<T>,
    pub h_prev: Tensor<T>,
    pub c_prev: Tensor<T>,
    pub u_x: [Tensor<T>; 4],
    pub u_h: [Tensor<T>; 4],
    pub ln_x: [LayerNormCache<T>; 4],
    pub ln_h: [LayerNormCache<T>; 4],
    /// Activated gates i, f, g, o.
    pub gate: [Tensor<T>; 4],
    pub c_new: Tensor<T>,
}

fn check_step_shapes<T: Scalar>(x: &Tensor<T>, state: &ConvLstmState<T>, p: &ConvLstmParams<T>) {
    let bins = p.freq_bins();
    assert_eq!(
        x.shape(),
        &[p.in_channels(), bins],
        "convlstm input shape mismatch"
    );
    assert_eq!(
        state.h.shape(),
        &[p.out_channels(), bins],
        "convlstm state shape mismatch"
    );
    assert!(state.c.same_shape(&state.h));
}

/// One recurrent step without caching.
pub fn convlstm_step<T: Scalar>(
    x: &Tensor<T>,
    state: &ConvLstmState<T>,
    p: &ConvLstmParams<T>,
    opts: ConvLstmOpts,
) -> (Tensor<T>, ConvLstmState<T>) {
    let (h, s, _) = step_impl(x, state, p, opts, false);
    (h, s)
}

/// One recurrent step, returning the cache for the backward pass.
pub fn convlstm_step_train<T: Scalar>(
    x: &Tensor<T>,
    state: &ConvLstmState<T>,
    p: &ConvLstmParams<T>,
    opts: ConvLstmOpts,
) -> (Tensor<T>, ConvLstmState<T>, ConvLstmCache<T>) {
    let (h, s, cache) = step_impl(x, state, p, opts, true);
    (h, s, cache.expect("cache requested"))
}

fn step_impl<T: Scalar>(
    x: &Tensor<T>,
    state: &ConvLstmState<T>,
    p: &ConvLstmParams<T>,
    opts: ConvLstmOpts,
    want_cache: bool,
) -> (Tensor<T>, ConvLstmState<T>, Option<ConvLstmCache<T>>) {
    check_step_shapes(x, state, p);
    let scale = lit::<T>(opts.tanh_scale);
    let slope = lit::<T>(opts.tanh_slope);
    let zero_ln = LayerNormCache {
        mean: T::zero(),
        inv_std: T::zero(),
    };

    let u_x = [
        conv_freq(x, &p.w_x[0], None),
        conv_freq(x, &p.w_x[1], None),
        conv_freq(x, &p.w_x[2], None),
        conv_freq(x, &p.w_x[3], None),
    ];
    let u_h = [
        conv_freq(&state.h, &p.w_h[0], None),
        conv_freq(&state.h, &p.w_h[1], None),
        conv_freq(&state.h, &p.w_h[2], None),
        conv_freq(&state.h, &p.w_h[3], None),
    ];

    let mut ln_x_caches = [zero_ln; 4];
    let mut ln_h_caches = [zero_ln; 4];
    let branch = |u: &Tensor<T>, ln: &LnAffine<T>, cache_slot: &mut LayerNormCache<T>| {
        if opts.layer_norm {
            let (y, c) = layer_norm_frame(u, &ln.gain, &ln.bias);
            *cache_slot = c;
            y
        } else {
            u.clone()
        }
    };
    let a_x = [
        branch(&u_x[0], &p.ln_x[0], &mut ln_x_caches[0]),
        branch(&u_x[1], &p.ln_x[1], &mut ln_x_caches[1]),
        branch(&u_x[2], &p.ln_x[2], &mut ln_x_caches[2]),
        branch(&u_x[3], &p.ln_x[3], &mut ln_x_caches[3]),
    ];
    let a_h = [
        branch(&u_h[0], &p.ln_h[0], &mut ln_h_caches[0]),
        branch(&u_h[1], &p.ln_h[1], &mut ln_h_caches[1]),
        branch(&u_h[2], &p.ln_h[2], &mut ln_h_caches[2]),
        branch(&u_h[3], &p.ln_h[3], &mut ln_h_caches[3]),
    ];

    // pre = a_x + a_h + optional peephole + per-channel bias, then activate.
    let assemble = |gate: usize, peep: Option<(usize, &Tensor<T>)>| -> Tensor<T> {
        let mut pre = a_x[gate].clone();
        pre.add_assign(&a_h[gate]);
        if let Some((pi, c)) = peep {
            for ((slot, &w), &cv) in pre
                .data_mut()
                .iter_mut()
                .zip(p.peephole[pi].data())
                .zip(c.data())
            {
                *slot += w * cv;
            }
        }
        let ch = pre.rows();
        for ci in 0..ch {
            let b = p.bias[gate].data()[ci];
            for v in pre.row_mut(ci) {
                *v += b;
            }
        }
        pre
    };

    let i_gate = assemble(GATE_I, Some((PEEP_I, &state.c))).map(sigmoid);
    let f_gate = assemble(GATE_F, Some((PEEP_F, &state.c))).map(sigmoid);
    let g_gate = assemble(GATE_G, None).map(|v| scaled_tanh(v, scale, slope));

    let mut c_new = Tensor::zeros(&[p.out_channels(), p.freq_bins()]);
    for (((slot, &f), &c), (&i, &g)) in c_new
        .data_mut()
        .iter_mut()
        .zip(f_gate.data())
        .zip(state.c.data())
        .zip(i_gate.data().iter().zip(g_gate.data()))
    {
        *slot = f * c + i * g;
    }

    let o_gate = assemble(GATE_O, Some((PEEP_O, &c_new))).map(sigmoid);

    let mut h_new = Tensor::zeros(&[p.out_channels(), p.freq_bins()]);
    for ((slot, &o), &c) in h_new.data_mut().iter_mut().zip(o_gate.data()).zip(c_new.data()) {
        *slot = o * scaled_tanh(c, scale, slope);
    }

    let cache = if want_cache {
        Some(ConvLstmCache {
            x: x.clone(),
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            u_x,
            u_h,
            ln_x: ln_x_caches,
            ln_h: ln_h_caches,
            gate: [i_gate, f_gate, g_gate, o_gate],
            c_new: c_new.clone(),
        })
    } else {
        None
    };

    let state_new = ConvLstmState {
        h: h_new.clone(),
        c: c_new,
    };
    (h_new, state_new, cache)
}

/// Backward through one step. `dh_new`/`dc_new` are the gradients flowing
/// into this step's outputs (from the layer above and from the next step in
/// time). Parameter gradients accumulate into `grads`; the returned triple
/// is `(dx, dh_prev, dc_prev)` for chaining further back in time.
pub fn convlstm_step_backward<T: Scalar>(
    p: &ConvLstmParams<T>,
    opts: ConvLstmOpts,
    cache: &ConvLstmCache<T>,
    dh_new: &Tensor<T>,
    dc_new: &Tensor<T>,
    grads: &mut ConvLstmParams<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let scale = lit::<T>(opts.tanh_scale);
    let slope = lit::<T>(opts.tanh_slope);
    let [ref i_gate, ref f_gate, ref g_gate, ref o_gate] = cache.gate;
    let n = cache.c_new.len();

    let phi_c = cache.c_new.map(|v| scaled_tanh(v, scale, slope));

    // Output gate pre-activation gradient and its two consumers.
    let mut dpre_o = Tensor::zeros(&[o_gate.rows(), o_gate.cols()]);
    let mut dc = dc_new.clone();
    for idx in 0..n {
        let o = o_gate.data()[idx];
        let dh = dh_new.data()[idx];
        let dpo = dh * phi_c.data()[idx] * o * (T::one() - o);
        dpre_o.data_mut()[idx] = dpo;
        dc.data_mut()[idx] += dh * o * scaled_tanh_grad_from_output(phi_c.data()[idx], scale, slope)
            + dpo * p.peephole[PEEP_O].data()[idx];
    }
    for (g, (&d, &c)) in grads.peephole[PEEP_O]
        .data_mut()
        .iter_mut()
        .zip(dpre_o.data().iter().zip(cache.c_new.data()))
    {
        *g += d * c;
    }

    // Remaining gate pre-activation gradients and the carry into c_{t-1}.
    let mut dpre_i = Tensor::zeros(&[i_gate.rows(), i_gate.cols()]);
    let mut dpre_f = dpre_i.clone();
    let mut dpre_g = dpre_i.clone();
    let mut dc_prev = dpre_i.clone();
    for idx in 0..n {
        let dcv = dc.data()[idx];
        let i = i_gate.data()[idx];
        let f = f_gate.data()[idx];
        let g = g_gate.data()[idx];
        let dpi = dcv * g * i * (T::one() - i);
        let dpf = dcv * cache.c_prev.data()[idx] * f * (T::one() - f);
        let dpg = dcv * i * scaled_tanh_grad_from_output(g, scale, slope);
        dpre_i.data_mut()[idx] = dpi;
        dpre_f.data_mut()[idx] = dpf;
        dpre_g.data_mut()[idx] = dpg;
        dc_prev.data_mut()[idx] = dcv * f
            + dpi * p.peephole[PEEP_I].data()[idx]
            + dpf * p.peephole[PEEP_F].data()[idx];
    }
    for (g, (&d, &c)) in grads.peephole[PEEP_I]
        .data_mut()
        .iter_mut()
        .zip(dpre_i.data().iter().zip(cache.c_prev.data()))
    {
        *g += d * c;
    }
    for (g, (&d, &c)) in grads.peephole[PEEP_F]
        .data_mut()
        .iter_mut()
        .zip(dpre_f.data().iter().zip(cache.c_prev.data()))
    {
        *g += d * c;
    }

    let dpres = [&dpre_i, &dpre_f, &dpre_g, &dpre_o];

    // Per-channel biases collect row sums.
    for gate in 0..4 {
        let dpre = dpres[gate];
        for ch in 0..dpre.rows() {
            let mut s = T::zero();
            for &v in dpre.row(ch) {
                s += v;
            }
            grads.bias[gate].data_mut()[ch] += s;
        }
    }

    // Through the normalized branches and convolutions.
    let bins = cache.x.cols();
    let mut dx = Tensor::zeros(&[p.in_channels(), bins]);
    let mut dh_prev = Tensor::zeros(&[p.out_channels(), bins]);
    for gate in 0..4 {
        let dpre = dpres[gate];

        let du_x = if opts.layer_norm {
            let (du, dgain, dbias) = layer_norm_frame_backward(
                &cache.u_x[gate],
                &p.ln_x[gate].gain,
                cache.ln_x[gate],
                dpre,
            );
            grads.ln_x[gate].gain.add_assign(&dgain);
            grads.ln_x[gate].bias.add_assign(&dbias);
            du
        } else {
            (*dpre).clone()
        };
        let (ddx, dwx, _) = conv_freq_backward(&cache.x, &p.w_x[gate], &du_x);
        grads.w_x[gate].add_assign(&dwx);
        dx.add_assign(&ddx);

        let du_h = if opts.layer_norm {
            let (du, dgain, dbias) = layer_norm_frame_backward(
                &cache.u_h[gate],
                &p.ln_h[gate].gain,
                cache.ln_h[gate],
                dpre,
            );
            grads.ln_h[gate].gain.add_assign(&dgain);
            grads.ln_h[gate].bias.add_assign(&dbias);
            du
        } else {
            (*dpre).clone()
        };
        let (ddh, dwh, _) = conv_freq_backward(&cache.h_prev, &p.w_h[gate], &du_h);
        grads.w_h[gate].add_assign(&dwh);
        dh_prev.add_assign(&ddh);
    }

    (dx, dh_prev, dc_prev)
}
