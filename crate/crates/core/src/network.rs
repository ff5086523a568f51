//! Network assembly: frequency convolutions with SELU, a skip-wrapped
//! average pool, skip-wrapped ConvLSTM layers, skip-wrapped time
//! upsampling, a causal temporal convolution, and a 1x1 sigmoid head
//! producing the two-channel piano roll.
//!
//! Every cross-frame dependency lives in [`StreamState`], so running a
//! segment frame by frame with carried state is bit-identical to running
//! the whole input at once.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::act::{selu, selu_grad, sigmoid};
use crate::layers::conv::{conv_freq, conv_freq_backward};
use crate::layers::convlstm::{
    convlstm_step, convlstm_step_backward, convlstm_step_train, ConvLstmCache, ConvLstmOpts,
    ConvLstmParams, ConvLstmState, GATE_F, GATE_NAMES, PEEP_NAMES,
};
use crate::layers::pool::{avg_pool_freq, avg_pool_freq_backward};
use crate::layers::temporal::{causal_conv_time, causal_conv_time_backward};
use crate::layers::{TANH_SCALE, TANH_SLOPE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Frequency bins entering the network (CQT pitch bins).
    pub n_bins_in: usize,
    /// Input depth: one channel per stacked harmonic.
    pub in_channels: usize,
    /// Pre-recurrent frequency convolutions as (channels, kernel width).
    pub conv_stack: Vec<(usize, usize)>,
    pub pool_width: usize,
    /// Recurrent layers as (channels, kernel width).
    pub convlstm_stack: Vec<(usize, usize)>,
    pub upsample_factor: usize,
    pub time_conv_channels: usize,
    pub time_conv_width: usize,
    pub layer_norm: bool,
    pub tanh_scale: f64,
    pub tanh_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_bins_in: 264,
            in_channels: 4,
            conv_stack: vec![(16, 5), (32, 5)],
            pool_width: 3,
            convlstm_stack: vec![(48, 3), (48, 3)],
            upsample_factor: 2,
            time_conv_channels: 48,
            time_conv_width: 3,
            layer_norm: true,
            tanh_scale: TANH_SCALE,
            tanh_slope: TANH_SLOPE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NetworkError {
    BadConfig(String),
}

impl std::fmt::Display for NetworkError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NetworkError::BadConfig(msg) => write!(f, "invalid network config: {msg}"),
        }
    }
}

impl std::error::Error for NetworkError {}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |msg: String| Err(NetworkError::BadConfig(msg));
        if self.n_bins_in == 0 || self.in_channels == 0 {
            return bad("input dimensions must be positive".into());
        }
        if self.pool_width == 0 || self.n_bins_in % self.pool_width != 0 {
            return bad(format!(
                "pool width {} must divide {} input bins",
                self.pool_width, self.n_bins_in
            ));
        }
        if self.convlstm_stack.is_empty() {
            return bad("at least one recurrent layer is required".into());
        }
        if self.upsample_factor < 1 {
            return bad("upsample factor must be >= 1".into());
        }
        for &(ch, k) in self.conv_stack.iter().chain(&self.convlstm_stack) {
            if ch == 0 {
                return bad("layer channel counts must be positive".into());
            }
            if k % 2 == 0 {
                return bad(format!("kernel width {k} must be odd"));
            }
        }
        if self.time_conv_channels == 0 || self.time_conv_width == 0 {
            return bad("time conv dimensions must be positive".into());
        }
        Ok(())
    }

    /// Pitch rows after frequency pooling.
    pub fn n_pitches(&self) -> usize {
        self.n_bins_in / self.pool_width
    }

    pub fn opts(&self) -> ConvLstmOpts {
        ConvLstmOpts {
            layer_norm: self.layer_norm,
            tanh_scale: self.tanh_scale,
            tanh_slope: self.tanh_slope,
        }
    }

    /// Total learned scalar count; pure function of the config.
    pub fn param_count(&self) -> usize {
        Parameters::<f32>::zeros(self).param_count()
    }

    /// Canonical one-line description; hashed into the parameter file.
    pub fn signature(&self) -> String {
        let fmt_stack = |s: &[(usize, usize)]| {
            s.iter()
                .map(|&(c, k)| format!("{c}x{k}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "bins={};in_ch={};conv=[{}];pool={};lstm=[{}];up={};tc={}x{};ln={};tanh={},{}",
            self.n_bins_in,
            self.in_channels,
            fmt_stack(&self.conv_stack),
            self.pool_width,
            fmt_stack(&self.convlstm_stack),
            self.upsample_factor,
            self.time_conv_channels,
            self.time_conv_width,
            self.layer_norm,
            self.tanh_scale,
            self.tanh_slope,
        )
    }
}

/// A plain convolution layer's parameters (also used for 1x1 projections).
#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvLayer<T> {
    fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        ConvLayer {
            weight: Tensor::zeros(&[out_ch, in_ch, k]),
            bias: Tensor::zeros(&[out_ch]),
        }
    }
}

/// Every learned tensor of the network, enumerable in a stable order.
#[derive(Clone, Debug)]
pub struct Parameters<T> {
    pub config: NetworkConfig,
    pub conv_stack: Vec<ConvLayer<T>>,
    pub lstm: Vec<ConvLstmParams<T>>,
    /// 1x1 input projections for residual adds where channel counts differ.
    pub lstm_skip: Vec<Option<ConvLayer<T>>>,
    pub time_conv: ConvLayer<T>,
    pub head: ConvLayer<T>,
}

/// Gradients are shape-congruent with the parameters they belong to.
pub type Gradients<T> = Parameters<T>;

impl<T: Scalar> Parameters<T> {
    pub fn zeros(config: &NetworkConfig) -> Self {
        let mut conv_stack = Vec::new();
        let mut in_ch = config.in_channels;
        for &(ch, k) in &config.conv_stack {
            conv_stack.push(ConvLayer::zeros(ch, in_ch, k));
            in_ch = ch;
        }
        let bins = config.n_pitches();
        let mut lstm = Vec::new();
        let mut lstm_skip = Vec::new();
        for &(ch, k) in &config.convlstm_stack {
            lstm.push(ConvLstmParams::zeros(in_ch, ch, k, bins));
            lstm_skip.push(if ch != in_ch {
                Some(ConvLayer::zeros(ch, in_ch, 1))
            } else {
                None
            });
            in_ch = ch;
        }
        let time_conv = ConvLayer::zeros(config.time_conv_channels, in_ch, config.time_conv_width);
        let head = ConvLayer::zeros(2, config.time_conv_channels, 1);
        Parameters {
            config: config.clone(),
            conv_stack,
            lstm,
            lstm_skip,
            time_conv,
            head,
        }
    }

    /// Shape-congruent zero gradients (layer-norm gains zeroed too).
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.config);
        for l in &mut z.lstm {
            for ln in l.ln_x.iter_mut().chain(l.ln_h.iter_mut()) {
                ln.gain.fill(T::zero());
            }
        }
        z
    }

    /// Visits every tensor as (name, tensor) in a stable order.
    pub fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (n, layer) in self.conv_stack.iter().enumerate() {
            f(&format!("conv{n}.weight"), &layer.weight);
            f(&format!("conv{n}.bias"), &layer.bias);
        }
        for (n, l) in self.lstm.iter().enumerate() {
            for g in 0..4 {
                f(&format!("lstm{n}.w_x{}", GATE_NAMES[g]), &l.w_x[g]);
            }
            for g in 0..4 {
                f(&format!("lstm{n}.w_h{}", GATE_NAMES[g]), &l.w_h[g]);
            }
            for p in 0..3 {
                f(&format!("lstm{n}.peep_{}", PEEP_NAMES[p]), &l.peephole[p]);
            }
            for g in 0..4 {
                f(&format!("lstm{n}.b_{}", GATE_NAMES[g]), &l.bias[g]);
            }
            for g in 0..4 {
                f(&format!("lstm{n}.ln_x{}.gain", GATE_NAMES[g]), &l.ln_x[g].gain);
                f(&format!("lstm{n}.ln_x{}.bias", GATE_NAMES[g]), &l.ln_x[g].bias);
            }
            for g in 0..4 {
                f(&format!("lstm{n}.ln_h{}.gain", GATE_NAMES[g]), &l.ln_h[g].gain);
                f(&format!("lstm{n}.ln_h{}.bias", GATE_NAMES[g]), &l.ln_h[g].bias);
            }
            if let Some(proj) = &self.lstm_skip[n] {
                f(&format!("lstm{n}.skip.weight"), &proj.weight);
                f(&format!("lstm{n}.skip.bias"), &proj.bias);
            }
        }
        f("time_conv.weight", &self.time_conv.weight);
        f("time_conv.bias", &self.time_conv.bias);
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    /// Mutable twin of [`Parameters::for_each`], same order.
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (n, layer) in self.conv_stack.iter_mut().enumerate() {
            f(&format!("conv{n}.weight"), &mut layer.weight);
            f(&format!("conv{n}.bias"), &mut layer.bias);
        }
        for (n, l) in self.lstm.iter_mut().enumerate() {
            for g in 0..4 {
                f(&format!("lstm{n}.w_x{}", GATE_NAMES[g]), &mut l.w_x[g]);
            }
            for g in 0..4 {
                f(&format!("lstm{n}.w_h{}", GATE_NAMES[g]), &mut l.w_h[g]);
            }
            for p in 0..3 {
                f(&format!("lstm{n}.peep_{}", PEEP_NAMES[p]), &mut l.peephole[p]);
            }
            for g in 0..4 {
                f(&format!("lstm{n}.b_{}", GATE_NAMES[g]), &mut l.bias[g]);
            }
            for g in 0..4 {
                f(&format!("lstm{n}.ln_x{}.gain", GATE_NAMES[g]), &mut l.ln_x[g].gain);
                f(&format!("lstm{n}.ln_x{}.bias", GATE_NAMES[g]), &mut l.ln_x[g].bias);
            }
            for g in 0..4 {
                f(&format!("lstm{n}.ln_h{}.gain", GATE_NAMES[g]), &mut l.ln_h[g].gain);
                f(&format!("lstm{n}.ln_h{}.bias", GATE_NAMES[g]), &mut l.ln_h[g].bias);
            }
            if let Some(proj) = self.lstm_skip[n].as_mut() {
                f(&format!("lstm{n}.skip.weight"), &mut proj.weight);
                f(&format!("lstm{n}.skip.bias"), &mut proj.bias);
            }
        }
        f("time_conv.weight", &mut self.time_conv.weight);
        f("time_conv.bias", &mut self.time_conv.bias);
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, t| n += t.len());
        n
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(&mut |_, t| ok &= t.all_finite());
        ok
    }

    /// Tensors in the same stable order as [`Parameters::for_each`].
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.conv_stack {
            out.push(&layer.weight);
            out.push(&layer.bias);
        }
        for (l, skip) in self.lstm.iter().zip(&self.lstm_skip) {
            out.extend(l.w_x.iter());
            out.extend(l.w_h.iter());
            out.extend(l.peephole.iter());
            out.extend(l.bias.iter());
            for ln in &l.ln_x {
                out.push(&ln.gain);
                out.push(&ln.bias);
            }
            for ln in &l.ln_h {
                out.push(&ln.gain);
                out.push(&ln.bias);
            }
            if let Some(proj) = skip {
                out.push(&proj.weight);
                out.push(&proj.bias);
            }
        }
        out.push(&self.time_conv.weight);
        out.push(&self.time_conv.bias);
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    /// Mutable twin of [`Parameters::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for layer in &mut self.conv_stack {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        for (l, skip) in self.lstm.iter_mut().zip(self.lstm_skip.iter_mut()) {
            out.extend(l.w_x.iter_mut());
            out.extend(l.w_h.iter_mut());
            out.extend(l.peephole.iter_mut());
            out.extend(l.bias.iter_mut());
            for ln in &mut l.ln_x {
                out.push(&mut ln.gain);
                out.push(&mut ln.bias);
            }
            for ln in &mut l.ln_h {
                out.push(&mut ln.gain);
                out.push(&mut ln.bias);
            }
            if let Some(proj) = skip.as_mut() {
                out.push(&mut proj.weight);
                out.push(&mut proj.bias);
            }
        }
        out.push(&mut self.time_conv.weight);
        out.push(&mut self.time_conv.bias);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

/// Draws a standard normal via Box-Muller from the seeded stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-300..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Fills a weight tensor with an orthogonal matrix (gain 1): the tensor is
/// viewed as `[shape[0], rest]`; whichever side is smaller becomes the
/// orthonormal one.
fn orthogonal_fill<T: Scalar>(t: &mut Tensor<T>, rng: &mut ChaCha8Rng) {
    let rows = t.shape()[0];
    let cols = t.len() / rows;
    let (small, large, transpose) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };

    // Gram-Schmidt with reorthogonalization over `small` vectors of
    // dimension `large`.
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(small);
    while basis.len() < small {
        let mut v: Vec<f64> = (0..large).map(|_| normal(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vi, bi) in v.iter_mut().zip(b) {
                    *vi -= dot * bi;
                }
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }

    let data = t.data_mut();
    for r in 0..rows {
        for c in 0..cols {
            let v = if transpose { basis[c][r] } else { basis[r][c] };
            data[r * cols + c] = T::from_f64(v);
        }
    }
}

/// Orthogonal initialization: every weight tensor orthogonal with gain 1,
/// biases zero except the forget-gate bias (1), layer-norm gain 1 / bias 0.
/// Deterministic in the seed.
pub fn init_parameters<T: Scalar>(config: &NetworkConfig, seed: u64) -> Parameters<T> {
    config.validate().expect("invalid network config");
    let mut p = Parameters::<T>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut p.conv_stack {
        orthogonal_fill(&mut layer.weight, &mut rng);
    }
    for (l, skip) in p.lstm.iter_mut().zip(p.lstm_skip.iter_mut()) {
        for g in 0..4 {
            orthogonal_fill(&mut l.w_x[g], &mut rng);
        }
        for g in 0..4 {
            orthogonal_fill(&mut l.w_h[g], &mut rng);
        }
        for pe in 0..3 {
            orthogonal_fill(&mut l.peephole[pe], &mut rng);
        }
        l.bias[GATE_F].fill(T::one());
        if let Some(proj) = skip {
            orthogonal_fill(&mut proj.weight, &mut rng);
        }
    }
    orthogonal_fill(&mut p.time_conv.weight, &mut rng);
    orthogonal_fill(&mut p.head.weight, &mut rng);
    p
}

/// Per-stream recurrent carry: one state per ConvLSTM layer plus the causal
/// time-conv history window (most recent last).
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState<T> {
    pub lstm: Vec<ConvLstmState<T>>,
    pub time_hist: Vec<Tensor<T>>,
}

impl<T: Scalar> StreamState<T> {
    pub fn new(config: &NetworkConfig) -> Self {
        let bins = config.n_pitches();
        let lstm = config
            .convlstm_stack
            .iter()
            .map(|&(ch, _)| ConvLstmState::zeros(ch, bins))
            .collect();
        let last_ch = config.convlstm_stack.last().expect("validated config").0;
        let hist_len = config.time_conv_width.saturating_sub(1);
        StreamState {
            lstm,
            time_hist: vec![Tensor::zeros(&[last_ch, bins]); hist_len],
        }
    }

    pub fn reset(&mut self) {
        for s in &mut self.lstm {
            s.reset();
        }
        for t in &mut self.time_hist {
            t.fill(T::zero());
        }
    }
}

/// Gradient flowing into a segment's incoming state; discarded by the
/// trainer at segment boundaries (truncated BPTT).
#[derive(Clone, Debug)]
pub struct StateGrad<T> {
    pub lstm: Vec<ConvLstmState<T>>,
    pub time_hist: Vec<Tensor<T>>,
}

struct FrameCache<T> {
    /// Input to each conv layer; `conv_in[0]` is the network input frame.
    conv_in: Vec<Tensor<T>>,
    /// Pre-SELU output of each conv layer.
    conv_pre: Vec<Tensor<T>>,
    /// Input feature map of each recurrent block (before skip).
    lstm_in: Vec<Tensor<T>>,
    lstm_cache: Vec<ConvLstmCache<T>>,
}

/// Activation cache of one forward segment.
pub struct NetCache<T> {
    frames: Vec<FrameCache<T>>,
    /// Incoming time-conv history (window content for the first outputs).
    init_hist: Vec<Tensor<T>>,
    /// Upsample-block outputs: the time conv's input stream.
    up_stream: Vec<Tensor<T>>,
    tc_pre: Vec<Tensor<T>>,
    tc_act: Vec<Tensor<T>>,
    roll: Vec<Tensor<T>>,
}

impl<T: Scalar> NetCache<T> {
    pub fn n_input_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_output_frames(&self) -> usize {
        self.roll.len()
    }
}

fn two<T: Scalar>() -> T {
    T::one() + T::one()
}

/// Conv stack and recurrent stack for one input frame; returns the feature
/// map entering the upsample block.
fn body_forward<T: Scalar>(
    p: &Parameters<T>,
    x: &Tensor<T>,
    state: &mut StreamState<T>,
    mut cache: Option<&mut FrameCache<T>>,
) -> Tensor<T> {
    let cfg = &p.config;
    assert_eq!(
        x.shape(),
        &[cfg.in_channels, cfg.n_bins_in],
        "network input frame shape mismatch"
    );
    let opts = cfg.opts();

    let mut a = x.clone();
    for layer in &p.conv_stack {
        let pre = conv_freq(&a, &layer.weight, Some(&layer.bias));
        let act = pre.map(selu);
        if let Some(c) = cache.as_deref_mut() {
            c.conv_in.push(a);
            c.conv_pre.push(pre);
        }
        a = act;
    }

    // Skip-wrapped pool: the main branch and the pooled identity coincide
    // here (pooling keeps channels), so the residual add doubles the map.
    let pooled = avg_pool_freq(&a, cfg.pool_width);
    let mut a = pooled.clone();
    a.add_assign(&pooled);

    for (li, lp) in p.lstm.iter().enumerate() {
        let (h, s_new) = if let Some(c) = cache.as_deref_mut() {
            let (h, s_new, lc) = convlstm_step_train(&a, &state.lstm[li], lp, opts);
            c.lstm_cache.push(lc);
            (h, s_new)
        } else {
            convlstm_step(&a, &state.lstm[li], lp, opts)
        };
        state.lstm[li] = s_new;
        let mut out = h;
        match &p.lstm_skip[li] {
            Some(proj) => out.add_assign(&conv_freq(&a, &proj.weight, Some(&proj.bias))),
            None => out.add_assign(&a),
        }
        if let Some(c) = cache.as_deref_mut() {
            c.lstm_in.push(a);
        }
        a = out;
    }
    a
}

/// Emits the `upsample_factor` output frames for one recurrent-stack output.
fn emit_outputs<T: Scalar>(
    p: &Parameters<T>,
    a: &Tensor<T>,
    state: &mut StreamState<T>,
    mut cache: Option<&mut NetCache<T>>,
) -> Vec<Tensor<T>> {
    let cfg = &p.config;
    let mut rolls = Vec::with_capacity(cfg.upsample_factor);
    for _ in 0..cfg.upsample_factor {
        // Skip-wrapped upsample: repeated frame plus repeated identity.
        let mut u = a.clone();
        u.add_assign(a);

        let mut window: Vec<&Tensor<T>> = state.time_hist.iter().collect();
        window.push(&u);
        let tc_pre = causal_conv_time(&window, &p.time_conv.weight, &p.time_conv.bias);
        let tc_act = tc_pre.map(selu);
        let roll = conv_freq(&tc_act, &p.head.weight, Some(&p.head.bias)).map(sigmoid);

        if let Some(c) = cache.as_deref_mut() {
            c.up_stream.push(u.clone());
            c.tc_pre.push(tc_pre);
            c.tc_act.push(tc_act);
            c.roll.push(roll.clone());
        }
        if !state.time_hist.is_empty() {
            state.time_hist.remove(0);
            state.time_hist.push(u);
        }
        rolls.push(roll);
    }
    rolls
}

/// Streaming forward pass: `frames.len() * upsample_factor` output frames,
/// each `[2, n_pitches]` with channel 0 = articulation, 1 = sustain. The
/// state advances exactly `frames.len()` recurrent steps.
pub fn forward<T: Scalar>(
    p: &Parameters<T>,
    frames: &[Tensor<T>],
    state: &mut StreamState<T>,
) -> Vec<Tensor<T>> {
    let mut out = Vec::with_capacity(frames.len() * p.config.upsample_factor);
    for x in frames {
        let a = body_forward(p, x, state, None);
        out.extend(emit_outputs(p, &a, state, None));
    }
    out
}

/// Forward pass that records every activation needed by [`backward`].
pub fn forward_train<T: Scalar>(
    p: &Parameters<T>,
    frames: &[Tensor<T>],
    state: &mut StreamState<T>,
) -> (Vec<Tensor<T>>, NetCache<T>) {
    let mut cache = NetCache {
        frames: Vec::with_capacity(frames.len()),
        init_hist: state.time_hist.clone(),
        up_stream: Vec::new(),
        tc_pre: Vec::new(),
        tc_act: Vec::new(),
        roll: Vec::new(),
    };
    let mut out = Vec::with_capacity(frames.len() * p.config.upsample_factor);
    for x in frames {
        let mut fc = FrameCache {
            conv_in: Vec::new(),
            conv_pre: Vec::new(),
            lstm_in: Vec::new(),
            lstm_cache: Vec::new(),
        };
        let a = body_forward(p, x, state, Some(&mut fc));
        cache.frames.push(fc);
        out.extend(emit_outputs(p, &a, state, Some(&mut cache)));
    }
    (out, cache)
}

/// Exact reverse-mode gradients through the whole segment and through time
/// within it. Returns the parameter gradients and the gradient w.r.t. the
/// segment's incoming state (which truncated BPTT discards).
pub fn backward<T: Scalar>(
    p: &Parameters<T>,
    cache: &NetCache<T>,
    d_roll: &[Tensor<T>],
) -> (Gradients<T>, StateGrad<T>) {
    let cfg = &p.config;
    let opts = cfg.opts();
    let factor = cfg.upsample_factor;
    let n_out = cache.roll.len();
    let n_in = cache.frames.len();
    assert_eq!(d_roll.len(), n_out, "output gradient count mismatch");
    let hist_len = cache.init_hist.len();

    let mut grads = p.zeros_like();

    // Head and temporal stages, scattering into the extended input stream
    // (incoming history followed by this segment's upsampled frames).
    let last_ch = cfg.convlstm_stack.last().expect("validated config").0;
    let bins = cfg.n_pitches();
    let mut d_ext: Vec<Tensor<T>> = vec![Tensor::zeros(&[last_ch, bins]); hist_len + n_out];
    for u in 0..n_out {
        let roll = &cache.roll[u];
        let mut dz_head = d_roll[u].clone();
        for (g, &y) in dz_head.data_mut().iter_mut().zip(roll.data()) {
            *g *= y * (T::one() - y);
        }
        let (d_tc_act, dw_head, db_head) =
            conv_freq_backward(&cache.tc_act[u], &p.head.weight, &dz_head);
        grads.head.weight.add_assign(&dw_head);
        grads.head.bias.add_assign(&db_head);

        let mut d_tc_pre = d_tc_act;
        for (g, &z) in d_tc_pre.data_mut().iter_mut().zip(cache.tc_pre[u].data()) {
            *g *= selu_grad(z);
        }

        let mut window: Vec<&Tensor<T>> = Vec::with_capacity(cfg.time_conv_width);
        for tap in 0..cfg.time_conv_width {
            let ext_idx = u + tap;
            window.push(if ext_idx < hist_len {
                &cache.init_hist[ext_idx]
            } else {
                &cache.up_stream[ext_idx - hist_len]
            });
        }
        let (d_window, dw_tc, db_tc) =
            causal_conv_time_backward(&window, &p.time_conv.weight, &d_tc_pre);
        grads.time_conv.weight.add_assign(&dw_tc);
        grads.time_conv.bias.add_assign(&db_tc);
        for (tap, dw) in d_window.into_iter().enumerate() {
            d_ext[u + tap].add_assign(&dw);
        }
    }

    // Upsample block backward: each recurrent output fed `factor` doubled
    // copies, so its gradient is twice the sum over the group.
    let mut d_above: Vec<Tensor<T>> = Vec::with_capacity(n_in);
    for t in 0..n_in {
        let mut acc = Tensor::zeros(&[last_ch, bins]);
        for j in 0..factor {
            acc.add_assign(&d_ext[hist_len + t * factor + j]);
        }
        acc.scale(two::<T>());
        d_above.push(acc);
    }

    // Recurrent stack: top layer first, each walked backward through time.
    let mut lstm_state_grads: Vec<ConvLstmState<T>> = Vec::with_capacity(p.lstm.len());
    for li in (0..p.lstm.len()).rev() {
        let lp = &p.lstm[li];
        let out_ch = lp.out_channels();
        let in_ch = lp.in_channels();
        let mut dh_carry = Tensor::zeros(&[out_ch, bins]);
        let mut dc_carry = Tensor::zeros(&[out_ch, bins]);
        let mut d_below: Vec<Tensor<T>> = vec![Tensor::zeros(&[in_ch, bins]); n_in];
        for t in (0..n_in).rev() {
            let mut dh_total = d_above[t].clone();
            dh_total.add_assign(&dh_carry);
            let (dx, dh_prev, dc_prev) = convlstm_step_backward(
                lp,
                opts,
                &cache.frames[t].lstm_cache[li],
                &dh_total,
                &dc_carry,
                &mut grads.lstm[li],
            );
            let mut d_in = dx;
            match &p.lstm_skip[li] {
                Some(proj) => {
                    let (d_skip, dw, db) = conv_freq_backward(
                        &cache.frames[t].lstm_in[li],
                        &proj.weight,
                        &d_above[t],
                    );
                    let gproj = grads.lstm_skip[li].as_mut().expect("skip shapes match");
                    gproj.weight.add_assign(&dw);
                    gproj.bias.add_assign(&db);
                    d_in.add_assign(&d_skip);
                }
                None => d_in.add_assign(&d_above[t]),
            }
            d_below[t] = d_in;
            dh_carry = dh_prev;
            dc_carry = dc_prev;
        }
        lstm_state_grads.push(ConvLstmState {
            h: dh_carry,
            c: dc_carry,
        });
        d_above = d_below;
    }
    lstm_state_grads.reverse();

    // Pool block and conv stack, frame by frame.
    for t in 0..n_in {
        let mut d_pool_out = d_above[t].clone();
        d_pool_out.scale(two::<T>());
        let mut d_act = avg_pool_freq_backward(&d_pool_out, cfg.pool_width);
        let fc = &cache.frames[t];
        for ci in (0..p.conv_stack.len()).rev() {
            let mut dz = d_act;
            for (g, &z) in dz.data_mut().iter_mut().zip(fc.conv_pre[ci].data()) {
                *g *= selu_grad(z);
            }
            let (dx, dw, db) = conv_freq_backward(&fc.conv_in[ci], &p.conv_stack[ci].weight, &dz);
            grads.conv_stack[ci].weight.add_assign(&dw);
            grads.conv_stack[ci].bias.add_assign(&db);
            d_act = dx;
        }
    }

    let state_grad = StateGrad {
        lstm: lstm_state_grads,
        time_hist: d_ext[..hist_len].to_vec(),
    };
    (grads, state_grad)
}

// ---------------------------------------------------------------------------
// Parameter file format: magic "CRNP", version u16, config digest u64,
// tensor count u32, then per tensor (name length u16, name bytes, dim count
// u8, dims u32, f32 payload), trailing CRC32. All integers little-endian.
// ---------------------------------------------------------------------------

pub const MODEL_MAGIC: &[u8; 4] = b"CRNP";
pub const MODEL_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelIoError {
    Truncated,
    BadMagic,
    BadVersion(u16),
    ChecksumMismatch,
    TensorNameMismatch { expected: String, found: String },
    ShapeMismatch { name: String, expected: Vec<u32>, found: Vec<u32> },
    TensorCountMismatch { expected: usize, found: usize },
    ConfigDigestMismatch,
}

impl std::fmt::Display for ModelIoError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelIoError::Truncated => write!(f, "model file truncated"),
            ModelIoError::BadMagic => write!(f, "not a model file (bad magic)"),
            ModelIoError::BadVersion(v) => write!(f, "unsupported model format version {v}"),
            ModelIoError::ChecksumMismatch => write!(f, "model file checksum mismatch"),
            ModelIoError::TensorNameMismatch { expected, found } => {
                write!(f, "tensor name mismatch: expected '{expected}', file has '{found}'")
            }
            ModelIoError::ShapeMismatch { name, expected, found } => write!(
                f,
                "shape mismatch for tensor '{name}': config expects {expected:?}, file has {found:?}"
            ),
            ModelIoError::TensorCountMismatch { expected, found } => {
                write!(f, "tensor count mismatch: config expects {expected}, file has {found}")
            }
            ModelIoError::ConfigDigestMismatch => {
                write!(f, "model was saved under a different configuration")
            }
        }
    }
}

impl std::error::Error for ModelIoError {}

fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn config_digest(config: &NetworkConfig) -> u64 {
    fnv1a64(config.signature().as_bytes())
}

/// Serializes parameters losslessly (f32 payloads, little-endian).
pub fn save_parameters(p: &Parameters<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(&p.config).to_le_bytes());
    let mut count = 0u32;
    p.for_each(&mut |_, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    p.for_each(&mut |name, t| {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    });
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelIoError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads parameters saved by [`save_parameters`], verifying the checksum,
/// the per-tensor names and shapes against `config`, and the config digest.
pub fn load_parameters(bytes: &[u8], config: &NetworkConfig) -> Result<Parameters<f32>, ModelIoError> {
    if bytes.len() < 18 {
        return Err(ModelIoError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32(body) != stored_crc {
        return Err(ModelIoError::ChecksumMismatch);
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(ModelIoError::BadVersion(version));
    }
    let digest = r.u64()?;
    let n_tensors = r.u32()? as usize;

    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    let skeleton = Parameters::<f32>::zeros(config);
    skeleton.for_each(&mut |name, t| expected.push((name.to_string(), t.shape().to_vec())));
    if n_tensors != expected.len() {
        return Err(ModelIoError::TensorCountMismatch {
            expected: expected.len(),
            found: n_tensors,
        });
    }

    let mut loaded: Vec<Tensor<f32>> = Vec::with_capacity(n_tensors);
    for (exp_name, exp_shape) in &expected {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
        let ndim = r.take(1)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        if &name != exp_name {
            return Err(ModelIoError::TensorNameMismatch {
                expected: exp_name.clone(),
                found: name,
            });
        }
        if &dims != exp_shape {
            return Err(ModelIoError::ShapeMismatch {
                name,
                expected: exp_shape.iter().map(|&d| d as u32).collect(),
                found: dims.iter().map(|&d| d as u32).collect(),
            });
        }
        let len: usize = dims.iter().product();
        let raw = r.take(len * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push(Tensor::from_vec(&dims, data));
    }

    if digest != config_digest(config) {
        return Err(ModelIoError::ConfigDigestMismatch);
    }

    let mut p = skeleton;
    let mut iter = loaded.into_iter();
    p.for_each_mut(&mut |_, t| *t = iter.next().expect("counted above"));
    Ok(p)
}
