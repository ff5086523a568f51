//! Training loop: Adam over truncated-BPTT segments with recurrent state
//! passed through across minibatches.
//!
//! A fixed set of lanes streams through the dataset. Each optimizer step,
//! every lane runs forward over its next `segment_len` frames from its
//! carried state, backpropagates within the segment only (the gradient
//! into the incoming state is computed and dropped), and the lane
//! gradients are averaged in lane order. When a lane exhausts its clip it
//! takes the next clip from a seeded shuffle and resets its state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::network::{
    backward, fnv1a64, forward_train, Gradients, NetworkConfig, Parameters, StreamState,
};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Prediction clamp inside the BCE logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Input-rate frames per lane per optimizer step.
    pub segment_len: usize,
    pub lanes: usize,
    /// Optimizer steps to run.
    pub steps: usize,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Loss weight on articulation-channel positive cells.
    pub pos_weight_art: f64,
    /// Save a checkpoint every N steps (0 = only the final model).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            segment_len: 128,
            lanes: 4,
            steps: 200,
            grad_clip: 5.0,
            pos_weight_art: 4.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainError {
    EmptyDataset,
    EmptyClip { clip: usize },
    ClipShapeMismatch { clip: usize, detail: String },
    NonFiniteGradient { step: usize },
    NonFiniteLoss { step: usize },
    BadConfig(String),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::EmptyDataset => write!(f, "empty dataset"),
            TrainError::EmptyClip { clip } => write!(f, "clip {clip} has no frames"),
            TrainError::ClipShapeMismatch { clip, detail } => {
                write!(f, "clip {clip}: {detail}")
            }
            TrainError::NonFiniteGradient { step } => {
                write!(f, "non-finite gradient at step {step}; training aborted")
            }
            TrainError::NonFiniteLoss { step } => {
                write!(f, "non-finite loss at step {step}; training aborted")
            }
            TrainError::BadConfig(msg) => write!(f, "invalid train config: {msg}"),
        }
    }
}

impl std::error::Error for TrainError {}

/// One training clip: network input frames and target roll frames at the
/// output rate (input length times the upsample factor).
#[derive(Clone, Debug)]
pub struct TrainClip {
    pub input: Vec<Tensor<f32>>,
    pub target: Vec<Tensor<f32>>,
}

/// Mean weighted binary cross-entropy over all cells of a frame sequence,
/// with the analytic gradient w.r.t. the predictions. Channel 0 is the
/// articulation plane; its positive cells carry `pos_weight_art`.
pub fn bce_loss<T: Scalar>(
    pred: &[Tensor<T>],
    target: &[Tensor<T>],
    pos_weight_art: f64,
) -> (f64, Vec<Tensor<T>>) {
    assert_eq!(pred.len(), target.len(), "prediction/target frame count mismatch");
    let n_cells: usize = pred.iter().map(|t| t.len()).sum();
    assert!(n_cells > 0, "empty loss");
    let inv_n = 1.0 / n_cells as f64;
    let lo = lit::<T>(BCE_CLAMP);
    let hi = lit::<T>(1.0 - BCE_CLAMP);
    let w_art = lit::<T>(pos_weight_art);
    let inv_n_t = lit::<T>(inv_n);

    let mut loss = 0.0f64;
    let mut grads = Vec::with_capacity(pred.len());
    for (p_frame, y_frame) in pred.iter().zip(target) {
        assert!(p_frame.same_shape(y_frame), "prediction/target shape mismatch");
        let cols = p_frame.cols();
        let mut g = Tensor::zeros(&[p_frame.rows(), cols]);
        for (idx, (&p_raw, &y)) in p_frame.data().iter().zip(y_frame.data()).enumerate() {
            let p = if p_raw < lo {
                lo
            } else if p_raw > hi {
                hi
            } else {
                p_raw
            };
            let is_articulation = idx < cols;
            let w = if is_articulation && y > T::zero() {
                w_art
            } else {
                T::one()
            };
            loss -= (w * y * p.ln() + (T::one() - y) * (T::one() - p).ln()).as_f64();
            let dv = (-w * y / p + (T::one() - y) / (T::one() - p)) * inv_n_t;
            g.data_mut()[idx] = dv;
        }
        grads.push(g);
    }
    (loss * inv_n, grads)
}

/// Adam moments plus hyperparameters; shape-congruent with the parameters.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Parameters<T>,
    pub v: Parameters<T>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Parameters<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients refuse the step
/// and leave parameters and moments untouched.
pub fn adam_step<T: Scalar>(
    p: &mut Parameters<T>,
    g: &Gradients<T>,
    a: &mut AdamState<T>,
) -> Result<(), TrainError> {
    if !g.all_finite() {
        return Err(TrainError::NonFiniteGradient { step: a.t as usize });
    }
    a.t += 1;
    let b1 = lit::<T>(a.beta1);
    let b2 = lit::<T>(a.beta2);
    let one = T::one();
    let corr1 = lit::<T>(1.0 - a.beta1.powi(a.t as i32));
    let corr2 = lit::<T>(1.0 - a.beta2.powi(a.t as i32));
    let lr = lit::<T>(a.lr);
    let eps = lit::<T>(a.eps);

    let mut pt = p.tensors_mut();
    let gt = g.tensors();
    let mut mt = a.m.tensors_mut();
    let mut vt = a.v.tensors_mut();
    for i in 0..pt.len() {
        let pd = pt[i].data_mut();
        let gd = gt[i].data();
        let md = mt[i].data_mut();
        let vd = vt[i].data_mut();
        for j in 0..pd.len() {
            let grad = gd[j];
            md[j] = b1 * md[j] + (one - b1) * grad;
            vd[j] = b2 * vd[j] + (one - b2) * grad * grad;
            let m_hat = md[j] / corr1;
            let v_hat = vd[j] / corr2;
            pd[j] = pd[j] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One lane's streaming position: current clip, next frame, carried state.
#[derive(Clone, Debug)]
pub struct TrainLane {
    pub clip: usize,
    pub cursor: usize,
    pub state: StreamState<f32>,
}

/// What the observer sees after each lane segment.
#[derive(Clone, Debug)]
pub struct SegmentTrace {
    pub step: usize,
    pub lane: usize,
    pub clip: usize,
    pub frame_start: usize,
    pub frame_end: usize,
    pub loss: f64,
    /// True when this segment starts a freshly assigned clip.
    pub fresh_clip: bool,
    pub state_before: u64,
    pub state_after: u64,
}

pub fn fingerprint_state(state: &StreamState<f32>) -> u64 {
    let mut bytes = Vec::new();
    for s in &state.lstm {
        for t in [&s.h, &s.c] {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    for t in &state.time_hist {
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fnv1a64(&bytes)
}

/// Optimizer steps in one pass over the dataset: every clip contributes
/// each of its segments once, spread over the lanes.
pub fn steps_per_epoch(dataset: &[TrainClip], cfg: &TrainConfig) -> usize {
    let total: usize = dataset
        .iter()
        .map(|c| c.input.len().div_ceil(cfg.segment_len))
        .sum();
    total.div_ceil(cfg.lanes)
}

fn validate_dataset(
    dataset: &[TrainClip],
    net: &NetworkConfig,
) -> Result<(), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (i, clip) in dataset.iter().enumerate() {
        if clip.input.is_empty() {
            return Err(TrainError::EmptyClip { clip: i });
        }
        if clip.target.len() != clip.input.len() * net.upsample_factor {
            return Err(TrainError::ClipShapeMismatch {
                clip: i,
                detail: format!(
                    "{} input frames need {} target frames, got {}",
                    clip.input.len(),
                    clip.input.len() * net.upsample_factor,
                    clip.target.len()
                ),
            });
        }
        for f in &clip.input {
            if f.shape() != [net.in_channels, net.n_bins_in] {
                return Err(TrainError::ClipShapeMismatch {
                    clip: i,
                    detail: format!(
                        "input frame shape {:?}, expected [{}, {}]",
                        f.shape(),
                        net.in_channels,
                        net.n_bins_in
                    ),
                });
            }
        }
        for f in &clip.target {
            if f.shape() != [2, net.n_pitches()] {
                return Err(TrainError::ClipShapeMismatch {
                    clip: i,
                    detail: format!(
                        "target frame shape {:?}, expected [2, {}]",
                        f.shape(),
                        net.n_pitches()
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Deterministic clip dispenser: a fresh seeded shuffle per pass.
struct ClipQueue {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl ClipQueue {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        let mut q = ClipQueue {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        q.shuffle();
        q
    }

    fn shuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.shuffle();
        }
        let c = self.order[self.pos];
        self.pos += 1;
        c
    }
}

pub fn train(
    dataset: &[TrainClip],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Parameters<f32>, Vec<f64>), TrainError> {
    train_with_hooks(dataset, net, cfg, seed, &mut |_| {}, &mut |_, _| {})
}

pub fn train_with_observer(
    dataset: &[TrainClip],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(&SegmentTrace),
) -> Result<(Parameters<f32>, Vec<f64>), TrainError> {
    train_with_hooks(dataset, net, cfg, seed, observer, &mut |_, _| {})
}

/// Full-control variant: `checkpoint` fires after every
/// `cfg.checkpoint_every` optimizer steps (never when that is 0).
pub fn train_with_hooks(
    dataset: &[TrainClip],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(&SegmentTrace),
    checkpoint: &mut dyn FnMut(usize, &Parameters<f32>),
) -> Result<(Parameters<f32>, Vec<f64>), TrainError> {
    if cfg.lanes == 0 || cfg.segment_len == 0 {
        return Err(TrainError::BadConfig("lanes and segment_len must be positive".into()));
    }
    validate_dataset(dataset, net)?;
    net.validate()
        .map_err(|e| TrainError::BadConfig(e.to_string()))?;

    let mut params = crate::network::init_parameters::<f32>(net, seed);
    let mut adam = AdamState::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut queue = ClipQueue::new(dataset.len(), ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
    let mut lanes: Vec<TrainLane> = (0..cfg.lanes)
        .map(|_| TrainLane {
            clip: queue.next(),
            cursor: 0,
            state: StreamState::new(net),
        })
        .collect();
    let mut fresh: Vec<bool> = vec![true; cfg.lanes];

    let mut loss_curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut total: Gradients<f32> = params.zeros_like();
        let mut step_loss = 0.0;
        for (li, lane) in lanes.iter_mut().enumerate() {
            if lane.cursor >= dataset[lane.clip].input.len() {
                lane.clip = queue.next();
                lane.cursor = 0;
                lane.state.reset();
                fresh[li] = true;
            }
            let clip = &dataset[lane.clip];
            let start = lane.cursor;
            let end = (start + cfg.segment_len).min(clip.input.len());
            let up = net.upsample_factor;

            let state_before = fingerprint_state(&lane.state);
            let (rolls, cache) = forward_train(&params, &clip.input[start..end], &mut lane.state);
            let state_after = fingerprint_state(&lane.state);
            let (loss, d_roll) =
                bce_loss(&rolls, &clip.target[start * up..end * up], cfg.pos_weight_art);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }
            // Truncation: the gradient into the incoming state is dropped.
            let (grads, _state_grad) = backward(&params, &cache, &d_roll);
            for (acc, g) in total.tensors_mut().into_iter().zip(grads.tensors()) {
                acc.add_assign(g);
            }
            step_loss += loss;

            observer(&SegmentTrace {
                step,
                lane: li,
                clip: lane.clip,
                frame_start: start,
                frame_end: end,
                loss,
                fresh_clip: fresh[li],
                state_before,
                state_after,
            });
            fresh[li] = false;
            lane.cursor = end;
        }

        let inv_lanes = 1.0 / cfg.lanes as f32;
        for t in total.tensors_mut() {
            t.scale(inv_lanes);
        }
        if cfg.grad_clip > 0.0 {
            let mut sq = 0.0f64;
            for t in total.tensors() {
                for &v in t.data() {
                    sq += (v as f64) * (v as f64);
                }
            }
            let norm = sq.sqrt();
            if norm > cfg.grad_clip {
                let scale = (cfg.grad_clip / norm) as f32;
                for t in total.tensors_mut() {
                    t.scale(scale);
                }
            }
        }
        adam_step(&mut params, &total, &mut adam)
            .map_err(|_| TrainError::NonFiniteGradient { step })?;
        loss_curve.push(step_loss / cfg.lanes as f64);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            checkpoint(step + 1, &params);
        }
    }
    Ok((params, loss_curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_parameters;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            n_bins_in: 12,
            in_channels: 2,
            conv_stack: vec![(3, 3)],
            pool_width: 3,
            convlstm_stack: vec![(4, 3)],
            upsample_factor: 2,
            time_conv_channels: 4,
            time_conv_width: 3,
            ..NetworkConfig::default()
        }
    }

    fn random_clip(net: &NetworkConfig, frames: usize, seed: u64) -> TrainClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = (0..frames)
            .map(|_| {
                let mut t = Tensor::<f32>::zeros(&[net.in_channels, net.n_bins_in]);
                for v in t.data_mut() {
                    *v = rng.gen_range(-1.0..1.0);
                }
                t
            })
            .collect();
        let target = (0..frames * net.upsample_factor)
            .map(|_| {
                let mut t = Tensor::<f32>::zeros(&[2, net.n_pitches()]);
                for v in t.data_mut() {
                    *v = if rng.gen_bool(0.2) { 1.0 } else { 0.0 };
                }
                t
            })
            .collect();
        TrainClip { input, target }
    }

    #[test]
    fn bce_uniform_half_is_log_two() {
        let pred = vec![Tensor::<f64>::full(&[2, 5], 0.5)];
        let target = vec![Tensor::<f64>::from_vec(
            &[2, 5],
            (0..10).map(|i| (i % 3 == 0) as u8 as f64).collect(),
        )];
        let (loss, _) = bce_loss(&pred, &target, 1.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_near_zero() {
        let target = vec![Tensor::<f64>::from_vec(&[2, 3], vec![1., 0., 1., 0., 0., 1.])];
        let pred = vec![target[0].map(|y| y.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP))];
        let (loss, _) = bce_loss(&pred, &target, 1.0);
        assert!(loss < 1e-6);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred: Vec<Tensor<f64>> = (0..2)
            .map(|_| {
                let mut t = Tensor::zeros(&[2, 4]);
                for v in t.data_mut() {
                    *v = rng.gen_range(0.05..0.95);
                }
                t
            })
            .collect();
        let target: Vec<Tensor<f64>> = (0..2)
            .map(|_| {
                let mut t = Tensor::zeros(&[2, 4]);
                for v in t.data_mut() {
                    *v = rng.gen_bool(0.4) as u8 as f64;
                }
                t
            })
            .collect();
        let (_, grads) = bce_loss(&pred, &target, 4.0);
        let h = 1e-7;
        for f in 0..pred.len() {
            for idx in 0..pred[f].len() {
                let mut up = pred.clone();
                up[f].data_mut()[idx] += h;
                let mut down = pred.clone();
                down[f].data_mut()[idx] -= h;
                let num = (bce_loss(&up, &target, 4.0).0 - bce_loss(&down, &target, 4.0).0)
                    / (2.0 * h);
                assert!(
                    (num - grads[f].data()[idx]).abs() < 1e-6,
                    "frame {f} idx {idx}: {num} vs {}",
                    grads[f].data()[idx]
                );
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let net = tiny_net();
        let mut p = init_parameters::<f32>(&net, 1);
        let before = crate::network::save_parameters(&p);
        let g = p.zeros_like();
        let mut a = AdamState::new(&p, 1e-3, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &g, &mut a).unwrap();
        assert_eq!(a.t, 1);
        assert_eq!(crate::network::save_parameters(&p), before);
    }

    #[test]
    fn adam_first_step_has_unit_scale() {
        let net = tiny_net();
        let mut p = init_parameters::<f32>(&net, 2);
        let before: Vec<f32> = p.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let mut g = p.zeros_like();
        for t in g.tensors_mut() {
            t.fill(1.0);
        }
        let mut a = AdamState::new(&p, 1e-3, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &g, &mut a).unwrap();
        let after: Vec<f32> = p.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        for (b, af) in before.iter().zip(&after) {
            // One f32 ulp of the parameter magnitude is the quantization
            // floor for the observable delta.
            assert!((af - b + 1e-3).abs() < 1e-7, "delta {}", af - b);
        }

        // Sign symmetry.
        let mut p = init_parameters::<f32>(&net, 2);
        for t in g.tensors_mut() {
            t.fill(-1.0);
        }
        let mut a = AdamState::new(&p, 1e-3, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &g, &mut a).unwrap();
        let after: Vec<f32> = p.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        for (b, af) in before.iter().zip(&after) {
            assert!((af - b - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_refuses_non_finite_gradients() {
        let net = tiny_net();
        let mut p = init_parameters::<f32>(&net, 3);
        let before = crate::network::save_parameters(&p);
        let mut g = p.zeros_like();
        g.tensors_mut()[0].data_mut()[0] = f32::NAN;
        let mut a = AdamState::new(&p, 1e-3, 0.9, 0.999, 1e-8);
        assert!(adam_step(&mut p, &g, &mut a).is_err());
        assert_eq!(a.t, 0);
        assert_eq!(crate::network::save_parameters(&p), before);
    }

    #[test]
    fn adam_touches_only_tensors_with_gradient() {
        let net = tiny_net();
        let mut p = init_parameters::<f32>(&net, 4);
        let before: Vec<Vec<u32>> = p
            .tensors()
            .iter()
            .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let mut g = p.zeros_like();
        g.tensors_mut()[0].fill(0.5);
        let mut a = AdamState::new(&p, 1e-3, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &g, &mut a).unwrap();
        for (i, t) in p.tensors().iter().enumerate() {
            let now: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            if i == 0 {
                assert_ne!(now, before[i]);
            } else {
                assert_eq!(now, before[i], "tensor {i} moved without gradient");
            }
        }
    }

    #[test]
    fn one_clip_one_lane_counts_one_step_per_epoch() {
        let net = tiny_net();
        let cfg = TrainConfig {
            segment_len: 8,
            lanes: 1,
            ..Default::default()
        };
        let dataset = vec![random_clip(&net, 8, 1)];
        assert_eq!(steps_per_epoch(&dataset, &cfg), 1);

        // Running exactly that one step consumes the clip exactly once.
        let run_cfg = TrainConfig { steps: 1, ..cfg };
        let mut traces = Vec::new();
        train_with_observer(&dataset, &net, &run_cfg, 0, &mut |t| traces.push(t.clone()))
            .unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!((traces[0].frame_start, traces[0].frame_end), (0, 8));
    }

    #[test]
    fn state_passes_through_segments_and_resets_on_new_clips() {
        let net = tiny_net();
        let cfg = TrainConfig {
            segment_len: 4,
            lanes: 2,
            steps: 12,
            ..Default::default()
        };
        let dataset = vec![
            random_clip(&net, 10, 1),
            random_clip(&net, 7, 2),
            random_clip(&net, 13, 3),
        ];
        let mut traces: Vec<SegmentTrace> = Vec::new();
        train_with_observer(&dataset, &net, &cfg, 5, &mut |t| traces.push(t.clone())).unwrap();

        let zero_fp = fingerprint_state(&StreamState::new(&net));
        for lane in 0..cfg.lanes {
            let lane_traces: Vec<&SegmentTrace> = traces.iter().filter(|t| t.lane == lane).collect();
            for pair in lane_traces.windows(2) {
                if pair[1].fresh_clip {
                    assert_eq!(pair[1].state_before, zero_fp, "reset on clip switch");
                } else {
                    assert_eq!(
                        pair[1].state_before, pair[0].state_after,
                        "state must pass through between segments"
                    );
                }
            }
        }
        // Segments within one clip tile it without gaps.
        for lane_trace in traces.windows(2) {
            let (a, b) = (&lane_trace[0], &lane_trace[1]);
            if a.lane == b.lane && !b.fresh_clip {
                assert_eq!(b.frame_start, a.frame_end);
            }
        }
    }

    #[test]
    fn gradients_ignore_future_segment_targets() {
        let net = tiny_net();
        let cfg = TrainConfig {
            segment_len: 4,
            lanes: 1,
            steps: 1,
            ..Default::default()
        };
        let clip = random_clip(&net, 8, 7);
        let mut altered = clip.clone();
        // Flip every target cell of the second segment.
        for f in &mut altered.target[8..] {
            for v in f.data_mut() {
                *v = 1.0 - *v;
            }
        }
        let (p1, _) = train(&[clip], &net, &cfg, 9).unwrap();
        let (p2, _) = train(&[altered], &net, &cfg, 9).unwrap();
        assert_eq!(
            crate::network::save_parameters(&p1),
            crate::network::save_parameters(&p2),
            "step 1 gradients must not depend on segment 2 targets"
        );
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let net = tiny_net();
        let cfg = TrainConfig {
            segment_len: 4,
            lanes: 2,
            steps: 6,
            ..Default::default()
        };
        let dataset = vec![random_clip(&net, 9, 1), random_clip(&net, 6, 2)];
        let (p1, curve1) = train(&dataset, &net, &cfg, 77).unwrap();
        let (p2, curve2) = train(&dataset, &net, &cfg, 77).unwrap();
        assert_eq!(
            crate::network::save_parameters(&p1),
            crate::network::save_parameters(&p2)
        );
        assert_eq!(curve1, curve2);
        assert!(curve1.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let net = tiny_net();
        assert_eq!(
            train(&[], &net, &TrainConfig::default(), 0).unwrap_err(),
            TrainError::EmptyDataset
        );
    }
}
