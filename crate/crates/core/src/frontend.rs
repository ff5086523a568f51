//! Streaming constant-Q spectral frontend.
//!
//! Audio comes in as arbitrary sample chunks and leaves as harmonic-stacked
//! log-power frames with bounded latency. The transform is a time-domain
//! constant-Q filter bank: one complex windowed-sinusoid kernel per bin,
//! centered on the frame instant, evaluated against a ring buffer of recent
//! samples. Streaming output is bit-identical to the offline transform of
//! the concatenated signal because the offline path *is* the streaming path
//! (one push + flush).
//!
//! Pitch shifts by `s` semitones translate the bin axis by
//! `s * bins_per_octave / 12`, which is what lets the network share
//! convolution weights over frequency.

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Power values below this clamp to the floor before the log.
pub const POWER_FLOOR: f64 = 1e-10;

/// Kernel length cap in seconds for the lowest bins.
pub const MAX_KERNEL_SECONDS: f64 = 2.0;

/// log(POWER_FLOOR); the smallest value any log-power cell can take.
pub fn log_floor() -> f64 {
    POWER_FLOOR.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub enum FrontendError {
    FminOutOfRange { fmin: f64, nyquist: f64 },
    BinsPerOctaveNotSemitoneAligned { bins_per_octave: usize },
    BadHop,
    BadHarmonic { harmonic: usize },
    NotEnoughBins { needed: usize, have: usize },
    SampleRateMismatch { expected: u32, got: u32 },
}

impl std::fmt::Display for FrontendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FrontendError::FminOutOfRange { fmin, nyquist } => {
                write!(f, "fmin {fmin} Hz must be positive and below Nyquist {nyquist} Hz")
            }
            FrontendError::BinsPerOctaveNotSemitoneAligned { bins_per_octave } => {
                write!(f, "bins_per_octave {bins_per_octave} must be divisible by 12")
            }
            FrontendError::BadHop => write!(f, "hop must be positive"),
            FrontendError::BadHarmonic { harmonic } => {
                write!(f, "harmonic numbers must be >= 1, got {harmonic}")
            }
            FrontendError::NotEnoughBins { needed, have } => {
                write!(f, "plan has {have} bins but harmonic stacking needs {needed}")
            }
            FrontendError::SampleRateMismatch { expected, got } => {
                write!(f, "chunk sample rate {got} does not match plan rate {expected}")
            }
        }
    }
}

impl std::error::Error for FrontendError {}

/// One analysis bin: L1-normalized complex kernel, or empty above Nyquist.
#[derive(Debug, Clone)]
struct BinKernel {
    re: Vec<f64>,
    im: Vec<f64>,
    /// Samples before the frame center covered by the kernel: `floor(len/2)`.
    back: usize,
}

impl BinKernel {
    fn len(&self) -> usize {
        self.re.len()
    }
}

/// Immutable constant-Q analysis plan, shareable across streams.
#[derive(Debug, Clone)]
pub struct CqtPlan {
    pub sample_rate: u32,
    pub fmin: f64,
    pub bins_per_octave: usize,
    pub n_bins: usize,
    pub hop: usize,
    pub q_scale: f64,
    pub max_kernel_len: usize,
    kernels: Vec<BinKernel>,
}

impl CqtPlan {
    /// Designs the filter bank. `bins_per_octave` must be divisible by 12 so
    /// that semitone steps land on integer bin offsets downstream.
    pub fn design(
        sample_rate: u32,
        fmin: f64,
        bins_per_octave: usize,
        n_bins: usize,
        hop: usize,
    ) -> Result<CqtPlan, FrontendError> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(fmin > 0.0) || fmin >= nyquist {
            return Err(FrontendError::FminOutOfRange { fmin, nyquist });
        }
        if bins_per_octave == 0 || bins_per_octave % 12 != 0 {
            return Err(FrontendError::BinsPerOctaveNotSemitoneAligned { bins_per_octave });
        }
        if hop == 0 {
            return Err(FrontendError::BadHop);
        }

        let q_scale = 1.0 / (2f64.powf(1.0 / bins_per_octave as f64) - 1.0);
        let cap = (MAX_KERNEL_SECONDS * sample_rate as f64).round() as usize;

        let mut kernels = Vec::with_capacity(n_bins);
        let mut max_kernel_len = 1;
        for k in 0..n_bins {
            let freq = fmin * 2f64.powf(k as f64 / bins_per_octave as f64);
            if freq > nyquist {
                // Above Nyquist: no kernel, bin always reads as silence.
                kernels.push(BinKernel {
                    re: Vec::new(),
                    im: Vec::new(),
                    back: 0,
                });
                continue;
            }
            let len = ((q_scale * sample_rate as f64 / freq).ceil() as usize)
                .clamp(1, cap);
            let back = len / 2;
            let mut re = Vec::with_capacity(len);
            let mut im = Vec::with_capacity(len);
            let mut norm = 0.0;
            for j in 0..len {
                let w = hann(j, len);
                norm += w;
            }
            for j in 0..len {
                let w = hann(j, len) / norm;
                // Analysis kernel conj: x * exp(-i * 2pi * f * t).
                let t = (j as f64 - back as f64) / sample_rate as f64;
                let phase = -2.0 * std::f64::consts::PI * freq * t;
                re.push(w * phase.cos());
                im.push(w * phase.sin());
            }
            max_kernel_len = max_kernel_len.max(len);
            kernels.push(BinKernel { re, im, back });
        }

        Ok(CqtPlan {
            sample_rate,
            fmin,
            bins_per_octave,
            n_bins,
            hop,
            q_scale,
            max_kernel_len,
            kernels,
        })
    }

    pub fn center_freq(&self, bin: usize) -> f64 {
        self.fmin * 2f64.powf(bin as f64 / self.bins_per_octave as f64)
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Samples of lookahead needed before a frame can be emitted.
    pub fn latency_samples(&self) -> usize {
        self.max_kernel_len - self.max_kernel_len / 2
    }
}

fn hann(j: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    let x = j as f64 / (len - 1) as f64;
    0.5 - 0.5 * (2.0 * std::f64::consts::PI * x).cos()
}

/// Streaming CQT over one audio stream. Owned by exactly one caller.
#[derive(Debug, Clone)]
pub struct CqtStream {
    plan: Arc<CqtPlan>,
    /// Buffered samples; `buf[i]` is absolute sample `buf_start + i`.
    buf: Vec<f64>,
    buf_start: usize,
    /// Real (non-padding) samples pushed so far.
    real_total: usize,
    /// Total samples pushed including flush padding.
    pushed_total: usize,
    next_frame: usize,
}

impl CqtStream {
    pub fn new(plan: Arc<CqtPlan>) -> CqtStream {
        CqtStream {
            plan,
            buf: Vec::new(),
            buf_start: 0,
            real_total: 0,
            pushed_total: 0,
            next_frame: 0,
        }
    }

    pub fn plan(&self) -> &CqtPlan {
        &self.plan
    }

    /// Feeds a chunk of samples and returns every magnitude frame whose
    /// analysis window is now fully covered. Frame `m` is centered on
    /// absolute sample `m * hop`; indices before the stream start read as
    /// zero. Output is independent of how the stream is chunked.
    pub fn push(&mut self, samples: &[f64]) -> Vec<Vec<f64>> {
        self.real_total += samples.len();
        self.push_padded(samples)
    }

    fn push_padded(&mut self, samples: &[f64]) -> Vec<Vec<f64>> {
        self.buf.extend_from_slice(samples);
        self.pushed_total += samples.len();

        let ahead = self.plan.latency_samples();
        let hop = self.plan.hop;
        let mut frames = Vec::new();
        while self.next_frame * hop + ahead <= self.pushed_total {
            let center = self.next_frame * hop;
            frames.push(self.analyze_at(center));
            self.next_frame += 1;
            self.trim();
        }
        frames
    }

    /// Flushes trailing frames by zero-padding the lookahead. Emits exactly
    /// the frames whose centers precede the end of the real signal.
    pub fn finish(mut self) -> Vec<Vec<f64>> {
        let n_frames = if self.real_total == 0 {
            0
        } else {
            (self.real_total - 1) / self.plan.hop + 1
        };
        let mut frames = Vec::new();
        let pad = self.plan.latency_samples() + self.plan.hop;
        while self.next_frame < n_frames {
            frames.extend(self.push_padded(&vec![0.0; pad]));
        }
        // The last padding batch may emit frames centered past the real
        // signal; keep only centers < real_total.
        let emitted_before = self.next_frame - frames.len();
        frames.truncate(n_frames - emitted_before);
        frames
    }

    fn analyze_at(&self, center: usize) -> Vec<f64> {
        let plan = &self.plan;
        let mut out = Vec::with_capacity(plan.n_bins);
        for kernel in &plan.kernels {
            if kernel.len() == 0 {
                out.push(0.0);
                continue;
            }
            // Kernel sample j multiplies signal sample center - back + j;
            // negative signal indices are zeros before the stream start.
            let start_abs = center as i64 - kernel.back as i64;
            let skip = (-start_abs).max(0) as usize;
            let sig_from = (start_abs + skip as i64) as usize;
            debug_assert!(sig_from >= self.buf_start);
            let sig = &self.buf[sig_from - self.buf_start..];
            let n = kernel.len() - skip;
            let sig = &sig[..n];
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for ((&x, &kr), &ki) in sig
                .iter()
                .zip(&kernel.re[skip..])
                .zip(&kernel.im[skip..])
            {
                acc_re += x * kr;
                acc_im += x * ki;
            }
            out.push((acc_re * acc_re + acc_im * acc_im).sqrt());
        }
        out
    }

    fn trim(&mut self) {
        // Keep everything the next frame's widest kernel can still reach.
        let keep_from = (self.next_frame * self.plan.hop)
            .saturating_sub(self.plan.max_kernel_len / 2);
        if keep_from > self.buf_start + 8192 {
            let drop = keep_from - self.buf_start;
            self.buf.drain(..drop);
            self.buf_start = keep_from;
        }
    }
}

/// Offline transform: one stream, one push, one flush.
pub fn cqt_offline(plan: Arc<CqtPlan>, samples: &[f64]) -> Vec<Vec<f64>> {
    let mut stream = CqtStream::new(plan);
    let mut frames = stream.push(samples);
    frames.extend(stream.finish());
    frames
}

/// Log-scaled power of one magnitude frame: `ln(max(m^2, POWER_FLOOR))`.
pub fn log_power(frame: &[f64]) -> Vec<f64> {
    frame
        .iter()
        .map(|&m| (m * m).max(POWER_FLOOR).ln())
        .collect()
}

/// Bin offset of harmonic `h`: `round(bins_per_octave * log2(h))`.
pub fn harmonic_shift(bins_per_octave: usize, harmonic: usize) -> usize {
    (bins_per_octave as f64 * (harmonic as f64).log2()).round() as usize
}

/// Frames x pitch-bins x harmonics stack of log-power values.
#[derive(Debug, Clone)]
pub struct HarmonicSpectrogram {
    pub harmonics: Vec<usize>,
    pub n_pitch_bins: usize,
    pub frame_rate: f64,
    /// One `[n_harmonics, n_pitch_bins]` map per frame.
    pub frames: Vec<Tensor<f64>>,
}

impl HarmonicSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    /// Per-frame feature maps in the network's scalar type.
    pub fn frames_as<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.frames.iter().map(|f| f.cast()).collect()
    }
}

/// Reads pitch bin `k` of harmonic `h` from analysis bin `k + shift(h)`.
/// Out-of-range bins fill with the log floor.
pub fn stack_frame(
    log_frame: &[f64],
    bins_per_octave: usize,
    n_pitch_bins: usize,
    harmonics: &[usize],
) -> Tensor<f64> {
    let floor = log_floor();
    let mut out = Tensor::zeros(&[harmonics.len(), n_pitch_bins]);
    for (j, &h) in harmonics.iter().enumerate() {
        let shift = harmonic_shift(bins_per_octave, h);
        let row = out.row_mut(j);
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = log_frame.get(k + shift).copied().unwrap_or(floor);
        }
    }
    out
}

/// Stacks a whole clip of log-power frames into a harmonic spectrogram.
pub fn stack_harmonics(
    log_frames: &[Vec<f64>],
    plan: &CqtPlan,
    n_pitch_bins: usize,
    harmonics: &[usize],
) -> Result<HarmonicSpectrogram, FrontendError> {
    for &h in harmonics {
        if h < 1 {
            return Err(FrontendError::BadHarmonic { harmonic: h });
        }
    }
    let max_shift = harmonics
        .iter()
        .map(|&h| harmonic_shift(plan.bins_per_octave, h))
        .max()
        .unwrap_or(0);
    if plan.n_bins < n_pitch_bins + max_shift {
        return Err(FrontendError::NotEnoughBins {
            needed: n_pitch_bins + max_shift,
            have: plan.n_bins,
        });
    }
    let frames = log_frames
        .iter()
        .map(|f| stack_frame(f, plan.bins_per_octave, n_pitch_bins, harmonics))
        .collect();
    Ok(HarmonicSpectrogram {
        harmonics: harmonics.to_vec(),
        n_pitch_bins,
        frame_rate: plan.frame_rate(),
        frames,
    })
}

/// Streaming wrapper producing harmonic-stacked log-power frames.
#[derive(Debug, Clone)]
pub struct SpectrogramStream {
    cqt: CqtStream,
    n_pitch_bins: usize,
    harmonics: Vec<usize>,
}

impl SpectrogramStream {
    pub fn new(
        plan: Arc<CqtPlan>,
        n_pitch_bins: usize,
        harmonics: Vec<usize>,
    ) -> Result<SpectrogramStream, FrontendError> {
        for &h in &harmonics {
            if h < 1 {
                return Err(FrontendError::BadHarmonic { harmonic: h });
            }
        }
        let max_shift = harmonics
            .iter()
            .map(|&h| harmonic_shift(plan.bins_per_octave, h))
            .max()
            .unwrap_or(0);
        if plan.n_bins < n_pitch_bins + max_shift {
            return Err(FrontendError::NotEnoughBins {
                needed: n_pitch_bins + max_shift,
                have: plan.n_bins,
            });
        }
        Ok(SpectrogramStream {
            cqt: CqtStream::new(plan),
            n_pitch_bins,
            harmonics,
        })
    }

    pub fn frame_rate(&self) -> f64 {
        self.cqt.plan().frame_rate()
    }

    pub fn push(&mut self, samples: &[f64]) -> Vec<Tensor<f64>> {
        self.cqt
            .push(samples)
            .iter()
            .map(|m| self.stack(m))
            .collect()
    }

    pub fn finish(self) -> Vec<Tensor<f64>> {
        let n_pitch_bins = self.n_pitch_bins;
        let harmonics = self.harmonics.clone();
        let bpo = self.cqt.plan().bins_per_octave;
        self.cqt
            .finish()
            .iter()
            .map(|m| stack_frame(&log_power(m), bpo, n_pitch_bins, &harmonics))
            .collect()
    }

    fn stack(&self, magnitudes: &[f64]) -> Tensor<f64> {
        stack_frame(
            &log_power(magnitudes),
            self.cqt.plan().bins_per_octave,
            self.n_pitch_bins,
            &self.harmonics,
        )
    }
}
