//! Merged pipeline configuration and its line-oriented `key = value` file
//! format. Dotted keys namespace the modules (`frontend.hop = 512`);
//! unknown keys are errors; `#` starts a comment.

use crate::frontend::harmonic_shift;
use crate::network::NetworkConfig;
use crate::synth::{ScoreConfig, SynthConfig};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub fmin: f64,
    pub bins_per_octave: usize,
    pub n_pitch_bins: usize,
    pub hop: usize,
    pub harmonics: Vec<usize>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 22050,
            fmin: 27.5,
            bins_per_octave: 36,
            n_pitch_bins: 264,
            hop: 512,
            harmonics: vec![1, 2, 3, 4],
        }
    }
}

impl FrontendConfig {
    /// Analysis bins: pitch bins plus headroom for the highest harmonic shift.
    pub fn n_bins(&self) -> usize {
        let max_shift = self
            .harmonics
            .iter()
            .map(|&h| harmonic_shift(self.bins_per_octave, h.max(1)))
            .max()
            .unwrap_or(0);
        self.n_pitch_bins + max_shift
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderConfig {
    pub theta_art: f32,
    pub theta_sus: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            theta_art: 0.5,
            theta_sus: 0.5,
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Syntax { line: usize, msg: String },
    UnknownKey { line: usize, key: String },
    BadValue { line: usize, key: String, msg: String },
    Inconsistent(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config io error: {e}"),
            ConfigError::Syntax { line, msg } => write!(f, "config line {line}: {msg}"),
            ConfigError::UnknownKey { line, key } => {
                write!(f, "config line {line}: unknown key '{key}'")
            }
            ConfigError::BadValue { line, key, msg } => {
                write!(f, "config line {line}: bad value for '{key}': {msg}")
            }
            ConfigError::Inconsistent(msg) => write!(f, "inconsistent config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

/// Everything one run needs, with cross-module consistency enforced: the
/// network's input plane is derived from the frontend, and the pooled
/// pitch axis must land on the 88-key MIDI range.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub frontend: FrontendConfig,
    pub network: NetworkConfig,
    pub decoder: DecoderConfig,
    pub trainer: TrainConfig,
    pub score: ScoreConfig,
    pub synth: SynthConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            frontend: FrontendConfig::default(),
            network: NetworkConfig::default(),
            decoder: DecoderConfig::default(),
            trainer: TrainConfig::default(),
            score: ScoreConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Piano-roll frame rate at the network output.
    pub fn output_frame_rate(&self) -> f64 {
        self.frontend.frame_rate() * self.network.upsample_factor as f64
    }

    /// Re-derives the network input plane from the frontend and checks the
    /// cross-module invariants.
    pub fn finalize(mut self) -> Result<PipelineConfig, ConfigError> {
        self.network.n_bins_in = self.frontend.n_pitch_bins;
        self.network.in_channels = self.frontend.harmonics.len();
        self.network
            .validate()
            .map_err(|e| ConfigError::Inconsistent(e.to_string()))?;
        if self.network.n_pitches() != 88 {
            return Err(ConfigError::Inconsistent(format!(
                "{} pitch bins / pool width {} = {} rows; the decoder needs 88 MIDI pitches",
                self.network.n_bins_in,
                self.network.pool_width,
                self.network.n_pitches()
            )));
        }
        if self.frontend.harmonics.is_empty() || self.frontend.harmonics.iter().any(|&h| h < 1) {
            return Err(ConfigError::Inconsistent(
                "harmonics must be a non-empty list of integers >= 1".into(),
            ));
        }
        if !(self.decoder.theta_art > 0.0 && self.decoder.theta_art < 1.0)
            || !(self.decoder.theta_sus > 0.0 && self.decoder.theta_sus < 1.0)
        {
            return Err(ConfigError::Inconsistent(
                "decoder thresholds must lie in (0, 1)".into(),
            ));
        }
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<PipelineConfig, ConfigError> {
        let mut cfg = PipelineConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.apply(key.trim(), value.trim(), line_no)?;
        }
        cfg.finalize()
    }

    pub fn parse_file(path: &std::path::Path) -> Result<PipelineConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                line,
                key: key.to_string(),
                msg: e.to_string(),
            })
        }
        fn stack(key: &str, value: &str, line: usize) -> Result<Vec<(usize, usize)>, ConfigError> {
            value
                .split(',')
                .map(|part| {
                    let (c, k) = part.trim().split_once('x').ok_or_else(|| {
                        ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            msg: format!("expected CHANNELSxWIDTH, got '{part}'"),
                        }
                    })?;
                    Ok((num(key, c.trim(), line)?, num(key, k.trim(), line)?))
                })
                .collect()
        }

        match key {
            "frontend.sample_rate" => self.frontend.sample_rate = num(key, value, line)?,
            "frontend.fmin" => self.frontend.fmin = num(key, value, line)?,
            "frontend.bins_per_octave" => self.frontend.bins_per_octave = num(key, value, line)?,
            "frontend.n_pitch_bins" => self.frontend.n_pitch_bins = num(key, value, line)?,
            "frontend.hop" => self.frontend.hop = num(key, value, line)?,
            "frontend.harmonics" => {
                self.frontend.harmonics = value
                    .split(',')
                    .map(|p| num(key, p.trim(), line))
                    .collect::<Result<_, _>>()?;
            }
            "network.conv_stack" => self.network.conv_stack = stack(key, value, line)?,
            "network.pool_width" => self.network.pool_width = num(key, value, line)?,
            "network.convlstm_stack" => self.network.convlstm_stack = stack(key, value, line)?,
            "network.upsample_factor" => self.network.upsample_factor = num(key, value, line)?,
            "network.time_conv" => {
                let parsed = stack(key, value, line)?;
                if parsed.len() != 1 {
                    return Err(ConfigError::BadValue {
                        line,
                        key: key.to_string(),
                        msg: "expected one CHANNELSxWIDTH pair".into(),
                    });
                }
                self.network.time_conv_channels = parsed[0].0;
                self.network.time_conv_width = parsed[0].1;
            }
            "network.layer_norm" => self.network.layer_norm = num(key, value, line)?,
            "network.tanh_scale" => self.network.tanh_scale = num(key, value, line)?,
            "network.tanh_slope" => self.network.tanh_slope = num(key, value, line)?,
            "decoder.theta_art" => self.decoder.theta_art = num(key, value, line)?,
            "decoder.theta_sus" => self.decoder.theta_sus = num(key, value, line)?,
            "trainer.lr" => self.trainer.lr = num(key, value, line)?,
            "trainer.beta1" => self.trainer.beta1 = num(key, value, line)?,
            "trainer.beta2" => self.trainer.beta2 = num(key, value, line)?,
            "trainer.eps" => self.trainer.eps = num(key, value, line)?,
            "trainer.segment_len" => self.trainer.segment_len = num(key, value, line)?,
            "trainer.lanes" => self.trainer.lanes = num(key, value, line)?,
            "trainer.steps" => self.trainer.steps = num(key, value, line)?,
            "trainer.grad_clip" => self.trainer.grad_clip = num(key, value, line)?,
            "trainer.pos_weight_art" => self.trainer.pos_weight_art = num(key, value, line)?,
            "trainer.checkpoint_every" => self.trainer.checkpoint_every = num(key, value, line)?,
            "score.pitch_lo" => self.score.pitch_lo = num(key, value, line)?,
            "score.pitch_hi" => self.score.pitch_hi = num(key, value, line)?,
            "score.max_polyphony" => self.score.max_polyphony = num(key, value, line)?,
            "score.dur_lo" => self.score.dur_lo = num(key, value, line)?,
            "score.dur_hi" => self.score.dur_hi = num(key, value, line)?,
            "score.clip_seconds" => self.score.clip_seconds = num(key, value, line)?,
            "score.notes_lo" => self.score.notes_lo = num(key, value, line)?,
            "score.notes_hi" => self.score.notes_hi = num(key, value, line)?,
            "synth.n_partials" => self.synth.n_partials = num(key, value, line)?,
            "synth.attack" => self.synth.attack = num(key, value, line)?,
            "synth.release" => self.synth.release = num(key, value, line)?,
            "synth.note_peak" => self.synth.note_peak = num(key, value, line)?,
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }
}
