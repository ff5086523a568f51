//! Synthetic labeled data: random polyphonic scores rendered by additive
//! harmonic synthesis. No instrument timbre is baked in anywhere else in
//! the pipeline; this 1/k-partial tone is only the test signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::midi::TimedNote;

#[derive(Clone, Debug)]
pub struct ScoreConfig {
    pub pitch_lo: u8,
    pub pitch_hi: u8,
    pub max_polyphony: usize,
    pub dur_lo: f64,
    pub dur_hi: f64,
    pub clip_seconds: f64,
    pub notes_lo: usize,
    pub notes_hi: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            pitch_lo: 36,
            pitch_hi: 84,
            max_polyphony: 4,
            dur_lo: 0.2,
            dur_hi: 1.5,
            clip_seconds: 4.0,
            notes_lo: 4,
            notes_hi: 16,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n_partials: usize,
    /// Linear attack ramp, seconds.
    pub attack: f64,
    /// Linear release ramp ending at the note offset, seconds.
    pub release: f64,
    /// Peak amplitude of one note (partials summed).
    pub note_peak: f64,
    /// Hard limiter threshold.
    pub limit: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_partials: 8,
            attack: 0.010,
            release: 0.030,
            note_peak: 0.25,
            limit: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    BadConfig(String),
}

impl std::fmt::Display for SynthError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SynthError::BadConfig(msg) => write!(f, "invalid synthesis config: {msg}"),
        }
    }
}

impl std::error::Error for SynthError {}

pub fn midi_to_hz(pitch: u8) -> f64 {
    440.0 * 2f64.powf((pitch as f64 - 69.0) / 12.0)
}

fn polyphony_at(notes: &[TimedNote], t: f64) -> usize {
    notes.iter().filter(|n| n.onset <= t && t < n.offset).count()
}

/// Samples a random score: uniform note count, pitches, onsets and
/// durations; candidates overlapping a same-pitch note or exceeding the
/// polyphony cap are rejected and resampled. Deterministic in the seed.
pub fn sample_score(cfg: &ScoreConfig, seed: u64) -> Result<Vec<TimedNote>, SynthError> {
    if cfg.pitch_lo < 21 || cfg.pitch_hi > 108 || cfg.pitch_lo > cfg.pitch_hi {
        return Err(SynthError::BadConfig(format!(
            "pitch range {}..={} must lie within MIDI 21..=108",
            cfg.pitch_lo, cfg.pitch_hi
        )));
    }
    if cfg.max_polyphony == 0 {
        return Err(SynthError::BadConfig("max polyphony 0 admits no notes".into()));
    }
    if !(cfg.dur_lo > 0.0 && cfg.dur_hi >= cfg.dur_lo) {
        return Err(SynthError::BadConfig("empty duration range".into()));
    }
    if cfg.clip_seconds < cfg.dur_lo {
        return Err(SynthError::BadConfig("clip shorter than the minimum note".into()));
    }
    if cfg.notes_lo > cfg.notes_hi {
        return Err(SynthError::BadConfig("empty notes-per-clip range".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_notes = rng.gen_range(cfg.notes_lo..=cfg.notes_hi);
    let mut notes: Vec<TimedNote> = Vec::with_capacity(n_notes);
    for _ in 0..n_notes {
        for _attempt in 0..1000 {
            let pitch = rng.gen_range(cfg.pitch_lo..=cfg.pitch_hi);
            let dur = rng.gen_range(cfg.dur_lo..=cfg.dur_hi);
            let dur = dur.min(cfg.clip_seconds);
            let onset = rng.gen_range(0.0..=(cfg.clip_seconds - dur));
            let offset = onset + dur;
            let same_pitch_overlap = notes
                .iter()
                .any(|n| n.pitch == pitch && n.onset < offset && onset < n.offset);
            if same_pitch_overlap {
                continue;
            }
            // Polyphony only changes at note boundaries; checking the
            // candidate's span against existing edges covers every instant.
            let mut fits = polyphony_at(&notes, onset) < cfg.max_polyphony;
            for n in &notes {
                if fits && n.onset > onset && n.onset < offset {
                    fits &= polyphony_at(&notes, n.onset) < cfg.max_polyphony;
                }
            }
            if !fits {
                continue;
            }
            notes.push(TimedNote::new(pitch, onset, offset));
            break;
        }
    }
    notes.sort_by(|a, b| a.onset.partial_cmp(&b.onset).unwrap().then(a.pitch.cmp(&b.pitch)));
    Ok(notes)
}

/// Additive rendering: partial k of a note carries amplitude
/// `note_peak * (1/k) / sum_j(1/j)` so the note peaks near `note_peak`;
/// partials above Nyquist are dropped; phases are seeded-random. Returns
/// the samples and the number of hard-limited samples (reported, not
/// hidden).
pub fn render(
    notes: &[TimedNote],
    synth: &SynthConfig,
    sample_rate: u32,
    seconds: f64,
    seed: u64,
) -> (Vec<f32>, usize) {
    let n = (seconds * sample_rate as f64).round() as usize;
    let mut audio = vec![0.0f64; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nyquist = sample_rate as f64 / 2.0;

    for note in notes {
        let f0 = midi_to_hz(note.pitch);
        let usable: Vec<usize> = (1..=synth.n_partials)
            .filter(|&k| k as f64 * f0 < nyquist)
            .collect();
        let weight: f64 = usable.iter().map(|&k| 1.0 / k as f64).sum();
        // Phases are drawn per (note, partial) in declaration order.
        let phases: Vec<f64> = usable
            .iter()
            .map(|_| rng.gen_range(0.0..(2.0 * std::f64::consts::PI)))
            .collect();
        if usable.is_empty() {
            continue;
        }
        let start = (note.onset * sample_rate as f64).floor() as usize;
        let stop = ((note.offset * sample_rate as f64).ceil() as usize).min(n);
        for i in start..stop {
            let t = i as f64 / sample_rate as f64;
            let env = envelope(t, note.onset, note.offset, synth.attack, synth.release);
            if env <= 0.0 {
                continue;
            }
            let mut s = 0.0;
            for (&k, &phase) in usable.iter().zip(&phases) {
                let amp = synth.note_peak * (1.0 / k as f64) / weight;
                s += amp * (2.0 * std::f64::consts::PI * k as f64 * f0 * t + phase).sin();
            }
            audio[i] += env * s;
        }
    }

    let mut clipped = 0usize;
    let out = audio
        .into_iter()
        .map(|v| {
            if v > synth.limit {
                clipped += 1;
                synth.limit as f32
            } else if v < -synth.limit {
                clipped += 1;
                -synth.limit as f32
            } else {
                v as f32
            }
        })
        .collect();
    (out, clipped)
}

fn envelope(t: f64, onset: f64, offset: f64, attack: f64, release: f64) -> f64 {
    if t < onset || t >= offset {
        return 0.0;
    }
    let up = if attack > 0.0 {
        ((t - onset) / attack).min(1.0)
    } else {
        1.0
    };
    let down = if release > 0.0 {
        ((offset - t) / release).min(1.0)
    } else {
        1.0
    };
    up.min(down).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midi_tuning_reference_points() {
        assert!((midi_to_hz(69) - 440.0).abs() < 1e-12);
        assert!((midi_to_hz(81) - 880.0).abs() < 1e-12);
        assert!((midi_to_hz(57) - 220.0).abs() < 1e-12);
    }

    #[test]
    fn single_note_config_yields_one_note_in_bounds() {
        let cfg = ScoreConfig {
            notes_lo: 1,
            notes_hi: 1,
            max_polyphony: 1,
            ..Default::default()
        };
        let notes = sample_score(&cfg, 5).unwrap();
        assert_eq!(notes.len(), 1);
        let n = notes[0];
        assert!((cfg.pitch_lo..=cfg.pitch_hi).contains(&n.pitch));
        assert!(n.onset >= 0.0 && n.offset <= cfg.clip_seconds + 1e-9);
        assert!(n.offset - n.onset >= cfg.dur_lo - 1e-9);
    }

    #[test]
    fn same_seed_same_score() {
        let cfg = ScoreConfig::default();
        assert_eq!(sample_score(&cfg, 42).unwrap(), sample_score(&cfg, 42).unwrap());
        assert_ne!(sample_score(&cfg, 42).unwrap(), sample_score(&cfg, 43).unwrap());
    }

    #[test]
    fn scores_respect_overlap_and_polyphony() {
        let cfg = ScoreConfig::default();
        for seed in 0..1000 {
            let notes = sample_score(&cfg, seed).unwrap();
            for (i, a) in notes.iter().enumerate() {
                for b in &notes[i + 1..] {
                    if a.pitch == b.pitch {
                        assert!(
                            a.offset <= b.onset || b.offset <= a.onset,
                            "seed {seed}: same-pitch overlap"
                        );
                    }
                }
            }
            // Polyphony can only peak just after an onset.
            for n in &notes {
                let p = polyphony_at(&notes, n.onset);
                assert!(p <= cfg.max_polyphony, "seed {seed}: polyphony {p}");
            }
        }
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let cfg = ScoreConfig {
            max_polyphony: 0,
            ..Default::default()
        };
        assert!(sample_score(&cfg, 1).is_err());
        let cfg = ScoreConfig {
            pitch_lo: 10,
            ..Default::default()
        };
        assert!(sample_score(&cfg, 1).is_err());
    }

    #[test]
    fn rendered_audio_is_finite_and_bounded() {
        let cfg = ScoreConfig::default();
        let notes = sample_score(&cfg, 9).unwrap();
        let (audio, clipped) = render(&notes, &SynthConfig::default(), 22050, cfg.clip_seconds, 9);
        assert_eq!(audio.len(), (4.0 * 22050.0) as usize);
        assert!(audio.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
        assert_eq!(clipped, 0, "4-voice polyphony at peak 0.25 stays under the limiter");
        assert!(audio.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn render_is_deterministic() {
        let notes = vec![TimedNote::new(60, 0.5, 1.5), TimedNote::new(67, 1.0, 2.0)];
        let a = render(&notes, &SynthConfig::default(), 22050, 2.5, 3);
        let b = render(&notes, &SynthConfig::default(), 22050, 2.5, 3);
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn note_energy_sits_inside_its_interval() {
        let notes = vec![TimedNote::new(60, 1.0, 2.0)];
        let (audio, _) = render(&notes, &SynthConfig::default(), 22050, 3.0, 7);
        let rms = |from: f64, to: f64| -> f64 {
            let a = (from * 22050.0) as usize;
            let b = (to * 22050.0) as usize;
            (audio[a..b].iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()
                / (b - a) as f64)
                .sqrt()
        };
        assert!(rms(0.0, 0.95) < 1e-9, "silence before the onset");
        assert!(rms(1.1, 1.9) > 0.05, "tone during the note");
        assert!(rms(2.05, 3.0) < 1e-9, "silence after the offset");
    }

    #[test]
    fn sustained_220hz_render_peaks_at_cqt_bin_108() {
        use crate::frontend::{cqt_offline, CqtPlan};
        use std::sync::Arc;
        let notes = vec![TimedNote::new(57, 0.0, 1.0)];
        let (audio, _) = render(&notes, &SynthConfig::default(), 22050, 1.0, 11);
        let plan = Arc::new(CqtPlan::design(22050, 27.5, 36, 336, 512).unwrap());
        let samples: Vec<f64> = audio.iter().map(|&v| v as f64).collect();
        let frames = cqt_offline(plan, &samples);
        let mid = &frames[frames.len() / 2];
        let argmax = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 108);
    }
}
