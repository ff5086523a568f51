//! Two-channel piano rolls and their note-event codec.
//!
//! The sustain plane is one wherever a note sounds; the articulation plane
//! is one only at the frame where a note begins. Decoding scans each pitch
//! row left to right: articulation above its threshold opens a note, the
//! note runs while sustain holds above its threshold, and a fresh
//! articulation spike during an active note fragments it into an offset
//! plus a new onset.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lowest decodable MIDI pitch (A0); row 0 of every roll.
pub const PITCH_MIN: u8 = 21;
/// Highest MIDI pitch of the standard 88-key range (C8).
pub const PITCH_MAX: u8 = 108;

pub const DEFAULT_VELOCITY: u8 = 100;

/// One note: half-open frame interval `[onset, offset)` at a given pitch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset: usize,
    pub offset: usize,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn new(pitch: u8, onset: usize, offset: usize) -> Self {
        NoteEvent {
            pitch,
            onset,
            offset,
            velocity: DEFAULT_VELOCITY,
        }
    }
}

impl PartialOrd for NoteEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for NoteEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.onset, self.pitch, self.offset, self.velocity).cmp(&(
            other.onset,
            other.pitch,
            other.offset,
            other.velocity,
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CodecError {
    PitchOutOfRange { pitch: u8, n_pitches: usize },
    EmptyInterval { pitch: u8, onset: usize, offset: usize },
    FrameOutOfRange { pitch: u8, offset: usize, n_frames: usize },
    OverlappingNotes { pitch: u8, frame: usize },
    BadHeader(String),
    Truncated,
}

impl std::fmt::Display for CodecError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CodecError::PitchOutOfRange { pitch, n_pitches } => {
                write!(f, "pitch {pitch} outside roll range ({n_pitches} rows from {PITCH_MIN})")
            }
            CodecError::EmptyInterval { pitch, onset, offset } => {
                write!(f, "note at pitch {pitch} has empty interval [{onset}, {offset})")
            }
            CodecError::FrameOutOfRange { pitch, offset, n_frames } => {
                write!(f, "note at pitch {pitch} ends at frame {offset}, roll has {n_frames}")
            }
            CodecError::OverlappingNotes { pitch, frame } => {
                write!(f, "overlapping same-pitch notes at pitch {pitch}, frame {frame}")
            }
            CodecError::BadHeader(msg) => write!(f, "bad roll file: {msg}"),
            CodecError::Truncated => write!(f, "roll file truncated"),
        }
    }
}

impl std::error::Error for CodecError {}

/// Articulation + sustain planes, `[n_pitches, n_frames]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct PianoRoll {
    pub articulation: Tensor<f32>,
    pub sustain: Tensor<f32>,
    pub frame_rate: f64,
}

impl PianoRoll {
    pub fn zeros(n_pitches: usize, n_frames: usize, frame_rate: f64) -> Self {
        PianoRoll {
            articulation: Tensor::zeros(&[n_pitches, n_frames]),
            sustain: Tensor::zeros(&[n_pitches, n_frames]),
            frame_rate,
        }
    }

    pub fn n_pitches(&self) -> usize {
        self.articulation.rows()
    }

    pub fn n_frames(&self) -> usize {
        self.articulation.cols()
    }

    /// Per-frame network maps `[2, n_pitches]`: channel 0 articulation,
    /// channel 1 sustain.
    pub fn frames<T: Scalar>(&self) -> Vec<Tensor<T>> {
        let p = self.n_pitches();
        (0..self.n_frames())
            .map(|t| {
                let mut m = Tensor::zeros(&[2, p]);
                for row in 0..p {
                    m.set(0, row, T::from_f64(self.articulation.at(row, t) as f64));
                    m.set(1, row, T::from_f64(self.sustain.at(row, t) as f64));
                }
                m
            })
            .collect()
    }

    /// Inverse of [`PianoRoll::frames`].
    pub fn from_frames<T: Scalar>(frames: &[Tensor<T>], frame_rate: f64) -> Self {
        assert!(!frames.is_empty(), "cannot build a roll from zero frames");
        let p = frames[0].cols();
        let mut roll = PianoRoll::zeros(p, frames.len(), frame_rate);
        for (t, m) in frames.iter().enumerate() {
            assert_eq!(m.shape(), &[2, p], "frame {t} shape mismatch");
            for row in 0..p {
                roll.articulation.set(row, t, m.at(0, row).as_f64() as f32);
                roll.sustain.set(row, t, m.at(1, row).as_f64() as f32);
            }
        }
        roll
    }
}

/// Rasterizes note events into a binary roll. Same-pitch notes must not
/// overlap; back-to-back notes (offset == next onset) are fine and remain
/// distinguishable through the articulation channel.
pub fn encode(
    notes: &[NoteEvent],
    n_pitches: usize,
    n_frames: usize,
    frame_rate: f64,
) -> Result<PianoRoll, CodecError> {
    let mut roll = PianoRoll::zeros(n_pitches, n_frames, frame_rate);
    let mut by_pitch: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_pitches];
    for n in notes {
        if n.pitch < PITCH_MIN || (n.pitch - PITCH_MIN) as usize >= n_pitches {
            return Err(CodecError::PitchOutOfRange {
                pitch: n.pitch,
                n_pitches,
            });
        }
        if n.offset <= n.onset {
            return Err(CodecError::EmptyInterval {
                pitch: n.pitch,
                onset: n.onset,
                offset: n.offset,
            });
        }
        if n.offset > n_frames {
            return Err(CodecError::FrameOutOfRange {
                pitch: n.pitch,
                offset: n.offset,
                n_frames,
            });
        }
        by_pitch[(n.pitch - PITCH_MIN) as usize].push((n.onset, n.offset));
    }
    for (row, intervals) in by_pitch.iter_mut().enumerate() {
        intervals.sort_unstable();
        for pair in intervals.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(CodecError::OverlappingNotes {
                    pitch: PITCH_MIN + row as u8,
                    frame: pair[1].0,
                });
            }
        }
        for &(onset, offset) in intervals.iter() {
            roll.articulation.set(row, onset, 1.0);
            for t in onset..offset {
                roll.sustain.set(row, t, 1.0);
            }
        }
    }
    Ok(roll)
}

/// Streaming peak picker: feed `[2, n_pitches]` activation frames one at a
/// time; `finish` closes notes still sounding at the stream end.
#[derive(Clone, Debug)]
pub struct StreamingDecoder {
    theta_art: f32,
    theta_sus: f32,
    open: Vec<Option<usize>>,
    t: usize,
    notes: Vec<NoteEvent>,
}

impl StreamingDecoder {
    pub fn new(n_pitches: usize, theta_art: f32, theta_sus: f32) -> Self {
        StreamingDecoder {
            theta_art,
            theta_sus,
            open: vec![None; n_pitches],
            t: 0,
            notes: Vec::new(),
        }
    }

    pub fn push_frame<T: Scalar>(&mut self, frame: &Tensor<T>) {
        let t = self.t;
        for row in 0..self.open.len() {
            let art = frame.at(0, row).as_f64() as f32;
            let sus = frame.at(1, row).as_f64() as f32;
            match self.open[row] {
                Some(onset) => {
                    if sus < self.theta_sus {
                        self.emit(row, onset, t);
                        self.open[row] = None;
                        if art > self.theta_art {
                            self.open[row] = Some(t);
                        }
                    } else if art > self.theta_art {
                        // Fragmentation: extra offset plus a fresh onset.
                        // Consecutive articulation frames fragment per
                        // frame; that is what keeps back-to-back one-frame
                        // notes exactly recoverable.
                        self.emit(row, onset, t);
                        self.open[row] = Some(t);
                    }
                }
                None => {
                    if art > self.theta_art {
                        self.open[row] = Some(t);
                    }
                }
            }
        }
        self.t += 1;
    }

    pub fn finish(mut self) -> Vec<NoteEvent> {
        for row in 0..self.open.len() {
            if let Some(onset) = self.open[row].take() {
                self.emit(row, onset, self.t);
            }
        }
        self.notes.sort();
        self.notes
    }

    fn emit(&mut self, row: usize, onset: usize, offset: usize) {
        self.notes
            .push(NoteEvent::new(PITCH_MIN + row as u8, onset, offset));
    }
}

/// Thresholded peak picking over a whole roll. Any real-valued roll
/// decodes; notes still active at the last frame close at `n_frames`.
pub fn decode(roll: &PianoRoll, theta_art: f32, theta_sus: f32) -> Vec<NoteEvent> {
    let mut dec = StreamingDecoder::new(roll.n_pitches(), theta_art, theta_sus);
    let p = roll.n_pitches();
    for t in 0..roll.n_frames() {
        let mut frame = Tensor::<f32>::zeros(&[2, p]);
        for row in 0..p {
            frame.set(0, row, roll.articulation.at(row, t));
            frame.set(1, row, roll.sustain.at(row, t));
        }
        dec.push_frame(&frame);
    }
    dec.finish()
}

/// Raises the roll to `factor` times its frame rate: sustain repeats per
/// frame, articulation lands only on the first repeat of each source frame.
pub fn resample_roll(roll: &PianoRoll, factor: usize) -> PianoRoll {
    assert!(factor >= 1, "resample factor must be >= 1");
    let p = roll.n_pitches();
    let n = roll.n_frames();
    let mut out = PianoRoll::zeros(p, n * factor, roll.frame_rate * factor as f64);
    for row in 0..p {
        for t in 0..n {
            let s = roll.sustain.at(row, t);
            for j in 0..factor {
                out.sustain.set(row, t * factor + j, s);
            }
            out.articulation.set(row, t * factor, roll.articulation.at(row, t));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Roll interchange file: magic "PROL", u32 n_pitches, u32 n_frames,
// f32 frame_rate, articulation plane, sustain plane; f32 little-endian,
// row-major (pitch, frame).
// ---------------------------------------------------------------------------

pub const ROLL_MAGIC: &[u8; 4] = b"PROL";

pub fn write_roll(roll: &PianoRoll) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ROLL_MAGIC);
    out.extend_from_slice(&(roll.n_pitches() as u32).to_le_bytes());
    out.extend_from_slice(&(roll.n_frames() as u32).to_le_bytes());
    out.extend_from_slice(&(roll.frame_rate as f32).to_le_bytes());
    for &v in roll.articulation.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in roll.sustain.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_roll(bytes: &[u8]) -> Result<PianoRoll, CodecError> {
    if bytes.len() < 16 {
        return Err(CodecError::Truncated);
    }
    if &bytes[0..4] != ROLL_MAGIC {
        return Err(CodecError::BadHeader("bad magic".into()));
    }
    let n_pitches = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n_frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frame_rate = f32::from_le_bytes(bytes[12..16].try_into().unwrap()) as f64;
    let plane = n_pitches * n_frames;
    let need = 16 + plane * 8;
    if bytes.len() < need {
        return Err(CodecError::Truncated);
    }
    let read_plane = |from: usize| -> Tensor<f32> {
        let data = bytes[from..from + plane * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::from_vec(&[n_pitches, n_frames], data)
    };
    Ok(PianoRoll {
        articulation: read_plane(16),
        sustain: read_plane(16 + plane * 4),
        frame_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn row<'a>(t: &'a Tensor<f32>, pitch: u8) -> &'a [f32] {
        t.row((pitch - PITCH_MIN) as usize)
    }

    #[test]
    fn encode_empty_is_all_zero() {
        let roll = encode(&[], 88, 10, 86.0).unwrap();
        assert!(roll.articulation.data().iter().all(|&v| v == 0.0));
        assert!(roll.sustain.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_single_note_trace() {
        let roll = encode(&[NoteEvent::new(60, 10, 20)], 88, 30, 86.0).unwrap();
        let sus = row(&roll.sustain, 60);
        let art = row(&roll.articulation, 60);
        for t in 0..30 {
            assert_eq!(sus[t], if (10..20).contains(&t) { 1.0 } else { 0.0 });
            assert_eq!(art[t], if t == 10 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn encode_back_to_back_notes() {
        let notes = [NoteEvent::new(70, 5, 8), NoteEvent::new(70, 8, 11)];
        let roll = encode(&notes, 88, 12, 86.0).unwrap();
        let sus = row(&roll.sustain, 70);
        let art = row(&roll.articulation, 70);
        for t in 5..11 {
            assert_eq!(sus[t], 1.0);
        }
        assert_eq!(art[5], 1.0);
        assert_eq!(art[8], 1.0);
        assert_eq!(art.iter().filter(|&&v| v == 1.0).count(), 2);
    }

    #[test]
    fn encode_rejects_overlap_and_bad_notes() {
        let overlap = [NoteEvent::new(60, 0, 6), NoteEvent::new(60, 5, 9)];
        assert!(matches!(
            encode(&overlap, 88, 10, 86.0),
            Err(CodecError::OverlappingNotes { pitch: 60, frame: 5 })
        ));
        assert!(matches!(
            encode(&[NoteEvent::new(10, 0, 2)], 88, 10, 86.0),
            Err(CodecError::PitchOutOfRange { .. })
        ));
        assert!(matches!(
            encode(&[NoteEvent::new(60, 5, 5)], 88, 10, 86.0),
            Err(CodecError::EmptyInterval { .. })
        ));
        assert!(matches!(
            encode(&[NoteEvent::new(60, 5, 20)], 88, 10, 86.0),
            Err(CodecError::FrameOutOfRange { .. })
        ));
    }

    fn roll_from_rows(art: &[f32], sus: &[f32]) -> PianoRoll {
        let mut roll = PianoRoll::zeros(1, art.len(), 86.0);
        for (t, (&a, &s)) in art.iter().zip(sus).enumerate() {
            roll.articulation.set(0, t, a);
            roll.sustain.set(0, t, s);
        }
        roll
    }

    #[test]
    fn decode_simple_trace() {
        let roll = roll_from_rows(&[0.1, 0.9, 0.2, 0.2, 0.1], &[0.1, 0.9, 0.8, 0.6, 0.2]);
        let notes = decode(&roll, 0.5, 0.5);
        assert_eq!(notes, vec![NoteEvent::new(PITCH_MIN, 1, 4)]);
    }

    #[test]
    fn decode_fragmentation_trace() {
        let roll = roll_from_rows(&[0.9, 0.1, 0.9, 0.1], &[0.9, 0.9, 0.9, 0.9]);
        let notes = decode(&roll, 0.5, 0.5);
        assert_eq!(
            notes,
            vec![NoteEvent::new(PITCH_MIN, 0, 2), NoteEvent::new(PITCH_MIN, 2, 4)]
        );
    }

    #[test]
    fn decode_below_thresholds_is_empty() {
        let roll = roll_from_rows(&[0.4, 0.4, 0.4], &[0.4, 0.4, 0.4]);
        assert!(decode(&roll, 0.5, 0.5).is_empty());
    }

    #[test]
    fn consecutive_articulation_frames_fragment_per_frame() {
        // Indistinguishable from back-to-back one-frame notes, which must
        // round-trip exactly, so each high frame opens a fresh note.
        let roll = roll_from_rows(&[0.9, 0.9, 0.9, 0.1], &[0.9, 0.9, 0.9, 0.9]);
        let notes = decode(&roll, 0.5, 0.5);
        assert_eq!(
            notes,
            vec![
                NoteEvent::new(PITCH_MIN, 0, 1),
                NoteEvent::new(PITCH_MIN, 1, 2),
                NoteEvent::new(PITCH_MIN, 2, 4),
            ]
        );
    }

    #[test]
    fn decode_ignores_trailing_silence() {
        let mut art = vec![0.9, 0.1, 0.1];
        let mut sus = vec![0.9, 0.9, 0.2];
        let base = decode(&roll_from_rows(&art, &sus), 0.5, 0.5);
        art.extend([0.0; 7]);
        sus.extend([0.0; 7]);
        let padded = decode(&roll_from_rows(&art, &sus), 0.5, 0.5);
        assert_eq!(base, padded);
    }

    fn random_notes(rng: &mut ChaCha8Rng, n_pitches: usize, n_frames: usize) -> Vec<NoteEvent> {
        let mut notes = Vec::new();
        for row in 0..n_pitches {
            let mut t = 0usize;
            while t + 2 < n_frames && rng.gen_bool(0.6) {
                let onset = t + rng.gen_range(0..4);
                if onset + 1 >= n_frames {
                    break;
                }
                let offset = (onset + 1 + rng.gen_range(0..6)).min(n_frames);
                notes.push(NoteEvent::new(PITCH_MIN + row as u8, onset, offset));
                t = offset; // back-to-back allowed
            }
        }
        notes.sort();
        notes
    }

    #[test]
    fn roundtrip_random_note_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let notes = random_notes(&mut rng, 12, 40);
            let roll = encode(&notes, 12, 40, 86.0).unwrap();
            for theta in [0.25f32, 0.5, 0.9] {
                let decoded = decode(&roll, theta, theta);
                assert_eq!(decoded, notes, "theta {theta}");
            }
        }
    }

    #[test]
    fn raising_sustain_threshold_never_lengthens_notes() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let mut roll = PianoRoll::zeros(4, 30, 86.0);
        for v in roll.articulation.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        for v in roll.sustain.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let low = decode(&roll, 0.5, 0.3);
        let high = decode(&roll, 0.5, 0.7);
        // Match notes by (pitch, onset): offsets may only shrink.
        for h in &high {
            if let Some(l) = low.iter().find(|l| l.pitch == h.pitch && l.onset == h.onset) {
                assert!(h.offset <= l.offset);
            }
        }
        for notes in [&low, &high] {
            for n in notes.iter() {
                assert!(n.offset > n.onset);
            }
        }
    }

    #[test]
    fn resample_places_articulation_on_first_repeat() {
        let mut roll = PianoRoll::zeros(1, 4, 43.0);
        roll.articulation.set(0, 3, 1.0);
        roll.sustain.set(0, 3, 1.0);
        roll.sustain.set(0, 1, 1.0);
        let up = resample_roll(&roll, 2);
        assert_eq!(up.n_frames(), 8);
        assert!((up.frame_rate - 86.0).abs() < 1e-12);
        assert_eq!(up.articulation.row(0), &[0., 0., 0., 0., 0., 0., 1., 0.]);
        assert_eq!(up.sustain.row(0), &[0., 0., 1., 1., 0., 0., 1., 1.]);
        let same = resample_roll(&roll, 1);
        assert_eq!(same, roll);
    }

    #[test]
    fn roll_file_roundtrip() {
        let notes = [NoteEvent::new(40, 2, 9), NoteEvent::new(52, 0, 4)];
        let roll = encode(&notes, 88, 12, 86.0).unwrap();
        let bytes = write_roll(&roll);
        assert_eq!(&bytes[0..4], b"PROL");
        let back = read_roll(&bytes).unwrap();
        assert_eq!(back.articulation, roll.articulation);
        assert_eq!(back.sustain, roll.sustain);
        assert!(read_roll(&bytes[..bytes.len() - 5]).is_err());
    }

    #[test]
    fn frames_conversion_roundtrip() {
        let notes = [NoteEvent::new(30, 1, 5), NoteEvent::new(75, 3, 6)];
        let roll = encode(&notes, 88, 8, 86.0).unwrap();
        let frames = roll.frames::<f32>();
        assert_eq!(frames.len(), 8);
        assert_eq!(frames[0].shape(), &[2, 88]);
        let back = PianoRoll::from_frames(&frames, roll.frame_rate);
        assert_eq!(back, roll);
    }
}
