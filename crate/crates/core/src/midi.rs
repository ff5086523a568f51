//! Standard MIDI File serialization: single-track format 0 out, format 0/1
//! in. Times are seconds at the API boundary; ticks internally.

use crate::pianoroll::DEFAULT_VELOCITY;

/// A note with times in seconds (half-open `[onset, offset)`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedNote {
    pub pitch: u8,
    pub onset: f64,
    pub offset: f64,
    pub velocity: u8,
}

impl TimedNote {
    pub fn new(pitch: u8, onset: f64, offset: f64) -> Self {
        TimedNote {
            pitch,
            onset,
            offset,
            velocity: DEFAULT_VELOCITY,
        }
    }
}

pub const DEFAULT_PPQ: u16 = 480;
/// Microseconds per quarter note at 120 BPM.
pub const DEFAULT_TEMPO: u32 = 500_000;

#[derive(Clone, Debug, PartialEq)]
pub struct MidiDocument {
    /// Ticks per quarter note.
    pub ppq: u16,
    /// Microseconds per quarter note.
    pub tempo: u32,
    pub notes: Vec<TimedNote>,
}

impl Default for MidiDocument {
    fn default() -> Self {
        MidiDocument {
            ppq: DEFAULT_PPQ,
            tempo: DEFAULT_TEMPO,
            notes: Vec::new(),
        }
    }
}

impl MidiDocument {
    pub fn from_notes(notes: Vec<TimedNote>) -> Self {
        MidiDocument {
            notes,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MidiError {
    Truncated,
    BadChunk(String),
    UnsupportedFormat(u16),
    SmpteDivision,
    TickOverflow { tick: u64 },
    RunningStatusWithoutStatus { offset: usize },
    UnpairedNoteOn { pitch: u8, tick: u64 },
    UnpairedNoteOff { pitch: u8, tick: u64 },
    TempoChange { tick: u64 },
    BadDocument(String),
}

impl std::fmt::Display for MidiError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MidiError::Truncated => write!(f, "midi data truncated"),
            MidiError::BadChunk(msg) => write!(f, "malformed midi chunk: {msg}"),
            MidiError::UnsupportedFormat(v) => write!(f, "unsupported midi format {v}"),
            MidiError::SmpteDivision => write!(f, "SMPTE time division is unsupported"),
            MidiError::TickOverflow { tick } => {
                write!(f, "delta time {tick} exceeds 28-bit variable-length capacity")
            }
            MidiError::RunningStatusWithoutStatus { offset } => {
                write!(f, "running status byte with no prior status at offset {offset}")
            }
            MidiError::UnpairedNoteOn { pitch, tick } => {
                write!(f, "note-on without matching note-off: pitch {pitch} at tick {tick}")
            }
            MidiError::UnpairedNoteOff { pitch, tick } => {
                write!(f, "note-off without matching note-on: pitch {pitch} at tick {tick}")
            }
            MidiError::TempoChange { tick } => {
                write!(f, "tempo change at tick {tick} is unsupported (single-tempo files only)")
            }
            MidiError::BadDocument(msg) => write!(f, "invalid midi document: {msg}"),
        }
    }
}

impl std::error::Error for MidiError {}

/// Standard variable-length quantity, at most 28 bits.
fn push_vlq(out: &mut Vec<u8>, value: u64) -> Result<(), MidiError> {
    if value >= 1 << 28 {
        return Err(MidiError::TickOverflow { tick: value });
    }
    let mut shifted = [0u8; 4];
    let mut n = 0;
    let mut v = value;
    loop {
        shifted[n] = (v & 0x7f) as u8;
        v >>= 7;
        n += 1;
        if v == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut byte = shifted[i];
        if i != 0 {
            byte |= 0x80;
        }
        out.push(byte);
    }
    Ok(())
}

fn seconds_to_tick(seconds: f64, tempo: u32, ppq: u16) -> u64 {
    (seconds * 1e6 / tempo as f64 * ppq as f64).round() as u64
}

fn tick_to_seconds(tick: u64, tempo: u32, ppq: u16) -> f64 {
    tick as f64 * tempo as f64 / (1e6 * ppq as f64)
}

/// Serializes a single-track format-0 file: tempo meta event first, then
/// note-on/note-off pairs on channel 0, note-offs before note-ons at equal
/// ticks, end-of-track meta last. Byte output is a pure function of the
/// document.
pub fn write_smf(doc: &MidiDocument) -> Result<Vec<u8>, MidiError> {
    if doc.ppq == 0 || doc.ppq & 0x8000 != 0 {
        return Err(MidiError::BadDocument("ppq must be in 1..=32767".into()));
    }
    if doc.tempo == 0 {
        return Err(MidiError::BadDocument("tempo must be positive".into()));
    }
    for n in &doc.notes {
        if !(n.onset >= 0.0 && n.offset > n.onset) {
            return Err(MidiError::BadDocument(format!(
                "note at pitch {} has invalid interval [{}, {})",
                n.pitch, n.onset, n.offset
            )));
        }
    }

    // (tick, kind, pitch, velocity); kind 0 = note-off so that equal-tick
    // offs sort before ons.
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(doc.notes.len() * 2);
    for n in &doc.notes {
        let on = seconds_to_tick(n.onset, doc.tempo, doc.ppq);
        let off = seconds_to_tick(n.offset, doc.tempo, doc.ppq);
        events.push((on, 1, n.pitch, n.velocity));
        events.push((off, 0, n.pitch, 0));
    }
    events.sort_unstable_by_key(|&(tick, kind, pitch, _)| (tick, kind, pitch));

    let mut track = Vec::new();
    // Tempo meta event at delta 0.
    track.extend_from_slice(&[0x00, 0xFF, 0x51, 0x03]);
    track.extend_from_slice(&doc.tempo.to_be_bytes()[1..4]);

    let mut cursor = 0u64;
    for &(tick, kind, pitch, velocity) in &events {
        push_vlq(&mut track, tick - cursor)?;
        cursor = tick;
        let status = if kind == 1 { 0x90 } else { 0x80 };
        track.extend_from_slice(&[status, pitch, velocity]);
    }
    // End of track.
    track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(14 + 8 + track.len());
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes()); // format 0
    out.extend_from_slice(&1u16.to_be_bytes()); // one track
    out.extend_from_slice(&doc.ppq.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

struct TrackEvent {
    tick: u64,
    status: u8,
    data1: u8,
    data2: u8,
}

fn read_vlq(bytes: &[u8], pos: &mut usize) -> Result<u64, MidiError> {
    let mut value = 0u64;
    for _ in 0..4 {
        let b = *bytes.get(*pos).ok_or(MidiError::Truncated)?;
        *pos += 1;
        value = (value << 7) | (b & 0x7f) as u64;
        if b & 0x80 == 0 {
            return Ok(value);
        }
    }
    Err(MidiError::BadChunk("variable-length quantity exceeds 4 bytes".into()))
}

/// Parses one track chunk into absolute-tick channel events, and reports
/// tempo meta events through `tempo_events`.
fn parse_track(
    chunk: &[u8],
    events: &mut Vec<TrackEvent>,
    tempo_events: &mut Vec<(u64, u32)>,
) -> Result<(), MidiError> {
    let mut pos = 0usize;
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    while pos < chunk.len() {
        tick += read_vlq(chunk, &mut pos)?;
        let first = *chunk.get(pos).ok_or(MidiError::Truncated)?;
        let status = if first & 0x80 != 0 {
            pos += 1;
            first
        } else {
            running.ok_or(MidiError::RunningStatusWithoutStatus { offset: pos })?
        };
        match status {
            0xFF => {
                let meta = *chunk.get(pos).ok_or(MidiError::Truncated)?;
                pos += 1;
                let len = read_vlq(chunk, &mut pos)? as usize;
                if pos + len > chunk.len() {
                    return Err(MidiError::Truncated);
                }
                if meta == 0x51 {
                    if len != 3 {
                        return Err(MidiError::BadChunk("tempo meta must be 3 bytes".into()));
                    }
                    let t = u32::from_be_bytes([0, chunk[pos], chunk[pos + 1], chunk[pos + 2]]);
                    tempo_events.push((tick, t));
                }
                if meta == 0x2F {
                    return Ok(());
                }
                pos += len;
                running = None;
            }
            0xF0 | 0xF7 => {
                let len = read_vlq(chunk, &mut pos)? as usize;
                if pos + len > chunk.len() {
                    return Err(MidiError::Truncated);
                }
                pos += len;
                running = None;
            }
            _ => {
                running = Some(status);
                let kind = status & 0xF0;
                let n_data = match kind {
                    0xC0 | 0xD0 => 1,
                    0x80 | 0x90 | 0xA0 | 0xB0 | 0xE0 => 2,
                    _ => return Err(MidiError::BadChunk(format!("status byte {status:#04x}"))),
                };
                if pos + n_data > chunk.len() {
                    return Err(MidiError::Truncated);
                }
                let data1 = chunk[pos];
                let data2 = if n_data == 2 { chunk[pos + 1] } else { 0 };
                pos += n_data;
                if kind == 0x80 || kind == 0x90 {
                    events.push(TrackEvent {
                        tick,
                        status,
                        data1,
                        data2,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Reads a format-0 or format-1 file: tracks merge by absolute tick,
/// note-ons pair with the next same-pitch same-channel note-off (or
/// velocity-0 note-on), the first tempo event applies. A second tempo
/// event is rejected.
pub fn read_smf(bytes: &[u8]) -> Result<MidiDocument, MidiError> {
    if bytes.len() < 14 {
        return Err(MidiError::Truncated);
    }
    if &bytes[0..4] != b"MThd" {
        return Err(MidiError::BadChunk("missing MThd header".into()));
    }
    let header_len = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if header_len < 6 || 8 + header_len > bytes.len() {
        return Err(MidiError::BadChunk("bad header length".into()));
    }
    let format = u16::from_be_bytes(bytes[8..10].try_into().unwrap());
    if format > 1 {
        return Err(MidiError::UnsupportedFormat(format));
    }
    let ntrks = u16::from_be_bytes(bytes[10..12].try_into().unwrap());
    let division = u16::from_be_bytes(bytes[12..14].try_into().unwrap());
    if division & 0x8000 != 0 {
        return Err(MidiError::SmpteDivision);
    }
    if division == 0 {
        return Err(MidiError::BadChunk("division must be positive".into()));
    }

    let mut events = Vec::new();
    let mut tempo_events = Vec::new();
    let mut pos = 8 + header_len;
    let mut tracks_seen = 0;
    while tracks_seen < ntrks {
        if pos + 8 > bytes.len() {
            return Err(MidiError::Truncated);
        }
        let tag = &bytes[pos..pos + 4];
        let len = u32::from_be_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if pos + len > bytes.len() {
            return Err(MidiError::Truncated);
        }
        if tag == b"MTrk" {
            parse_track(&bytes[pos..pos + len], &mut events, &mut tempo_events)?;
            tracks_seen += 1;
        }
        pos += len;
    }

    tempo_events.sort_by_key(|&(tick, _)| tick);
    let tempo = match tempo_events.len() {
        0 => DEFAULT_TEMPO,
        1 => tempo_events[0].1,
        _ => return Err(MidiError::TempoChange { tick: tempo_events[1].0 }),
    };

    events.sort_by_key(|e| e.tick);

    // FIFO pairing per (channel, pitch).
    let mut open: Vec<Vec<(u64, u8)>> = vec![Vec::new(); 16 * 128];
    let mut notes = Vec::new();
    for e in &events {
        let channel = (e.status & 0x0F) as usize;
        let pitch = e.data1 & 0x7F;
        let slot = channel * 128 + pitch as usize;
        let is_on = e.status & 0xF0 == 0x90 && e.data2 > 0;
        if is_on {
            open[slot].push((e.tick, e.data2));
        } else {
            if open[slot].is_empty() {
                return Err(MidiError::UnpairedNoteOff {
                    pitch,
                    tick: e.tick,
                });
            }
            let (on_tick, velocity) = open[slot].remove(0);
            if e.tick > on_tick {
                notes.push(TimedNote {
                    pitch,
                    onset: tick_to_seconds(on_tick, tempo, division),
                    offset: tick_to_seconds(e.tick, tempo, division),
                    velocity,
                });
            }
        }
    }
    for (slot, pending) in open.iter().enumerate() {
        if let Some(&(tick, _)) = pending.first() {
            return Err(MidiError::UnpairedNoteOn {
                pitch: (slot % 128) as u8,
                tick,
            });
        }
    }

    notes.sort_by(|a, b| {
        a.onset
            .partial_cmp(&b.onset)
            .unwrap()
            .then(a.pitch.cmp(&b.pitch))
    });
    Ok(MidiDocument {
        ppq: division,
        tempo,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_exact() {
        let doc = MidiDocument::default();
        let bytes = write_smf(&doc).unwrap();
        assert_eq!(
            &bytes[0..14],
            &[0x4D, 0x54, 0x68, 0x64, 0x00, 0x00, 0x00, 0x06, 0x00, 0x00, 0x00, 0x01, 0x01, 0xE0]
        );
    }

    #[test]
    fn vlq_encodings() {
        let cases: &[(u64, &[u8])] = &[
            (0, &[0x00]),
            (0x40, &[0x40]),
            (0x7F, &[0x7F]),
            (0x80, &[0x81, 0x00]),
            (0x2000, &[0xC0, 0x00]),
            (0x0FFF_FFFF, &[0xFF, 0xFF, 0xFF, 0x7F]),
        ];
        for &(v, expect) in cases {
            let mut out = Vec::new();
            push_vlq(&mut out, v).unwrap();
            assert_eq!(out, expect, "value {v}");
        }
        let mut out = Vec::new();
        assert!(matches!(
            push_vlq(&mut out, 1 << 28),
            Err(MidiError::TickOverflow { .. })
        ));
    }

    #[test]
    fn first_note_on_bytes() {
        let doc = MidiDocument::from_notes(vec![TimedNote::new(60, 0.0, 1.0)]);
        let bytes = write_smf(&doc).unwrap();
        // Track data starts after MThd (14) + MTrk tag/len (8); the first
        // event is the tempo meta, then delta 0, note-on.
        let track = &bytes[22..];
        assert_eq!(&track[0..7], &[0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20]);
        assert_eq!(&track[7..11], &[0x00, 0x90, 0x3C, 0x64]);
    }

    #[test]
    fn offs_precede_ons_at_equal_tick() {
        let doc = MidiDocument::from_notes(vec![
            TimedNote::new(60, 0.0, 1.0),
            TimedNote::new(60, 1.0, 2.0),
        ]);
        let bytes = write_smf(&doc).unwrap();
        let track = &bytes[22..];
        // Find the two events at tick of 1.0 s = 960 ticks.
        let mut statuses = Vec::new();
        let mut pos = 7; // skip tempo meta
        let mut tick = 0u64;
        loop {
            let mut p = pos;
            tick += read_vlq(track, &mut p).unwrap();
            let status = track[p];
            if status == 0xFF {
                break;
            }
            statuses.push((tick, status));
            pos = p + 3;
        }
        let at_960: Vec<u8> = statuses
            .iter()
            .filter(|&&(t, _)| t == 960)
            .map(|&(_, s)| s)
            .collect();
        assert_eq!(at_960, vec![0x80, 0x90]);
    }

    #[test]
    fn roundtrip_preserves_notes_within_a_tick() {
        let doc = MidiDocument::from_notes(vec![
            TimedNote::new(60, 0.1003, 0.5007),
            TimedNote::new(64, 0.25, 1.0),
            TimedNote {
                pitch: 72,
                onset: 0.25,
                offset: 0.75,
                velocity: 41,
            },
        ]);
        let bytes = write_smf(&doc).unwrap();
        let back = read_smf(&bytes).unwrap();
        assert_eq!(back.notes.len(), 3);
        assert_eq!(back.ppq, doc.ppq);
        assert_eq!(back.tempo, doc.tempo);
        let tick = doc.tempo as f64 / 1e6 / doc.ppq as f64;
        for (a, b) in doc.notes.iter().zip(&back.notes) {
            assert_eq!(a.pitch, b.pitch);
            assert_eq!(a.velocity, b.velocity);
            assert!((a.onset - b.onset).abs() <= 0.5 * tick + 1e-9);
            assert!((a.offset - b.offset).abs() <= 0.5 * tick + 1e-9);
        }
    }

    #[test]
    fn empty_document_roundtrips() {
        let doc = MidiDocument::default();
        let bytes = write_smf(&doc).unwrap();
        let back = read_smf(&bytes).unwrap();
        assert!(back.notes.is_empty());
    }

    #[test]
    fn write_is_deterministic() {
        let doc = MidiDocument::from_notes(vec![
            TimedNote::new(60, 0.0, 0.5),
            TimedNote::new(67, 0.25, 0.9),
        ]);
        assert_eq!(write_smf(&doc).unwrap(), write_smf(&doc).unwrap());
    }

    #[test]
    fn unpaired_note_on_reports_pitch_and_tick() {
        // Hand-built track: tempo, note-on pitch 65 at tick 0, end of track.
        let mut track = vec![0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20];
        track.extend_from_slice(&[0x00, 0x90, 65, 100]);
        track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MThd");
        bytes.extend_from_slice(&6u32.to_be_bytes());
        bytes.extend_from_slice(&0u16.to_be_bytes());
        bytes.extend_from_slice(&1u16.to_be_bytes());
        bytes.extend_from_slice(&480u16.to_be_bytes());
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&track);
        assert_eq!(
            read_smf(&bytes).unwrap_err(),
            MidiError::UnpairedNoteOn { pitch: 65, tick: 0 }
        );
    }

    #[test]
    fn second_tempo_event_is_rejected() {
        let mut track = vec![0x00, 0xFF, 0x51, 0x03, 0x07, 0xA1, 0x20];
        track.extend_from_slice(&[0x60, 0xFF, 0x51, 0x03, 0x0F, 0x42, 0x40]);
        track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MThd");
        bytes.extend_from_slice(&6u32.to_be_bytes());
        bytes.extend_from_slice(&0u16.to_be_bytes());
        bytes.extend_from_slice(&1u16.to_be_bytes());
        bytes.extend_from_slice(&480u16.to_be_bytes());
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&track);
        assert!(matches!(
            read_smf(&bytes).unwrap_err(),
            MidiError::TempoChange { tick: 0x60 }
        ));
    }

    #[test]
    fn running_status_is_parsed() {
        // note-on 60, then running-status note-on 64, offs via velocity 0.
        let mut track = vec![0x00, 0x90, 60, 100];
        track.extend_from_slice(&[0x10, 64, 100]); // running status
        track.extend_from_slice(&[0x10, 60, 0]);
        track.extend_from_slice(&[0x10, 64, 0]);
        track.extend_from_slice(&[0x00, 0xFF, 0x2F, 0x00]);
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MThd");
        bytes.extend_from_slice(&6u32.to_be_bytes());
        bytes.extend_from_slice(&1u16.to_be_bytes()); // format 1 accepted
        bytes.extend_from_slice(&1u16.to_be_bytes());
        bytes.extend_from_slice(&480u16.to_be_bytes());
        bytes.extend_from_slice(b"MTrk");
        bytes.extend_from_slice(&(track.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&track);
        let doc = read_smf(&bytes).unwrap();
        assert_eq!(doc.notes.len(), 2);
        assert_eq!(doc.notes[0].pitch, 60);
        assert_eq!(doc.notes[1].pitch, 64);
    }
}
