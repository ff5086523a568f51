//! RIFF/WAVE input and output.
//!
//! Reads PCM 16-bit signed little-endian or IEEE float 32-bit; stereo and
//! multichannel input mixes down by averaging channels. Everything else is
//! rejected with a diagnostic. Reading is streaming so transcription never
//! holds a whole file in memory.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

/// Mono sample stream with its rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioBuffer {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug)]
pub enum AudioError {
    Io(std::io::Error),
    NotRiffWave,
    Truncated,
    MissingChunk(&'static str),
    UnsupportedEncoding { format_tag: u16, bits: u16 },
    BadChannelCount(u16),
    RateNotDecimable { got: u32, want: u32 },
}

impl std::fmt::Display for AudioError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AudioError::Io(e) => write!(f, "audio io error: {e}"),
            AudioError::NotRiffWave => write!(f, "not a RIFF/WAVE file"),
            AudioError::Truncated => write!(f, "wav data truncated"),
            AudioError::MissingChunk(c) => write!(f, "wav file has no '{c}' chunk"),
            AudioError::UnsupportedEncoding { format_tag, bits } => write!(
                f,
                "unsupported wav encoding (format tag {format_tag}, {bits} bits); \
                 expected 16-bit PCM or 32-bit float"
            ),
            AudioError::BadChannelCount(n) => write!(f, "wav has {n} channels"),
            AudioError::RateNotDecimable { got, want } => write!(
                f,
                "sample rate {got} Hz is not an integer multiple of the expected {want} Hz"
            ),
        }
    }
}

impl std::error::Error for AudioError {}

impl From<std::io::Error> for AudioError {
    fn from(e: std::io::Error) -> Self {
        AudioError::Io(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum SampleFormat {
    PcmI16,
    FloatF32,
}

/// Streaming WAV reader: parses the header eagerly, then hands out mono
/// mixed-down sample blocks on demand.
pub struct WavReader<R: Read> {
    src: R,
    format: SampleFormat,
    channels: usize,
    sample_rate: u32,
    /// Sample frames (all channels) left in the data chunk.
    frames_left: u64,
}

fn read_exact_or<R: Read>(src: &mut R, buf: &mut [u8]) -> Result<(), AudioError> {
    src.read_exact(buf).map_err(|_| AudioError::Truncated)
}

impl<R: Read> WavReader<R> {
    pub fn open(mut src: R) -> Result<Self, AudioError> {
        let mut hdr = [0u8; 12];
        read_exact_or(&mut src, &mut hdr)?;
        if &hdr[0..4] != b"RIFF" || &hdr[8..12] != b"WAVE" {
            return Err(AudioError::NotRiffWave);
        }

        let mut fmt: Option<(u16, u16, u16, u32)> = None; // tag, channels, bits, rate
        loop {
            let mut chunk_hdr = [0u8; 8];
            if src.read_exact(&mut chunk_hdr).is_err() {
                return Err(AudioError::MissingChunk(if fmt.is_none() { "fmt " } else { "data" }));
            }
            let tag = [chunk_hdr[0], chunk_hdr[1], chunk_hdr[2], chunk_hdr[3]];
            let size = u32::from_le_bytes(chunk_hdr[4..8].try_into().unwrap()) as u64;
            match &tag {
                b"fmt " => {
                    if size < 16 {
                        return Err(AudioError::Truncated);
                    }
                    let mut body = vec![0u8; size as usize + (size % 2) as usize];
                    read_exact_or(&mut src, &mut body)?;
                    let format_tag = u16::from_le_bytes(body[0..2].try_into().unwrap());
                    let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                    let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                    let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                    fmt = Some((format_tag, channels, bits, rate));
                }
                b"data" => {
                    let (format_tag, channels, bits, rate) =
                        fmt.ok_or(AudioError::MissingChunk("fmt "))?;
                    let format = match (format_tag, bits) {
                        (1, 16) => SampleFormat::PcmI16,
                        (3, 32) => SampleFormat::FloatF32,
                        _ => return Err(AudioError::UnsupportedEncoding { format_tag, bits }),
                    };
                    if channels == 0 {
                        return Err(AudioError::BadChannelCount(channels));
                    }
                    let bytes_per_frame = channels as u64 * (bits as u64 / 8);
                    return Ok(WavReader {
                        src,
                        format,
                        channels: channels as usize,
                        sample_rate: rate,
                        frames_left: size / bytes_per_frame,
                    });
                }
                _ => {
                    // Skip unknown chunks (word-aligned).
                    let skip = size + (size % 2);
                    std::io::copy(&mut (&mut src).take(skip), &mut std::io::sink())?;
                }
            }
        }
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frames_remaining(&self) -> u64 {
        self.frames_left
    }

    /// Reads up to `max_frames` mono samples (channel average, clamped to
    /// [-1, 1]). Returns an empty vector at end of data.
    pub fn read_block(&mut self, max_frames: usize) -> Result<Vec<f32>, AudioError> {
        let n = (self.frames_left.min(max_frames as u64)) as usize;
        if n == 0 {
            return Ok(Vec::new());
        }
        let bytes_per_sample = match self.format {
            SampleFormat::PcmI16 => 2,
            SampleFormat::FloatF32 => 4,
        };
        let mut raw = vec![0u8; n * self.channels * bytes_per_sample];
        read_exact_or(&mut self.src, &mut raw)?;
        self.frames_left -= n as u64;

        let inv_ch = 1.0f32 / self.channels as f32;
        let mut out = Vec::with_capacity(n);
        match self.format {
            SampleFormat::PcmI16 => {
                for frame in raw.chunks_exact(2 * self.channels) {
                    let mut acc = 0.0f32;
                    for s in frame.chunks_exact(2) {
                        let v = i16::from_le_bytes([s[0], s[1]]);
                        acc += v as f32 / 32768.0;
                    }
                    out.push((acc * inv_ch).clamp(-1.0, 1.0));
                }
            }
            SampleFormat::FloatF32 => {
                for frame in raw.chunks_exact(4 * self.channels) {
                    let mut acc = 0.0f32;
                    for s in frame.chunks_exact(4) {
                        acc += f32::from_le_bytes([s[0], s[1], s[2], s[3]]);
                    }
                    out.push((acc * inv_ch).clamp(-1.0, 1.0));
                }
            }
        }
        Ok(out)
    }
}

/// Reads a whole file into memory (tests and the trainer use this; the
/// transcriber streams instead).
pub fn read_wav(bytes: &[u8]) -> Result<AudioBuffer, AudioError> {
    let mut reader = WavReader::open(bytes)?;
    let mut samples = Vec::new();
    loop {
        let block = reader.read_block(1 << 16)?;
        if block.is_empty() {
            break;
        }
        samples.extend(block);
    }
    Ok(AudioBuffer {
        samples,
        sample_rate: reader.sample_rate(),
    })
}

pub fn read_wav_file(path: &Path) -> Result<AudioBuffer, AudioError> {
    let file = BufReader::new(File::open(path)?);
    let mut reader = WavReader::open(file)?;
    let mut samples = Vec::new();
    loop {
        let block = reader.read_block(1 << 16)?;
        if block.is_empty() {
            break;
        }
        samples.extend(block);
    }
    Ok(AudioBuffer {
        samples,
        sample_rate: reader.sample_rate(),
    })
}

/// Serializes mono 16-bit PCM.
pub fn write_wav_pcm16(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        // Same 1/32768 scale as the reader, clamped into i16 range.
        let v = (s.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_wav_file(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), AudioError> {
    let bytes = write_wav_pcm16(samples, sample_rate);
    let mut f = File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Streaming integer-factor decimator: boxcar mean over each group of
/// `factor` input samples. Carries partial groups across blocks.
#[derive(Debug, Clone)]
pub struct Decimator {
    factor: usize,
    acc: f64,
    count: usize,
}

impl Decimator {
    /// Fails unless `got` is an integer multiple of `want`.
    pub fn for_rates(got: u32, want: u32) -> Result<Decimator, AudioError> {
        if got == 0 || want == 0 || got % want != 0 {
            return Err(AudioError::RateNotDecimable { got, want });
        }
        Ok(Decimator {
            factor: (got / want) as usize,
            acc: 0.0,
            count: 0,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn push(&mut self, samples: &[f32], out: &mut Vec<f32>) {
        if self.factor == 1 {
            out.extend_from_slice(samples);
            return;
        }
        for &s in samples {
            self.acc += s as f64;
            self.count += 1;
            if self.count == self.factor {
                out.push((self.acc / self.factor as f64) as f32);
                self.acc = 0.0;
                self.count = 0;
            }
        }
    }
}
