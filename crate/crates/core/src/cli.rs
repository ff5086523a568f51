//! Command implementations behind the binary: transcribe, train, eval,
//! synth. Each returns a printable summary or a [`CliError`] carrying the
//! process exit code (0 ok, 2 input/data error, 3 config/model mismatch,
//! 1 internal). Output files are written atomically (temp + rename).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::audio::{Decimator, WavReader};
use crate::config::PipelineConfig;
use crate::eval::{
    framewise_prf, note_onset_offset_prf, note_onset_prf, PrfReport,
};
use crate::frontend::{stack_harmonics, cqt_offline, CqtPlan, SpectrogramStream};
use crate::midi::{read_smf, write_smf, MidiDocument, TimedNote};
use crate::network::{forward, load_parameters, save_parameters, Parameters, StreamState};
use crate::pianoroll::{encode, resample_roll, NoteEvent, PianoRoll, StreamingDecoder};
use crate::synth::{render, sample_score};
use crate::tensor::Tensor;
use crate::trainer::{train_with_hooks, TrainClip};

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input data; exit code 2.
    Data(String),
    /// Model/config mismatch or unloadable model; exit code 3.
    Model(String),
    /// Unexpected internal failure; exit code 1.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 2,
            CliError::Model(_) => 3,
            CliError::Internal(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Data(msg) | CliError::Model(msg) | CliError::Internal(msg) => {
                write!(f, "{msg}")
            }
        }
    }
}

impl std::error::Error for CliError {}

/// Writes via a sibling temp file and rename, so readers never observe a
/// half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    match path {
        Some(p) => PipelineConfig::parse_file(p)
            .map_err(|e| CliError::Data(format!("cannot load config '{}': {e}", p.display()))),
        None => PipelineConfig::default()
            .finalize()
            .map_err(|e| CliError::Internal(e.to_string())),
    }
}

pub fn build_plan(cfg: &PipelineConfig) -> Result<Arc<CqtPlan>, CliError> {
    CqtPlan::design(
        cfg.frontend.sample_rate,
        cfg.frontend.fmin,
        cfg.frontend.bins_per_octave,
        cfg.frontend.n_bins(),
        cfg.frontend.hop,
    )
    .map(Arc::new)
    .map_err(|e| CliError::Data(format!("invalid frontend parameters: {e}")))
}

/// Offline spectrogram of a whole mono buffer at the configured rate.
pub fn spectrogram_frames(
    samples: &[f32],
    cfg: &PipelineConfig,
    plan: &Arc<CqtPlan>,
) -> Result<Vec<Tensor<f32>>, CliError> {
    let samples64: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
    let mags = cqt_offline(plan.clone(), &samples64);
    let logs: Vec<Vec<f64>> = mags.iter().map(|m| crate::frontend::log_power(m)).collect();
    let spec = stack_harmonics(&logs, plan, cfg.frontend.n_pitch_bins, &cfg.frontend.harmonics)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(spec.frames_as::<f32>())
}

/// Frame-quantizes seconds-domain notes at the input rate and rasterizes
/// them to target roll frames at the output rate (encode + resample).
pub fn notes_to_target_frames(
    notes: &[TimedNote],
    input_fps: f64,
    upsample: usize,
    n_input_frames: usize,
) -> Result<Vec<Tensor<f32>>, CliError> {
    let roll = rasterize_notes(notes, input_fps, n_input_frames)?;
    Ok(resample_roll(&roll, upsample).frames::<f32>())
}

/// Rasterizes seconds-domain notes into an 88-row binary roll at `fps`.
/// Onset frame = floor(onset * fps); notes starting past the last frame
/// are dropped; offsets clamp to the roll.
pub fn rasterize_notes(
    notes: &[TimedNote],
    fps: f64,
    n_frames: usize,
) -> Result<PianoRoll, CliError> {
    let mut events = Vec::with_capacity(notes.len());
    for n in notes {
        if !(21..=108).contains(&n.pitch) {
            return Err(CliError::Data(format!(
                "note pitch {} outside the MIDI 21..=108 piano range",
                n.pitch
            )));
        }
        let onset = (n.onset * fps).floor() as usize;
        if onset >= n_frames {
            continue;
        }
        let offset = ((n.offset * fps).floor() as usize)
            .max(onset + 1)
            .min(n_frames);
        events.push(NoteEvent {
            pitch: n.pitch,
            onset,
            offset,
            velocity: n.velocity,
        });
    }
    encode(&events, 88, n_frames, fps).map_err(|e| CliError::Data(e.to_string()))
}

/// Converts frame-domain decoded notes to seconds at the output rate.
pub fn frames_to_seconds(notes: &[NoteEvent], output_fps: f64) -> Vec<TimedNote> {
    notes
        .iter()
        .map(|n| TimedNote {
            pitch: n.pitch,
            onset: n.onset as f64 / output_fps,
            offset: n.offset as f64 / output_fps,
            velocity: n.velocity,
        })
        .collect()
}

pub struct TranscribeOutcome {
    pub notes: Vec<TimedNote>,
    pub audio_seconds: f64,
    pub output_frames: usize,
}

/// Streaming transcription: WAV blocks feed the constant-Q stream, finished
/// spectrogram frames run through the network in `chunk`-frame segments
/// with carried state, and roll frames stream straight into the decoder.
/// No whole-file spectrogram or roll is retained.
pub fn transcribe_stream<R: Read>(
    mut wav: WavReader<R>,
    params: &Parameters<f32>,
    cfg: &PipelineConfig,
    chunk: usize,
) -> Result<TranscribeOutcome, CliError> {
    if chunk == 0 {
        return Err(CliError::Data("chunk size must be positive".into()));
    }
    let plan = build_plan(cfg)?;
    let mut decim = Decimator::for_rates(wav.sample_rate(), cfg.frontend.sample_rate)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let mut spec = SpectrogramStream::new(
        plan,
        cfg.frontend.n_pitch_bins,
        cfg.frontend.harmonics.clone(),
    )
    .map_err(|e| CliError::Data(e.to_string()))?;
    let mut state = StreamState::new(&cfg.network);
    let mut decoder = StreamingDecoder::new(
        cfg.network.n_pitches(),
        cfg.decoder.theta_art,
        cfg.decoder.theta_sus,
    );

    let mut pending: Vec<Tensor<f32>> = Vec::new();
    let mut n_samples = 0usize;
    let mut n_out = 0usize;

    let run_segments = |pending: &mut Vec<Tensor<f32>>,
                            state: &mut StreamState<f32>,
                            decoder: &mut StreamingDecoder,
                            flush: bool|
     -> usize {
        let mut emitted = 0;
        while pending.len() >= chunk || (flush && !pending.is_empty()) {
            let take = chunk.min(pending.len());
            let seg: Vec<Tensor<f32>> = pending.drain(..take).collect();
            for roll in forward(params, &seg, state) {
                decoder.push_frame(&roll);
                emitted += 1;
            }
        }
        emitted
    };

    loop {
        let block = wav
            .read_block(8192)
            .map_err(|e| CliError::Data(e.to_string()))?;
        if block.is_empty() {
            break;
        }
        let mut mono = Vec::new();
        decim.push(&block, &mut mono);
        n_samples += mono.len();
        let mono64: Vec<f64> = mono.iter().map(|&v| v as f64).collect();
        for frame in spec.push(&mono64) {
            pending.push(frame.cast::<f32>());
        }
        n_out += run_segments(&mut pending, &mut state, &mut decoder, false);
    }
    for frame in spec.finish() {
        pending.push(frame.cast::<f32>());
    }
    n_out += run_segments(&mut pending, &mut state, &mut decoder, true);

    let output_fps = cfg.output_frame_rate();
    let notes = frames_to_seconds(&decoder.finish(), output_fps);
    Ok(TranscribeOutcome {
        notes,
        audio_seconds: n_samples as f64 / cfg.frontend.sample_rate as f64,
        output_frames: n_out,
    })
}

pub fn cmd_transcribe(
    model: &Path,
    input: &Path,
    output: &Path,
    theta_art: Option<f32>,
    theta_sus: Option<f32>,
    chunk: usize,
    config: Option<&Path>,
) -> Result<String, CliError> {
    let mut cfg = load_config(config)?;
    if let Some(t) = theta_art {
        cfg.decoder.theta_art = t;
    }
    if let Some(t) = theta_sus {
        cfg.decoder.theta_sus = t;
    }
    let cfg = cfg
        .clone()
        .finalize()
        .map_err(|e| CliError::Model(e.to_string()))?;

    let model_bytes = fs::read(model).map_err(|e| {
        CliError::Model(format!("cannot read model file '{}': {e}", model.display()))
    })?;
    let params = load_parameters(&model_bytes, &cfg.network).map_err(|e| {
        CliError::Model(format!("cannot load model '{}': {e}", model.display()))
    })?;

    let file = fs::File::open(input)
        .map_err(|e| CliError::Data(format!("cannot open '{}': {e}", input.display())))?;
    let wav = WavReader::open(std::io::BufReader::new(file))
        .map_err(|e| CliError::Data(format!("cannot read '{}': {e}", input.display())))?;

    let started = Instant::now();
    let outcome = transcribe_stream(wav, &params, &cfg, chunk)?;
    let elapsed = started.elapsed().as_secs_f64();

    let doc = MidiDocument::from_notes(outcome.notes.clone());
    let bytes = write_smf(&doc).map_err(|e| CliError::Internal(e.to_string()))?;
    atomic_write(output, &bytes)
        .map_err(|e| CliError::Data(format!("cannot write '{}': {e}", output.display())))?;

    let rtf = if elapsed > 0.0 {
        outcome.audio_seconds / elapsed
    } else {
        f64::INFINITY
    };
    Ok(format!(
        "transcribed {:.2} s of audio into {} notes ({} roll frames, {:.1}x real time)",
        outcome.audio_seconds,
        outcome.notes.len(),
        outcome.output_frames,
        rtf
    ))
}

fn parse_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read manifest '{}': {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("clip_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(CliError::Data(format!(
                "manifest line {}: expected clip_id,wav_path,midi_path[,seed]",
                i + 1
            )));
        }
        pairs.push((base.join(fields[1].trim()), base.join(fields[2].trim())));
    }
    Ok(pairs)
}

/// Loads one (wav, midi) pair into a training clip.
pub fn load_clip(
    wav_path: &Path,
    midi_path: &Path,
    cfg: &PipelineConfig,
    plan: &Arc<CqtPlan>,
) -> Result<TrainClip, CliError> {
    let buf = crate::audio::read_wav_file(wav_path)
        .map_err(|e| CliError::Data(format!("'{}': {e}", wav_path.display())))?;
    let mut decim = Decimator::for_rates(buf.sample_rate, cfg.frontend.sample_rate)
        .map_err(|e| CliError::Data(format!("'{}': {e}", wav_path.display())))?;
    let mut mono = Vec::new();
    decim.push(&buf.samples, &mut mono);

    let input = spectrogram_frames(&mono, cfg, plan)?;
    let midi_bytes = fs::read(midi_path)
        .map_err(|e| CliError::Data(format!("'{}': {e}", midi_path.display())))?;
    let doc = read_smf(&midi_bytes)
        .map_err(|e| CliError::Data(format!("'{}': {e}", midi_path.display())))?;
    let target = notes_to_target_frames(
        &doc.notes,
        cfg.frontend.frame_rate(),
        cfg.network.upsample_factor,
        input.len(),
    )?;
    Ok(TrainClip { input, target })
}

pub fn cmd_train(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: u64,
    loss_csv: Option<&Path>,
) -> Result<String, CliError> {
    let cfg = load_config(config)?;
    let plan = build_plan(&cfg)?;
    let pairs = parse_manifest(data)?;
    if pairs.is_empty() {
        return Err(CliError::Data("empty dataset".into()));
    }
    let mut dataset = Vec::with_capacity(pairs.len());
    for (wav, midi) in &pairs {
        dataset.push(load_clip(wav, midi, &cfg, &plan)?);
    }

    let mut last_print = Instant::now();
    let mut observer = |trace: &crate::trainer::SegmentTrace| {
        if trace.lane == 0 && last_print.elapsed().as_secs_f64() > 5.0 {
            eprintln!("step {} loss {:.5}", trace.step, trace.loss);
            last_print = Instant::now();
        }
    };
    let out_owned = out.to_path_buf();
    let mut checkpoint = |step: usize, p: &Parameters<f32>| {
        let path = out_owned.with_extension(format!("step{step}.crnp"));
        let _ = atomic_write(&path, &save_parameters(p));
    };
    let (params, curve) = train_with_hooks(
        &dataset,
        &cfg.network,
        &cfg.trainer,
        seed,
        &mut observer,
        &mut checkpoint,
    )
    .map_err(|e| match e {
        crate::trainer::TrainError::NonFiniteGradient { .. }
        | crate::trainer::TrainError::NonFiniteLoss { .. } => CliError::Internal(e.to_string()),
        other => CliError::Data(other.to_string()),
    })?;

    atomic_write(out, &save_parameters(&params))
        .map_err(|e| CliError::Data(format!("cannot write '{}': {e}", out.display())))?;
    if let Some(csv_path) = loss_csv {
        let mut text = String::from("step,loss\n");
        for (i, loss) in curve.iter().enumerate() {
            text.push_str(&format!("{i},{loss}\n"));
        }
        atomic_write(csv_path, text.as_bytes())
            .map_err(|e| CliError::Data(format!("cannot write '{}': {e}", csv_path.display())))?;
    }
    let first = curve.first().copied().unwrap_or(f64::NAN);
    let last = curve.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} steps on {} clips; loss {first:.5} -> {last:.5}; model written to {}",
        curve.len(),
        dataset.len(),
        out.display()
    ))
}

fn midi_pairs(pred: &Path, reference: &Path) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    match (pred.is_dir(), reference.is_dir()) {
        (false, false) => Ok(vec![(pred.to_path_buf(), reference.to_path_buf())]),
        (true, true) => {
            let mut names: Vec<String> = fs::read_dir(reference)
                .map_err(|e| CliError::Data(format!("'{}': {e}", reference.display())))?
                .filter_map(|entry| {
                    let name = entry.ok()?.file_name().into_string().ok()?;
                    name.ends_with(".mid").then_some(name)
                })
                .collect();
            names.sort();
            if names.is_empty() {
                return Err(CliError::Data(format!(
                    "no .mid files in '{}'",
                    reference.display()
                )));
            }
            let mut pairs = Vec::new();
            for name in names {
                let p = pred.join(&name);
                if !p.exists() {
                    return Err(CliError::Data(format!(
                        "missing prediction for '{name}' in '{}'",
                        pred.display()
                    )));
                }
                pairs.push((p, reference.join(&name)));
            }
            Ok(pairs)
        }
        _ => Err(CliError::Data(
            "--pred and --ref must both be files or both be directories".into(),
        )),
    }
}

pub fn cmd_eval(
    pred: &Path,
    reference: &Path,
    frame_rate: Option<f64>,
    onset_tol: f64,
    offset_ratio: f64,
) -> Result<String, CliError> {
    let fps = frame_rate.unwrap_or_else(|| {
        PipelineConfig::default()
            .finalize()
            .map(|c| c.output_frame_rate())
            .unwrap_or(86.0)
    });
    let pairs = midi_pairs(pred, reference)?;

    let mut frame_counts = (0usize, 0usize, 0usize);
    let mut onset_counts = (0usize, 0usize, 0usize);
    let mut onoff_counts = (0usize, 0usize, 0usize);
    for (pred_path, ref_path) in &pairs {
        let load = |p: &Path| -> Result<Vec<TimedNote>, CliError> {
            let bytes =
                fs::read(p).map_err(|e| CliError::Data(format!("'{}': {e}", p.display())))?;
            Ok(read_smf(&bytes)
                .map_err(|e| CliError::Data(format!("'{}': {e}", p.display())))?
                .notes)
        };
        let pred_notes = load(pred_path)?;
        let ref_notes = load(ref_path)?;

        let horizon = pred_notes
            .iter()
            .chain(&ref_notes)
            .map(|n| n.offset)
            .fold(0.0f64, f64::max);
        let n_frames = ((horizon * fps).ceil() as usize).max(1);
        let pred_roll = rasterize_notes(&pred_notes, fps, n_frames)?;
        let ref_roll = rasterize_notes(&ref_notes, fps, n_frames)?;
        let fw = framewise_prf(&pred_roll.sustain, &ref_roll.sustain);
        frame_counts.0 += fw.tp;
        frame_counts.1 += fw.fp;
        frame_counts.2 += fw.fn_;

        let on = note_onset_prf(&pred_notes, &ref_notes, onset_tol);
        onset_counts.0 += on.tp;
        onset_counts.1 += on.fp;
        onset_counts.2 += on.fn_;
        let onoff = note_onset_offset_prf(&pred_notes, &ref_notes, onset_tol, offset_ratio);
        onoff_counts.0 += onoff.tp;
        onoff_counts.1 += onoff.fp;
        onoff_counts.2 += onoff.fn_;
    }

    let mut out = String::from("metric,precision,recall,f_measure,tp,fp,fn\n");
    let rows = [
        ("framewise", frame_counts),
        ("note_onset", onset_counts),
        ("note_onset_offset", onoff_counts),
    ];
    for (label, (tp, fp, fn_)) in rows {
        out.push_str(&PrfReport::from_counts(tp, fp, fn_).csv_row(label));
        out.push('\n');
    }
    Ok(out)
}

pub fn cmd_synth(
    config: Option<&Path>,
    out_dir: &Path,
    clips: usize,
    seed: u64,
) -> Result<String, CliError> {
    let cfg = load_config(config)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Data(format!("cannot create '{}': {e}", out_dir.display())))?;

    let mut manifest = String::from("clip_id,wav_path,midi_path,seed\n");
    let mut total_clipped = 0usize;
    for i in 0..clips {
        let clip_seed = seed.wrapping_add(i as u64);
        let notes = sample_score(&cfg.score, clip_seed)
            .map_err(|e| CliError::Data(e.to_string()))?;
        let (audio, clipped) = render(
            &notes,
            &cfg.synth,
            cfg.frontend.sample_rate,
            cfg.score.clip_seconds,
            clip_seed,
        );
        total_clipped += clipped;

        let stem = format!("clip_{i:03}");
        let wav_name = format!("{stem}.wav");
        let midi_name = format!("{stem}.mid");
        atomic_write(
            &out_dir.join(&wav_name),
            &crate::audio::write_wav_pcm16(&audio, cfg.frontend.sample_rate),
        )
        .map_err(|e| CliError::Data(format!("cannot write '{wav_name}': {e}")))?;
        let doc = MidiDocument::from_notes(notes);
        let bytes = write_smf(&doc).map_err(|e| CliError::Internal(e.to_string()))?;
        atomic_write(&out_dir.join(&midi_name), &bytes)
            .map_err(|e| CliError::Data(format!("cannot write '{midi_name}': {e}")))?;
        manifest.push_str(&format!("{stem},{wav_name},{midi_name},{clip_seed}\n"));
    }
    atomic_write(&out_dir.join("manifest.csv"), manifest.as_bytes())
        .map_err(|e| CliError::Data(format!("cannot write manifest: {e}")))?;

    let mut summary = format!("wrote {clips} clips and manifest.csv to {}", out_dir.display());
    if total_clipped > 0 {
        summary.push_str(&format!(" ({total_clipped} samples hit the limiter)"));
    }
    Ok(summary)
}
