use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crnn_pitch::cli;

#[derive(Parser)]
#[command(
    name = "crnn-pitch",
    version,
    about = "Streaming polyphonic pitch detection: WAV in, MIDI out"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transcribe a WAV file to a Standard MIDI File.
    Transcribe {
        /// Trained model file (.crnp).
        #[arg(long)]
        model: PathBuf,
        /// Input WAV (16-bit PCM or 32-bit float; stereo mixes down).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output MIDI path.
        #[arg(long = "out")]
        output: PathBuf,
        /// Articulation threshold (defaults to the config value, 0.5).
        #[arg(long)]
        theta_art: Option<f32>,
        /// Sustain threshold (defaults to the config value, 0.5).
        #[arg(long)]
        theta_sus: Option<f32>,
        /// Spectrogram frames per network segment (state carries across).
        #[arg(long, default_value_t = 64)]
        chunk: usize,
        /// Optional key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a manifest of (wav, midi) pairs.
    Train {
        /// Optional key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Manifest CSV (clip_id,wav_path,midi_path,seed).
        #[arg(long)]
        data: PathBuf,
        /// Output model path.
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write the step,loss curve.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Score predicted MIDI against reference MIDI (file or directory).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Frame rate for framewise scoring (default: pipeline output rate).
        #[arg(long)]
        frame_rate: Option<f64>,
        /// Onset tolerance in seconds.
        #[arg(long, default_value_t = 0.05)]
        onset_tol: f64,
        /// Offset tolerance as a fraction of reference duration.
        #[arg(long, default_value_t = 0.2)]
        offset_ratio: f64,
    },
    /// Generate synthetic (wav, midi) training pairs plus a manifest.
    Synth {
        /// Optional key = value config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long = "out")]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    // Parallelism cap (0 = auto). The current build runs single-threaded,
    // so any cap is trivially honored; still validate the value.
    if let Ok(v) = std::env::var("CRNN_PITCH_THREADS") {
        if v.parse::<usize>().is_err() {
            eprintln!("warning: ignoring non-numeric CRNN_PITCH_THREADS='{v}'");
        }
    }

    let cli = Cli::parse();
    let result = match cli.command {
        Command::Transcribe {
            model,
            input,
            output,
            theta_art,
            theta_sus,
            chunk,
            config,
        } => cli::cmd_transcribe(
            &model,
            &input,
            &output,
            theta_art,
            theta_sus,
            chunk,
            config.as_deref(),
        ),
        Command::Train {
            config,
            data,
            output,
            seed,
            loss_csv,
        } => cli::cmd_train(config.as_deref(), &data, &output, seed, loss_csv.as_deref()),
        Command::Eval {
            pred,
            reference,
            frame_rate,
            onset_tol,
            offset_ratio,
        } => cli::cmd_eval(&pred, &reference, frame_rate, onset_tol, offset_ratio),
        Command::Synth {
            config,
            output,
            clips,
            seed,
        } => cli::cmd_synth(config.as_deref(), &output, clips, seed),
    };

    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
