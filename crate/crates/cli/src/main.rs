use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use etts_core::commands::{
    cmd_build_latent_bank, cmd_distill_student, cmd_evaluate, cmd_prepare_data, cmd_synthesize, cmd_train_acoustic, cmd_train_teacher,
    resolve_config, CommonArgs, SynthesisRequest, TrainOptions,
};
use etts_core::error::Error;
use etts_core::inference::{LatentKind, LatentScheme};
use etts_core::selfcheck::run_selfcheck;
use etts_core::signal::Intonation;
use serde_json::json;

#[derive(Parser)]
#[command(name = "etts", version, about = "Expressive text-to-speech training and synthesis")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run configuration (defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Dotted `key=value` config override; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct Train {
    /// Stop after this many total steps.
    #[arg(long)]
    until: Option<u64>,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Tag {
    Statement,
    Question,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    PriorSample,
    PriorMean,
    TrainCentroid,
    ReferenceUtterance,
}

#[derive(Subcommand)]
enum Command {
    /// Render the toy corpus and cache its features.
    PrepareData,
    /// Train the acoustic model through the full phase plan.
    TrainAcoustic(Train),
    /// Train the autoregressive teacher vocoder and save its snapshots.
    TrainTeacher(Train),
    /// Distill the flow student from the teacher snapshots.
    DistillStudent {
        #[command(flatten)]
        train: Train,
        /// Teacher snapshot directory; repeatable. Defaults to the recorded snapshot list.
        #[arg(long = "snapshot")]
        snapshots: Vec<PathBuf>,
    },
    /// Extract reference and centroid latents.
    BuildLatentBank {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Synthesize a phoneme sequence to a WAV file plus diagnostics JSON.
    Synthesize {
        /// Space-separated phoneme symbols.
        #[arg(long)]
        phonemes: String,
        #[arg(long, value_enum, default_value = "statement")]
        tag: Tag,
        #[arg(long, value_enum, default_value = "reference-utterance")]
        scheme: Scheme,
        /// Utterance id recorded with a reference-utterance request.
        #[arg(long)]
        reference_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        acoustic: Option<PathBuf>,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Objective metrics over the training manifest.
    Evaluate {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the fast invariant suite.
    Selfcheck,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

fn kind_of(e: &Error) -> &'static str {
    match e {
        Error::Io { .. } => "io",
        Error::WavFormat { .. } => "wav_format",
        Error::Missing(_) => "missing_file",
        Error::MissingCheckpoint(_) => "missing_checkpoint",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::Shape(_) => "shape",
        Error::Locked(_) => "locked",
        Error::FrozenIntegrity(_) => "frozen_integrity",
        Error::LatentBank(_) => "latent_bank",
        Error::Manifest(_) => "manifest",
        Error::InvalidArgument(_) => "invalid_argument",
        _ => "error",
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Missing(_) | Error::MissingCheckpoint(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli, common: CommonArgs) -> Result<serde_json::Value, Error> {
    let cfg = || resolve_config(&common);
    let opts = |t: &Train| TrainOptions { until: t.until, resume: t.resume.clone() };
    Ok(match cli.command {
        Command::PrepareData => {
            let m = cmd_prepare_data(&cfg()?)?;
            json!({"command": "prepare-data", "utterances": m.len()})
        }
        Command::TrainAcoustic(t) => json!({"command": "train-acoustic", "checkpoint": cmd_train_acoustic(&cfg()?, &opts(&t))?}),
        Command::TrainTeacher(t) => json!({"command": "train-teacher", "checkpoint": cmd_train_teacher(&cfg()?, &opts(&t))?}),
        Command::DistillStudent { train, snapshots } => {
            let snaps = (!snapshots.is_empty()).then_some(snapshots);
            json!({"command": "distill-student", "checkpoint": cmd_distill_student(&cfg()?, snaps, &opts(&train))?})
        }
        Command::BuildLatentBank { checkpoint } => {
            let bank = cmd_build_latent_bank(&cfg()?, checkpoint.as_deref())?;
            json!({"command": "build-latent-bank", "provenance": bank.provenance})
        }
        Command::Synthesize { phonemes, tag, scheme, reference_id, out, acoustic, student, bank } => {
            let kind = match scheme {
                Scheme::PriorSample => LatentKind::PriorSample,
                Scheme::PriorMean => LatentKind::PriorMean,
                Scheme::TrainCentroid => LatentKind::TrainCentroid,
                Scheme::ReferenceUtterance => LatentKind::ReferenceUtterance,
            };
            let reference_id = match kind {
                LatentKind::ReferenceUtterance => Some(reference_id.unwrap_or_else(|| "bank".into())),
                _ => reference_id,
            };
            let tag = match tag {
                Tag::Statement => Intonation::Statement,
                Tag::Question => Intonation::YesNoQuestion,
            };
            let req = SynthesisRequest { phonemes, tag, scheme: LatentScheme::new(kind, reference_id)?, out: out.clone(), acoustic, student, bank };
            let d = cmd_synthesize(&cfg()?, &req)?;
            json!({"command": "synthesize", "out": out, "frames": d.frames, "samples": d.samples, "stop_step": d.stop_step})
        }
        Command::Evaluate { out } => {
            let report = cmd_evaluate(&cfg()?, out.as_deref())?;
            json!({"command": "evaluate", "summary": report.summary})
        }
        Command::ShowConfig => {
            print!("{}", cfg()?.to_toml()?);
            return Ok(serde_json::Value::Null);
        }
        Command::Selfcheck => {
            let results = run_selfcheck(&mut |r| println!("{}", r.line()));
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Error::InvalidArgument(format!("selfcheck failed: {}", failed.join(","))));
            }
            json!({"command": "selfcheck", "checks": results.len(), "failed": 0})
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let c = cli.common.clone();
    let common = CommonArgs { config: c.config, seed: c.seed, run_dir: c.run_dir, overrides: c.overrides };
    match run(cli, common) {
        Ok(v) => {
            if !v.is_null() {
                println!("{v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = json!({"error": kind_of(&e), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
