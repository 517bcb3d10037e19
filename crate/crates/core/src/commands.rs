//! Operator commands shared by the binary and the integration tests.
//! Each command validates its config before touching the run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_dir, final_dir, Checkpoint};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalModels, EvalReport, TeacherBundle};
use crate::inference::{build_latent_bank, latent_bank_dir, synthesize, AcousticBundle, LatentBank, LatentScheme, SynthesisDiagnostics, VocoderBundle};
use crate::io::{write_atomic, RunLock};
use crate::signal::{save_wav, Intonation, Manifest};
use crate::train::{prepare_data, snapshot_steps, step_rng, AcousticTrainer, Dataset, JsonlLog, StudentTrainer, TeacherTrainer};

/// Flags shared by every command.
#[derive(Clone, Debug, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
    pub overrides: Vec<String>,
}

/// Loads the config file (or defaults), applies dotted overrides, then `--seed` and `--run-dir`.
pub fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let text = match &args.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Missing(p.clone()));
            }
            crate::io::read_string(p)?
        }
        None => RunConfig::default().to_toml()?,
    };
    let mut overrides = args.overrides.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(r) = &args.run_dir {
        overrides.push(format!("paths.run_dir={}", toml::Value::String(r.display().to_string())));
    }
    RunConfig::from_toml(&text, &overrides)
}

pub fn log_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.paths.run_dir.join("logs").join(format!("{name}.jsonl"))
}

pub fn snapshots_file(cfg: &RunConfig) -> PathBuf {
    cfg.paths.run_dir.join("checkpoints").join("teacher").join("snapshots.json")
}

fn save_config_echo(cfg: &RunConfig) -> Result<()> {
    write_atomic(cfg.paths.run_dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

pub fn cmd_prepare_data(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    prepare_data(cfg)
}

/// Stops a training command early (after `until` steps in total) when set.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub until: Option<u64>,
    pub resume: Option<PathBuf>,
}

fn wants_checkpoint(cfg: &RunConfig, step: u64) -> bool {
    let every = cfg.training.checkpoint_every;
    every > 0 && step % every == 0
}

/// Runs the whole phase plan (or up to `opts.until`), writing step checkpoints and the final one.
pub fn cmd_train_acoustic(cfg: &RunConfig, opts: &TrainOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let data = Dataset::load(cfg)?;
    let run = &cfg.paths.run_dir;
    let _lock = RunLock::acquire(run)?;
    save_config_echo(cfg)?;
    let (mut trainer, mut log) = match &opts.resume {
        Some(dir) => (AcousticTrainer::resume(cfg, &data, &Checkpoint::load_kind(dir, "acoustic")?)?, JsonlLog::append(log_path(cfg, "acoustic"))?),
        None => (AcousticTrainer::new(cfg, &data)?, JsonlLog::create(log_path(cfg, "acoustic"))?),
    };
    let total = opts.until.unwrap_or(u64::MAX).min(trainer.plan.total_steps());
    while trainer.step < total {
        log.write(&trainer.train_step(&data)?)?;
        if wants_checkpoint(cfg, trainer.step) {
            trainer.checkpoint().save(checkpoint_dir(run, "acoustic", trainer.step))?;
        }
    }
    let out = if trainer.step == trainer.plan.total_steps() { final_dir(run, "acoustic") } else { checkpoint_dir(run, "acoustic", trainer.step) };
    trainer.checkpoint().save(&out)?;
    Ok(out)
}

/// Posterior means of the training set from the final acoustic model, conditioning the vocoder.
pub fn vocoder_latents(cfg: &RunConfig, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    AcousticBundle::load(cfg, final_dir(&cfg.paths.run_dir, "acoustic"))?.posterior_means(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotList {
    pub steps: Vec<u64>,
    /// Paths relative to the run directory.
    pub dirs: Vec<PathBuf>,
}

pub fn cmd_train_teacher(cfg: &RunConfig, opts: &TrainOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let data = Dataset::load(cfg)?;
    let latents = vocoder_latents(cfg, &data)?;
    let run = &cfg.paths.run_dir;
    let _lock = RunLock::acquire(run)?;
    let (mut trainer, mut log) = match &opts.resume {
        Some(dir) => (TeacherTrainer::resume(cfg, &data, latents, &Checkpoint::load_kind(dir, "teacher")?)?, JsonlLog::append(log_path(cfg, "teacher"))?),
        None => (TeacherTrainer::new(cfg, &data, latents)?, JsonlLog::create(log_path(cfg, "teacher"))?),
    };
    let full = cfg.training.teacher_steps;
    let snaps = snapshot_steps(full, cfg.training.snapshots);
    let total = opts.until.unwrap_or(u64::MAX).min(full);
    while trainer.step < total {
        log.write(&trainer.train_step(&data)?)?;
        if snaps.contains(&trainer.step) || wants_checkpoint(cfg, trainer.step) {
            trainer.checkpoint().save(checkpoint_dir(run, "teacher", trainer.step))?;
        }
    }
    let rel = |s: u64| checkpoint_dir(Path::new(""), "teacher", s);
    let list = SnapshotList { steps: snaps.clone(), dirs: snaps.iter().map(|&s| rel(s)).collect() };
    if trainer.step == full {
        write_atomic(snapshots_file(cfg), (serde_json::to_string_pretty(&list)? + "\n").as_bytes())?;
        trainer.checkpoint().save(final_dir(run, "teacher"))?;
        Ok(final_dir(run, "teacher"))
    } else {
        let out = checkpoint_dir(run, "teacher", trainer.step);
        trainer.checkpoint().save(&out)?;
        Ok(out)
    }
}

/// Snapshot directories recorded by `train-teacher`.
pub fn teacher_snapshots(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let path = snapshots_file(cfg);
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path));
    }
    let list: SnapshotList = serde_json::from_str(&crate::io::read_string(&path)?)?;
    Ok(list.dirs.iter().map(|d| cfg.paths.run_dir.join(d)).collect())
}

pub fn cmd_distill_student(cfg: &RunConfig, snapshots: Option<Vec<PathBuf>>, opts: &TrainOptions) -> Result<PathBuf> {
    cfg.validate()?;
    let snapshots = match snapshots {
        Some(s) if !s.is_empty() => s,
        _ => teacher_snapshots(cfg)?,
    };
    for s in &snapshots {
        if !s.join("manifest.json").exists() {
            return Err(Error::MissingCheckpoint(s.clone()));
        }
    }
    let data = Dataset::load(cfg)?;
    let latents = vocoder_latents(cfg, &data)?;
    let run = &cfg.paths.run_dir;
    let _lock = RunLock::acquire(run)?;
    let (mut trainer, mut log) = match &opts.resume {
        Some(dir) => (
            StudentTrainer::resume(cfg, &data, latents, snapshots, &Checkpoint::load_kind(dir, "student")?)?,
            JsonlLog::append(log_path(cfg, "student"))?,
        ),
        None => (StudentTrainer::new(cfg, &data, latents, snapshots)?, JsonlLog::create(log_path(cfg, "student"))?),
    };
    let full = cfg.training.student_steps;
    let total = opts.until.unwrap_or(u64::MAX).min(full);
    while trainer.step < total {
        log.write(&trainer.train_step(&data)?)?;
        if wants_checkpoint(cfg, trainer.step) {
            trainer.checkpoint().save(checkpoint_dir(run, "student", trainer.step))?;
        }
    }
    if trainer.active_snapshot.is_none() {
        trainer.load_snapshot(trainer.snapshots.len() - 1)?;
    }
    let out = if trainer.step == full { final_dir(run, "student") } else { checkpoint_dir(run, "student", trainer.step) };
    trainer.checkpoint().save(&out)?;
    Ok(out)
}

pub fn cmd_build_latent_bank(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<LatentBank> {
    cfg.validate()?;
    let run = &cfg.paths.run_dir;
    let ck = checkpoint.map_or_else(|| final_dir(run, "acoustic"), Path::to_path_buf);
    let acoustic = AcousticBundle::load(cfg, &ck)?;
    let data = Dataset::load(cfg)?;
    let _lock = RunLock::acquire(run)?;
    let bank = build_latent_bank(cfg, &acoustic, &data)?;
    bank.save(latent_bank_dir(run))?;
    Ok(bank)
}

/// Everything a synthesis request needs besides the config.
#[derive(Clone, Debug)]
pub struct SynthesisRequest {
    /// Space-separated phoneme symbols.
    pub phonemes: String,
    pub tag: Intonation,
    pub scheme: LatentScheme,
    pub out: PathBuf,
    pub acoustic: Option<PathBuf>,
    pub student: Option<PathBuf>,
    pub bank: Option<PathBuf>,
}

/// Writes `out` (16-bit WAV) and `out` with a `.json` extension holding the diagnostics.
pub fn cmd_synthesize(cfg: &RunConfig, req: &SynthesisRequest) -> Result<SynthesisDiagnostics> {
    cfg.validate()?;
    let run = &cfg.paths.run_dir;
    let acoustic_dir = req.acoustic.clone().unwrap_or_else(|| final_dir(run, "acoustic"));
    let student_dir = req.student.clone().unwrap_or_else(|| final_dir(run, "student"));
    let bank_dir = req.bank.clone().unwrap_or_else(|| latent_bank_dir(run));
    let acoustic = AcousticBundle::load(cfg, &acoustic_dir)?;
    let vocoder = VocoderBundle::load(cfg, &student_dir)?;
    let bank = LatentBank::load(&bank_dir)?;
    let tokens = acoustic.vocab.encode_str(&req.phonemes)?;
    let mut rng = step_rng(cfg.seed, 0);
    let out = synthesize(cfg, &acoustic, &vocoder, &bank, &tokens, req.tag, &req.scheme, None, &mut rng)?;
    save_wav(&req.out, &out.wave)?;
    let json = serde_json::to_string(&out.diagnostics)? + "\n";
    write_atomic(req.out.with_extension("json"), json.as_bytes())?;
    Ok(out.diagnostics)
}

/// Evaluates every stage whose final checkpoint exists. The acoustic model is required.
pub fn cmd_evaluate(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let run = &cfg.paths.run_dir;
    let acoustic = AcousticBundle::load(cfg, final_dir(run, "acoustic"))?;
    let data = Dataset::load(cfg)?;
    let present = |kind: &str| final_dir(run, kind).join("manifest.json").exists();
    let teacher = if present("teacher") { Some(TeacherBundle::load(cfg, final_dir(run, "teacher"))?) } else { None };
    let vocoder = if present("student") { Some(VocoderBundle::load(cfg, final_dir(run, "student"))?) } else { None };
    let bank = if latent_bank_dir(run).exists() { Some(LatentBank::load(latent_bank_dir(run))?) } else { None };
    let report = evaluate(cfg, &data, &EvalModels { acoustic: &acoustic, teacher: teacher.as_ref(), vocoder: vocoder.as_ref(), bank: bank.as_ref() })?;
    report.save(out_dir.map_or_else(|| run.join("eval"), Path::to_path_buf))?;
    Ok(report)
}
