//! Run configuration: a TOML document with every section required and unknown
//! keys rejected. Dotted `key=value` overrides are applied before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::acoustic::AcousticConfig;
use crate::adversarial::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::schedule::{AnnealSpec, OptimizerConfig, PhasePlan, PhaseSpec};
use crate::signal::{MelConfig, PitchConfig, ToyCorpusOptions};
use crate::vocoder::{StftConfig, VocoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Corpus, manifest and feature cache.
    pub data_dir: PathBuf,
    /// Checkpoints, logs, latent bank and reports.
    pub run_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_utts: usize,
    pub seed: u64,
    pub options: ToyCorpusOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub acoustic_batch: usize,
    pub teacher_batch: usize,
    pub teacher_steps: u64,
    /// Steps per teacher epoch for the per-epoch learning-rate decay.
    pub teacher_epoch_steps: u64,
    /// Mel frames per random teacher crop.
    pub teacher_crop_frames: usize,
    pub student_batch: usize,
    pub student_steps: u64,
    pub student_crop_frames: usize,
    /// Teacher snapshots used in turn by the student.
    pub snapshots: usize,
    pub n_mc: usize,
    pub spectral_weight: f64,
    pub polyak_decay: f64,
    /// Save a checkpoint every this many steps (0 keeps only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            acoustic_batch: 32,
            teacher_batch: 16,
            teacher_steps: 3000,
            teacher_epoch_steps: 500,
            teacher_crop_frames: 8,
            student_batch: 4,
            student_steps: 3000,
            student_crop_frames: 8,
            snapshots: 3,
            n_mc: 4,
            spectral_weight: 1.0,
            polyak_decay: 0.999,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    /// Utterance id of the flat-intonation reference; empty picks the first statement.
    pub flat_reference: String,
    /// Utterance id of the rising-intonation reference; empty picks the first question.
    pub rising_reference: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Free-running decode limit as a multiple of the reference step count.
    pub max_steps_factor: f64,
    /// Expected frames per phoneme, bounding the decode when no reference exists.
    pub frames_per_token: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_steps_factor: 2.0, frames_per_token: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub mel: MelConfig,
    pub pitch: PitchConfig,
    pub acoustic: AcousticConfig,
    pub discriminator: DiscriminatorConfig,
    pub vocoder: VocoderConfig,
    pub stft: StftConfig,
    pub phases: Vec<PhaseSpec>,
    pub anneal: AnnealSpec,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub latent: LatentConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            paths: PathsConfig { data_dir: "data".into(), run_dir: "runs/default".into() },
            corpus: CorpusConfig { n_utts: 50, seed: 7, options: ToyCorpusOptions::default() },
            mel: MelConfig::default(),
            pitch: PitchConfig::default(),
            acoustic: AcousticConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            vocoder: VocoderConfig::default(),
            stft: StftConfig::default(),
            phases: PhasePlan::default_specs(),
            anneal: AnnealSpec::default(),
            optimizer: OptimizerConfig::default(),
            training: TrainingConfig::default(),
            latent: LatentConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a TOML document over the defaults (missing keys keep their default), applies `key=value` overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut doc: toml::Table = RunConfig::default().to_toml()?.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        merge_tables(&mut doc, file);
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        Self::from_toml(&io::read_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.acoustic.validate()?;
        self.discriminator.validate()?;
        self.vocoder.validate()?;
        self.anneal.validate()?;
        self.phase_plan()?;
        let t = &self.training;
        let positive = [
            t.acoustic_batch,
            t.teacher_batch,
            t.teacher_crop_frames,
            t.student_batch,
            t.student_crop_frames,
            t.snapshots,
            t.n_mc,
        ];
        if positive.contains(&0) || t.teacher_epoch_steps == 0 {
            return Err(Error::Config("training batch sizes, crop sizes, epoch length, snapshots and n_mc must be positive".into()));
        }
        if !(t.polyak_decay > 0.0 && t.polyak_decay < 1.0) {
            return Err(Error::Config(format!("training.polyak_decay must lie in (0, 1), got {}", t.polyak_decay)));
        }
        if self.corpus.n_utts == 0 {
            return Err(Error::Config("corpus.n_utts must be positive".into()));
        }
        if self.stft.fft_size < 2 || self.stft.hop == 0 {
            return Err(Error::Config("stft.fft_size must be >= 2 and stft.hop positive".into()));
        }
        if self.eval.max_steps_factor < 1.0 {
            return Err(Error::Config("eval.max_steps_factor must be at least 1".into()));
        }
        Ok(())
    }

    pub fn phase_plan(&self) -> Result<PhasePlan> {
        PhasePlan::new(&self.phases, self.acoustic.max_ops)
    }

    /// Canonical JSON form echoed into checkpoint manifests.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_echo(&self.echo())
    }
}

pub fn hash_echo(echo: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(echo).expect("json value serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Recursively overlays `over` onto `base`; arrays and scalars replace wholesale.
pub fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        table = match table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
