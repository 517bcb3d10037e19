//! Inference-time latent selection and the phonemes-to-waveform pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use etts_autograd::{ParamStore, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::acoustic::{AcousticModel, Vocabulary};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::signal::{wav_to_mel, Intonation, Waveform};
use crate::train::{build_acoustic, build_student, build_teacher, Dataset};
use crate::vocoder::{logistic_noise, Student, Teacher};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    PriorSample,
    PriorMean,
    TrainCentroid,
    ReferenceUtterance,
}

/// How the acoustic latent is chosen for a request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentScheme {
    pub kind: LatentKind,
    pub reference_id: Option<String>,
}

impl LatentScheme {
    pub fn new(kind: LatentKind, reference_id: Option<String>) -> Result<Self> {
        if (kind == LatentKind::ReferenceUtterance) != reference_id.is_some() {
            return Err(Error::InvalidArgument("reference_id must be given exactly for reference_utterance".into()));
        }
        Ok(Self { kind, reference_id })
    }

    pub fn prior_sample() -> Self {
        Self { kind: LatentKind::PriorSample, reference_id: None }
    }

    pub fn prior_mean() -> Self {
        Self { kind: LatentKind::PriorMean, reference_id: None }
    }

    pub fn train_centroid() -> Self {
        Self { kind: LatentKind::TrainCentroid, reference_id: None }
    }

    pub fn reference(id: impl Into<String>) -> Self {
        Self { kind: LatentKind::ReferenceUtterance, reference_id: Some(id.into()) }
    }
}

/// Where each bank vector came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankProvenance {
    pub statement: String,
    pub question: String,
    pub vocoder_centroid: String,
    pub acoustic_step: u64,
    pub n_utterances: usize,
}

/// Fixed latents used at inference. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentBank {
    pub statement_z: Vec<f64>,
    pub question_z: Vec<f64>,
    pub vocoder_centroid_z: Vec<f64>,
    pub provenance: BankProvenance,
}

const BANK_MAGIC: &[u8; 4] = b"ETLB";
pub const BANK_FILE: &str = "latent_bank.bin";
pub const BANK_SIDECAR: &str = "latent_bank.json";

impl LatentBank {
    pub fn dim(&self) -> usize {
        self.statement_z.len()
    }

    fn named(&self) -> [(&'static str, &[f64]); 3] {
        [("statement_z", &self.statement_z), ("question_z", &self.question_z), ("vocoder_centroid_z", &self.vocoder_centroid_z)]
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        for (name, v) in self.named() {
            if v.len() != dim {
                return Err(Error::LatentBank(format!("{name} has {} dims, expected {dim}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::LatentBank(format!("{name} is not finite")));
            }
        }
        Ok(())
    }

    /// Binary layout: magic, u32 count, then per vector a u32 name length, the name,
    /// a u32 length and little-endian f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = BANK_MAGIC.to_vec();
        let named = self.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, v) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], provenance: BankProvenance) -> Result<Self> {
        let bad = |m: &str| Error::LatentBank(m.to_string());
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated latent bank"))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != BANK_MAGIC {
            return Err(bad("bad latent bank magic"));
        }
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
        let count = u32_at(take(4)?);
        let mut map = BTreeMap::new();
        for _ in 0..count {
            let nl = u32_at(take(4)?);
            let name = String::from_utf8(take(nl)?.to_vec()).map_err(|_| bad("non-utf8 vector name"))?;
            let len = u32_at(take(4)?);
            let v: Vec<f64> = take(len * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            map.insert(name, v);
        }
        let mut get = |k: &str| map.remove(k).ok_or_else(|| Error::LatentBank(format!("missing bank entry {k}")));
        Ok(Self { statement_z: get("statement_z")?, question_z: get("question_z")?, vocoder_centroid_z: get("vocoder_centroid_z")?, provenance })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        crate::io::write_atomic(dir.join(BANK_FILE), &self.to_bytes())?;
        let json = serde_json::to_string_pretty(&self.provenance)? + "\n";
        crate::io::write_atomic(dir.join(BANK_SIDECAR), json.as_bytes())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let bin = dir.join(BANK_FILE);
        let side = dir.join(BANK_SIDECAR);
        for p in [&bin, &side] {
            if !p.exists() {
                return Err(Error::Missing(p.clone()));
            }
        }
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        Self::from_bytes(&bytes, serde_json::from_str(&text)?)
    }
}

/// Arithmetic mean of the given latent vectors.
pub fn mean_latent(latents: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = latents.first().ok_or_else(|| Error::InvalidArgument("centroid of an empty set".into()))?;
    let mut acc = vec![0.0; first.len()];
    for z in latents {
        if z.len() != acc.len() {
            return Err(Error::Shape(format!("latent of width {}, expected {}", z.len(), acc.len())));
        }
        for (a, x) in acc.iter_mut().zip(z) {
            *a += x;
        }
    }
    let n = latents.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Trained acoustic model with its averaged weights.
pub struct AcousticBundle {
    pub store: ParamStore,
    pub model: AcousticModel,
    /// Frames per decoder step at the end of training.
    pub ops: usize,
    pub step: u64,
    pub vocab: Vocabulary,
}

impl AcousticBundle {
    /// Loads an acoustic checkpoint, preferring the Polyak weights.
    pub fn load(cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load_kind(dir.as_ref(), "acoustic")?;
        Self::from_checkpoint(cfg, &ck)
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let vocab = Vocabulary::toy();
        let (mut store, model, _) = build_acoustic(cfg, vocab.len());
        ck.restore_store(&mut store, "", "")?;
        if ck.tensors.iter().any(|(n, _)| n.starts_with("polyak/")) {
            ck.restore_store(&mut store, "acoustic/", "polyak/")?;
        }
        let ops = ck.ops.unwrap_or(cfg.acoustic.max_ops);
        Ok(Self { store, model, ops, step: ck.step, vocab })
    }

    /// Untrained model with the data-derived normalization, as a baseline.
    pub fn untrained(cfg: &RunConfig, data: &Dataset) -> Self {
        let (mut store, model, _) = build_acoustic(cfg, data.vocab.len());
        model.fit_normalization(&mut store, &data.mels());
        let ops = cfg.phase_plan().ok().and_then(|p| p.phases().last().map(|ph| ph.ops)).unwrap_or(cfg.acoustic.max_ops);
        Self { store, model, ops, step: 0, vocab: data.vocab.clone() }
    }

    /// Posterior mean of one spectrogram.
    pub fn posterior_mean(&self, mel: &Tensor) -> Result<Vec<f64>> {
        Ok(self.model.vae_encode(&self.store, mel)?.mu)
    }

    /// Posterior means of every utterance in `data`, in order.
    pub fn posterior_means(&self, data: &Dataset) -> Result<Vec<Vec<f64>>> {
        data.utts.iter().map(|u| self.posterior_mean(&u.mel)).collect()
    }

    /// Mean posterior mean over `data`.
    pub fn compute_centroid(&self, data: &Dataset) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("centroid over an empty manifest".into()));
        }
        mean_latent(&self.posterior_means(data)?)
    }

    /// Posterior mean of a reference recording.
    pub fn extract_reference_latent(&self, cfg: &RunConfig, wave: &Waveform) -> Result<Vec<f64>> {
        let mel = wav_to_mel(wave, &cfg.mel)?;
        self.posterior_mean(&mel.to_tensor())
    }
}

/// Picks the flat and rising references named in the config, or the first of each kind.
fn pick_reference<'a>(data: &'a Dataset, id: &str, kind: Intonation) -> Result<&'a crate::train::UtteranceData> {
    if id.is_empty() {
        data.utts.iter().find(|u| u.intonation == kind).ok_or_else(|| Error::LatentBank(format!("no {kind} utterance in the corpus")))
    } else {
        let u = data.find(id).ok_or_else(|| Error::LatentBank(format!("reference utterance {id} not in the manifest")))?;
        if u.intonation != kind {
            return Err(Error::LatentBank(format!("reference {id} is a {}, expected a {kind}", u.intonation)));
        }
        Ok(u)
    }
}

/// Builds the bank from the trained acoustic VAE: reference posterior means and the corpus centroid.
pub fn build_latent_bank(cfg: &RunConfig, acoustic: &AcousticBundle, data: &Dataset) -> Result<LatentBank> {
    let flat = pick_reference(data, &cfg.latent.flat_reference, Intonation::Statement)?;
    let rising = pick_reference(data, &cfg.latent.rising_reference, Intonation::YesNoQuestion)?;
    let bank = LatentBank {
        statement_z: acoustic.posterior_mean(&flat.mel)?,
        question_z: acoustic.posterior_mean(&rising.mel)?,
        vocoder_centroid_z: acoustic.compute_centroid(data)?,
        provenance: BankProvenance {
            statement: flat.id.clone(),
            question: rising.id.clone(),
            vocoder_centroid: "centroid".into(),
            acoustic_step: acoustic.step,
            n_utterances: data.len(),
        },
    };
    bank.validate(cfg.acoustic.latent_dim)?;
    Ok(bank)
}

/// Acoustic latent for one request. The training centroid is the bank's centroid entry,
/// which is computed from the same posterior means.
pub fn select_acoustic_latent<R: Rng>(
    scheme: &LatentScheme,
    tag: Intonation,
    bank: &LatentBank,
    dim: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let from_bank = |v: &Vec<f64>, name: &str| {
        if v.len() == dim {
            Ok(v.clone())
        } else {
            Err(Error::LatentBank(format!("{name} has {} dims, expected {dim}", v.len())))
        }
    };
    match scheme.kind {
        LatentKind::PriorMean => Ok(vec![0.0; dim]),
        LatentKind::PriorSample => Ok((0..dim).map(|_| rng.sample(StandardNormal)).collect()),
        LatentKind::TrainCentroid => from_bank(&bank.vocoder_centroid_z, "vocoder_centroid_z"),
        LatentKind::ReferenceUtterance => match tag {
            Intonation::Statement => from_bank(&bank.statement_z, "statement_z"),
            Intonation::YesNoQuestion => from_bank(&bank.question_z, "question_z"),
        },
    }
}

/// Trained student with the frozen teacher conditioning it was distilled against.
pub struct VocoderBundle {
    pub store: ParamStore,
    pub teacher: Teacher,
    pub student: Student,
    pub step: u64,
}

impl VocoderBundle {
    /// Loads a student checkpoint, preferring the Polyak student weights.
    pub fn load(cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load_kind(dir.as_ref(), "student")?;
        Self::from_checkpoint(cfg, &ck)
    }

    pub fn from_checkpoint(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self> {
        let mut store = ParamStore::new();
        let teacher = build_teacher(&mut store, cfg);
        let student = build_student(&mut store, cfg);
        ck.restore_store(&mut store, "", "")?;
        if ck.tensors.iter().any(|(n, _)| n.starts_with("polyak/student/")) {
            ck.restore_store(&mut store, "student/", "polyak/")?;
        }
        Ok(Self { store, teacher, student, step: ck.step })
    }

    /// Untrained student and conditioning with data-derived normalization, as a baseline.
    pub fn untrained(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        let mut store = ParamStore::new();
        let teacher = build_teacher(&mut store, cfg);
        let student = build_student(&mut store, cfg);
        let (mean, std) = crate::train::mel_stats(&data.mels());
        teacher.cond.set_normalization(&mut store, &mean, &std)?;
        Ok(Self { store, teacher, student, step: 0 })
    }

    /// Waveform of `mel.rows()·hop` samples from logistic noise.
    pub fn vocode<R: Rng>(&self, mel: &Tensor, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let frames = self.teacher.cond.encode_frames(&self.store, mel, z)?;
        let noise = logistic_noise(rng, mel.rows() * self.student.hop);
        self.student.sample(&self.store, &noise, &frames)
    }
}

/// Diagnostics returned with every synthesized waveform.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthesisDiagnostics {
    pub frames: usize,
    pub samples: usize,
    pub decoder_steps: usize,
    pub stop_step: Option<usize>,
    pub hit_max_steps: bool,
    pub ops: usize,
    pub acoustic_latent: Vec<f64>,
    /// `decoder_steps × phonemes`.
    pub attention: Vec<Vec<f64>>,
}

pub struct Synthesis {
    pub wave: Waveform,
    pub mel: Tensor,
    pub diagnostics: SynthesisDiagnostics,
}

/// Decode limit: `factor · frames / ops`, using `frames_per_token · N` without a reference length.
pub fn max_decoder_steps(cfg: &RunConfig, n_tokens: usize, ref_frames: Option<usize>, ops: usize) -> usize {
    let frames = ref_frames.map_or(cfg.eval.frames_per_token * n_tokens as f64, |m| m as f64);
    ((cfg.eval.max_steps_factor * frames / ops as f64).ceil() as usize).max(1)
}

/// Phonemes to waveform. The vocoder is always conditioned on the centroid latent.
#[allow(clippy::too_many_arguments)]
pub fn synthesize<R: Rng>(
    cfg: &RunConfig,
    acoustic: &AcousticBundle,
    vocoder: &VocoderBundle,
    bank: &LatentBank,
    tokens: &[usize],
    tag: Intonation,
    scheme: &LatentScheme,
    ref_frames: Option<usize>,
    rng: &mut R,
) -> Result<Synthesis> {
    bank.validate(cfg.acoustic.latent_dim)?;
    let z = select_acoustic_latent(scheme, tag, bank, cfg.acoustic.latent_dim, rng)?;
    let max_steps = max_decoder_steps(cfg, tokens.len(), ref_frames, acoustic.ops);
    let inferred = acoustic.model.infer_spectrogram(&acoustic.store, tokens, &z, acoustic.ops, max_steps)?;
    let samples = vocoder.vocode(&inferred.mel, &bank.vocoder_centroid_z, rng)?;
    let attention = (0..inferred.attention.rows()).map(|r| inferred.attention.row_slice(r).to_vec()).collect();
    let diagnostics = SynthesisDiagnostics {
        frames: inferred.mel.rows(),
        samples: samples.len(),
        decoder_steps: inferred.attention.rows(),
        stop_step: inferred.stop_step,
        hit_max_steps: inferred.hit_max_steps,
        ops: acoustic.ops,
        acoustic_latent: z,
        attention,
    };
    Ok(Synthesis { wave: Waveform::new(samples, cfg.mel.sample_rate), mel: inferred.mel, diagnostics })
}

/// Standard locations inside a run directory.
pub fn latent_bank_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("latent_bank")
}
