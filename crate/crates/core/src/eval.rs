//! Objective evaluation: per-utterance rows and corpus means.

use std::path::Path;

use etts_autograd::{sigmoid, ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::acoustic::decoder_steps;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::inference::{build_latent_bank, synthesize, AcousticBundle, LatentBank, LatentScheme, VocoderBundle};
use crate::signal::{wav_to_mel, MelSpectrogram};
use crate::train::{build_teacher, step_rng, Dataset, UtteranceData};
use crate::vocoder::{logistic_noise, stft_log_magnitude, Teacher};

/// Share of decoder steps whose attention peak advances monotonically by at most
/// two phonemes and stays within a band of width 0.2 around the diagonal.
/// `attention` is `steps × N`. Returns a value in `[0, 1]`.
pub fn attention_diagonality(attention: &Tensor) -> f64 {
    let (s, n) = attention.shape();
    if s == 0 || n == 0 {
        return 0.0;
    }
    let peak = |r: usize| {
        let row = attention.row_slice(r);
        (0..n).fold(0, |best, j| if row[j] > row[best] { j } else { best })
    };
    let frac = |i: usize, len: usize| if len <= 1 { 0.0 } else { i as f64 / (len - 1) as f64 };
    let mut good = 0usize;
    let mut prev = 0usize;
    for t in 0..s {
        let a = peak(t);
        let monotone = if t == 0 { a <= 2 } else { a >= prev && a <= prev + 2 };
        let in_band = (frac(a, n) - frac(t, s)).abs() <= 0.2;
        if monotone && in_band {
            good += 1;
        }
        prev = a;
    }
    good as f64 / s as f64
}

/// Fraction of decoder steps whose stop decision (probability > 0.5) matches the target,
/// which fires only at the final step.
pub fn stop_accuracy(stop_logits: &[f64]) -> f64 {
    if stop_logits.is_empty() {
        return 0.0;
    }
    let last = stop_logits.len() - 1;
    let hits = stop_logits.iter().enumerate().filter(|&(t, &l)| (sigmoid(l) > 0.5) == (t == last)).count();
    hits as f64 / stop_logits.len() as f64
}

/// Mean absolute log-magnitude difference, with the synthesized side cut or padded
/// with silence to the reference length.
pub fn padded_mel_l1(synth: &MelSpectrogram, reference: &MelSpectrogram, fill: f64) -> f64 {
    synth.fit_length(reference.num_frames(), fill).l1(reference)
}

/// Teacher network with its averaged weights.
pub struct TeacherBundle {
    pub store: ParamStore,
    pub teacher: Teacher,
}

impl TeacherBundle {
    pub fn load(cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load_kind(dir.as_ref(), "teacher")?;
        let mut store = ParamStore::new();
        let teacher = build_teacher(&mut store, cfg);
        let prefix = if ck.tensors.iter().any(|(n, _)| n.starts_with("polyak/")) { "polyak/" } else { "" };
        ck.restore_store(&mut store, "", prefix)?;
        Ok(Self { store, teacher })
    }

    /// Mean negative log-likelihood per sample of a whole utterance.
    pub fn nll(&self, u: &UtteranceData, z: &[f64]) -> Result<f64> {
        let frames = self.teacher.cond.encode_frames(&self.store, &u.mel, z)?;
        self.teacher.nll(&self.store, &u.wave, &frames)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    /// Teacher-forced mel L1 using the utterance's own posterior mean.
    pub mel_l1: f64,
    pub attention_diagonality: f64,
    pub stop_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_nll: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub student_spectral: Option<f64>,
    /// Mel L1 of the fully synthesized waveform against the recording.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pipeline_mel_l1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub mel_l1: f64,
    pub attention_diagonality: f64,
    pub stop_accuracy: f64,
    pub teacher_nll: Option<f64>,
    pub student_spectral: Option<f64>,
    pub pipeline_mel_l1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

fn mean_of(rows: &[EvalRow], f: impl Fn(&EvalRow) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().filter_map(f).collect();
    if vals.is_empty() || vals.len() != rows.len() {
        None
    } else {
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

impl EvalSummary {
    pub fn from_rows(rows: &[EvalRow]) -> Self {
        Self {
            n: rows.len(),
            mel_l1: mean_of(rows, |r| Some(r.mel_l1)).unwrap_or(0.0),
            attention_diagonality: mean_of(rows, |r| Some(r.attention_diagonality)).unwrap_or(0.0),
            stop_accuracy: mean_of(rows, |r| Some(r.stop_accuracy)).unwrap_or(0.0),
            teacher_nll: mean_of(rows, |r| r.teacher_nll),
            student_spectral: mean_of(rows, |r| r.student_spectral),
            pipeline_mel_l1: mean_of(rows, |r| r.pipeline_mel_l1),
        }
    }
}

/// Models available for one evaluation run. Missing stages leave their columns empty.
pub struct EvalModels<'a> {
    pub acoustic: &'a AcousticBundle,
    pub teacher: Option<&'a TeacherBundle>,
    pub vocoder: Option<&'a VocoderBundle>,
    pub bank: Option<&'a LatentBank>,
}

/// Teacher-forced metrics of one utterance at the bundle's final ops.
pub fn acoustic_metrics(acoustic: &AcousticBundle, u: &UtteranceData, z: &[f64]) -> Result<(f64, f64, f64)> {
    let tf = acoustic.model.teacher_forced_forward(&acoustic.store, &u.tokens, &u.mel, z, acoustic.ops)?;
    debug_assert_eq!(tf.stop_logits.len(), decoder_steps(u.mel.rows(), acoustic.ops));
    let pred = MelSpectrogram::from_tensor(&tf.predicted);
    let target = MelSpectrogram::from_tensor(&u.mel);
    Ok((pred.l1(&target), attention_diagonality(&tf.attention), stop_accuracy(&tf.stop_logits)))
}

/// Full pipeline on a training sentence, routed by its own intonation tag.
pub fn pipeline_mel_l1(cfg: &RunConfig, acoustic: &AcousticBundle, vocoder: &VocoderBundle, bank: &LatentBank, u: &UtteranceData, index: u64) -> Result<f64> {
    let mut rng = step_rng(cfg.seed, index);
    let scheme = LatentScheme::reference(u.id.clone());
    let out = synthesize(cfg, acoustic, vocoder, bank, &u.tokens, u.intonation, &scheme, Some(u.mel.rows()), &mut rng)?;
    let reference = MelSpectrogram::from_tensor(&u.mel);
    let synth = if out.wave.len() >= cfg.mel.win {
        wav_to_mel(&out.wave, &cfg.mel)?
    } else {
        MelSpectrogram::new(Vec::new(), cfg.mel.n_mels)
    };
    Ok(padded_mel_l1(&synth, &reference, cfg.mel.log_floor_value()))
}

/// Log-magnitude STFT distance between a student sample, conditioned on the recording's
/// mel and the centroid latent, and the recording.
pub fn student_spectral(cfg: &RunConfig, vocoder: &VocoderBundle, bank: &LatentBank, u: &UtteranceData, index: u64) -> Result<f64> {
    let mut rng = step_rng(cfg.seed, index);
    let frames = vocoder.teacher.cond.encode_frames(&vocoder.store, &u.mel, &bank.vocoder_centroid_z)?;
    let noise = logistic_noise(&mut rng, u.wave.len());
    let wave = vocoder.student.sample(&vocoder.store, &noise, &frames)?;
    if wave.len() < cfg.stft.fft_size {
        return Ok(0.0);
    }
    let a = stft_log_magnitude(&wave, &cfg.stft);
    let b = stft_log_magnitude(&u.wave, &cfg.stft);
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(diff / a.data().len() as f64)
}

pub fn evaluate(cfg: &RunConfig, data: &Dataset, models: &EvalModels<'_>) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(data.len());
    for (i, u) in data.utts.iter().enumerate() {
        let z = models.acoustic.posterior_mean(&u.mel)?;
        let (mel_l1, diag, stop) = acoustic_metrics(models.acoustic, u, &z)?;
        let teacher_nll = models.teacher.map(|t| t.nll(u, &z)).transpose()?;
        let (student_spec, pipeline) = match (models.vocoder, models.bank) {
            (Some(v), Some(b)) => (
                Some(student_spectral(cfg, v, b, u, i as u64)?),
                Some(pipeline_mel_l1(cfg, models.acoustic, v, b, u, i as u64)?),
            ),
            _ => (None, None),
        };
        rows.push(EvalRow {
            id: u.id.clone(),
            mel_l1,
            attention_diagonality: diag,
            stop_accuracy: stop,
            teacher_nll,
            student_spectral: student_spec,
            pipeline_mel_l1: pipeline,
        });
    }
    let summary = EvalSummary::from_rows(&rows);
    Ok(EvalReport { rows, summary })
}

/// The same metrics for freshly initialized models: acoustic model, student,
/// and a latent bank drawn from the untrained posterior encoder.
pub fn untrained_baseline(cfg: &RunConfig, data: &Dataset) -> Result<EvalReport> {
    let acoustic = AcousticBundle::untrained(cfg, data);
    let vocoder = VocoderBundle::untrained(cfg, data)?;
    let bank = build_latent_bank(cfg, &acoustic, data)?;
    evaluate(cfg, data, &EvalModels { acoustic: &acoustic, teacher: None, vocoder: Some(&vocoder), bank: Some(&bank) })
}

impl EvalReport {
    /// JSON lines of the rows followed by a pretty summary file.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut lines = String::new();
        for r in &self.rows {
            lines += &serde_json::to_string(r)?;
            lines.push('\n');
        }
        crate::io::write_atomic(dir.join("eval_rows.jsonl"), lines.as_bytes())?;
        let summary = serde_json::to_string_pretty(&self.summary)? + "\n";
        crate::io::write_atomic(dir.join("eval_summary.json"), summary.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(peaks: &[usize], n: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = peaks.iter().map(|&p| (0..n).map(|j| if j == p { 1.0 } else { 0.0 }).collect()).collect();
        Tensor::from_rows(&rows)
    }

    #[test]
    fn diagonal_attention_scores_one() {
        assert_eq!(attention_diagonality(&one_hot(&[0, 1, 2, 3, 4], 5)), 1.0);
        assert_eq!(attention_diagonality(&one_hot(&[0, 0, 1, 1, 2, 2, 3, 3], 4)), 1.0);
    }

    #[test]
    fn stuck_or_backward_attention_is_penalized() {
        assert!(attention_diagonality(&one_hot(&[0, 0, 0, 0, 0, 0], 6)) < 0.5);
        assert!(attention_diagonality(&one_hot(&[4, 3, 2, 1, 0], 5)) < 0.5);
    }

    #[test]
    fn stop_accuracy_counts_final_step() {
        assert_eq!(stop_accuracy(&[-5.0, -5.0, 5.0]), 1.0);
        assert!((stop_accuracy(&[-5.0, 5.0, -5.0]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn summary_means_match_rows() {
        let row = |id: &str, l1: f64, t: Option<f64>| EvalRow {
            id: id.into(),
            mel_l1: l1,
            attention_diagonality: l1 / 10.0,
            stop_accuracy: 1.0,
            teacher_nll: t,
            student_spectral: None,
            pipeline_mel_l1: None,
        };
        let s = EvalSummary::from_rows(&[row("a", 1.0, Some(2.0)), row("b", 3.0, Some(4.0))]);
        assert_eq!((s.n, s.mel_l1, s.teacher_nll), (2, 2.0, Some(3.0)));
        assert!((s.attention_diagonality - 0.2).abs() < 1e-12);
        assert_eq!(s.student_spectral, None);
    }
}
