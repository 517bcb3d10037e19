//! Frame-wise f0 estimation and corpus prosody statistics.

use serde::{Deserialize, Serialize};

use super::corpus::Manifest;
use super::wav::{load_wav, Waveform};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PitchConfig {
    pub frame: usize,
    pub hop: usize,
    pub f0_min: f64,
    pub f0_max: f64,
    /// Frames with RMS below this are unvoiced.
    pub energy_threshold: f64,
}

impl Default for PitchConfig {
    fn default() -> Self {
        Self { frame: 800, hop: 200, f0_min: 60.0, f0_max: 600.0, energy_threshold: 0.02 }
    }
}

/// Per-frame energy and f0 (None when unvoiced).
#[derive(Clone, Debug)]
pub struct PitchTrack {
    pub energy: Vec<f64>,
    pub f0: Vec<Option<f64>>,
}

/// Autocorrelation pitch tracker with parabolic peak refinement.
pub fn track_pitch(w: &Waveform, cfg: &PitchConfig) -> PitchTrack {
    let sr = f64::from(w.sample_rate);
    let lag_min = (sr / cfg.f0_max).floor().max(1.0) as usize;
    let lag_max = (sr / cfg.f0_min).ceil() as usize;
    let mut energy = Vec::new();
    let mut f0 = Vec::new();
    if w.len() < cfg.frame {
        return PitchTrack { energy, f0 };
    }
    let n_frames = 1 + (w.len() - cfg.frame) / cfg.hop;
    for t in 0..n_frames {
        let x = &w.samples[t * cfg.hop..t * cfg.hop + cfg.frame];
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
        energy.push(rms);
        if rms < cfg.energy_threshold {
            f0.push(None);
            continue;
        }
        let hi = lag_max.min(x.len() - 2);
        let ac = |lag: usize| -> f64 { x[..x.len() - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum() };
        let r: Vec<f64> = (lag_min.saturating_sub(1)..=hi + 1).map(ac).collect();
        // r[i] holds lag (lag_min - 1 + i); pick the strongest local maximum.
        let mut best: Option<(usize, f64)> = None;
        for i in 1..r.len() - 1 {
            if r[i] > r[i - 1] && r[i] >= r[i + 1] && best.is_none_or(|(_, b)| r[i] > b) {
                best = Some((i, r[i]));
            }
        }
        match best {
            Some((i, peak)) if peak > 0.0 => {
                let (a, b, c) = (r[i - 1], r[i], r[i + 1]);
                let denom = a - 2.0 * b + c;
                let shift = if denom.abs() > 1e-12 { 0.5 * (a - c) / denom } else { 0.0 };
                let lag = (lag_min - 1 + i) as f64 + shift;
                f0.push(Some(sr / lag));
            }
            _ => f0.push(None),
        }
    }
    PitchTrack { energy, f0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub f0_variance: f64,
    pub energy_variance: f64,
    pub mean_f0: f64,
    pub voiced_frames: usize,
}

/// f0 and energy statistics over all voiced frames of a set of waveforms.
pub fn waveform_stats<'a>(waves: impl IntoIterator<Item = &'a Waveform>, cfg: &PitchConfig) -> Result<CorpusStats> {
    let mut f0s = Vec::new();
    let mut energies = Vec::new();
    for w in waves {
        let track = track_pitch(w, cfg);
        for (e, f) in track.energy.iter().zip(&track.f0) {
            if let Some(f) = f {
                f0s.push(*f);
                energies.push(*e);
            }
        }
    }
    if f0s.is_empty() {
        return Err(Error::NoVoicedFrames);
    }
    let (mean_f0, f0_variance) = mean_var(&f0s);
    let (_, energy_variance) = mean_var(&energies);
    Ok(CorpusStats { f0_variance, energy_variance, mean_f0, voiced_frames: f0s.len() })
}

/// Reads every utterance of the manifest and computes [`CorpusStats`].
pub fn corpus_stats(manifest: &Manifest, cfg: &PitchConfig) -> Result<CorpusStats> {
    if manifest.is_empty() {
        return Err(Error::Manifest("empty manifest".into()));
    }
    let waves = manifest.records.iter().map(|r| load_wav(manifest.audio_path(r))).collect::<Result<Vec<_>>>()?;
    waveform_stats(&waves, cfg)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}
