//! STFT magnitude and log-mel features.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::wav::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub win: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 16000, fft_size: 1024, hop: 200, win: 800, n_mels: 80, fmin: 0.0, fmax: 8000.0, log_floor: 1e-5 }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::MelConfig(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if !(self.hop >= 1 && self.hop <= self.win && self.win <= self.fft_size) {
            return bad(format!("need 1 <= hop <= win <= fft_size, got hop={} win={} fft={}", self.hop, self.win, self.fft_size));
        }
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= f64::from(self.sample_rate) / 2.0) {
            return bad(format!("need 0 <= fmin < fmax <= sr/2, got fmin={} fmax={}", self.fmin, self.fmax));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be >= 1".into());
        }
        if self.log_floor.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return bad("log_floor must be positive".into());
        }
        Ok(())
    }

    /// `log(log_floor)`, the value of a fully clamped entry.
    pub fn log_floor_value(&self) -> f64 {
        self.log_floor.ln()
    }

    /// Number of frames for `len` samples: `1 + (len − win) / hop`.
    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.win {
            0
        } else {
            1 + (len - self.win) / self.hop
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }
}

/// `M × n_mels` log-mel magnitudes, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<Vec<f64>>,
    pub n_mels: usize,
}

impl MelSpectrogram {
    pub fn new(frames: Vec<Vec<f64>>, n_mels: usize) -> Self {
        debug_assert!(frames.iter().all(|f| f.len() == n_mels));
        Self { frames, n_mels }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn to_tensor(&self) -> etts_autograd::Tensor {
        etts_autograd::Tensor::from_rows(&self.frames)
    }

    pub fn from_tensor(t: &etts_autograd::Tensor) -> Self {
        Self { frames: (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect(), n_mels: t.cols() }
    }

    /// Mean of the absolute element differences over the first `min(M, M')` frames.
    pub fn l1(&self, other: &MelSpectrogram) -> f64 {
        let m = self.num_frames().min(other.num_frames());
        let mut s = 0.0;
        let mut n = 0usize;
        for t in 0..m {
            for (a, b) in self.frames[t].iter().zip(&other.frames[t]) {
                s += (a - b).abs();
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Truncates or pads with `fill` to exactly `m` frames.
    pub fn fit_length(&self, m: usize, fill: f64) -> MelSpectrogram {
        let mut frames: Vec<Vec<f64>> = self.frames.iter().take(m).cloned().collect();
        while frames.len() < m {
            frames.push(vec![fill; self.n_mels]);
        }
        MelSpectrogram { frames, n_mels: self.n_mels }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels × n_bins`, peak weight 1 at each band center.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Vec<Vec<f64>>,
    /// Center frequency of each band in Hz.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.n_bins();
        let sr = f64::from(cfg.sample_rate);
        let bin_hz = sr / cfg.fft_size as f64;
        let mel_lo = hz_to_mel(cfg.fmin);
        let mel_hi = hz_to_mel(cfg.fmax);
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut weights = vec![vec![0.0; n_bins]; cfg.n_mels];
        for (m, row) in weights.iter_mut().enumerate() {
            let (lo, center, hi) = (points[m], points[m + 1], points[m + 2]);
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let v = if f <= lo || f >= hi {
                    0.0
                } else if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                *w = v.max(0.0);
            }
            // Bands narrower than one FFT bin would otherwise be empty.
            if row.iter().all(|&w| w == 0.0) {
                let k = ((center / bin_hz).round() as usize).min(n_bins - 1);
                row[k] = 1.0;
            }
        }
        Self { weights, centers: points[1..cfg.n_mels + 1].to_vec() }
    }
}

/// Reusable STFT + mel projection for one [`MelConfig`].
pub struct MelExtractor {
    cfg: MelConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filterbank: MelFilterbank,
}

impl MelExtractor {
    pub fn new(cfg: &MelConfig) -> Result<Self> {
        cfg.validate()?;
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self { cfg: cfg.clone(), fft, window: hann(cfg.win), filterbank: MelFilterbank::new(cfg) })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Magnitude spectrum per frame, `M × (fft/2 + 1)`.
    pub fn magnitudes(&self, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.cfg;
        if samples.len() < cfg.win {
            return Err(Error::TooShort { len: samples.len(), win: cfg.win });
        }
        let m = cfg.num_frames(samples.len());
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut out = Vec::with_capacity(m);
        for t in 0..m {
            let start = t * cfg.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < cfg.win { Complex::new(samples[start + i] * self.window[i], 0.0) } else { Complex::new(0.0, 0.0) };
            }
            self.fft.process(&mut buf);
            out.push(buf[..cfg.n_bins()].iter().map(|c| c.norm()).collect());
        }
        Ok(out)
    }

    pub fn compute(&self, w: &Waveform) -> Result<MelSpectrogram> {
        let mags = self.magnitudes(&w.samples)?;
        let floor = self.cfg.log_floor;
        let frames = mags
            .iter()
            .map(|mag| {
                self.filterbank
                    .weights
                    .iter()
                    .map(|row| row.iter().zip(mag).map(|(a, b)| a * b).sum::<f64>().max(floor).ln())
                    .collect()
            })
            .collect();
        Ok(MelSpectrogram::new(frames, self.cfg.n_mels))
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Log-mel spectrogram of `w`. Requires at least `win` samples.
pub fn wav_to_mel(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(cfg)?.compute(w)
}
