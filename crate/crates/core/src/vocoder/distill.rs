use std::f64::consts::PI;

use etts_autograd::{ConvSpec, Graph, Tensor, Var};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::student::Student;
use super::teacher::Teacher;
use super::mol_log_density_graph;

const STFT_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self { fft_size: 512, hop: 128 }
    }
}

impl StftConfig {
    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn frames(&self, len: usize) -> usize {
        if len < self.fft_size {
            0
        } else {
            1 + (len - self.fft_size) / self.hop
        }
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Windowed DFT basis laid out as a conv weight: `fft × 2·bins`, cosines then sines.
fn dft_basis(cfg: &StftConfig) -> Tensor {
    let n = cfg.fft_size;
    let bins = cfg.bins();
    let w = hann(n);
    let mut t = Tensor::zeros(n, 2 * bins);
    for (i, wi) in w.iter().enumerate() {
        for k in 0..bins {
            let ang = 2.0 * PI * (i * k % n) as f64 / n as f64;
            t.set(i, k, wi * ang.cos());
            t.set(i, bins + k, -wi * ang.sin());
        }
    }
    t
}

/// `0.5·log(|X|² + ε)` per frame and bin, computed with an FFT.
pub fn stft_log_magnitude(x: &[f64], cfg: &StftConfig) -> Tensor {
    let n = cfg.fft_size;
    let frames = cfg.frames(x.len());
    let w = hann(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut out = Tensor::zeros(frames, cfg.bins());
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in 0..frames {
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(x[f * cfg.hop + i] * w[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in out.row_slice_mut(f).iter_mut().enumerate() {
            *v = 0.5 * (buf[k].norm_sqr() + STFT_EPS).ln();
        }
    }
    out
}

fn stft_log_magnitude_graph(g: &mut Graph<'_>, wave: Var, cfg: &StftConfig, basis: Var) -> Var {
    let spec = ConvSpec { kernel: cfg.fft_size, dilation: 1, stride: cfg.hop, pad_left: 0, pad_right: 0, in_channels: 1 };
    let y = g.conv1d(wave, basis, spec);
    let bins = cfg.bins();
    let re = g.slice_cols(y, 0, bins);
    let im = g.slice_cols(y, bins, bins);
    let re2 = g.square(re);
    let im2 = g.square(im);
    let p = g.add(re2, im2);
    let p = g.add_scalar(p, STFT_EPS);
    let l = g.log(p);
    g.scale(l, 0.5)
}

/// Mean squared error between log-STFT magnitudes of `wave` (`T × 1`) and `target`.
/// Zero when the crop is shorter than one analysis window.
pub fn spectral_loss_graph(g: &mut Graph<'_>, wave: Var, target: &[f64], cfg: &StftConfig) -> Var {
    let t = g.shape(wave).0;
    assert_eq!(t, target.len(), "spectral loss needs equal lengths");
    if cfg.frames(t) == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let basis = g.constant(dft_basis(cfg));
    let pred = stft_log_magnitude_graph(g, wave, cfg, basis);
    let tgt = g.constant(stft_log_magnitude(target, cfg));
    let d = g.sub(pred, tgt);
    let d = g.square(d);
    g.mean(d)
}

/// Monte-Carlo KL between the student's per-sample logistic and the teacher mixture.
#[derive(Clone, Copy, Debug)]
pub struct KlVars {
    /// `CE − H`, summed over positions.
    pub kl: Var,
    pub cross_entropy: Var,
    pub entropy: Var,
}

/// `KL = Σ_t [CE_t − H_t]` where `H_t = log σ_t + 2` is the logistic entropy and
/// `CE_t` averages `−log p_T(μ_t + σ_t·ε)` over the columns of `eps` (`T × n_mc`).
/// `teacher_params` is `T × 3K`.
pub fn kl_term_graph(g: &mut Graph<'_>, mu_tot: Var, log_sigma_tot: Var, teacher_params: Var, eps: &Tensor) -> KlVars {
    let (t, n) = eps.shape();
    let e = g.constant(eps.clone());
    let sigma = g.exp(log_sigma_tot);
    let x = g.mul_col(e, sigma);
    let x = g.add_col(x, mu_tot);
    let x = g.reshape(x, t * n, 1);
    let p = g.repeat_rows(teacher_params, n);
    let lp = mol_log_density_graph(g, x, p);
    let s = g.sum(lp);
    let cross_entropy = g.scale(s, -1.0 / n as f64);
    let h = g.sum(log_sigma_tot);
    let entropy = g.add_scalar(h, 2.0 * t as f64);
    let kl = g.sub(cross_entropy, entropy);
    KlVars { kl, cross_entropy, entropy }
}

#[derive(Clone, Copy, Debug)]
pub struct DistillVars {
    /// `kl / T + spectral_weight · spectral`.
    pub total: Var,
    pub kl: Var,
    pub cross_entropy: Var,
    pub entropy: Var,
    pub spectral: Var,
    pub wave: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillTerms {
    pub total: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    pub entropy: f64,
    pub spectral: f64,
}

impl DistillVars {
    pub fn values(&self, g: &Graph<'_>) -> DistillTerms {
        DistillTerms {
            total: g.value(self.total).item(),
            kl: g.value(self.kl).item(),
            cross_entropy: g.value(self.cross_entropy).item(),
            entropy: g.value(self.entropy).item(),
            spectral: g.value(self.spectral).item(),
        }
    }
}

impl Student {
    /// Distillation objective for one crop. The teacher scores the student's
    /// own output; teacher weights should be frozen in `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn distill_graph(
        &self,
        g: &mut Graph<'_>,
        teacher: &Teacher,
        cond: Var,
        noise: &[f64],
        eps: &Tensor,
        target: &[f64],
        stft: &StftConfig,
        spectral_weight: f64,
    ) -> DistillVars {
        let t = noise.len();
        let z = g.constant(Tensor::column(noise));
        let out = self.forward(g, z, cond);
        let params = teacher.forward(g, out.wave, cond);
        let kl = kl_term_graph(g, out.mu_tot, out.log_sigma_tot, params, eps);
        let spectral = spectral_loss_graph(g, out.wave, target, stft);
        let a = g.scale(kl.kl, 1.0 / t as f64);
        let b = g.scale(spectral, spectral_weight);
        let total = g.add(a, b);
        DistillVars { total, kl: kl.kl, cross_entropy: kl.cross_entropy, entropy: kl.entropy, spectral, wave: out.wave }
    }
}
