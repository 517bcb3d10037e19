//! Neural vocoder: conditioning encoder, mixture-of-logistics WaveNet teacher,
//! IAF student and density distillation.

mod conditioning;
mod distill;
mod student;
mod teacher;
mod wavenet;

pub use conditioning::ConditioningEncoder;
pub use distill::{kl_term_graph, spectral_loss_graph, stft_log_magnitude, DistillTerms, DistillVars, KlVars, StftConfig};
pub use student::{Student, StudentVars};
pub use teacher::Teacher;
pub use wavenet::GatedLayer;

use std::hash::Hasher;

use etts_autograd::{BinEdge, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocoderConfig {
    /// Hidden units per direction of each conditioning BiLSTM layer.
    pub cond_lstm: usize,
    pub cond_layers: usize,
    /// Width of the per-frame affine conditioning output.
    pub cond_dim: usize,
    pub teacher_residual: usize,
    pub teacher_gate: usize,
    pub teacher_skip: usize,
    pub teacher_blocks: usize,
    pub teacher_layers: usize,
    pub teacher_kernel: usize,
    pub mixtures: usize,
    pub student_channels: usize,
    pub student_flow_layers: Vec<usize>,
    pub student_kernel: usize,
    /// Quantization grid size on [-1, 1]; the bin half-width is `1/(levels−1)`.
    pub levels: usize,
}

impl Default for VocoderConfig {
    fn default() -> Self {
        Self {
            cond_lstm: 128,
            cond_layers: 2,
            cond_dim: 64,
            teacher_residual: 256,
            teacher_gate: 256,
            teacher_skip: 256,
            teacher_blocks: 2,
            teacher_layers: 10,
            teacher_kernel: 2,
            mixtures: 10,
            student_channels: 64,
            student_flow_layers: vec![10, 10, 10, 30],
            student_kernel: 2,
            levels: 32768,
        }
    }
}

impl VocoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.cond_lstm,
            self.cond_layers,
            self.cond_dim,
            self.teacher_residual,
            self.teacher_gate,
            self.teacher_skip,
            self.teacher_blocks,
            self.teacher_layers,
            self.teacher_kernel,
            self.mixtures,
            self.student_channels,
            self.student_kernel,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config("vocoder sizes must be positive".into()));
        }
        if self.student_flow_layers.is_empty() || self.student_flow_layers.contains(&0) {
            return Err(Error::Config("vocoder.student_flow_layers must be non-empty and positive".into()));
        }
        if self.levels < 2 {
            return Err(Error::Config("vocoder.levels must be at least 2".into()));
        }
        Ok(())
    }

    pub fn quantizer(&self) -> Quantizer {
        Quantizer::new(self.levels)
    }
}

/// Uniform grid of `levels` points on [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Quantizer {
    pub levels: usize,
}

impl Quantizer {
    pub fn new(levels: usize) -> Self {
        assert!(levels >= 2, "quantizer needs at least two levels");
        Self { levels }
    }

    /// Bin half-width Δ.
    pub fn delta(&self) -> f64 {
        1.0 / (self.levels - 1) as f64
    }

    pub fn index(&self, x: f64) -> usize {
        let i = ((x.clamp(-1.0, 1.0) + 1.0) * 0.5 * (self.levels - 1) as f64).round();
        i as usize
    }

    pub fn value(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (self.levels - 1) as f64
    }

    pub fn snap(&self, x: f64) -> f64 {
        self.value(self.index(x))
    }

    pub fn edge(&self, i: usize) -> BinEdge {
        if i == 0 {
            BinEdge::Lower
        } else if i + 1 == self.levels {
            BinEdge::Upper
        } else {
            BinEdge::Interior
        }
    }
}

/// Mixture-of-logistics parameters of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MolParams {
    pub logits: Vec<f64>,
    pub means: Vec<f64>,
    pub log_scales: Vec<f64>,
}

/// Lower clamp on mixture log-scales.
pub const LOG_SCALE_MIN: f64 = -11.512925464970229; // ln(1e-5)

impl MolParams {
    pub fn single(mean: f64, log_scale: f64) -> Self {
        Self { logits: vec![0.0], means: vec![mean], log_scales: vec![log_scale] }
    }

    /// Reads row `t` of a `T × 3K` network output laid out as `[logits | means | log_scales]`.
    pub fn from_row(row: &[f64]) -> Self {
        let k = row.len() / 3;
        Self { logits: row[..k].to_vec(), means: row[k..2 * k].to_vec(), log_scales: row[2 * k..].to_vec() }
    }

    fn log_weights(&self) -> Vec<f64> {
        let lse = etts_autograd::graph::logsumexp(&self.logits);
        self.logits.iter().map(|l| l - lse).collect()
    }
}

/// Discretized mixture log-mass of grid point `x` with edge bins using CDF tails.
pub fn mol_log_prob(x: f64, p: &MolParams, q: &Quantizer) -> f64 {
    let i = q.index(x);
    let xv = q.value(i);
    let edge = q.edge(i);
    let d = q.delta();
    let terms: Vec<f64> = p
        .log_weights()
        .iter()
        .zip(&p.means)
        .zip(&p.log_scales)
        .map(|((lw, m), ls)| {
            let inv = (-ls.max(LOG_SCALE_MIN)).exp();
            let a = (xv + d - m) * inv;
            let b = (xv - d - m) * inv;
            lw + etts_autograd::graph::log_sigmoid_diff(a, b, edge)
        })
        .collect();
    etts_autograd::graph::logsumexp(&terms)
}

/// Continuous mixture log-density.
pub fn mol_log_density(x: f64, p: &MolParams) -> f64 {
    let terms: Vec<f64> = p
        .log_weights()
        .iter()
        .zip(&p.means)
        .zip(&p.log_scales)
        .map(|((lw, m), ls)| lw + logistic_log_pdf(x, *m, ls.max(LOG_SCALE_MIN)))
        .collect();
    etts_autograd::graph::logsumexp(&terms)
}

pub fn logistic_log_pdf(x: f64, mu: f64, log_s: f64) -> f64 {
    let u = (x - mu) * (-log_s).exp();
    -u - 2.0 * etts_autograd::softplus(-u) - log_s
}

pub fn logistic_cdf(x: f64, mu: f64, s: f64) -> f64 {
    etts_autograd::sigmoid((x - mu) / s)
}

/// Standard logistic draw by inverse CDF.
pub fn sample_logistic<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random_range(f64::EPSILON..1.0 - f64::EPSILON);
    (u / (1.0 - u)).ln()
}

pub fn logistic_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| sample_logistic(rng)).collect()
}

/// Graph form of [`mol_log_prob`] for a column of grid values; `params` is `N × 3K`.
pub fn mol_log_prob_graph(g: &mut Graph<'_>, x: &[f64], params: Var, q: &Quantizer) -> Var {
    let (n, w) = g.shape(params);
    assert_eq!(n, x.len(), "one parameter row per sample");
    let k = w / 3;
    let d = q.delta();
    let idx: Vec<usize> = x.iter().map(|&v| q.index(v)).collect();
    let upper: Vec<f64> = idx.iter().map(|&i| q.value(i) + d).collect();
    let lower: Vec<f64> = idx.iter().map(|&i| q.value(i) - d).collect();
    let edges: Vec<BinEdge> = idx.iter().flat_map(|&i| std::iter::repeat_n(q.edge(i), k)).collect();
    let (lw, means, log_s) = split_mol(g, params, k);
    let neg_m = g.neg(means);
    let ns = g.neg(log_s);
    let inv = g.exp(ns);
    let up = g.constant(Tensor::column(&upper));
    let lo = g.constant(Tensor::column(&lower));
    let a = g.add_col(neg_m, up);
    let a = g.mul(a, inv);
    let b = g.add_col(neg_m, lo);
    let b = g.mul(b, inv);
    let lm = g.log_sigmoid_diff(a, b, edges);
    let t = g.add(lw, lm);
    g.logsumexp_rows(t)
}

/// Graph form of [`mol_log_density`]; `x` is `N × 1`, `params` is `N × 3K`.
pub fn mol_log_density_graph(g: &mut Graph<'_>, x: Var, params: Var) -> Var {
    let k = g.shape(params).1 / 3;
    let (lw, means, log_s) = split_mol(g, params, k);
    let neg_m = g.neg(means);
    let diff = g.add_col(neg_m, x);
    let ns = g.neg(log_s);
    let inv = g.exp(ns);
    let u = g.mul(diff, inv);
    let nu = g.neg(u);
    let sp = g.softplus(nu);
    let sp2 = g.scale(sp, 2.0);
    let lp = g.sub(nu, sp2);
    let lp = g.sub(lp, log_s);
    let t = g.add(lw, lp);
    g.logsumexp_rows(t)
}

fn split_mol(g: &mut Graph<'_>, params: Var, k: usize) -> (Var, Var, Var) {
    let logits = g.slice_cols(params, 0, k);
    let lw = g.log_softmax_rows(logits);
    let means = g.slice_cols(params, k, k);
    let ls = g.slice_cols(params, 2 * k, k);
    let ls = g.clamp_min(ls, LOG_SCALE_MIN);
    (lw, means, ls)
}

/// One affine flow `s_out = μ + σ·s_in`, returning the output and `Σ log σ`.
pub fn iaf_apply(s_in: &[f64], mu: &[f64], sigma: &[f64]) -> Result<(Vec<f64>, f64)> {
    if s_in.len() != mu.len() || mu.len() != sigma.len() {
        return Err(Error::Shape(format!("flow lengths {} / {} / {}", s_in.len(), mu.len(), sigma.len())));
    }
    if let Some(s) = sigma.iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("flow scale must be positive, got {s}")));
    }
    let out = s_in.iter().zip(mu).zip(sigma).map(|((x, m), s)| m + s * x).collect();
    Ok((out, sigma.iter().map(|s| s.ln()).sum()))
}

/// Composite location and scale of a stack of affine flows applied in order.
pub fn compose_flows(flows: &[(Vec<f64>, Vec<f64>)]) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = flows.first().map_or(0, |f| f.0.len());
    let mut mu = vec![0.0; t];
    let mut sigma = vec![1.0; t];
    for (m, s) in flows {
        if m.len() != t || s.len() != t {
            return Err(Error::Shape("flow parameter lengths differ".into()));
        }
        for i in 0..t {
            mu[i] = m[i] + s[i] * mu[i];
            sigma[i] *= s[i];
        }
    }
    Ok((mu, sigma))
}

/// Order-sensitive hash of every parameter value under `prefix`. Used to
/// verify that shared frozen weights are untouched by an optimization step.
pub fn version_stamp(store: &ParamStore, prefix: &str) -> u64 {
    let mut h = Fnv64::default();
    for e in store.entries().iter().filter(|e| e.name.starts_with(prefix)) {
        h.write(e.name.as_bytes());
        for v in e.value.data() {
            h.write_u64(v.to_bits());
        }
    }
    h.finish()
}

struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv64 {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_bin_value() {
        let q = Quantizer::new(3);
        assert_eq!(q.delta(), 0.5);
        let lp = mol_log_prob(0.0, &MolParams::single(0.0, 0.0), &q);
        let expected = 2.0 * etts_autograd::sigmoid(0.5) - 1.0;
        assert!((lp.exp() - expected).abs() < 1e-12);
        assert!((lp - (-1.406829113747295)).abs() < 1e-12);
    }

    #[test]
    fn one_hot_mixture_equals_component() {
        let q = Quantizer::new(256);
        let p = MolParams { logits: vec![-1e4, 0.0, -1e4], means: vec![0.3, -0.2, 0.5], log_scales: vec![-2.0, -1.5, -3.0] };
        let single = MolParams::single(-0.2, -1.5);
        for i in [0usize, 17, 128, 255] {
            let x = q.value(i);
            assert!((mol_log_prob(x, &p, &q) - mol_log_prob(x, &single, &q)).abs() < 1e-9);
        }
    }

    #[test]
    fn flow_log_det_cases() {
        let (y, ld) = iaf_apply(&[0.3, -1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((y, ld), (vec![0.3, -1.0], 0.0));
        let (_, ld) = iaf_apply(&[0.0; 8], &[0.0; 8], &[2.0; 8]).unwrap();
        assert!((ld - 8.0 * 2f64.ln()).abs() < 1e-12);
        assert!(iaf_apply(&[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn stamp_changes_with_values() {
        let mut s = ParamStore::new();
        let id = s.add("teacher/w", Tensor::row(&[1.0, 2.0]));
        s.add("student/w", Tensor::row(&[3.0]));
        let a = version_stamp(&s, "teacher/");
        s.value_mut(s.id("student/w").unwrap()).data_mut()[0] = 4.0;
        assert_eq!(a, version_stamp(&s, "teacher/"));
        s.value_mut(id).data_mut()[0] = 1.5;
        assert_ne!(a, version_stamp(&s, "teacher/"));
    }
}
