//! Spectrally normalized self-attention discriminator over random
//! spectrogram windows, with hinge and composite generator losses.

use etts_autograd::nn::{Conv1d, Linear, Padding};
use etts_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acoustic::{kld_closed_form, GaussianPosterior};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub channels: usize,
    pub conv_layers: usize,
    pub kernel: usize,
    /// Query/key width is `channels / attention_reduction`.
    pub attention_reduction: usize,
    pub window: usize,
    /// Power iterations per forward pass during training.
    pub sn_iters: usize,
    pub alpha: f64,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { channels: 64, conv_layers: 4, kernel: 3, attention_reduction: 8, window: 32, sn_iters: 1, alpha: 0.02, leaky_slope: 0.2 }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.conv_layers < 2 || self.kernel == 0 || self.window == 0 || self.sn_iters == 0 {
            return Err(Error::Config("discriminator sizes must be positive with at least 2 conv layers".into()));
        }
        if self.attention_reduction == 0 || self.channels < self.attention_reduction {
            return Err(Error::Config("discriminator.attention_reduction must divide into channels".into()));
        }
        Ok(())
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `Wᵀu` for `W` of shape `rows × cols`.
fn wt_u(w: &Tensor, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (r, &ur) in u.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(w.row_slice(r)) {
            *o += ur * x;
        }
    }
    out
}

fn w_v(w: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|r| w.row_slice(r).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Runs `iters` power iterations from `u`, updating it in place, and returns
/// `(v, σ̂)` with `σ̂ = uᵀWv`.
pub fn power_iteration(w: &Tensor, u: &mut [f64], iters: usize) -> (Vec<f64>, f64) {
    assert_eq!(u.len(), w.rows(), "power-iteration vector length");
    let mut v = vec![0.0; w.cols()];
    for _ in 0..iters {
        v = wt_u(w, u);
        if normalize(&mut v) == 0.0 {
            return (v, 0.0);
        }
        let mut nu = w_v(w, &v);
        if normalize(&mut nu) == 0.0 {
            return (v, 0.0);
        }
        u.copy_from_slice(&nu);
    }
    let wv = w_v(w, &v);
    let sigma = u.iter().zip(&wv).map(|(a, b)| a * b).sum();
    (v, sigma)
}

/// `W / σ̂` after `iters` power iterations; the zero matrix maps to itself.
pub fn spectral_normalize(w: &Tensor, iters: usize, u: &mut [f64]) -> Result<Tensor> {
    if iters == 0 {
        return Err(Error::InvalidArgument("spectral normalization needs at least one iteration".into()));
    }
    let (_, sigma) = power_iteration(w, u, iters);
    if sigma.abs() < 1e-300 {
        return Ok(w.clone());
    }
    Ok(w.map(|x| x / sigma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowCrop {
    pub start: usize,
    pub width: usize,
    pub frames: Tensor,
}

/// Uniform start in `[0, M − width]`; the whole input when `M < width`.
pub fn random_window<R: Rng>(y: &Tensor, width: usize, rng: &mut R) -> Result<WindowCrop> {
    if width == 0 {
        return Err(Error::InvalidArgument("window width must be positive".into()));
    }
    let (start, width) = window_start(y.rows(), width, rng);
    Ok(WindowCrop { start, width, frames: y.slice_rows(start, width) })
}

/// Start and effective width of a random window over `m` frames.
pub fn window_start<R: Rng>(m: usize, width: usize, rng: &mut R) -> (usize, usize) {
    if m <= width {
        (0, m)
    } else {
        (rng.random_range(0..=m - width), width)
    }
}

/// A weight matrix with its persistent power-iteration vector.
#[derive(Clone, Copy, Debug)]
pub struct SnWeight {
    pub weight: ParamId,
    pub u: ParamId,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub n_mels: usize,
    convs: Vec<Conv1d>,
    att_f: Linear,
    att_g: Linear,
    att_h: Linear,
    gamma: ParamId,
    head: Linear,
    sn: Vec<SnWeight>,
    pub norm_mean: ParamId,
    pub norm_std: ParamId,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &DiscriminatorConfig, n_mels: usize) -> Self {
        let c = cfg.channels;
        let ck = (c / cfg.attention_reduction).max(1);
        let mut root = store.scope("disc", rng);
        let convs: Vec<Conv1d> = (0..cfg.conv_layers)
            .map(|i| {
                let cin = if i == 0 { n_mels } else { c };
                Conv1d::new(&mut root.sub(&format!("conv{i}")), cin, c, cfg.kernel, 1, 1, Padding::Same)
            })
            .collect();
        let att_f = Linear::no_bias(&mut root.sub("attention/f"), c, ck);
        let att_g = Linear::no_bias(&mut root.sub("attention/g"), c, ck);
        let att_h = Linear::no_bias(&mut root.sub("attention/h"), c, c);
        let gamma = root.zeros("attention/gamma", 1, 1);
        let head = Linear::new(&mut root.sub("head"), c, 1);
        let norm_mean = root.zeros("norm/mean", 1, n_mels);
        let norm_std = root.constant("norm/std", Tensor::full(1, n_mels, 1.0));

        let mut weights: Vec<(String, ParamId, usize)> = Vec::new();
        for (i, conv) in convs.iter().enumerate() {
            weights.push((format!("conv{i}"), conv.weight, conv.kernel * conv.in_channels));
        }
        weights.push(("attention/f".into(), att_f.weight, c));
        weights.push(("attention/g".into(), att_g.weight, c));
        weights.push(("attention/h".into(), att_h.weight, c));
        weights.push(("head".into(), head.weight, c));
        let mut sn = Vec::new();
        for (name, weight, rows) in weights {
            let mut u: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(root.rng())).collect();
            normalize(&mut u);
            let uid = root.constant(&format!("{name}/sn_u"), Tensor::row(&u));
            sn.push(SnWeight { weight, u: uid });
        }
        for id in sn.iter().map(|s| s.u).chain([norm_mean, norm_std]) {
            store.set_frozen(id, true);
        }
        let d = Self { cfg: cfg.clone(), n_mels, convs, att_f, att_g, att_h, gamma, head, sn, norm_mean, norm_std };
        d.converge_power_iteration(store, 1e-12, 5000);
        d
    }

    /// Iterates every persistent vector until the singular value estimate
    /// stops moving. Random initial weights have nearly degenerate leading
    /// singular values, so a cold start needs far more than a handful of steps.
    pub fn converge_power_iteration(&self, store: &mut ParamStore, tol: f64, max_iters: usize) {
        for s in &self.sn {
            let w = store.value(s.weight).clone();
            let mut u = store.value(s.u).data().to_vec();
            let mut prev = power_iteration(&w, &mut u, 1).1;
            for _ in 1..max_iters {
                let cur = power_iteration(&w, &mut u, 1).1;
                let done = (cur - prev).abs() <= tol * cur.abs().max(1e-300);
                prev = cur;
                if done {
                    break;
                }
            }
            store.value_mut(s.u).data_mut().copy_from_slice(&u);
        }
    }

    pub fn sn_weights(&self) -> &[SnWeight] {
        &self.sn
    }

    /// Advances every persistent power-iteration vector by `iters` steps.
    pub fn update_power_iteration(&self, store: &mut ParamStore, iters: usize) {
        for s in &self.sn {
            let w = store.value(s.weight).clone();
            let mut u = store.value(s.u).data().to_vec();
            power_iteration(&w, &mut u, iters);
            store.value_mut(s.u).data_mut().copy_from_slice(&u);
        }
    }

    /// Spectrally normalized weight node using the stored `u` (no update).
    fn sn_weight(&self, g: &mut Graph<'_>, s: SnWeight) -> Var {
        let store = g.store();
        let w = store.value(s.weight).clone();
        let u = store.value(s.u).data().to_vec();
        let mut v = wt_u(&w, &u);
        let wv = g.param(s.weight);
        if normalize(&mut v) == 0.0 {
            return wv;
        }
        let vc = g.constant(Tensor::column(&v));
        let uc = g.constant(Tensor::column(&u));
        let prod = g.matmul(wv, vc);
        let uw = g.mul(uc, prod);
        let sigma = g.sum(uw);
        let inv = g.reciprocal(sigma);
        g.scale_by(wv, inv)
    }

    pub fn set_normalization(&self, store: &mut ParamStore, mean: &Tensor, std: &Tensor) {
        *store.value_mut(self.norm_mean) = mean.clone();
        *store.value_mut(self.norm_std) = std.clone();
    }

    /// Scalar score (`1 × 1`) of a `W × n_mels` crop.
    pub fn score(&self, g: &mut Graph<'_>, crop: Var) -> Var {
        let store = g.store();
        let nm = g.constant(store.value(self.norm_mean).map(|v| -v));
        let is = g.constant(store.value(self.norm_std).map(|v| 1.0 / v));
        let x = g.add_row(crop, nm);
        let mut x = g.mul_row(x, is);
        let n = self.convs.len();
        let attention_after = n / 2;
        for (i, conv) in self.convs.iter().enumerate() {
            let w = self.sn_weight(g, self.sn[i]);
            let y = conv.forward_with_weight(g, x, w);
            x = g.leaky_relu(y, self.cfg.leaky_slope);
            if i + 1 == attention_after {
                x = self.self_attention(g, x, &self.sn[n..n + 3]);
            }
        }
        let pooled = g.mean_rows(x);
        let w = self.sn_weight(g, self.sn[n + 3]);
        self.head.forward_with_weight(g, pooled, w)
    }

    fn self_attention(&self, g: &mut Graph<'_>, x: Var, sn: &[SnWeight]) -> Var {
        let wf = self.sn_weight(g, sn[0]);
        let wg = self.sn_weight(g, sn[1]);
        let wh = self.sn_weight(g, sn[2]);
        let f = self.att_f.forward_with_weight(g, x, wf);
        let k = self.att_g.forward_with_weight(g, x, wg);
        let h = self.att_h.forward_with_weight(g, x, wh);
        let kt = g.transpose(k);
        let logits = g.matmul(f, kt);
        let beta = g.softmax_rows(logits);
        let o = g.matmul(beta, h);
        let gamma = g.param(self.gamma);
        let o = g.scale_by(o, gamma);
        g.add(x, o)
    }

    pub fn score_value(&self, store: &ParamStore, crop: &Tensor) -> f64 {
        let mut g = Graph::with_store(store);
        let x = g.constant(crop.clone());
        let s = self.score(&mut g, x);
        g.value(s).item()
    }
}

/// `mean(max(0, 1 + D(fake))) + mean(max(0, 1 − D(real)))`.
pub fn d_hinge_loss(score_fake: &[f64], score_real: &[f64]) -> f64 {
    let mean = |xs: &[f64], f: &dyn Fn(f64) -> f64| xs.iter().map(|&x| f(x)).sum::<f64>() / xs.len().max(1) as f64;
    mean(score_fake, &|s| (1.0 + s).max(0.0)) + mean(score_real, &|s| (1.0 - s).max(0.0))
}

/// Graph form of [`d_hinge_loss`] over `B × 1` score columns.
pub fn d_hinge_loss_graph(g: &mut Graph<'_>, score_fake: Var, score_real: Var) -> Var {
    let a = g.add_scalar(score_fake, 1.0);
    let a = g.clamp_min(a, 0.0);
    let a = g.mean(a);
    let b = g.neg(score_real);
    let b = g.add_scalar(b, 1.0);
    let b = g.clamp_min(b, 0.0);
    let b = g.mean(b);
    g.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLossReport {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_kld: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

/// Generator objective `L1 + α·mean(D(y) − D(G(x))) + β·KLD` on plain values.
pub fn g_composite_loss(
    pred: &Tensor,
    target: &Tensor,
    score_fake: &[f64],
    score_real: &[f64],
    q: &GaussianPosterior,
    alpha: f64,
    beta: f64,
) -> Result<GanLossReport> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    if score_fake.len() != score_real.len() {
        return Err(Error::Shape(format!("{} fake vs {} real scores", score_fake.len(), score_real.len())));
    }
    let g_l1 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len().max(1) as f64;
    let g_adv = score_real.iter().zip(score_fake).map(|(r, f)| r - f).sum::<f64>() / score_fake.len().max(1) as f64;
    let g_kld = kld_closed_form(q);
    Ok(GanLossReport {
        d_loss: d_hinge_loss(score_fake, score_real),
        g_adv,
        g_l1,
        g_kld,
        alpha,
        beta,
        total: g_l1 + alpha * g_adv + beta * g_kld,
    })
}

/// Adversarial generator term `mean(real − fake)` with `real` held constant.
pub fn g_adv_graph(g: &mut Graph<'_>, score_fake: Var, score_real: &[f64]) -> Var {
    let real = g.constant(Tensor::column(score_real));
    let d = g.sub(real, score_fake);
    g.mean(d)
}
