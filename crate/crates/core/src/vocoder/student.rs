use etts_autograd::nn::Linear;
use etts_autograd::{Graph, Init, ParamStore, Tensor, Var};
use rand::Rng;

use super::wavenet::{shift_right, GatedLayer};
use super::VocoderConfig;
use crate::error::{Error, Result};

/// One autoregressive affine flow. Its conditioner sees only earlier samples of
/// the flow input. The output head starts at zero, so the flow starts as identity.
#[derive(Clone, Debug)]
struct Flow {
    input: Linear,
    layers: Vec<GatedLayer>,
    head: Linear,
}

/// Inverse-autoregressive-flow student. All parameters live under `<prefix>/`.
#[derive(Clone, Debug)]
pub struct Student {
    pub cfg: VocoderConfig,
    pub hop: usize,
    flows: Vec<Flow>,
}

/// Graph outputs of a student pass, each `T × 1`.
#[derive(Clone, Copy, Debug)]
pub struct StudentVars {
    pub wave: Var,
    pub mu_tot: Var,
    pub log_sigma_tot: Var,
}

fn zero_linear<R: Rng>(init: &mut Init<'_, R>, in_dim: usize, out_dim: usize) -> Linear {
    Linear { weight: init.zeros("weight", in_dim, out_dim), bias: Some(init.zeros("bias", 1, out_dim)), in_dim, out_dim }
}

impl Student {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, cfg: &VocoderConfig, hop: usize) -> Self {
        let c = cfg.student_channels;
        let mut root = store.scope(prefix, rng);
        let flows = cfg
            .student_flow_layers
            .iter()
            .enumerate()
            .map(|(f, &n)| {
                let mut fi = root.sub(&format!("flow{f}"));
                let input = Linear::new(&mut fi.sub("input"), 1, c);
                let layers = (0..n)
                    .map(|l| GatedLayer::new(&mut fi.sub(&format!("layer{l}")), c, c, c, cfg.cond_dim, cfg.student_kernel, 1 << (l % 10)))
                    .collect();
                let head = zero_linear(&mut fi.sub("head"), c, 2);
                Flow { input, layers, head }
            })
            .collect();
        Self { cfg: cfg.clone(), hop, flows }
    }

    pub fn num_flows(&self) -> usize {
        self.flows.len()
    }

    pub fn flow_depths(&self) -> Vec<usize> {
        self.flows.iter().map(|f| f.layers.len()).collect()
    }

    pub fn flow_dilations(&self, flow: usize) -> Vec<usize> {
        self.flows[flow].layers.iter().map(|l| l.dilation()).collect()
    }

    fn flow_params(&self, g: &mut Graph<'_>, flow: &Flow, s: Var, cond: Var) -> (Var, Var) {
        let x = shift_right(g, s);
        let mut h = flow.input.forward(g, x);
        let mut skips = None;
        for layer in &flow.layers {
            let (nh, sk) = layer.forward(g, h, cond, self.hop);
            h = nh;
            skips = Some(match skips {
                Some(acc) => g.add(acc, sk),
                None => sk,
            });
        }
        let o = g.relu(skips.expect("flow has at least one layer"));
        let o = flow.head.forward(g, o);
        (g.slice_cols(o, 0, 1), g.slice_cols(o, 1, 1))
    }

    /// Pushes logistic noise `T × 1` through every flow.
    pub fn forward(&self, g: &mut Graph<'_>, noise: Var, cond: Var) -> StudentVars {
        let t = g.shape(noise).0;
        let mut s = noise;
        let mut mu_tot = g.constant(Tensor::zeros(t, 1));
        let mut log_sigma_tot = g.constant(Tensor::zeros(t, 1));
        for flow in &self.flows {
            let (mu, log_sigma) = self.flow_params(g, flow, s, cond);
            let sigma = g.exp(log_sigma);
            let scaled = g.mul(sigma, s);
            s = g.add(mu, scaled);
            let scaled = g.mul(sigma, mu_tot);
            mu_tot = g.add(mu, scaled);
            log_sigma_tot = g.add(log_sigma_tot, log_sigma);
        }
        StudentVars { wave: s, mu_tot, log_sigma_tot }
    }

    fn check(&self, n: usize, frames: &Tensor) -> Result<()> {
        if frames.cols() != self.cfg.cond_dim {
            return Err(Error::Shape(format!("conditioning has {} channels, expected {}", frames.cols(), self.cfg.cond_dim)));
        }
        if n != frames.rows() * self.hop || n == 0 {
            return Err(Error::Shape(format!("noise of {n} samples does not match {} frames at hop {}", frames.rows(), self.hop)));
        }
        Ok(())
    }

    /// Per-flow `(μ, σ)` and the final waveform for a given noise draw.
    #[allow(clippy::type_complexity)]
    pub fn flow_trace(&self, store: &ParamStore, noise: &[f64], frames: &Tensor) -> Result<(Vec<(Vec<f64>, Vec<f64>)>, Vec<f64>)> {
        self.check(noise.len(), frames)?;
        let mut g = Graph::with_store(store);
        let cond = g.constant(frames.clone());
        let mut s = g.constant(Tensor::column(noise));
        let mut trace = Vec::new();
        for flow in &self.flows {
            let (mu, log_sigma) = self.flow_params(&mut g, flow, s, cond);
            let sigma = g.exp(log_sigma);
            trace.push((g.value(mu).data().to_vec(), g.value(sigma).data().to_vec()));
            let scaled = g.mul(sigma, s);
            s = g.add(mu, scaled);
        }
        Ok((trace, g.value(s).data().to_vec()))
    }

    /// Waveform for one noise draw, clamped to [-1, 1].
    pub fn sample(&self, store: &ParamStore, noise: &[f64], frames: &Tensor) -> Result<Vec<f64>> {
        self.check(noise.len(), frames)?;
        let mut g = Graph::with_store(store);
        let cond = g.constant(frames.clone());
        let z = g.constant(Tensor::column(noise));
        let out = self.forward(&mut g, z, cond);
        Ok(g.value(out.wave).data().iter().map(|x| x.clamp(-1.0, 1.0)).collect())
    }
}
