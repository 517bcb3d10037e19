use etts_autograd::nn::Linear;
use etts_autograd::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use super::conditioning::ConditioningEncoder;
use super::wavenet::{shift_right, GatedLayer};
use super::{mol_log_prob_graph, MolParams, Quantizer, VocoderConfig};
use crate::error::{Error, Result};

/// Autoregressive WaveNet emitting mixture-of-logistics parameters per sample.
/// Parameters live under `<prefix>/`, the conditioning encoder under `<prefix>/cond/`.
#[derive(Clone, Debug)]
pub struct Teacher {
    pub cfg: VocoderConfig,
    pub cond: ConditioningEncoder,
    pub hop: usize,
    input: Linear,
    layers: Vec<GatedLayer>,
    out1: Linear,
    out2: Linear,
}

impl Teacher {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cfg: &VocoderConfig,
        n_mels: usize,
        latent_dim: usize,
        hop: usize,
    ) -> Self {
        let cond = ConditioningEncoder::new(store, rng, &format!("{prefix}/cond"), cfg, n_mels, latent_dim);
        let mut root = store.scope(prefix, rng);
        let input = Linear::new(&mut root.sub("input"), 1, cfg.teacher_residual);
        let mut layers = Vec::new();
        for b in 0..cfg.teacher_blocks {
            for l in 0..cfg.teacher_layers {
                layers.push(GatedLayer::new(
                    &mut root.sub(&format!("block{b}/layer{l}")),
                    cfg.teacher_residual,
                    cfg.teacher_gate,
                    cfg.teacher_skip,
                    cfg.cond_dim,
                    cfg.teacher_kernel,
                    1 << l,
                ));
            }
        }
        let out1 = Linear::new(&mut root.sub("out1"), cfg.teacher_skip, cfg.teacher_skip);
        let out2 = Linear::new(&mut root.sub("out2"), cfg.teacher_skip, 3 * cfg.mixtures);
        Self { cfg: cfg.clone(), cond, hop, input, layers, out1, out2 }
    }

    pub fn quantizer(&self) -> Quantizer {
        self.cfg.quantizer()
    }

    /// Number of past samples visible to the prediction of one sample.
    pub fn receptive_field(&self) -> usize {
        1 + self.layers.iter().map(|l| l.dilation() * (l.conv.kernel - 1)).sum::<usize>()
    }

    /// Mixture parameters for every position of `wave` (`T × 1`); row `t`
    /// depends only on samples before `t`. `cond` is `M × cond_dim` with `T = M·hop`.
    pub fn forward(&self, g: &mut Graph<'_>, wave: Var, cond: Var) -> Var {
        let x = shift_right(g, wave);
        let mut h = self.input.forward(g, x);
        let mut skips = None;
        for layer in &self.layers {
            let (nh, s) = layer.forward(g, h, cond, self.hop);
            h = nh;
            skips = Some(match skips {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
        let s = skips.expect("teacher has at least one layer");
        let s = g.relu(s);
        let s = self.out1.forward(g, s);
        let s = g.relu(s);
        self.out2.forward(g, s)
    }

    /// Mean negative log-likelihood of a waveform crop under the discretized mixture.
    pub fn nll_graph(&self, g: &mut Graph<'_>, wave: &[f64], cond: Var) -> Var {
        let q = self.quantizer();
        let snapped: Vec<f64> = wave.iter().map(|&x| q.snap(x)).collect();
        let w = g.constant(Tensor::column(&snapped));
        let p = self.forward(g, w, cond);
        let lp = mol_log_prob_graph(g, &snapped, p, &q);
        let m = g.mean(lp);
        g.neg(m)
    }

    fn check(&self, wave_len: usize, frames: &Tensor) -> Result<()> {
        if frames.cols() != self.cfg.cond_dim {
            return Err(Error::Shape(format!("conditioning has {} channels, expected {}", frames.cols(), self.cfg.cond_dim)));
        }
        if wave_len != frames.rows() * self.hop || wave_len == 0 {
            return Err(Error::Shape(format!(
                "waveform of {wave_len} samples does not match {} frames at hop {}",
                frames.rows(),
                self.hop
            )));
        }
        Ok(())
    }

    /// Value-level forward: `T × 3K` mixture parameters.
    pub fn forward_params(&self, store: &ParamStore, wave: &[f64], frames: &Tensor) -> Result<Tensor> {
        self.check(wave.len(), frames)?;
        let mut g = Graph::with_store(store);
        let w = g.constant(Tensor::column(wave));
        let c = g.constant(frames.clone());
        let p = self.forward(&mut g, w, c);
        Ok(g.value(p).clone())
    }

    pub fn mixture_at(&self, params: &Tensor, t: usize) -> MolParams {
        MolParams::from_row(params.row_slice(t))
    }

    pub fn nll(&self, store: &ParamStore, wave: &[f64], frames: &Tensor) -> Result<f64> {
        self.check(wave.len(), frames)?;
        let mut g = Graph::with_store(store);
        let c = g.constant(frames.clone());
        let l = self.nll_graph(&mut g, wave, c);
        Ok(g.value(l).item())
    }
}
