use etts_autograd::nn::{BiLstm, Linear};
use etts_autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use super::VocoderConfig;
use crate::error::{Error, Result};

/// Stacked BiLSTM over normalized log-mel frames followed by a per-frame
/// affine map of `[h; z]` to the conditioning width.
#[derive(Clone, Debug)]
pub struct ConditioningEncoder {
    layers: Vec<BiLstm>,
    affine: Linear,
    pub n_mels: usize,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub norm_mean: ParamId,
    pub norm_std: ParamId,
}

impl ConditioningEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        cfg: &VocoderConfig,
        n_mels: usize,
        latent_dim: usize,
    ) -> Self {
        let mut root = store.scope(prefix, rng);
        let mut layers = Vec::new();
        let mut din = n_mels;
        for i in 0..cfg.cond_layers {
            let l = BiLstm::new(&mut root.sub(&format!("lstm{i}")), din, cfg.cond_lstm);
            din = l.output_dim();
            layers.push(l);
        }
        let affine = Linear::new(&mut root.sub("affine"), din + latent_dim, cfg.cond_dim);
        let norm_mean = root.zeros("norm/mean", 1, n_mels);
        let norm_std = root.constant("norm/std", Tensor::full(1, n_mels, 1.0));
        store.set_frozen(norm_mean, true);
        store.set_frozen(norm_std, true);
        Self { layers, affine, n_mels, latent_dim, cond_dim: cfg.cond_dim, norm_mean, norm_std }
    }

    pub fn set_normalization(&self, store: &mut ParamStore, mean: &Tensor, std: &Tensor) -> Result<()> {
        if mean.shape() != (1, self.n_mels) || std.shape() != (1, self.n_mels) {
            return Err(Error::Shape(format!("normalization stats must be 1 × {}", self.n_mels)));
        }
        *store.value_mut(self.norm_mean) = mean.clone();
        *store.value_mut(self.norm_std) = std.clone();
        Ok(())
    }

    /// Frame-rate conditioning, `M × cond_dim`.
    pub fn frames(&self, g: &mut Graph<'_>, mel: Var, z: &[f64]) -> Var {
        let m = g.shape(mel).0;
        let mean = g.param(self.norm_mean);
        let std = g.param(self.norm_std);
        let nm = g.neg(mean);
        let x = g.add_row(mel, nm);
        let inv = g.reciprocal(std);
        let mut h = g.mul_row(x, inv);
        for l in &self.layers {
            h = l.run(g, h);
        }
        let zr = g.constant(Tensor::row(z));
        let zb = g.broadcast_rows(zr, m);
        let hz = g.concat_cols(&[h, zb]);
        self.affine.forward(g, hz)
    }

    fn check(&self, mel: &Tensor, z: &[f64]) -> Result<()> {
        if mel.cols() != self.n_mels || mel.rows() == 0 {
            return Err(Error::Shape(format!("mel is {:?}, expected M × {}", mel.shape(), self.n_mels)));
        }
        if z.len() != self.latent_dim {
            return Err(Error::Shape(format!("latent has {} dims, expected {}", z.len(), self.latent_dim)));
        }
        Ok(())
    }

    /// Value-level frame conditioning.
    pub fn encode_frames(&self, store: &ParamStore, mel: &Tensor, z: &[f64]) -> Result<Tensor> {
        self.check(mel, z)?;
        let mut g = Graph::with_store(store);
        let x = g.constant(mel.clone());
        let c = self.frames(&mut g, x, z);
        Ok(g.value(c).clone())
    }

    /// Sample-rate conditioning, `M·hop × cond_dim`, each frame repeated `hop` times.
    pub fn encode_conditioning(&self, store: &ParamStore, mel: &Tensor, z: &[f64], hop: usize) -> Result<Tensor> {
        if hop == 0 {
            return Err(Error::InvalidArgument("hop must be positive".into()));
        }
        let f = self.encode_frames(store, mel, z)?;
        let mut data = Vec::with_capacity(f.len() * hop);
        for r in 0..f.rows() {
            for _ in 0..hop {
                data.extend_from_slice(f.row_slice(r));
            }
        }
        Ok(Tensor::from_vec(f.rows() * hop, f.cols(), data))
    }
}
