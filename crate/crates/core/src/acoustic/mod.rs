//! Sequence-to-sequence acoustic model with a max-ops decoder and a VAE
//! reference encoder.

mod loss;
mod model;

pub use loss::{acoustic_loss, kld_closed_form, reparameterize, stop_bce, AcousticLossTerms, GaussianPosterior};
pub use model::{
    AcousticModel, AttentionState, AttentionWeights, DecoderState, DecoderStepOutput, Inferred, LossVars, Memory, StepVars,
    TeacherForced, TeacherForcedOutput, Utterance,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::corpus::toy_token_table;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticConfig {
    pub embedding_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_kernel: usize,
    /// Hidden units per direction.
    pub encoder_lstm: usize,
    pub prenet_dim: usize,
    pub prenet_dropout: f64,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub decoder_lstm: usize,
    pub vae_channels: Vec<usize>,
    pub vae_kernel: usize,
    pub vae_lstm: usize,
    pub latent_dim: usize,
    pub max_ops: usize,
    pub stop_pos_weight: f64,
    /// Weight of the diagonal attention prior (0 disables it).
    #[serde(default)]
    pub guided_attention: f64,
    /// Width of the diagonal prior in normalized units.
    #[serde(default = "default_guide_width")]
    pub guided_attention_width: f64,
}

fn default_guide_width() -> f64 {
    0.2
}

impl Default for AcousticConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            encoder_conv_layers: 3,
            encoder_kernel: 5,
            encoder_lstm: 128,
            prenet_dim: 128,
            prenet_dropout: 0.5,
            attention_dim: 64,
            location_filters: 32,
            location_kernel: 31,
            decoder_lstm: 256,
            vae_channels: vec![32, 32, 64, 64],
            vae_kernel: 3,
            vae_lstm: 64,
            latent_dim: 64,
            max_ops: 5,
            stop_pos_weight: 1.0,
            guided_attention: 0.0,
            guided_attention_width: default_guide_width(),
        }
    }
}

impl AcousticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embedding_dim", self.embedding_dim),
            ("encoder_kernel", self.encoder_kernel),
            ("encoder_lstm", self.encoder_lstm),
            ("prenet_dim", self.prenet_dim),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
            ("location_kernel", self.location_kernel),
            ("decoder_lstm", self.decoder_lstm),
            ("vae_kernel", self.vae_kernel),
            ("vae_lstm", self.vae_lstm),
            ("latent_dim", self.latent_dim),
            ("max_ops", self.max_ops),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("acoustic.{name} must be positive")));
            }
        }
        if self.guided_attention < 0.0 || self.guided_attention_width <= 0.0 {
            return Err(Error::Config("acoustic.guided_attention must be non-negative with a positive width".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Config("acoustic.prenet_dropout must be in [0, 1)".into()));
        }
        if self.vae_channels.is_empty() || self.vae_channels.contains(&0) {
            return Err(Error::Config("acoustic.vae_channels must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn memory_dim(&self) -> usize {
        2 * self.encoder_lstm + self.latent_dim
    }
}

/// Phoneme symbol table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
}

impl Vocabulary {
    pub fn new(symbols: Vec<String>) -> Self {
        Self { symbols }
    }

    /// The fixed alphabet of the synthetic corpus.
    pub fn toy() -> Self {
        Self::new(toy_token_table().into_iter().map(|t| t.symbol).collect())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty phoneme sequence".into()));
        }
        tokens
            .iter()
            .map(|t| self.symbols.iter().position(|s| s == t.as_ref()).ok_or_else(|| Error::UnknownToken(t.as_ref().to_string())))
            .collect()
    }

    /// Parses a whitespace-separated phoneme string.
    pub fn encode_str(&self, text: &str) -> Result<Vec<usize>> {
        let toks: Vec<&str> = text.split_whitespace().collect();
        self.encode(&toks)
    }
}

/// Number of decoder steps for `m` frames at `ops` frames per step.
pub fn decoder_steps(m: usize, ops: usize) -> usize {
    m.div_ceil(ops)
}

/// Returns the first `ops` rows of a step's raw `max_ops × n_mels` output.
pub fn slice_ops(out: &DecoderStepOutput, ops: usize) -> Result<etts_autograd::Tensor> {
    let max_ops = out.raw_frames.rows();
    if ops == 0 || ops > max_ops {
        return Err(Error::InvalidArgument(format!("ops {ops} outside 1..={max_ops}")));
    }
    Ok(out.raw_frames.slice_rows(0, ops))
}
