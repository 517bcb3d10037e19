use etts_autograd::nn::{dropout, BiLstm, Conv1d, Embedding, Linear, Lstm, LstmState, Padding};
use etts_autograd::{sigmoid, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use super::loss::GaussianPosterior;
use super::AcousticConfig;
use crate::error::{Error, Result};

/// Parameter handles of the acoustic model. All names live under `acoustic/`.
#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub cfg: AcousticConfig,
    pub n_mels: usize,
    pub vocab: usize,
    embedding: Embedding,
    enc_convs: Vec<Conv1d>,
    enc_lstm: BiLstm,
    vae_convs: Vec<Conv1d>,
    vae_lstm: BiLstm,
    vae_mu: Linear,
    vae_logvar: Linear,
    att_query: Linear,
    att_memory: Linear,
    att_location: Conv1d,
    att_loc_proj: Linear,
    att_v: Linear,
    prenet: Vec<Linear>,
    att_rnn: Lstm,
    dec_rnn: Lstm,
    frame_proj: Linear,
    stop_proj: Linear,
    /// Frozen per-bin feature statistics used to normalize inputs and outputs.
    pub norm_mean: ParamId,
    pub norm_std: ParamId,
}

/// Encoder memory with its attention projection.
#[derive(Clone, Copy, Debug)]
pub struct Memory {
    pub values: Var,
    pub processed: Var,
    pub len: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionState {
    pub weights: Var,
    pub cumulative: Var,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub att: LstmState,
    pub dec: LstmState,
    /// `B × memory_dim`.
    pub context: Var,
    pub attention: Vec<AttentionState>,
}

/// Graph outputs of one batched decoder step.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    /// `B × (max_ops·n_mels)`; row `b` holds frames `0..max_ops` back to back.
    pub frames: Var,
    /// `B × 1`.
    pub stop: Var,
}

/// Value-level result of one decoder step for a single utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderStepOutput {
    pub raw_frames: Tensor,
    pub stop_logit: f64,
}

/// Plain-value attention state of a single utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub weights: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl AttentionWeights {
    /// All mass on the first input position, nothing accumulated yet.
    pub fn initial(n: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[0] = 1.0;
        Self { weights, cumulative: vec![0.0; n] }
    }
}

/// One training example: token ids and its target log-mel frames (`M × n_mels`).
#[derive(Clone, Copy, Debug)]
pub struct Utterance<'a> {
    pub tokens: &'a [usize],
    pub mel: &'a Tensor,
}

/// Batched teacher-forced decoder outputs, still inside a graph.
#[derive(Clone, Debug)]
pub struct TeacherForcedOutput {
    pub ops: usize,
    /// Decoder steps of each utterance.
    pub steps: Vec<usize>,
    /// Per step, the raw `B × (max_ops·n_mels)` output.
    pub raw: Vec<Var>,
    /// Per step, the first `ops` frames: `B × (ops·n_mels)`.
    pub sliced: Vec<Var>,
    pub stops: Vec<Var>,
    /// `attention[t][b]` is the `1 × N_b` weight row.
    pub attention: Vec<Vec<Var>>,
}

impl TeacherForcedOutput {
    pub fn max_steps(&self) -> usize {
        self.raw.len()
    }
}

/// Value-level teacher-forced pass over one utterance.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    /// `steps·ops × n_mels`.
    pub predicted: Tensor,
    pub stop_logits: Vec<f64>,
    /// `steps × N`.
    pub attention: Tensor,
    pub raw_steps: Vec<DecoderStepOutput>,
}

/// Result of free-running generation.
#[derive(Clone, Debug)]
pub struct Inferred {
    pub mel: Tensor,
    /// `steps × N`.
    pub attention: Tensor,
    /// Step at which the stop token fired.
    pub stop_step: Option<usize>,
    /// True when generation ended by hitting `max_steps`.
    pub hit_max_steps: bool,
}

/// Loss graph nodes for a batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l1: Var,
    pub kld: Var,
    pub stop: Var,
    /// Diagonal attention prior, included in `total` only with a positive weight.
    pub guide: Var,
}

impl AcousticModel {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &AcousticConfig, n_mels: usize, vocab: usize) -> Self {
        let c = cfg;
        let mut root = store.scope("acoustic", rng);
        let embedding = Embedding::new(&mut root.sub("embedding"), vocab, c.embedding_dim);
        let enc_convs = (0..c.encoder_conv_layers)
            .map(|i| Conv1d::new(&mut root.sub(&format!("encoder/conv{i}")), c.embedding_dim, c.embedding_dim, c.encoder_kernel, 1, 1, Padding::Same))
            .collect();
        let enc_lstm = BiLstm::new(&mut root.sub("encoder/lstm"), c.embedding_dim, c.encoder_lstm);

        let mut vae_convs = Vec::new();
        let mut cin = n_mels;
        for (i, &ch) in c.vae_channels.iter().enumerate() {
            vae_convs.push(Conv1d::new(&mut root.sub(&format!("vae/conv{i}")), cin, ch, c.vae_kernel, 1, 2, Padding::Same));
            cin = ch;
        }
        let vae_lstm = BiLstm::new(&mut root.sub("vae/lstm"), cin, c.vae_lstm);
        let vae_mu = Linear::new(&mut root.sub("vae/mu"), 2 * c.vae_lstm, c.latent_dim);
        let vae_logvar = Linear::new(&mut root.sub("vae/log_var"), 2 * c.vae_lstm, c.latent_dim);

        let mem = c.memory_dim();
        let att_query = Linear::no_bias(&mut root.sub("attention/query"), c.decoder_lstm, c.attention_dim);
        let att_memory = Linear::no_bias(&mut root.sub("attention/memory"), mem, c.attention_dim);
        let att_location = Conv1d::new(&mut root.sub("attention/location_conv"), 2, c.location_filters, c.location_kernel, 1, 1, Padding::Same);
        let att_loc_proj = Linear::no_bias(&mut root.sub("attention/location_proj"), c.location_filters, c.attention_dim);
        let att_v = Linear::new(&mut root.sub("attention/v"), c.attention_dim, 1);

        let prenet = vec![
            Linear::new(&mut root.sub("decoder/prenet0"), n_mels, c.prenet_dim),
            Linear::new(&mut root.sub("decoder/prenet1"), c.prenet_dim, c.prenet_dim),
        ];
        let att_rnn = Lstm::new(&mut root.sub("decoder/attention_rnn"), c.prenet_dim + mem, c.decoder_lstm);
        let dec_rnn = Lstm::new(&mut root.sub("decoder/decoder_rnn"), c.decoder_lstm + mem, c.decoder_lstm);
        let frame_proj = Linear::new(&mut root.sub("decoder/frame_proj"), c.decoder_lstm + mem, c.max_ops * n_mels);
        let stop_proj = Linear::new(&mut root.sub("decoder/stop_proj"), c.decoder_lstm + mem, 1);
        let norm_mean = root.zeros("norm/mean", 1, n_mels);
        let norm_std = root.constant("norm/std", Tensor::full(1, n_mels, 1.0));
        store.set_frozen(norm_mean, true);
        store.set_frozen(norm_std, true);
        Self {
            cfg: cfg.clone(),
            n_mels,
            vocab,
            embedding,
            enc_convs,
            enc_lstm,
            vae_convs,
            vae_lstm,
            vae_mu,
            vae_logvar,
            att_query,
            att_memory,
            att_location,
            att_loc_proj,
            att_v,
            prenet,
            att_rnn,
            dec_rnn,
            frame_proj,
            stop_proj,
            norm_mean,
            norm_std,
        }
    }

    /// Sets the frozen feature statistics from a set of training spectrograms.
    pub fn fit_normalization(&self, store: &mut ParamStore, mels: &[&Tensor]) {
        let n = self.n_mels;
        let mut sum = vec![0.0; n];
        let mut sq = vec![0.0; n];
        let mut count = 0.0;
        for m in mels {
            for r in 0..m.rows() {
                for (j, &v) in m.row_slice(r).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1.0;
            }
        }
        if count == 0.0 {
            return;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-2)).collect();
        *store.value_mut(self.norm_mean) = Tensor::row(&mean);
        *store.value_mut(self.norm_std) = Tensor::row(&std);
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty phoneme sequence".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(Error::OutOfVocabulary { id, vocab: self.vocab });
        }
        Ok(())
    }

    fn normalize(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let store = g.store();
        let neg_mean = store.value(self.norm_mean).map(|v| -v);
        let inv_std = store.value(self.norm_std).map(|v| 1.0 / v);
        let nm = g.constant(neg_mean);
        let is = g.constant(inv_std);
        let centered = g.add_row(x, nm);
        g.mul_row(centered, is)
    }

    /// `N × 2·encoder_lstm` memory, one row per token.
    pub fn encode_phonemes_graph(&self, g: &mut Graph<'_>, tokens: &[usize]) -> Var {
        let mut x = self.embedding.forward(g, tokens);
        for conv in &self.enc_convs {
            let y = conv.forward(g, x);
            x = g.relu(y);
        }
        self.enc_lstm.run(g, x)
    }

    /// Posterior `(mu, log_var)`, each `1 × latent_dim`.
    pub fn vae_encode_graph(&self, g: &mut Graph<'_>, mel: Var) -> (Var, Var) {
        let mut x = self.normalize(g, mel);
        for conv in &self.vae_convs {
            let y = conv.forward(g, x);
            x = g.relu(y);
        }
        let s = self.vae_lstm.summary(g, x);
        (self.vae_mu.forward(g, s), self.vae_logvar.forward(g, s))
    }

    /// Reparameterized sample `mu + exp(lv/2)·noise` inside the graph.
    pub fn sample_latent(&self, g: &mut Graph<'_>, mu: Var, log_var: Var, noise: &[f64]) -> Var {
        let half = g.scale(log_var, 0.5);
        let sd = g.exp(half);
        let e = g.constant(Tensor::row(noise));
        let scaled = g.mul(sd, e);
        g.add(mu, scaled)
    }

    /// Concatenates `z` to every encoder row and precomputes the attention keys.
    pub fn memory(&self, g: &mut Graph<'_>, encoded: Var, z: Var) -> Memory {
        let len = g.shape(encoded).0;
        let zb = g.broadcast_rows(z, len);
        let values = g.concat_cols(&[encoded, zb]);
        let processed = self.att_memory.forward(g, values);
        Memory { values, processed, len }
    }

    pub fn initial_attention(&self, g: &mut Graph<'_>, len: usize) -> AttentionState {
        let a = AttentionWeights::initial(len);
        self.attention_state_from(g, &a)
    }

    pub fn attention_state_from(&self, g: &mut Graph<'_>, a: &AttentionWeights) -> AttentionState {
        let weights = g.constant(Tensor::row(&a.weights));
        let cumulative = g.constant(Tensor::row(&a.cumulative));
        AttentionState { weights, cumulative }
    }

    /// Location-sensitive attention for one utterance; `query` is `1 × decoder_lstm`.
    pub fn attention_step(&self, g: &mut Graph<'_>, query: Var, memory: &Memory, prev: &AttentionState) -> (Var, AttentionState) {
        let wt = g.transpose(prev.weights);
        let ct = g.transpose(prev.cumulative);
        let loc_in = g.concat_cols(&[wt, ct]);
        let loc = self.att_location.forward(g, loc_in);
        let loc = self.att_loc_proj.forward(g, loc);
        let q = self.att_query.forward(g, query);
        let keys = g.add(memory.processed, loc);
        let keys = g.add_row(keys, q);
        let act = g.tanh(keys);
        let energies = self.att_v.forward(g, act);
        let energies = g.transpose(energies);
        let weights = g.softmax_rows(energies);
        let context = g.matmul(weights, memory.values);
        let cumulative = g.add(prev.cumulative, weights);
        (context, AttentionState { weights, cumulative })
    }

    pub fn initial_decoder_state(&self, g: &mut Graph<'_>, memories: &[Memory]) -> DecoderState {
        let b = memories.len();
        let att = self.att_rnn.zero_state(g, b);
        let dec = self.dec_rnn.zero_state(g, b);
        let context = g.constant(Tensor::zeros(b, self.cfg.memory_dim()));
        let attention = memories.iter().map(|m| self.initial_attention(g, m.len)).collect();
        DecoderState { att, dec, context, attention }
    }

    /// One batched decoder step. `feedback` is `B × n_mels` in log-mel units.
    /// Dropout in the pre-net is applied only when `rng` is given.
    pub fn decoder_step<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        feedback: Var,
        memories: &[Memory],
        state: DecoderState,
        mut rng: Option<&mut R>,
    ) -> (StepVars, DecoderState) {
        let mut x = self.normalize(g, feedback);
        for layer in &self.prenet {
            let y = layer.forward(g, x);
            let y = g.relu(y);
            x = dropout(g, y, self.cfg.prenet_dropout, rng.as_deref_mut());
        }
        let att_in = g.concat_cols(&[x, state.context]);
        let att = self.att_rnn.step(g, att_in, state.att);
        let mut contexts = Vec::with_capacity(memories.len());
        let mut attention = Vec::with_capacity(memories.len());
        for (b, (mem, prev)) in memories.iter().zip(&state.attention).enumerate() {
            let q = g.row(att.h, b);
            let (ctx, st) = self.attention_step(g, q, mem, prev);
            contexts.push(ctx);
            attention.push(st);
        }
        let context = g.concat_rows(&contexts);
        let dec_in = g.concat_cols(&[att.h, context]);
        let dec = self.dec_rnn.step(g, dec_in, state.dec);
        let out_in = g.concat_cols(&[dec.h, context]);
        let raw = self.frame_proj.forward(g, out_in);
        let frames = self.denormalize_frames(g, raw);
        let stop = self.stop_proj.forward(g, out_in);
        (StepVars { frames, stop }, DecoderState { att, dec, context, attention })
    }

    fn denormalize_frames(&self, g: &mut Graph<'_>, raw: Var) -> Var {
        let store = g.store();
        let tile = |t: &Tensor| Tensor::row(&t.data().repeat(self.cfg.max_ops));
        let mean = g.constant(tile(store.value(self.norm_mean)));
        let std = g.constant(tile(store.value(self.norm_std)));
        let scaled = g.mul_row(raw, std);
        g.add_row(scaled, mean)
    }

    /// Teacher-forced decoding of a batch at `ops` frames per step. `zs[b]` is
    /// `1 × latent_dim`. Feedback at step `t` is ground-truth frame `t·ops − 1`.
    pub fn teacher_forced<R: Rng>(
        &self,
        g: &mut Graph<'_>,
        batch: &[Utterance<'_>],
        zs: &[Var],
        ops: usize,
        mut rng: Option<&mut R>,
    ) -> Result<TeacherForcedOutput> {
        if ops == 0 || ops > self.cfg.max_ops {
            return Err(Error::InvalidArgument(format!("ops {ops} outside 1..={}", self.cfg.max_ops)));
        }
        if batch.is_empty() || zs.len() != batch.len() {
            return Err(Error::Shape(format!("{} utterances with {} latents", batch.len(), zs.len())));
        }
        let mut memories = Vec::with_capacity(batch.len());
        for (u, &z) in batch.iter().zip(zs) {
            self.check_tokens(u.tokens)?;
            if u.mel.rows() == 0 || u.mel.cols() != self.n_mels {
                return Err(Error::Shape(format!("target mel {:?}, expected M × {}", u.mel.shape(), self.n_mels)));
            }
            let enc = self.encode_phonemes_graph(g, u.tokens);
            memories.push(self.memory(g, enc, z));
        }
        let steps: Vec<usize> = batch.iter().map(|u| super::decoder_steps(u.mel.rows(), ops)).collect();
        let max_steps = *steps.iter().max().expect("non-empty batch");
        let mut state = self.initial_decoder_state(g, &memories);
        let mut out = TeacherForcedOutput { ops, steps, raw: Vec::new(), sliced: Vec::new(), stops: Vec::new(), attention: Vec::new() };
        for t in 0..max_steps {
            let mut fb = Tensor::zeros(batch.len(), self.n_mels);
            if t > 0 {
                for (b, u) in batch.iter().enumerate() {
                    let idx = (t * ops - 1).min(u.mel.rows() - 1);
                    fb.row_slice_mut(b).copy_from_slice(u.mel.row_slice(idx));
                }
            }
            let fb = g.constant(fb);
            let (vars, next) = self.decoder_step(g, fb, &memories, state, rng.as_deref_mut());
            state = next;
            out.sliced.push(g.slice_cols(vars.frames, 0, ops * self.n_mels));
            out.raw.push(vars.frames);
            out.stops.push(vars.stop);
            out.attention.push(state.attention.iter().map(|a| a.weights).collect());
        }
        Ok(out)
    }

    /// Predicted frames of utterance `b`: `steps_b·ops × n_mels`.
    pub fn predicted_mel(&self, g: &mut Graph<'_>, out: &TeacherForcedOutput, b: usize) -> Var {
        let parts: Vec<Var> = (0..out.steps[b])
            .map(|t| {
                let r = g.row(out.sliced[t], b);
                g.reshape(r, out.ops, self.n_mels)
            })
            .collect();
        g.concat_rows(&parts)
    }

    /// Masked L1 over real frames, batch-mean KLD and stop-token BCE.
    pub fn loss_graph(
        &self,
        g: &mut Graph<'_>,
        out: &TeacherForcedOutput,
        batch: &[Utterance<'_>],
        posteriors: &[(Var, Var)],
        beta: f64,
    ) -> LossVars {
        let ops = out.ops;
        let nb = batch.len();
        let s = out.max_steps();
        let width = ops * self.n_mels;
        let mut target = Tensor::zeros(s * nb, width);
        let mut mask = Tensor::zeros(s * nb, width);
        for t in 0..s {
            for (b, u) in batch.iter().enumerate() {
                let r = t * nb + b;
                for k in 0..ops {
                    let f = t * ops + k;
                    if f < u.mel.rows() {
                        let cols = k * self.n_mels..(k + 1) * self.n_mels;
                        target.row_slice_mut(r)[cols.clone()].copy_from_slice(u.mel.row_slice(f));
                        mask.row_slice_mut(r)[cols].fill(1.0);
                    }
                }
            }
        }
        let count = mask.sum();
        let pred = g.concat_rows(&out.sliced);
        let tgt = g.constant(target);
        let m = g.constant(mask);
        let diff = g.sub(pred, tgt);
        let ad = g.abs(diff);
        let masked = g.mul(ad, m);
        let s1 = g.sum(masked);
        let l1 = g.scale(s1, 1.0 / count);

        let mut klds = Vec::with_capacity(posteriors.len());
        for &(mu, lv) in posteriors {
            let m2 = g.square(mu);
            let e = g.exp(lv);
            let a = g.add(m2, e);
            let a = g.sub(a, lv);
            let sa = g.sum(a);
            let dim = g.shape(mu).1 as f64;
            let k = g.add_scalar(sa, -dim);
            klds.push(g.scale(k, 0.5));
        }
        let kcat = g.concat_rows(&klds);
        let kld = g.mean(kcat);

        let w = self.cfg.stop_pos_weight;
        let mut a = Tensor::zeros(s * nb, 1);
        let mut c = Tensor::zeros(s * nb, 1);
        let mut n = 0.0;
        for t in 0..s {
            for b in 0..nb {
                let steps = out.steps[b];
                if t < steps {
                    n += 1.0;
                    let r = t * nb + b;
                    if t + 1 == steps {
                        a.set(r, 0, w);
                        c.set(r, 0, w);
                    } else {
                        a.set(r, 0, 1.0);
                    }
                }
            }
        }
        let logits = g.concat_rows(&out.stops);
        let sp = g.softplus(logits);
        let av = g.constant(a);
        let cv = g.constant(c);
        let t1 = g.mul(sp, av);
        let t2 = g.mul(logits, cv);
        let bce = g.sub(t1, t2);
        let sb = g.sum(bce);
        let stop = g.scale(sb, 1.0 / n);

        let guide = self.guide_graph(g, out);
        let bk = g.scale(kld, beta);
        let total = g.add(l1, bk);
        let mut total = g.add(total, stop);
        if self.cfg.guided_attention > 0.0 {
            let gw = g.scale(guide, self.cfg.guided_attention);
            total = g.add(total, gw);
        }
        LossVars { total, l1, kld, stop, guide }
    }

    /// Mean attention mass away from the diagonal: weights times
    /// `1 − exp(−(n/N − t/S)² / 2w²)`, averaged over real steps.
    fn guide_graph(&self, g: &mut Graph<'_>, out: &TeacherForcedOutput) -> Var {
        let w2 = 2.0 * self.cfg.guided_attention_width.powi(2);
        let mut parts = Vec::new();
        for (t, row) in out.attention.iter().enumerate() {
            for (b, &a) in row.iter().enumerate() {
                let steps = out.steps[b];
                if t >= steps {
                    continue;
                }
                let n = g.shape(a).1;
                let penalty: Vec<f64> = (0..n)
                    .map(|j| {
                        let d = j as f64 / n.max(1) as f64 - t as f64 / steps as f64;
                        1.0 - (-d * d / w2).exp()
                    })
                    .collect();
                let pv = g.constant(Tensor::row(&penalty));
                let prod = g.mul(a, pv);
                parts.push(g.sum(prod));
            }
        }
        let cat = g.concat_rows(&parts);
        g.mean(cat)
    }

    // Value-level wrappers, evaluated without dropout.

    pub fn encode_phonemes(&self, store: &ParamStore, tokens: &[usize]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let mut g = Graph::with_store(store);
        let v = self.encode_phonemes_graph(&mut g, tokens);
        Ok(g.value(v).clone())
    }

    pub fn vae_encode(&self, store: &ParamStore, mel: &Tensor) -> Result<GaussianPosterior> {
        if mel.rows() == 0 || mel.cols() != self.n_mels {
            return Err(Error::Shape(format!("mel {:?}, expected M × {}", mel.shape(), self.n_mels)));
        }
        let mut g = Graph::with_store(store);
        let x = g.constant(mel.clone());
        let (mu, lv) = self.vae_encode_graph(&mut g, x);
        GaussianPosterior::new(g.value(mu).data().to_vec(), g.value(lv).data().to_vec())
    }

    /// Attention over an explicit memory matrix (`N × memory_dim`).
    pub fn attention_step_values(
        &self,
        store: &ParamStore,
        query: &[f64],
        memory: &Tensor,
        prev: &AttentionWeights,
    ) -> Result<(Vec<f64>, AttentionWeights)> {
        if memory.cols() != self.cfg.memory_dim() || prev.weights.len() != memory.rows() || query.len() != self.cfg.decoder_lstm {
            return Err(Error::Shape("attention inputs do not match the model".into()));
        }
        let mut g = Graph::with_store(store);
        let values = g.constant(memory.clone());
        let processed = self.att_memory.forward(&mut g, values);
        let mem = Memory { values, processed, len: memory.rows() };
        let q = g.constant(Tensor::row(query));
        let st = self.attention_state_from(&mut g, prev);
        let (ctx, next) = self.attention_step(&mut g, q, &mem, &st);
        let w = AttentionWeights { weights: g.value(next.weights).data().to_vec(), cumulative: g.value(next.cumulative).data().to_vec() };
        Ok((g.value(ctx).data().to_vec(), w))
    }

    fn latent_var(&self, g: &mut Graph<'_>, z: &[f64]) -> Result<Var> {
        if z.len() != self.cfg.latent_dim {
            return Err(Error::Shape(format!("latent has {} dims, expected {}", z.len(), self.cfg.latent_dim)));
        }
        Ok(g.constant(Tensor::row(z)))
    }

    pub fn teacher_forced_forward(&self, store: &ParamStore, tokens: &[usize], mel: &Tensor, z: &[f64], ops: usize) -> Result<TeacherForced> {
        let mut g = Graph::with_store(store);
        let zv = self.latent_var(&mut g, z)?;
        let batch = [Utterance { tokens, mel }];
        let out = self.teacher_forced::<rand::rngs::ThreadRng>(&mut g, &batch, &[zv], ops, None)?;
        let pm = self.predicted_mel(&mut g, &out, 0);
        let stop_logits = out.stops.iter().map(|&s| g.value(s).item()).collect();
        let rows: Vec<Vec<f64>> = out.attention.iter().map(|a| g.value(a[0]).data().to_vec()).collect();
        let raw_steps = out
            .raw
            .iter()
            .zip(&out.stops)
            .map(|(&r, &s)| DecoderStepOutput {
                raw_frames: Tensor::from_vec(self.cfg.max_ops, self.n_mels, g.value(r).data().to_vec()),
                stop_logit: g.value(s).item(),
            })
            .collect();
        Ok(TeacherForced { predicted: g.value(pm).clone(), stop_logits, attention: Tensor::from_rows(&rows), raw_steps })
    }

    /// Free-running generation feeding back the last frame of each slice.
    pub fn infer_spectrogram(&self, store: &ParamStore, tokens: &[usize], z: &[f64], ops: usize, max_steps: usize) -> Result<Inferred> {
        self.check_tokens(tokens)?;
        if ops == 0 || ops > self.cfg.max_ops {
            return Err(Error::InvalidArgument(format!("ops {ops} outside 1..={}", self.cfg.max_ops)));
        }
        if max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be positive".into()));
        }
        let mut g = Graph::with_store(store);
        let zv = self.latent_var(&mut g, z)?;
        let enc = self.encode_phonemes_graph(&mut g, tokens);
        let memories = [self.memory(&mut g, enc, zv)];
        let mut state = self.initial_decoder_state(&mut g, &memories);
        let mut feedback = Tensor::zeros(1, self.n_mels);
        let mut frames: Vec<Vec<f64>> = Vec::new();
        let mut attention: Vec<Vec<f64>> = Vec::new();
        let mut stop_step = None;
        for t in 0..max_steps {
            let fb = g.constant(feedback.clone());
            let (vars, next) = self.decoder_step::<rand::rngs::ThreadRng>(&mut g, fb, &memories, state, None);
            state = next;
            let raw = g.value(vars.frames).data();
            for k in 0..ops {
                frames.push(raw[k * self.n_mels..(k + 1) * self.n_mels].to_vec());
            }
            feedback = Tensor::row(&raw[(ops - 1) * self.n_mels..ops * self.n_mels]);
            attention.push(g.value(state.attention[0].weights).data().to_vec());
            if sigmoid(g.value(vars.stop).item()) > 0.5 {
                stop_step = Some(t);
                break;
            }
        }
        Ok(Inferred { mel: Tensor::from_rows(&frames), attention: Tensor::from_rows(&attention), stop_step, hit_max_steps: stop_step.is_none() })
    }
}
