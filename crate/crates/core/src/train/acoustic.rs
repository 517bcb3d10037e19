use etts_autograd::optim::{Adam, AdamConfig};
use etts_autograd::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::data::{mel_stats, Dataset};
use super::{adam_config, batch_indices, step_rng};
use crate::acoustic::{AcousticModel, Utterance};
use crate::adversarial::{d_hinge_loss_graph, g_adv_graph, window_start, Discriminator};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::schedule::{beta_kld, optimizer_phase_params, PhasePlan, PolyakState};

/// One JSON-lines record per acoustic training step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AcousticStepLog {
    pub step: u64,
    pub phase: String,
    pub ops: usize,
    pub beta: f64,
    pub alpha: f64,
    pub total: f64,
    pub g_l1: f64,
    pub g_kld: f64,
    pub stop: f64,
    pub guide: f64,
    pub g_adv: Option<f64>,
    pub d_loss: Option<f64>,
    pub grad_norm: f64,
}

/// Acoustic model and discriminator sharing one parameter store, with their
/// optimizers and the Polyak shadow.
pub struct AcousticTrainer {
    pub cfg: RunConfig,
    pub plan: PhasePlan,
    pub store: ParamStore,
    pub model: AcousticModel,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub polyak: PolyakState,
    /// Number of completed steps.
    pub step: u64,
}

/// Builds the parameter store of the acoustic model and discriminator.
pub fn build_acoustic(cfg: &RunConfig, vocab: usize) -> (ParamStore, AcousticModel, Discriminator) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = AcousticModel::new(&mut store, &mut rng, &cfg.acoustic, cfg.mel.n_mels, vocab);
    let disc = Discriminator::new(&mut store, &mut rng, &cfg.discriminator, cfg.mel.n_mels);
    (store, model, disc)
}

impl AcousticTrainer {
    pub fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let (mut store, model, disc) = build_acoustic(cfg, data.vocab.len());
        let mels = data.mels();
        model.fit_normalization(&mut store, &mels);
        let (mean, std) = mel_stats(&mels);
        disc.set_normalization(&mut store, &mean, &std);
        let opt_g = Adam::new(&store, AdamConfig::default());
        let opt_d = Adam::new(&store, AdamConfig::default());
        let polyak = PolyakState::new(&store, cfg.training.polyak_decay);
        Ok(Self { cfg: cfg.clone(), plan: cfg.phase_plan()?, store, model, disc, opt_g, opt_d, polyak, step: 0 })
    }

    /// Rebuilds a trainer from a checkpoint written by [`AcousticTrainer::checkpoint`].
    /// The phase plan comes from `cfg`, so a run may resume under a different plan.
    pub fn resume(cfg: &RunConfig, data: &Dataset, ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "acoustic" {
            return Err(Error::Checkpoint(format!("expected an acoustic checkpoint, found {}", ck.kind)));
        }
        let mut t = Self::new(cfg, data)?;
        ck.restore_store(&mut t.store, "", "")?;
        ck.restore_adam(&mut t.opt_g, &t.store, "acoustic/", "optim/g/")?;
        ck.restore_adam(&mut t.opt_d, &t.store, "disc/", "optim/d/")?;
        t.polyak.shadow = t.store.clone();
        ck.restore_store(&mut t.polyak.shadow, "acoustic/", "polyak/")?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let active = self.plan.ops_at_step(self.step.saturating_sub(1));
        let mut ck = Checkpoint::new("acoustic", self.step, Some(active.ops), active.name, &self.cfg);
        ck.add_store(&self.store, "", "");
        ck.add_adam(&self.opt_g, &self.store, "acoustic/", "optim/g/");
        ck.add_adam(&self.opt_d, &self.store, "disc/", "optim/d/");
        ck.add_store(&self.polyak.shadow, "acoustic/", "polyak/");
        ck
    }

    fn posterior_latents(&self, g: &mut Graph<'_>, batch: &[Utterance<'_>], rng: &mut ChaCha8Rng) -> (Vec<(Var, Var)>, Vec<Var>) {
        let dim = self.cfg.acoustic.latent_dim;
        let mut posts = Vec::with_capacity(batch.len());
        let mut zs = Vec::with_capacity(batch.len());
        for u in batch {
            let mel = g.constant(u.mel.clone());
            let (mu, lv) = self.model.vae_encode_graph(g, mel);
            let noise: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            zs.push(self.model.sample_latent(g, mu, lv, &noise));
            posts.push((mu, lv));
        }
        (posts, zs)
    }

    /// Runs one optimization step and returns its log record.
    pub fn train_step(&mut self, data: &Dataset) -> Result<AcousticStepLog> {
        let step = self.step;
        let active = self.plan.ops_at_step(step);
        let (ops, gan, phase) = (active.ops, active.gan, active.name.to_string());
        let opt_phase = if gan { "gan" } else { phase.as_str() };
        let popt = optimizer_phase_params(opt_phase, &self.cfg.optimizer, 0)?;
        self.opt_g.config = adam_config(popt, &self.cfg.optimizer);
        self.opt_d.config = self.opt_g.config;
        let beta = beta_kld(&self.cfg.anneal, step);
        let alpha = if gan { self.cfg.discriminator.alpha } else { 0.0 };

        let mut rng = step_rng(self.cfg.seed, step);
        let idx = batch_indices(&mut rng, data.len(), self.cfg.training.acoustic_batch);
        let batch: Vec<Utterance<'_>> = idx.iter().map(|&i| Utterance { tokens: &data.utts[i].tokens, mel: &data.utts[i].mel }).collect();

        let mut g = Graph::with_store(&self.store);
        g.freeze_prefix("disc/");
        let (posts, zs) = self.posterior_latents(&mut g, &batch, &mut rng);
        let out = self.model.teacher_forced(&mut g, &batch, &zs, ops, Some(&mut rng))?;
        let loss = self.model.loss_graph(&mut g, &out, &batch, &posts, beta);
        let mut total = loss.total;
        let mut g_adv = None;
        let mut crops: Vec<(Tensor, Tensor)> = Vec::new();
        if gan {
            let mut fake_scores = Vec::with_capacity(batch.len());
            let mut real_scores = Vec::with_capacity(batch.len());
            for (b, u) in batch.iter().enumerate() {
                let m = u.mel.rows();
                let pred = self.model.predicted_mel(&mut g, &out, b);
                let (start, width) = window_start(m, self.cfg.discriminator.window, &mut rng);
                let fake = g.slice_rows(pred, start, width);
                let real = u.mel.slice_rows(start, width);
                fake_scores.push(self.disc.score(&mut g, fake));
                real_scores.push(self.disc.score_value(&self.store, &real));
                crops.push((g.value(fake).clone(), real));
            }
            let sf = g.concat_rows(&fake_scores);
            let adv = g_adv_graph(&mut g, sf, &real_scores);
            g_adv = Some(g.value(adv).item());
            let weighted = g.scale(adv, alpha);
            total = g.add(total, weighted);
        }
        let record = |v: Var| g.value(v).item();
        let (total_v, l1, kld, stop, guide) = (record(total), record(loss.l1), record(loss.kld), record(loss.stop), record(loss.guide));
        if !total_v.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite acoustic loss at step {step}")));
        }
        let mut grads = g.backward(total).into_gradients(self.store.len());
        drop(g);
        let grad_norm = grads.clip_global_norm(self.cfg.optimizer.grad_clip);
        self.opt_g.update(&mut self.store, &grads);

        let mut d_loss = None;
        if gan {
            let mut g = Graph::with_store(&self.store);
            g.freeze_prefix("acoustic/");
            let mut fs = Vec::with_capacity(crops.len());
            let mut rs = Vec::with_capacity(crops.len());
            for (fake, real) in &crops {
                let f = g.constant(fake.clone());
                let r = g.constant(real.clone());
                fs.push(self.disc.score(&mut g, f));
                rs.push(self.disc.score(&mut g, r));
            }
            let fcat = g.concat_rows(&fs);
            let rcat = g.concat_rows(&rs);
            let dl = d_hinge_loss_graph(&mut g, fcat, rcat);
            d_loss = Some(g.value(dl).item());
            let dgrads = g.backward(dl).into_gradients(self.store.len());
            drop(g);
            self.opt_d.update(&mut self.store, &dgrads);
            self.disc.update_power_iteration(&mut self.store, self.cfg.discriminator.sn_iters);
        }
        self.polyak.update(&self.store)?;
        self.step += 1;
        Ok(AcousticStepLog { step, phase, ops, beta, alpha, total: total_v, g_l1: l1, g_kld: kld, stop, guide, g_adv, d_loss, grad_norm })
    }
}
