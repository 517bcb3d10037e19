use std::path::PathBuf;

use etts_autograd::optim::{Adam, AdamConfig};
use etts_autograd::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::data::{mel_stats, Dataset, UtteranceData};
use super::{adam_config, batch_indices, step_rng};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::schedule::{optimizer_phase_params, snapshot_rotation, PolyakState};
use crate::vocoder::{logistic_noise, version_stamp, Student, Teacher};

const TEACHER_SEED_OFFSET: u64 = 0x7465_6163;
const STUDENT_SEED_OFFSET: u64 = 0x7374_7564;

/// Builds the teacher under the `teacher/` prefix of `store`.
pub fn build_teacher(store: &mut ParamStore, cfg: &RunConfig) -> Teacher {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TEACHER_SEED_OFFSET);
    Teacher::new(store, &mut rng, "teacher", &cfg.vocoder, cfg.mel.n_mels, cfg.acoustic.latent_dim, cfg.mel.hop)
}

/// Builds the student under the `student/` prefix of `store`.
pub fn build_student(store: &mut ParamStore, cfg: &RunConfig) -> Student {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ STUDENT_SEED_OFFSET);
    Student::new(store, &mut rng, "student", &cfg.vocoder, cfg.mel.hop)
}

fn check_latents(data: &Dataset, latents: &[Vec<f64>], dim: usize) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if latents.len() != data.len() {
        return Err(Error::Shape(format!("{} latents for {} utterances", latents.len(), data.len())));
    }
    if let Some(z) = latents.iter().find(|z| z.len() != dim) {
        return Err(Error::Shape(format!("latent of width {}, expected {dim}", z.len())));
    }
    Ok(())
}

/// Random crop of `frames` frames: conditioning rows and the matching samples.
fn crop<'a, R: Rng>(
    g: &mut Graph<'_>,
    teacher: &Teacher,
    u: &'a UtteranceData,
    z: &[f64],
    frames: usize,
    rng: &mut R,
) -> (Var, &'a [f64]) {
    let m = u.mel.rows();
    let c = frames.min(m);
    let s = rng.random_range(0..=m - c);
    let mel = g.constant(u.mel.clone());
    let all = teacher.cond.frames(g, mel, z);
    let cond = g.slice_rows(all, s, c);
    let hop = teacher.hop;
    (cond, &u.wave[s * hop..(s + c) * hop])
}

/// Steps at which teacher snapshots are taken, evenly spaced and ending at the last step.
pub fn snapshot_steps(total: u64, n: usize) -> Vec<u64> {
    (1..=n as u64).map(|i| (total * i / n as u64).max(1)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TeacherStepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub nll: f64,
    pub grad_norm: f64,
}

/// Autoregressive mixture-of-logistics teacher trained by maximum likelihood on random crops.
pub struct TeacherTrainer {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub teacher: Teacher,
    pub opt: Adam,
    pub polyak: PolyakState,
    pub latents: Vec<Vec<f64>>,
    pub step: u64,
}

impl TeacherTrainer {
    /// `latents[i]` conditions utterance `i` of `data`.
    pub fn new(cfg: &RunConfig, data: &Dataset, latents: Vec<Vec<f64>>) -> Result<Self> {
        cfg.validate()?;
        check_latents(data, &latents, cfg.acoustic.latent_dim)?;
        let mut store = ParamStore::new();
        let teacher = build_teacher(&mut store, cfg);
        let (mean, std) = mel_stats(&data.mels());
        teacher.cond.set_normalization(&mut store, &mean, &std)?;
        let opt = Adam::new(&store, AdamConfig::default());
        let polyak = PolyakState::new(&store, cfg.training.polyak_decay);
        Ok(Self { cfg: cfg.clone(), store, teacher, opt, polyak, latents, step: 0 })
    }

    pub fn resume(cfg: &RunConfig, data: &Dataset, latents: Vec<Vec<f64>>, ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "teacher" {
            return Err(Error::Checkpoint(format!("expected a teacher checkpoint, found {}", ck.kind)));
        }
        let mut t = Self::new(cfg, data, latents)?;
        ck.restore_store(&mut t.store, "", "")?;
        ck.restore_adam(&mut t.opt, &t.store, "", "optim/")?;
        t.polyak.shadow = t.store.clone();
        ck.restore_store(&mut t.polyak.shadow, "", "polyak/")?;
        t.step = ck.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("teacher", self.step, None, "teacher", &self.cfg);
        ck.add_store(&self.store, "", "");
        ck.add_adam(&self.opt, &self.store, "", "optim/");
        ck.add_store(&self.polyak.shadow, "", "polyak/");
        ck
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.cfg.training.teacher_epoch_steps.max(1)
    }

    pub fn train_step(&mut self, data: &Dataset) -> Result<TeacherStepLog> {
        let step = self.step;
        let epoch = self.epoch();
        let popt = optimizer_phase_params("teacher", &self.cfg.optimizer, epoch)?;
        self.opt.config = adam_config(popt, &self.cfg.optimizer);
        let mut rng = step_rng(self.cfg.seed ^ TEACHER_SEED_OFFSET, step);
        let idx = batch_indices(&mut rng, data.len(), self.cfg.training.teacher_batch);

        let mut g = Graph::with_store(&self.store);
        let mut losses = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (cond, wave) = crop(&mut g, &self.teacher, &data.utts[i], &self.latents[i], self.cfg.training.teacher_crop_frames, &mut rng);
            losses.push(self.teacher.nll_graph(&mut g, wave, cond));
        }
        let stacked = g.concat_rows(&losses);
        let loss = g.mean(stacked);
        let nll = g.value(loss).item();
        if !nll.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite teacher loss at step {step}")));
        }
        let mut grads = g.backward(loss).into_gradients(self.store.len());
        drop(g);
        let grad_norm = grads.clip_global_norm(self.cfg.optimizer.grad_clip);
        self.opt.update(&mut self.store, &grads);
        self.polyak.update(&self.store)?;
        self.step += 1;
        Ok(TeacherStepLog { step, epoch, lr: popt.lr, nll, grad_norm })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudentStepLog {
    pub step: u64,
    pub snapshot: usize,
    pub total: f64,
    pub kl: f64,
    pub cross_entropy: f64,
    pub entropy: f64,
    pub spectral: f64,
    pub grad_norm: f64,
}

/// Student flow distilled from a rotation of frozen teacher snapshots.
pub struct StudentTrainer {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub teacher: Teacher,
    pub student: Student,
    pub opt: Adam,
    pub polyak: PolyakState,
    pub latents: Vec<Vec<f64>>,
    pub snapshots: Vec<PathBuf>,
    pub active_snapshot: Option<usize>,
    teacher_stamp: u64,
    pub step: u64,
}

impl StudentTrainer {
    /// `snapshots` are teacher checkpoint directories, earliest first.
    pub fn new(cfg: &RunConfig, data: &Dataset, latents: Vec<Vec<f64>>, snapshots: Vec<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        check_latents(data, &latents, cfg.acoustic.latent_dim)?;
        if snapshots.is_empty() {
            return Err(Error::InvalidArgument("no teacher snapshots".into()));
        }
        let mut store = ParamStore::new();
        let teacher = build_teacher(&mut store, cfg);
        let student = build_student(&mut store, cfg);
        store.freeze_prefix("teacher/", true);
        let opt = Adam::new(&store, AdamConfig::default());
        let polyak = PolyakState::new(&store, cfg.training.polyak_decay);
        let teacher_stamp = version_stamp(&store, "teacher/");
        Ok(Self { cfg: cfg.clone(), store, teacher, student, opt, polyak, latents, snapshots, active_snapshot: None, teacher_stamp, step: 0 })
    }

    pub fn resume(cfg: &RunConfig, data: &Dataset, latents: Vec<Vec<f64>>, snapshots: Vec<PathBuf>, ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "student" {
            return Err(Error::Checkpoint(format!("expected a student checkpoint, found {}", ck.kind)));
        }
        let mut t = Self::new(cfg, data, latents, snapshots)?;
        ck.restore_store(&mut t.store, "student/", "")?;
        ck.restore_adam(&mut t.opt, &t.store, "student/", "optim/")?;
        ck.restore_store(&mut t.polyak.shadow, "student/", "polyak/")?;
        t.step = ck.step;
        Ok(t)
    }

    /// Saves the teacher snapshot in use (its frozen conditioning is shared at synthesis)
    /// together with the live and averaged student.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("student", self.step, None, "student", &self.cfg);
        ck.add_store(&self.store, "", "");
        ck.add_adam(&self.opt, &self.store, "student/", "optim/");
        ck.add_store(&self.polyak.shadow, "student/", "polyak/");
        if let Some(i) = self.active_snapshot {
            ck.extra.insert("teacher_snapshot".into(), i.into());
            ck.extra.insert("teacher_snapshot_dir".into(), self.snapshots[i].display().to_string().into());
        }
        ck
    }

    /// Loads snapshot `idx` into the frozen teacher slots (averaged weights when present).
    pub fn load_snapshot(&mut self, idx: usize) -> Result<()> {
        if self.active_snapshot == Some(idx) {
            return Ok(());
        }
        let path = self.snapshots.get(idx).ok_or_else(|| Error::InvalidArgument(format!("no snapshot {idx}")))?;
        let ck = Checkpoint::load_kind(path, "teacher")?;
        let prefix = if ck.tensors.iter().any(|(n, _)| n.starts_with("polyak/teacher/")) { "polyak/" } else { "" };
        ck.restore_store(&mut self.store, "teacher/", prefix)?;
        self.store.freeze_prefix("teacher/", true);
        self.teacher_stamp = version_stamp(&self.store, "teacher/");
        self.active_snapshot = Some(idx);
        Ok(())
    }

    pub fn train_step(&mut self, data: &Dataset) -> Result<StudentStepLog> {
        let step = self.step;
        let snapshot = snapshot_rotation(self.snapshots.len(), step, self.cfg.training.student_steps)?;
        self.load_snapshot(snapshot)?;
        let popt = optimizer_phase_params("student", &self.cfg.optimizer, 0)?;
        self.opt.config = adam_config(popt, &self.cfg.optimizer);
        let mut rng = step_rng(self.cfg.seed ^ STUDENT_SEED_OFFSET, step);
        let idx = batch_indices(&mut rng, data.len(), self.cfg.training.student_batch);
        let n_mc = self.cfg.training.n_mc;

        let mut g = Graph::with_store(&self.store);
        g.freeze_prefix("teacher/");
        let mut parts = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (cond, target) = crop(&mut g, &self.teacher, &data.utts[i], &self.latents[i], self.cfg.training.student_crop_frames, &mut rng);
            let t = target.len();
            let noise = logistic_noise(&mut rng, t);
            let eps = Tensor::from_vec(t, n_mc, logistic_noise(&mut rng, t * n_mc));
            parts.push(self.student.distill_graph(&mut g, &self.teacher, cond, &noise, &eps, target, &self.cfg.stft, self.cfg.training.spectral_weight));
        }
        let scale = 1.0 / parts.len() as f64;
        let mean_of = |g: &mut Graph<'_>, f: fn(&crate::vocoder::DistillVars) -> Var| {
            let vs: Vec<Var> = parts.iter().map(f).collect();
            let cat = g.concat_rows(&vs);
            let s = g.sum(cat);
            g.scale(s, scale)
        };
        let total = mean_of(&mut g, |d| d.total);
        let kl = mean_of(&mut g, |d| d.kl);
        let ce = mean_of(&mut g, |d| d.cross_entropy);
        let ent = mean_of(&mut g, |d| d.entropy);
        let spec = mean_of(&mut g, |d| d.spectral);
        let value = |v: Var| g.value(v).item();
        let log = StudentStepLog {
            step,
            snapshot,
            total: value(total),
            kl: value(kl),
            cross_entropy: value(ce),
            entropy: value(ent),
            spectral: value(spec),
            grad_norm: 0.0,
        };
        if !log.total.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite distillation loss at step {step}")));
        }
        let mut grads = g.backward(total).into_gradients(self.store.len());
        drop(g);
        let grad_norm = grads.clip_global_norm(self.cfg.optimizer.grad_clip);
        self.opt.update(&mut self.store, &grads);
        let stamp = version_stamp(&self.store, "teacher/");
        if stamp != self.teacher_stamp {
            return Err(Error::FrozenIntegrity(format!(
                "teacher snapshot {snapshot} changed during student step {step} ({:016x} -> {stamp:016x})",
                self.teacher_stamp
            )));
        }
        self.polyak.update(&self.store)?;
        self.step += 1;
        Ok(StudentStepLog { grad_norm, ..log })
    }
}
