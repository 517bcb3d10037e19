//! Invariant suite behind the `selfcheck` command. Each check returns a
//! measured value next to its threshold so callers can print one line per check.

use std::path::Path;
use std::time::Instant;

use etts_autograd::optim::{Adam, AdamConfig};
use etts_autograd::{sigmoid, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::acoustic::{kld_closed_form, slice_ops, AcousticConfig, AcousticModel, GaussianPosterior, Utterance};
use crate::adversarial::{d_hinge_loss, d_hinge_loss_graph, power_iteration, spectral_normalize, Discriminator, DiscriminatorConfig};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::Result;
use crate::schedule::{beta_kld, polyak_update, snapshot_rotation, AnnealSpec, PhasePlan, PhaseSpec};
use crate::train::{prepare_data, AcousticTrainer, Dataset};
use crate::verify::gradient_check;
use crate::vocoder::{
    compose_flows, iaf_apply, kl_term_graph, logistic_cdf, logistic_log_pdf, logistic_noise, mol_log_prob, version_stamp, MolParams,
    Quantizer, StftConfig, Student, Teacher, VocoderConfig,
};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.to_string(), passed, detail }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }

    fn from_result(name: &str, r: Result<CheckResult>) -> Self {
        r.unwrap_or_else(|e| Self::new(name, false, format!("error: {e}")))
    }
}

fn timed(name: &str, limit_s: f64, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t0 = Instant::now();
    let r = f();
    let secs = t0.elapsed().as_secs_f64();
    CheckResult::from_result(
        name,
        r.map(|(ok, detail)| {
            let fast = secs < limit_s;
            CheckResult::new(name, ok && fast, format!("{detail}; {secs:.1}s (limit {limit_s}s)"))
        }),
    )
}

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Closed-form KLD against a Monte-Carlo estimate on random posteriors.
pub fn check_kld_oracle(n_posteriors: usize, n_samples: usize) -> CheckResult {
    timed("kld_oracle", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let mut worst = 0.0f64;
        for _ in 0..n_posteriors {
            let dim = rng.random_range(2..=12);
            let mu: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
            let lv: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.0)).collect();
            let q = GaussianPosterior::new(mu.clone(), lv.clone())?;
            let exact = kld_closed_form(&q);
            let sd: Vec<f64> = lv.iter().map(|v| (0.5 * v).exp()).collect();
            let mut acc = 0.0;
            for _ in 0..n_samples {
                // log q(z) − log p(z) with z = μ + σ·ε; the 2π terms cancel.
                let mut s = 0.0;
                for d in 0..dim {
                    let e: f64 = rng.sample(StandardNormal);
                    let z = mu[d] + sd[d] * e;
                    s += -0.5 * e * e - 0.5 * lv[d] + 0.5 * z * z;
                }
                acc += s;
            }
            let mc = acc / n_samples as f64;
            worst = worst.max(((mc - exact) / exact).abs());
        }
        Ok((worst < 0.01, format!("max relative error {worst:.2e} over {n_posteriors} posteriors x {n_samples} samples (tol 1e-2)")))
    })
}

pub fn check_hinge_table() -> CheckResult {
    let cases = [(-2.0, 2.0, 0.0), (0.0, 0.0, 2.0), (-0.5, 0.5, 1.0)];
    let worst = cases.iter().map(|&(f, r, want)| (d_hinge_loss(&[f], &[r]) - want).abs()).fold(0.0, f64::max);
    CheckResult::new("hinge_table", worst <= 1e-9, format!("max abs error {worst:.1e} on cases 0/2/1 (tol 1e-9)"))
}

fn svd_sigma_max(w: &Tensor) -> f64 {
    nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.data()).singular_values().max()
}

/// σ_max of every normalized discriminator weight after 10 power iterations.
pub fn check_spectral_norm() -> CheckResult {
    timed("spectral_norm", 10.0, || {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = Discriminator::new(&mut store, &mut rng, &DiscriminatorConfig::default(), 80);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for s in d.sn_weights() {
            let mut u = store.value(s.u).data().to_vec();
            let n = spectral_normalize(store.value(s.weight), 10, &mut u)?;
            let sv = svd_sigma_max(&n);
            lo = lo.min(sv);
            hi = hi.max(sv);
        }
        // Cold start on a matrix with a planted dominant direction.
        let mut wr = ChaCha8Rng::seed_from_u64(5);
        let noise = Tensor::from_vec(32, 32, (0..1024).map(|_| wr.random_range(-1.0..1.0)).collect());
        let a = randn(&mut wr, 32, 1, 1.0);
        let b = randn(&mut wr, 1, 32, 1.0);
        let w = noise.zip_map(&a.matmul(&b), |x, y| x + y);
        let mut u = vec![1.0; 32];
        let (_, est) = power_iteration(&w, &mut u, 10);
        let planted = est / svd_sigma_max(&w);
        lo = lo.min(planted);
        hi = hi.max(planted);
        let n = d.sn_weights().len();
        Ok(((0.99..=1.01).contains(&lo) && (0.99..=1.01).contains(&hi), format!("sigma_max in [{lo:.5}, {hi:.5}] over {n} weights + planted (want [0.99, 1.01])")))
    })
}

fn small_acoustic() -> AcousticConfig {
    AcousticConfig {
        embedding_dim: 16,
        encoder_conv_layers: 2,
        encoder_kernel: 5,
        encoder_lstm: 8,
        prenet_dim: 16,
        attention_dim: 8,
        location_filters: 4,
        location_kernel: 7,
        decoder_lstm: 16,
        vae_channels: vec![8, 8, 8, 8],
        vae_lstm: 8,
        latent_dim: 6,
        ..AcousticConfig::default()
    }
}

/// Teacher-forced ops-k outputs against the leading rows of the ops-5 step outputs.
pub fn check_ops_slicing() -> CheckResult {
    CheckResult::from_result(
        "ops_slicing",
        (|| {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let model = AcousticModel::new(&mut store, &mut rng, &small_acoustic(), 10, 12);
            let mel = Tensor::from_vec(20, 10, (0..200).map(|_| rng.random_range(-3.0..1.0)).collect());
            let z = vec![-0.2; 6];
            let tokens = [2, 4, 6, 8];
            let mut worst = 0.0f64;
            for k in [2usize, 3, 4] {
                let tk = model.teacher_forced_forward(&store, &tokens, &mel, &z, k)?;
                for (t, step) in tk.raw_steps.iter().enumerate() {
                    let five = slice_ops(step, 5)?;
                    let got = tk.predicted.slice_rows(t * k, k);
                    let diff = got.data().iter().zip(five.slice_rows(0, k).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    worst = worst.max(diff);
                }
            }
            Ok(CheckResult::new("ops_slicing", worst <= 1e-6, format!("max abs diff {worst:.1e} for k in 2,3,4 (tol 1e-6)")))
        })(),
    )
}

/// A small run configuration for end-to-end invariants, rooted at `dir`.
pub fn tiny_run_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.data_dir = dir.join("data");
    cfg.paths.run_dir = dir.join("run");
    cfg.corpus.n_utts = 4;
    cfg.mel.n_mels = 16;
    cfg.acoustic = AcousticConfig {
        embedding_dim: 8,
        encoder_conv_layers: 1,
        encoder_lstm: 8,
        prenet_dim: 8,
        attention_dim: 8,
        location_filters: 4,
        location_kernel: 7,
        decoder_lstm: 16,
        vae_channels: vec![4, 4],
        vae_lstm: 4,
        latent_dim: 4,
        ..AcousticConfig::default()
    };
    cfg.discriminator = DiscriminatorConfig { channels: 4, conv_layers: 2, attention_reduction: 2, window: 8, ..DiscriminatorConfig::default() };
    cfg.vocoder = VocoderConfig {
        cond_lstm: 4,
        cond_layers: 1,
        cond_dim: 4,
        teacher_residual: 4,
        teacher_gate: 4,
        teacher_skip: 4,
        teacher_blocks: 1,
        teacher_layers: 3,
        mixtures: 2,
        student_channels: 3,
        student_flow_layers: vec![2, 2],
        ..VocoderConfig::default()
    };
    let p = |name: &str, steps, ops, gan| PhaseSpec { name: name.into(), steps, ops, gan };
    cfg.phases = vec![p("ops5", 2, 5, false), p("ops4", 1, 4, false), p("ops3", 1, 3, false), p("ops2", 2, 2, false), p("gan", 2, 2, true)];
    cfg.anneal = AnnealSpec { ramp_start: 1, ramp_end: 4, period: 2 };
    cfg.training.acoustic_batch = 2;
    cfg.training.teacher_batch = 2;
    cfg.training.teacher_steps = 4;
    cfg.training.teacher_epoch_steps = 2;
    cfg.training.student_batch = 1;
    cfg.training.student_steps = 3;
    cfg.training.checkpoint_every = 0;
    cfg
}

/// Saves a checkpoint in the ops-5 phase and resumes it under a plan whose
/// next step falls in the ops-2 phase, then steps through ops 2 and the GAN phase.
pub fn check_ops_resume(dir: &Path) -> CheckResult {
    CheckResult::from_result(
        "ops_resume",
        (|| {
            let mut cfg = tiny_run_config(dir);
            prepare_data(&cfg)?;
            let data = Dataset::load(&cfg)?;
            let mut t = AcousticTrainer::new(&cfg, &data)?;
            t.train_step(&data)?;
            t.train_step(&data)?;
            let ck_dir = dir.join("ops5_ck");
            t.checkpoint().save(&ck_dir)?;
            let ck = Checkpoint::load_kind(&ck_dir, "acoustic")?;
            let saved_ops = ck.ops;
            let p = |name: &str, steps, ops, gan| PhaseSpec { name: name.into(), steps, ops, gan };
            cfg.phases = vec![p("ops5", 2, 5, false), p("ops2", 2, 2, false), p("gan", 2, 2, true)];
            let mut r = AcousticTrainer::resume(&cfg, &data, &ck)?;
            let mut ops = Vec::new();
            while r.step < r.plan.total_steps() {
                let log = r.train_step(&data)?;
                ops.push((log.ops, log.phase));
            }
            let ok = saved_ops == Some(5) && ops.first().is_some_and(|o| o.0 == 2) && ops.iter().any(|o| o.1 == "gan");
            Ok(CheckResult::new("ops_resume", ok, format!("saved at ops {saved_ops:?}; resumed steps {ops:?}")))
        })(),
    )
}

fn tiny_vocoder() -> VocoderConfig {
    VocoderConfig {
        cond_lstm: 3,
        cond_layers: 2,
        cond_dim: 4,
        teacher_residual: 4,
        teacher_gate: 3,
        teacher_skip: 4,
        teacher_blocks: 1,
        teacher_layers: 3,
        teacher_kernel: 2,
        mixtures: 2,
        student_channels: 3,
        student_flow_layers: vec![2, 3],
        student_kernel: 2,
        levels: 256,
    }
}

const V_MELS: usize = 5;
const V_LATENT: usize = 3;
const V_HOP: usize = 4;

fn build_vocoder(seed: u64) -> (ParamStore, Teacher, Student) {
    let cfg = tiny_vocoder();
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Teacher::new(&mut store, &mut rng, "teacher", &cfg, V_MELS, V_LATENT, V_HOP);
    let student = Student::new(&mut store, &mut rng, "student", &cfg, V_HOP);
    (store, teacher, student)
}

fn test_wave(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| 0.5 * (i as f64 * 0.3).sin() + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Moves parameters off their zero or symmetric initial values so every path carries gradient.
fn perturb(store: &mut ParamStore, seed: u64, pick: impl Fn(&str) -> bool, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().filter(|&id| pick(store.name(id))).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn grad_line(name: &str, rep: &crate::verify::GradCheckReport) -> (bool, String) {
    (rep.passed() && rep.checked <= 500, format!("{name}: {} entries, max rel err {:.1e}", rep.checked, rep.max_rel_error))
}

/// Central finite differences on the four trained objectives.
pub fn check_gradients() -> CheckResult {
    timed("gradients", 300.0, || {
        let mut lines = Vec::new();

        let acfg = AcousticConfig {
            embedding_dim: 4,
            encoder_conv_layers: 1,
            encoder_kernel: 3,
            encoder_lstm: 3,
            prenet_dim: 4,
            attention_dim: 3,
            location_filters: 2,
            location_kernel: 3,
            decoder_lstm: 4,
            vae_channels: vec![3, 3],
            vae_kernel: 3,
            vae_lstm: 2,
            latent_dim: 2,
            ..AcousticConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = AcousticModel::new(&mut store, &mut rng, &acfg, 3, 12);
        let fit = Tensor::from_vec(6, 3, (0..18).map(|_| rng.random_range(-3.0..1.0)).collect());
        model.fit_normalization(&mut store, &[&fit]);
        let mel = Tensor::from_vec(4, 3, (0..12).map(|_| rng.random_range(-3.0..1.0)).collect());
        let tokens = [3usize, 7];
        let noise = [0.4, -0.9];
        let acoustic = |s: &ParamStore, grads: bool| -> Result<(f64, Option<etts_autograd::Gradients>)> {
            let mut g = Graph::with_store(s);
            let x = g.constant(mel.clone());
            let (mu, lv) = model.vae_encode_graph(&mut g, x);
            let z = model.sample_latent(&mut g, mu, lv, &noise);
            let batch = [Utterance { tokens: &tokens, mel: &mel }];
            let out = model.teacher_forced::<ChaCha8Rng>(&mut g, &batch, &[z], 2, None)?;
            let loss = model.loss_graph(&mut g, &out, &batch, &[(mu, lv)], 0.7);
            let v = g.value(loss.total).item();
            Ok((v, grads.then(|| g.backward(loss.total).into_gradients(s.len()))))
        };
        let grads = acoustic(&store, true)?.1.expect("requested");
        let rep = gradient_check(&store, &grads, 500, 1e-6, 1e-3, 1e-6, |s| acoustic(s, false).map_or(f64::NAN, |r| r.0));
        lines.push(grad_line("acoustic_loss", &rep));

        let dcfg = DiscriminatorConfig { channels: 4, conv_layers: 2, attention_reduction: 2, ..DiscriminatorConfig::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let disc = Discriminator::new(&mut store, &mut rng, &dcfg, 8);
        let gamma = store.id("disc/attention/gamma").expect("attention gamma");
        *store.value_mut(gamma) = Tensor::scalar(0.7);
        let fake = Tensor::from_vec(6, 8, (0..48).map(|_| rng.random_range(-1.0..1.0)).collect());
        let real = Tensor::from_vec(6, 8, (0..48).map(|_| 0.3 * rng.random_range(-1.0..1.0)).collect());
        let hinge = |s: &ParamStore, grads: bool| {
            let mut g = Graph::with_store(s);
            let f = g.constant(fake.clone());
            let r = g.constant(real.clone());
            let sf = disc.score(&mut g, f);
            let sr = disc.score(&mut g, r);
            let l = d_hinge_loss_graph(&mut g, sf, sr);
            let v = g.value(l).item();
            (v, grads.then(|| g.backward(l).into_gradients(s.len())))
        };
        let grads = hinge(&store, true).1.expect("requested");
        let rep = gradient_check(&store, &grads, 500, 1e-6, 1e-3, 1e-6, |s| hinge(s, false).0);
        lines.push(grad_line("d_hinge+disc", &rep));

        let (mut store, teacher, student) = build_vocoder(14);
        perturb(&mut store, 24, |n| n.ends_with("/bias"), 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mel = randn(&mut rng, 3, V_MELS, 1.0);
        let z = [0.3, -0.2, 0.5];
        let w = test_wave(3 * V_HOP, 16);
        let nll = |s: &ParamStore, grads: bool| {
            let mut g = Graph::with_store(s);
            let m = g.constant(mel.clone());
            let c = teacher.cond.frames(&mut g, m, &z);
            let l = teacher.nll_graph(&mut g, &w, c);
            let v = g.value(l).item();
            (v, grads.then(|| g.backward(l).into_gradients(s.len())))
        };
        let grads = nll(&store, true).1.expect("requested");
        let rep = gradient_check(&store, &grads, 400, 1e-6, 1e-3, 1e-5, |s| nll(s, false).0);
        lines.push(grad_line("teacher_nll", &rep));

        perturb(&mut store, 18, |n| n.contains("/head/"), 0.3);
        perturb(&mut store, 25, |n| n.starts_with("student/") && n.ends_with("/bias"), 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let noise = logistic_noise(&mut rng, 5 * V_HOP);
        let eps = Tensor::from_vec(5 * V_HOP, 3, logistic_noise(&mut rng, 15 * V_HOP));
        let mel = randn(&mut rng, 5, V_MELS, 1.0);
        let target = test_wave(5 * V_HOP, 20);
        let stft = StftConfig { fft_size: 8, hop: 4 };
        let kl = |s: &ParamStore, grads: bool| {
            let mut g = Graph::with_store(s);
            g.freeze_prefix("teacher/");
            let m = g.constant(mel.clone());
            let c = teacher.cond.frames(&mut g, m, &z);
            let d = student.distill_graph(&mut g, &teacher, c, &noise, &eps, &target, &stft, 1.0);
            let v = g.value(d.kl).item();
            (v, grads.then(|| g.backward(d.kl).into_gradients(s.len())))
        };
        let grads = kl(&store, true).1.expect("requested");
        let student_only = grads.iter().all(|(id, _)| store.name(id).starts_with("student/"));
        let rep = gradient_check(&store, &grads, 300, 1e-6, 1e-3, 1e-5, |s| kl(s, false).0);
        let (ok, line) = grad_line("distill_kl", &rep);
        lines.push((ok && student_only, line));
        let before = version_stamp(&store, "teacher/");
        let mut opt = Adam::new(&store, AdamConfig::default());
        opt.update(&mut store, &grads);
        lines.push((before == version_stamp(&store, "teacher/"), "teacher frozen".into()));

        let ok = lines.iter().all(|l| l.0);
        Ok((ok, lines.into_iter().map(|l| l.1).collect::<Vec<_>>().join("; ")))
    })
}

/// Single-flow log-determinants, the density of a 4-flow composition, and a
/// KS test of its samples.
pub fn check_flows(n_samples: usize) -> CheckResult {
    CheckResult::from_result(
        "flows",
        (|| {
            let (_, ld0) = iaf_apply(&[0.3, -1.0, 2.0], &[0.0; 3], &[1.0; 3])?;
            let (_, ld8) = iaf_apply(&[0.1; 8], &[0.5; 8], &[2.0; 8])?;
            let ld_err = ld0.abs().max((ld8 - 8.0 * 2f64.ln()).abs());

            let flows: Vec<(Vec<f64>, Vec<f64>)> = vec![(vec![0.3], vec![0.8]), (vec![-0.5], vec![1.7]), (vec![0.2], vec![0.6]), (vec![1.1], vec![1.3])];
            // Density by inverting the chain and accumulating log-determinants.
            let log_density = |x: f64| {
                let mut s = x;
                let mut ld = 0.0;
                for (m, sd) in flows.iter().rev() {
                    s = (s - m[0]) / sd[0];
                    ld += sd[0].ln();
                }
                logistic_log_pdf(s, 0.0, 0.0) - ld
            };
            let (lo, hi, n) = (-60.0, 60.0, 240_000);
            let h = (hi - lo) / n as f64;
            let mut mass = 0.0;
            for i in 0..=n {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                mass += w * log_density(lo + i as f64 * h).exp();
            }
            mass *= h;

            let (mu, sigma) = compose_flows(&flows)?;
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut xs = Vec::with_capacity(n_samples);
            for e in logistic_noise(&mut rng, n_samples) {
                let mut s = vec![e];
                for (m, sd) in &flows {
                    s = iaf_apply(&s, m, sd)?.0;
                }
                xs.push(s[0]);
            }
            xs.sort_by(f64::total_cmp);
            let nf = xs.len() as f64;
            let ks = xs
                .iter()
                .enumerate()
                .map(|(i, &x)| {
                    let f = logistic_cdf(x, mu[0], sigma[0]);
                    (f - i as f64 / nf).abs().max(((i + 1) as f64 / nf - f).abs())
                })
                .fold(0.0, f64::max);
            let ok = ld_err <= 1e-9 && (mass - 1.0).abs() <= 1e-3 && ks < 0.02;
            Ok(CheckResult::new("flows", ok, format!("log_det err {ld_err:.1e} (tol 1e-9); 4-flow mass {mass:.6} (tol 1e-3); KS {ks:.4} at {n_samples} samples (tol 0.02)")))
        })(),
    )
}

pub fn check_mol_mass() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_mass = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(1..=4);
        let p = MolParams {
            logits: (0..k).map(|_| rng.random_range(-3.0..3.0)).collect(),
            means: (0..k).map(|_| rng.random_range(-1.2..1.2)).collect(),
            log_scales: (0..k).map(|_| rng.random_range(-6.0..0.5)).collect(),
        };
        for levels in [8usize, 256] {
            let q = Quantizer::new(levels);
            let total: f64 = (0..levels).map(|i| mol_log_prob(q.value(i), &p, &q).exp()).sum();
            worst_mass = worst_mass.max((total - 1.0).abs());
        }
    }
    let mut worst_bin = 0.0f64;
    for levels in [3usize, 9, 255] {
        let q = Quantizer::new(levels);
        let got = mol_log_prob(0.0, &MolParams::single(0.0, 0.0), &q).exp();
        worst_bin = worst_bin.max((got - (2.0 * sigmoid(q.delta()) - 1.0)).abs());
    }
    let ok = worst_mass <= 1e-6 && worst_bin <= 1e-9;
    CheckResult::new("mol_mass", ok, format!("mass error {worst_mass:.1e} at 8/256 levels (tol 1e-6); symmetric bin error {worst_bin:.1e} (tol 1e-9)"))
}

/// Monte-Carlo KL of a single-logistic student against a single-logistic teacher.
pub fn kl_against_logistic(shift: f64, t: usize, n_mc: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::from_vec(t, n_mc, logistic_noise(&mut rng, t * n_mc));
    let mut g = Graph::new();
    let mu = g.constant(Tensor::full(t, 1, shift));
    let ls = g.constant(Tensor::zeros(t, 1));
    let p = g.constant(Tensor::from_rows(&vec![vec![0.0, 0.0, 0.0]; t]));
    let kl = kl_term_graph(&mut g, mu, ls, p, &eps);
    g.value(kl.kl).item()
}

/// KL(L(shift, 1) || L(0, 1)) by trapezoid quadrature.
pub fn logistic_shift_kl(shift: f64) -> f64 {
    let log_pdf = |x: f64, m: f64| {
        let u = x - m;
        -u - 2.0 * (-u).exp().ln_1p()
    };
    let (lo, hi, n) = (-60.0, 60.0, 240_000);
    let h = (hi - lo) / n as f64;
    (0..=n)
        .map(|i| {
            let x = lo + h * i as f64;
            let lp = log_pdf(x, shift);
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            w * lp.exp() * (lp - log_pdf(x, 0.0))
        })
        .sum::<f64>()
        * h
}

pub fn check_distill_fixed_point() -> CheckResult {
    timed("distill_fixed_point", 120.0, || {
        let same = kl_against_logistic(0.0, 1, 10_000, 11);
        let shifted = kl_against_logistic(1.0, 1, 10_000, 12);
        let exact = logistic_shift_kl(1.0);
        Ok((
            same.abs() < 0.05 && shifted > 0.3,
            format!("kl {same:.4} when matched (tol 0.05); {shifted:.4} when shifted by +1 (want > 0.3, exact KL of a unit-scale shift is {exact:.4})"),
        ))
    })
}

/// Perturbs one input sample at random positions and compares teacher outputs.
pub fn check_teacher_causality(probes: usize) -> CheckResult {
    CheckResult::from_result(
        "teacher_causality",
        (|| {
            let (mut store, teacher, _) = build_vocoder(1);
            perturb(&mut store, 2, |n| n.ends_with("/bias"), 0.2);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let frames = randn(&mut rng, 8, tiny_vocoder().cond_dim, 1.0);
            let w = test_wave(8 * V_HOP, 4);
            let base = teacher.forward_params(&store, &w, &frames)?;
            let mut changed_past = 0;
            let mut moved_next = 0;
            let mut at = Vec::new();
            for _ in 0..probes {
                let t0 = rng.random_range(0..w.len() - 1);
                at.push(t0);
                let mut w2 = w.clone();
                w2[t0] += rng.random_range(0.1..1.0);
                let p = teacher.forward_params(&store, &w2, &frames)?;
                changed_past += (0..=t0).filter(|&t| base.row_slice(t) != p.row_slice(t)).count();
                moved_next += usize::from(base.row_slice(t0 + 1) != p.row_slice(t0 + 1));
            }
            let ok = changed_past == 0 && moved_next == probes;
            Ok(CheckResult::new("teacher_causality", ok, format!("probes at {at:?}: {changed_past} outputs at or before t changed; {moved_next}/{probes} next outputs respond")))
        })(),
    )
}

pub fn check_schedule() -> CheckResult {
    CheckResult::from_result(
        "schedule",
        (|| {
            let cfg = RunConfig::default();
            let plan = PhasePlan::new(&cfg.phases, cfg.acoustic.max_ops)?;
            let mut order = Vec::new();
            for step in 0..plan.total_steps() {
                let a = plan.ops_at_step(step);
                let label = if a.gan { "GAN".to_string() } else { a.ops.to_string() };
                if order.last() != Some(&label) {
                    order.push(label);
                }
            }
            let order_ok = order == ["5", "4", "3", "2", "GAN"];

            let s = cfg.anneal;
            let mut beta_ok = beta_kld(&s, 0) == 0.0 && beta_kld(&s, s.ramp_start) == 0.0 && beta_kld(&s, s.ramp_end) == 1.0;
            let mid = (s.ramp_start + s.ramp_end) / 2;
            beta_ok &= beta_kld(&s, mid) == (mid - s.ramp_start) as f64 / (s.ramp_end - s.ramp_start) as f64;
            for k in 0..20 {
                let base = s.ramp_end + k * s.period;
                beta_ok &= beta_kld(&s, base) == 1.0;
                beta_ok &= (1..s.period).all(|o| beta_kld(&s, base + o) == 0.0);
            }

            // With a fixed live value the shadow converges as θ + d^n (θ0 − θ).
            let mut shadow = ParamStore::new();
            let id = shadow.add("w", Tensor::row(&[2.0, -1.0, 0.5]));
            let mut live = shadow.clone();
            *live.value_mut(id) = Tensor::row(&[-0.5, 3.0, 0.25]);
            let d = 0.9;
            let mut polyak_err = 0.0f64;
            for n in 1..=200 {
                polyak_update(&mut shadow, &live, d)?;
                for ((s, l), s0) in shadow.value(id).data().iter().zip(live.value(id).data()).zip([2.0, -1.0, 0.5]) {
                    polyak_err = polyak_err.max((s - (l + d.powi(n) * (s0 - l))).abs());
                }
            }

            let total = cfg.training.student_steps;
            let mut segments = Vec::new();
            for step in 0..total {
                let i = snapshot_rotation(cfg.training.snapshots, step, total)?;
                if segments.last() != Some(&i) {
                    segments.push(i);
                }
            }
            let snap_ok = segments == [0, 1, 2];
            let ok = order_ok && beta_ok && polyak_err <= 1e-12 && snap_ok;
            Ok(CheckResult::new(
                "schedule",
                ok,
                format!("phase order {}; beta exact {beta_ok}; polyak err {polyak_err:.1e} (tol 1e-12); snapshot segments {segments:?}", order.join("->")),
            ))
        })(),
    )
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(|e| crate::Error::io(dir, e))? {
        let e = e.map_err(|e| crate::Error::io(dir, e))?;
        let p = e.path();
        out.push((e.file_name().to_string_lossy().into_owned(), std::fs::read(&p).map_err(|e| crate::Error::io(&p, e))?));
    }
    out.sort();
    Ok(out)
}

/// Whether two checkpoint directories hold identical files.
pub fn same_checkpoint_bytes(a: &Path, b: &Path) -> Result<bool> {
    Ok(dir_bytes(a)? == dir_bytes(b)?)
}

/// Save → load → save of a trained acoustic checkpoint, and two seeded runs of `steps` steps.
pub fn check_checkpoint_determinism(dir: &Path, steps: u64) -> CheckResult {
    CheckResult::from_result(
        "checkpoint_determinism",
        (|| {
            let cfg = tiny_run_config(dir);
            if !crate::train::manifest_path(&cfg).exists() {
                prepare_data(&cfg)?;
            }
            let data = Dataset::load(&cfg)?;
            let run = |out: &Path| -> Result<()> {
                let mut t = AcousticTrainer::new(&cfg, &data)?;
                while t.step < steps {
                    t.train_step(&data)?;
                }
                t.checkpoint().save(out)
            };
            let (a, b, c) = (dir.join("det_a"), dir.join("det_b"), dir.join("det_c"));
            run(&a)?;
            run(&b)?;
            Checkpoint::load(&a)?.save(&c)?;
            let runs = same_checkpoint_bytes(&a, &b)?;
            let round = same_checkpoint_bytes(&a, &c)?;
            Ok(CheckResult::new("checkpoint_determinism", runs && round, format!("identical runs at step {steps}: {runs}; save-load-save identical: {round}")))
        })(),
    )
}

/// Runs every fast check, reporting each result as soon as it is known.
pub fn run_selfcheck(report: &mut dyn FnMut(&CheckResult)) -> Vec<CheckResult> {
    let scratch = tempfile::tempdir();
    let mut out = Vec::new();
    let mut push = |r: CheckResult| {
        report(&r);
        out.push(r);
    };
    push(check_kld_oracle(20, 1_000_000));
    push(check_hinge_table());
    push(check_spectral_norm());
    push(check_ops_slicing());
    push(check_gradients());
    push(check_flows(100_000));
    push(check_mol_mass());
    push(check_distill_fixed_point());
    push(check_teacher_causality(3));
    push(check_schedule());
    match &scratch {
        Ok(d) => {
            push(check_ops_resume(&d.path().join("resume")));
            push(check_checkpoint_determinism(&d.path().join("det"), 6));
        }
        Err(e) => push(CheckResult::new("scratch_dir", false, format!("error: {e}"))),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monte_carlo_kl_matches_quadrature() {
        for shift in [0.5, 1.0, 2.0] {
            let mc = kl_against_logistic(shift, 1, 1_000_000, 7);
            let exact = logistic_shift_kl(shift);
            assert!((mc - exact).abs() < 6e-3, "shift {shift}: {mc} vs {exact}");
        }
        assert!(logistic_shift_kl(0.0).abs() < 1e-12);
        assert!((logistic_shift_kl(1.0) - 0.16395).abs() < 1e-4);
    }
}
