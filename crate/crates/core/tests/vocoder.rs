use etts_autograd::{Graph, ParamStore, Tensor};
use etts_core::verify::gradient_check;
use etts_core::vocoder::{
    compose_flows, kl_term_graph, logistic_cdf, logistic_noise, mol_log_density, mol_log_density_graph, mol_log_prob,
    mol_log_prob_graph, spectral_loss_graph, stft_log_magnitude, version_stamp, MolParams, Quantizer, StftConfig, Student,
    Teacher, VocoderConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const N_MELS: usize = 5;
const LATENT: usize = 3;
const HOP: usize = 4;

fn tiny_cfg() -> VocoderConfig {
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

fn build(cfg: &VocoderConfig, seed: u64) -> (ParamStore, Teacher, Student) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let teacher = Teacher::new(&mut store, &mut rng, "teacher", cfg, N_MELS, LATENT, HOP);
    let student = Student::new(&mut store, &mut rng, "student", cfg, HOP);
    (store, teacher, student)
}

fn randn(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

fn wave(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| 0.5 * (i as f64 * 0.3).sin() + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn randomize_heads(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains("/head/")).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("/bias") && !store.is_frozen(id)).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn mixture() -> impl Strategy<Value = MolParams> {
    (1usize..4).prop_flat_map(|k| {
        (
            prop::collection::vec(-3.0..3.0f64, k),
            prop::collection::vec(-1.2..1.2f64, k),
            prop::collection::vec(-5.0..0.5f64, k),
        )
            .prop_map(|(logits, means, log_scales)| MolParams { logits, means, log_scales })
    })
}

proptest! {
    #[test]
    fn discretized_mass_sums_to_one(p in mixture(), levels in prop::sample::select(vec![8usize, 256])) {
        let q = Quantizer::new(levels);
        let total: f64 = (0..levels).map(|i| mol_log_prob(q.value(i), &p, &q).exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "total {}", total);
    }

    #[test]
    fn graph_mass_matches_scalar(p in mixture(), xs in prop::collection::vec(-1.0..1.0f64, 1..6)) {
        let q = Quantizer::new(256);
        let xs: Vec<f64> = xs.iter().map(|&x| q.snap(x)).collect();
        let mut row = p.logits.clone();
        row.extend(&p.means);
        row.extend(&p.log_scales);
        let params = Tensor::from_rows(&vec![row; xs.len()]);
        let mut g = Graph::new();
        let pv = g.constant(params);
        let lp = mol_log_prob_graph(&mut g, &xs, pv, &q);
        let xv = g.constant(Tensor::column(&xs));
        let ld = mol_log_density_graph(&mut g, xv, pv);
        for (i, &x) in xs.iter().enumerate() {
            prop_assert!((g.value(lp).get(i, 0) - mol_log_prob(x, &p, &q)).abs() < 1e-10);
            prop_assert!((g.value(ld).get(i, 0) - mol_log_density(x, &p)).abs() < 1e-10);
        }
    }

    #[test]
    fn composite_flow_matches_sequential(
        flows in prop::collection::vec((prop::collection::vec(-1.0..1.0f64, 4), prop::collection::vec(0.2..2.0f64, 4)), 1..5),
        x in prop::collection::vec(-3.0..3.0f64, 4),
    ) {
        let mut s = x.clone();
        let mut log_det = 0.0;
        for (m, sd) in &flows {
            let (out, ld) = etts_core::vocoder::iaf_apply(&s, m, sd).unwrap();
            s = out;
            log_det += ld;
        }
        let (mu, sigma) = compose_flows(&flows).unwrap();
        for i in 0..4 {
            prop_assert!((mu[i] + sigma[i] * x[i] - s[i]).abs() < 1e-10);
        }
        prop_assert!((sigma.iter().map(|v| v.ln()).sum::<f64>() - log_det).abs() < 1e-10);
    }
}

#[test]
fn continuous_density_integrates_to_one() {
    let p = MolParams { logits: vec![0.3, -0.5, 1.0], means: vec![-0.4, 0.1, 0.6], log_scales: vec![-2.0, -1.0, -2.5] };
    let (lo, hi, n) = (-30.0, 30.0, 600_000);
    let h = (hi - lo) / n as f64;
    let mut total = 0.0;
    for i in 0..=n {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        total += w * mol_log_density(lo + i as f64 * h, &p).exp();
    }
    assert!((total * h - 1.0).abs() < 1e-6, "{}", total * h);
}

#[test]
fn logistic_samples_pass_ks() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut xs = logistic_noise(&mut rng, 20_000);
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = logistic_cdf(x, 0.0, 1.0);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    assert!(d < 1.36 / n.sqrt(), "KS statistic {d}");
}

#[test]
fn teacher_is_causal() {
    let cfg = tiny_cfg();
    let (store, teacher, _) = build(&cfg, 1);
    let frames = randn(6, cfg.cond_dim, 2, 1.0);
    let w = wave(6 * HOP, 3);
    let base = teacher.forward_params(&store, &w, &frames).unwrap();
    for t0 in [0usize, 5, 11, 23] {
        let mut w2 = w.clone();
        w2[t0] += 0.7;
        let p = teacher.forward_params(&store, &w2, &frames).unwrap();
        for t in 0..=t0 {
            assert_eq!(base.row_slice(t), p.row_slice(t), "row {t} moved after perturbing {t0}");
        }
        if t0 + 1 < w.len() {
            let moved = base.row_slice(t0 + 1).iter().zip(p.row_slice(t0 + 1)).any(|(a, b)| a != b);
            assert!(moved, "row {} ignores the previous sample", t0 + 1);
        }
    }
    assert_eq!(teacher.receptive_field(), 1 + 1 + 2 + 4);
}

#[test]
fn student_flows_start_as_identity_and_stay_causal() {
    let cfg = tiny_cfg();
    let (mut store, _, student) = build(&cfg, 4);
    let frames = randn(5, cfg.cond_dim, 5, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = logistic_noise(&mut rng, 5 * HOP);
    let (trace, out) = student.flow_trace(&store, &noise, &frames).unwrap();
    assert_eq!(out, noise);
    for (mu, sigma) in &trace {
        assert!(mu.iter().all(|&m| m == 0.0) && sigma.iter().all(|&s| s == 1.0));
    }

    randomize_heads(&mut store, 7);
    let (trace, out) = student.flow_trace(&store, &noise, &frames).unwrap();
    let (mu, sigma) = compose_flows(&trace).unwrap();
    for t in 0..noise.len() {
        assert!((mu[t] + sigma[t] * noise[t] - out[t]).abs() < 1e-10);
    }
    for t0 in [0usize, 7, 13] {
        let mut n2 = noise.clone();
        n2[t0] += 1.0;
        let (trace2, out2) = student.flow_trace(&store, &n2, &frames).unwrap();
        let (mu2, sigma2) = compose_flows(&trace2).unwrap();
        for t in 0..=t0 {
            assert_eq!((mu[t], sigma[t]), (mu2[t], sigma2[t]), "flow params at {t} depend on noise {t0}");
        }
        for t in 0..t0 {
            assert_eq!(out[t], out2[t]);
        }
    }
}

#[test]
fn student_dilation_cycle() {
    let (_, _, student) = build(&VocoderConfig { student_flow_layers: vec![10, 10, 10, 30], ..tiny_cfg() }, 8);
    assert_eq!(student.flow_depths(), vec![10, 10, 10, 30]);
    let d = student.flow_dilations(3);
    assert_eq!(&d[..11], &[1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1]);
    assert_eq!(d[29], 512);
}

#[test]
fn stft_graph_matches_fft_oracle() {
    let cfg = StftConfig { fft_size: 16, hop: 4 };
    let x = wave(40, 9);
    let target = wave(40, 10);
    let mut g = Graph::new();
    let xv = g.constant(Tensor::column(&x));
    let loss = spectral_loss_graph(&mut g, xv, &target, &cfg);
    let a = stft_log_magnitude(&x, &cfg);
    let b = stft_log_magnitude(&target, &cfg);
    assert_eq!(a.shape(), (7, 9));
    let mse = a.zip_map(&b, |p, q| (p - q) * (p - q)).mean();
    assert!((g.value(loss).item() - mse).abs() < 1e-9);

    let mut g = Graph::new();
    let xv = g.constant(Tensor::column(&x));
    let same = spectral_loss_graph(&mut g, xv, &x, &cfg);
    assert!(g.value(same).item() < 1e-20);
}

fn kl_estimate(shift: f64, t: usize, n_mc: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Tensor::from_vec(t, n_mc, logistic_noise(&mut rng, t * n_mc));
    let mut g = Graph::new();
    let mu = g.constant(Tensor::full(t, 1, shift));
    let ls = g.constant(Tensor::zeros(t, 1));
    let p = g.constant(Tensor::from_rows(&vec![vec![0.0, 0.0, 0.0]; t]));
    let kl = kl_term_graph(&mut g, mu, ls, p, &eps);
    g.value(kl.kl).item()
}

#[test]
fn kl_vanishes_when_student_matches_teacher() {
    let kl = kl_estimate(0.0, 3, 10_000, 11);
    assert!(kl.abs() <= 0.05, "{kl}");
    let shifted = kl_estimate(1.0, 3, 10_000, 12);
    assert!(shifted > 0.3, "{shifted}");
    let exact = 3.0 * 0.163_953_4;
    assert!((kl_estimate(1.0, 3, 200_000, 13) - exact).abs() < 0.02);
}

#[test]
fn teacher_nll_gradients_match_finite_differences() {
    let cfg = tiny_cfg();
    let (mut store, teacher, _) = build(&cfg, 14);
    jitter_biases(&mut store, 24);
    let mel = randn(3, N_MELS, 15, 1.0);
    let z = [0.3, -0.2, 0.5];
    let w = wave(3 * HOP, 16);
    let loss = |s: &ParamStore, grads: bool| {
        let mut g = Graph::with_store(s);
        let m = g.constant(mel.clone());
        let c = teacher.cond.frames(&mut g, m, &z);
        let l = teacher.nll_graph(&mut g, &w, c);
        let v = g.value(l).item();
        (v, grads.then(|| g.backward(l).into_gradients(s.len())))
    };
    let (_, grads) = loss(&store, true);
    let report = gradient_check(&store, &grads.unwrap(), 400, 1e-6, 1e-3, 1e-5, |s| loss(s, false).0);
    assert!(report.checked >= 100, "{}", report.checked);
    assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
}

#[test]
fn distillation_gradients_reach_only_the_student() {
    let cfg = tiny_cfg();
    let (mut store, teacher, student) = build(&cfg, 17);
    randomize_heads(&mut store, 18);
    jitter_biases(&mut store, 25);
    let mel = randn(5, N_MELS, 19, 1.0);
    let z = [0.1, 0.4, -0.3];
    let target = wave(5 * HOP, 20);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let noise = logistic_noise(&mut rng, 5 * HOP);
    let eps = Tensor::from_vec(5 * HOP, 3, logistic_noise(&mut rng, 15 * HOP));
    let stft = StftConfig { fft_size: 8, hop: 4 };
    let loss = |s: &ParamStore, grads: bool| {
        let mut g = Graph::with_store(s);
        g.freeze_prefix("teacher/");
        let m = g.constant(mel.clone());
        let c = teacher.cond.frames(&mut g, m, &z);
        let d = student.distill_graph(&mut g, &teacher, c, &noise, &eps, &target, &stft, 1.0);
        let v = g.value(d.total).item();
        (v, grads.then(|| g.backward(d.total).into_gradients(s.len())))
    };
    let (_, grads) = loss(&store, true);
    let grads = grads.unwrap();
    for (id, _) in grads.iter() {
        assert!(store.name(id).starts_with("student/"), "{}", store.name(id));
    }
    let report = gradient_check(&store, &grads, 300, 1e-6, 1e-3, 1e-5, |s| loss(s, false).0);
    assert!(report.checked >= 100, "{}", report.checked);
    assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);

    let before = version_stamp(&store, "teacher/");
    let mut opt = etts_autograd::optim::Adam::new(&store, etts_autograd::optim::AdamConfig::default());
    opt.update(&mut store, &grads);
    assert_eq!(before, version_stamp(&store, "teacher/"));
    assert_ne!(version_stamp(&store, "student/"), 0);
}

#[test]
fn conditioning_rejects_bad_shapes() {
    let cfg = tiny_cfg();
    let (store, teacher, student) = build(&cfg, 22);
    let mel = randn(4, N_MELS, 23, 1.0);
    let up = teacher.cond.encode_conditioning(&store, &mel, &[0.0; LATENT], HOP).unwrap();
    assert_eq!(up.shape(), (4 * HOP, cfg.cond_dim));
    assert_eq!(up.row_slice(0), up.row_slice(HOP - 1));
    assert!(teacher.cond.encode_frames(&store, &mel, &[0.0; 2]).is_err());
    assert!(teacher.cond.encode_frames(&store, &randn(4, 3, 1, 1.0), &[0.0; LATENT]).is_err());
    let frames = teacher.cond.encode_frames(&store, &mel, &[0.0; LATENT]).unwrap();
    assert!(student.sample(&store, &[0.0; 5], &frames).is_err());
    assert!(teacher.nll(&store, &[0.0; 5], &frames).is_err());
    let s = student.sample(&store, &vec![5.0; 4 * HOP], &frames).unwrap();
    assert!(s.iter().all(|&x| x == 1.0));
}

#[test]
fn pinned_teacher_nll_matches_hand_computation() {
    let cfg = VocoderConfig { mixtures: 2, ..tiny_cfg() };
    let (mut store, teacher, _) = build(&cfg, 26);
    let w_id = store.id("teacher/out2/weight").unwrap();
    let b_id = store.id("teacher/out2/bias").unwrap();
    let shape = store.value(w_id).shape();
    *store.value_mut(w_id) = Tensor::zeros(shape.0, shape.1);
    let pinned = [0.2, -0.4, 0.1, -0.3, -2.0, -1.5];
    *store.value_mut(b_id) = Tensor::row(&pinned);
    let p = MolParams::from_row(&pinned);
    let q = Quantizer::new(cfg.levels);
    let w: Vec<f64> = [0.1, -0.25, 0.6, -1.0].iter().map(|&x| q.snap(x)).collect();
    let frames = randn(1, cfg.cond_dim, 27, 1.0);
    let expected = -w.iter().map(|&x| mol_log_prob(x, &p, &q)).sum::<f64>() / 4.0;
    let nll = teacher.nll(&store, &w, &frames).unwrap();
    assert!((nll - expected).abs() < 1e-12, "{nll} vs {expected}");
}

#[test]
fn conditioning_depends_on_latent() {
    let cfg = tiny_cfg();
    let (store, teacher, _) = build(&cfg, 28);
    let mel = randn(10, N_MELS, 29, 1.0);
    let a = teacher.cond.encode_conditioning(&store, &mel, &[0.5, -0.5, 0.2], HOP).unwrap();
    let b = teacher.cond.encode_conditioning(&store, &mel, &[-0.3, 0.9, 0.0], HOP).unwrap();
    assert_eq!(a.rows(), 10 * HOP);
    assert!(a.zip_map(&b, |x, y| (x - y).abs()).max_abs() > 1e-6);
}
