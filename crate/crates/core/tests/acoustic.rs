use etts_autograd::{Graph, ParamStore, Tensor};
use etts_core::acoustic::{
    decoder_steps, kld_closed_form, reparameterize, slice_ops, AcousticConfig, AcousticModel, AttentionWeights, GaussianPosterior, Utterance,
    Vocabulary,
};
use etts_core::verify::gradient_check;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn tiny_cfg() -> AcousticConfig {
    AcousticConfig {
        embedding_dim: 4,
        encoder_conv_layers: 1,
        encoder_kernel: 3,
        encoder_lstm: 3,
        prenet_dim: 4,
        prenet_dropout: 0.5,
        attention_dim: 3,
        location_filters: 2,
        location_kernel: 3,
        decoder_lstm: 4,
        vae_channels: vec![3, 3],
        vae_kernel: 3,
        vae_lstm: 2,
        latent_dim: 2,
        max_ops: 5,
        stop_pos_weight: 2.0,
        guided_attention: 0.0,
        guided_attention_width: 0.2,
    }
}

fn small_cfg() -> AcousticConfig {
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

fn build(cfg: &AcousticConfig, n_mels: usize, seed: u64) -> (ParamStore, AcousticModel) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = AcousticModel::new(&mut store, &mut rng, cfg, n_mels, 12);
    (store, model)
}

fn random_mel(m: usize, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(m, n, (0..m * n).map(|_| rng.random_range(-3.0..1.0)).collect())
}

#[test]
fn shapes_and_determinism() {
    let (store, model) = build(&small_cfg(), 10, 1);
    let one = model.encode_phonemes(&store, &[3]).unwrap();
    assert_eq!(one.shape(), (1, 16));
    let a = model.encode_phonemes(&store, &[1, 2, 3, 4]).unwrap();
    assert_eq!(a, model.encode_phonemes(&store, &[1, 2, 3, 4]).unwrap());
    assert_ne!(a, model.encode_phonemes(&store, &[4, 3, 2, 1]).unwrap());
    assert!(model.encode_phonemes(&store, &[12]).is_err());

    let q = model.vae_encode(&store, &Tensor::zeros(7, 10)).unwrap();
    assert_eq!(q.dim(), 6);
    assert!(q.mu.iter().chain(&q.log_var).all(|v| v.is_finite()));
    let q2 = model.vae_encode(&store, &random_mel(7, 10, 3)).unwrap();
    assert_ne!(q.mu, q2.mu);
    assert_eq!(AcousticConfig::default().latent_dim, 64);
}

#[test]
fn decoder_steps_and_output_length() {
    assert_eq!(decoder_steps(20, 5), 4);
    assert_eq!(decoder_steps(20, 2), 10);
    let (store, model) = build(&small_cfg(), 10, 2);
    let mel = random_mel(9, 10, 4);
    let z = vec![0.1; 6];
    for ops in 1..=5 {
        let tf = model.teacher_forced_forward(&store, &[1, 5, 7], &mel, &z, ops).unwrap();
        assert_eq!(tf.predicted.rows(), ops * decoder_steps(9, ops));
        assert_eq!(tf.stop_logits.len(), decoder_steps(9, ops));
        for step in &tf.raw_steps {
            assert_eq!(step.raw_frames.shape(), (5, 10));
            assert!(step.stop_logit.is_finite());
        }
        for r in 0..tf.attention.rows() {
            let row = tf.attention.row_slice(r);
            assert!(row.iter().all(|&w| w >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn ops_slicing_matches_ops_five_prefix() {
    let (store, model) = build(&small_cfg(), 10, 5);
    let mel = random_mel(20, 10, 6);
    let z = vec![-0.2; 6];
    let tokens = [2, 4, 6, 8];
    for k in [2usize, 3, 4] {
        let tk = model.teacher_forced_forward(&store, &tokens, &mel, &z, k).unwrap();
        // Same feedback schedule at ops 5 is only comparable at step 0, so compare
        // every step of the ops-k pass against its own raw ops-5 output.
        for step in &tk.raw_steps {
            let sliced = slice_ops(step, k).unwrap();
            assert_eq!(sliced, step.raw_frames.slice_rows(0, k));
        }
        for (t, step) in tk.raw_steps.iter().enumerate() {
            let got = tk.predicted.slice_rows(t * k, k);
            let diff = got.data().iter().zip(step.raw_frames.slice_rows(0, k).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-6);
        }
        for j in 1..5 {
            let s = &tk.raw_steps[0];
            assert_eq!(slice_ops(s, j).unwrap(), slice_ops(s, j + 1).unwrap().slice_rows(0, j));
        }
    }
    assert!(slice_ops(&model.teacher_forced_forward(&store, &tokens, &mel, &z, 2).unwrap().raw_steps[0], 6).is_err());
}

#[test]
fn attention_step_examples() {
    let (mut store, model) = build(&small_cfg(), 10, 7);
    let n = 5;
    let memory = random_mel(n, model.cfg.memory_dim(), 8);
    let query = vec![0.3; 16];
    let prev = AttentionWeights::initial(n);
    let (_, w) = model.attention_step_values(&store, &query, &memory, &prev).unwrap();
    assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(w.cumulative.iter().zip(&prev.cumulative).all(|(a, b)| a >= b));

    let v = store.id("acoustic/attention/v/weight").unwrap();
    *store.value_mut(v) = Tensor::zeros(8, 1);
    let (ctx, w) = model.attention_step_values(&store, &query, &memory, &prev).unwrap();
    assert!(w.weights.iter().all(|&x| (x - 0.2).abs() < 1e-12));
    let mean: Vec<f64> = (0..memory.cols()).map(|c| (0..n).map(|r| memory.get(r, c)).sum::<f64>() / n as f64).collect();
    assert!(ctx.iter().zip(&mean).all(|(a, b)| (a - b).abs() < 1e-12));

    // A huge margin on one key saturates the softmax; the context is then that row.
    let b = store.id("acoustic/attention/v/bias").unwrap();
    let mut vw = Tensor::zeros(8, 1);
    vw.set(0, 0, 1000.0);
    *store.value_mut(v) = vw;
    *store.value_mut(b) = Tensor::zeros(1, 1);
    let mem_w = store.id("acoustic/attention/memory/weight").unwrap();
    let mut mw = Tensor::zeros(model.cfg.memory_dim(), 8);
    mw.set(0, 0, 10.0);
    *store.value_mut(mem_w) = mw;
    let mut memory = Tensor::zeros(n, model.cfg.memory_dim());
    for r in 0..n {
        memory.set(r, 1, r as f64);
    }
    memory.set(3, 0, 1.0);
    let (ctx, w) = model.attention_step_values(&store, &query, &memory, &prev).unwrap();
    assert!(w.weights[3] > 1.0 - 1e-9);
    assert!((ctx[1] - 3.0).abs() < 1e-6);
}

#[test]
fn infer_respects_step_bound() {
    let (store, model) = build(&small_cfg(), 10, 9);
    let out = model.infer_spectrogram(&store, &[1, 2], &[0.0; 6], 2, 1).unwrap();
    assert!(out.mel.rows() == 2 || out.stop_step == Some(0));
    let out = model.infer_spectrogram(&store, &[1, 2, 3], &[0.0; 6], 3, 7).unwrap();
    assert!(out.mel.rows() <= 21);
    assert_eq!(out.hit_max_steps, out.stop_step.is_none());
}

#[test]
fn reparameterized_moments_match() {
    let q = GaussianPosterior::new(vec![0.7, -1.2], vec![0.4, -1.0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut sum = [0.0; 2];
    let mut sq = [0.0; 2];
    for _ in 0..n {
        let noise: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();
        let z = reparameterize(&q, &noise).unwrap();
        for d in 0..2 {
            sum[d] += z[d];
            sq[d] += z[d] * z[d];
        }
    }
    for d in 0..2 {
        let mean = sum[d] / n as f64;
        let var = sq[d] / n as f64 - mean * mean;
        let sigma2 = q.log_var[d].exp();
        assert!((mean - q.mu[d]).abs() < 3.0 * (sigma2 / n as f64).sqrt());
        // var of the sample variance ≈ 2σ⁴/n for a Gaussian
        assert!((var - sigma2).abs() < 3.0 * (2.0 * sigma2 * sigma2 / n as f64).sqrt());
    }
    assert!(kld_closed_form(&q) > 0.0);
}

#[test]
fn vocabulary_encodes_toy_tokens() {
    let v = Vocabulary::toy();
    assert_eq!(v.len(), 12);
    let ids = v.encode_str("pau a m i").unwrap();
    assert_eq!(ids.len(), 4);
    assert!(v.encode_str("a zz").is_err());
    assert!(v.encode_str("").is_err());
}

fn tiny_loss(model: &AcousticModel, store: &ParamStore, tokens: &[usize], mel: &Tensor, noise: &[f64], want_grad: bool) -> (f64, Option<etts_autograd::Gradients>) {
    let mut g = Graph::with_store(store);
    let x = g.constant(mel.clone());
    let (mu, lv) = model.vae_encode_graph(&mut g, x);
    let z = model.sample_latent(&mut g, mu, lv, noise);
    let batch = [Utterance { tokens, mel }];
    let out = model.teacher_forced::<ChaCha8Rng>(&mut g, &batch, &[z], 2, None).unwrap();
    let loss = model.loss_graph(&mut g, &out, &batch, &[(mu, lv)], 0.7);
    let v = g.value(loss.total).item();
    let grads = want_grad.then(|| g.backward(loss.total).into_gradients(store.len()));
    (v, grads)
}

#[test]
fn acoustic_loss_gradient_matches_finite_differences() {
    let (mut store, model) = build(&tiny_cfg(), 3, 13);
    model.fit_normalization(&mut store, &[&random_mel(6, 3, 1)]);
    let mel = random_mel(4, 3, 14);
    let tokens = [3, 7];
    let noise = [0.4, -0.9];
    let (_, grads) = tiny_loss(&model, &store, &tokens, &mel, &noise, true);
    let report = gradient_check(&store, &grads.unwrap(), 500, 1e-6, 1e-3, 1e-6, |s| tiny_loss(&model, s, &tokens, &mel, &noise, false).0);
    assert!(report.checked >= 100, "{}", report.checked);
    assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
}

#[test]
fn batched_forward_matches_single_examples() {
    let (store, model) = build(&small_cfg(), 10, 15);
    let m1 = random_mel(7, 10, 16);
    let m2 = random_mel(12, 10, 17);
    let t1 = [1usize, 2, 3];
    let t2 = [4usize, 5];
    let z1 = vec![0.2; 6];
    let z2 = vec![-0.4; 6];
    let mut g = Graph::with_store(&store);
    let zv1 = g.constant(Tensor::row(&z1));
    let zv2 = g.constant(Tensor::row(&z2));
    let batch = [Utterance { tokens: &t1, mel: &m1 }, Utterance { tokens: &t2, mel: &m2 }];
    let out = model.teacher_forced::<ChaCha8Rng>(&mut g, &batch, &[zv1, zv2], 3, None).unwrap();
    let p1 = model.predicted_mel(&mut g, &out, 0);
    let p2 = model.predicted_mel(&mut g, &out, 1);
    let s1 = model.teacher_forced_forward(&store, &t1, &m1, &z1, 3).unwrap();
    let s2 = model.teacher_forced_forward(&store, &t2, &m2, &z2, 3).unwrap();
    assert!(g.value(p1).data().iter().zip(s1.predicted.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert!(g.value(p2).data().iter().zip(s2.predicted.data()).all(|(a, b)| (a - b).abs() < 1e-12));
}
