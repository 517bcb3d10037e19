use etts_autograd::{Graph, ParamStore, Tensor};
use etts_core::adversarial::{
    d_hinge_loss, d_hinge_loss_graph, power_iteration, random_window, spectral_normalize, window_start, Discriminator, DiscriminatorConfig,
};
use etts_core::verify::gradient_check;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigma_max(w: &Tensor) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    m.singular_values().max()
}

fn random_matrix(r: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn small_disc(seed: u64) -> (ParamStore, Discriminator) {
    let cfg = DiscriminatorConfig { channels: 4, conv_layers: 2, attention_reduction: 2, ..Default::default() };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Discriminator::new(&mut store, &mut rng, &cfg, 8);
    // Non-zero gamma so the attention path carries gradient.
    let gamma = store.id("disc/attention/gamma").unwrap();
    *store.value_mut(gamma) = Tensor::scalar(0.7);
    (store, d)
}

fn top_two(w: &Tensor) -> (f64, f64) {
    let m = nalgebra::DMatrix::from_row_slice(w.rows(), w.cols(), w.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    (s[0], s[1])
}

#[test]
fn power_iteration_matches_svd_on_random_matrices() {
    // Ten cold-start iterations reach 1e-3 only when the leading singular gap
    // is wide enough: the estimate's relative error shrinks like (σ2/σ1)^(4k).
    let mut checked = 0;
    for seed in 0..40 {
        let w = random_matrix(16, 16, seed);
        let (s1, s2) = top_two(&w);
        let mut u = vec![0.25; 16];
        let (_, est) = power_iteration(&w, &mut u, 10);
        assert!(est <= s1 * (1.0 + 1e-12));
        if (s2 / s1).powi(40) < 1e-5 {
            assert!((s1 - est) / s1 < 1e-3, "seed {seed}: {est} vs {s1}");
            checked += 1;
        }
        let mut u = vec![0.25; 16];
        let (_, est) = power_iteration(&w, &mut u, 2000);
        assert!((s1 - est) / s1 < 1e-6, "seed {seed}: converged {est} vs {s1}");
    }
    assert!(checked >= 1, "{checked}");

    // A planted dominant direction converges within ten iterations.
    for seed in 0..10 {
        let noise = random_matrix(16, 16, 100 + seed);
        let a = random_matrix(16, 1, 200 + seed);
        let b = random_matrix(1, 16, 300 + seed);
        let w = noise.zip_map(&a.matmul(&b), |n, s| n + s);
        let (s1, _) = top_two(&w);
        let mut u = vec![0.25; 16];
        let (_, est) = power_iteration(&w, &mut u, 10);
        assert!((s1 - est) / s1 < 1e-3, "seed {seed}: {est} vs {s1}");
    }
}

#[test]
fn default_discriminator_weights_are_normalized() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = Discriminator::new(&mut store, &mut rng, &DiscriminatorConfig::default(), 80);
    assert!(store.num_scalars() > 50_000);
    for s in d.sn_weights() {
        let w = store.value(s.weight);
        let mut u = store.value(s.u).data().to_vec();
        let n = spectral_normalize(w, 10, &mut u).unwrap();
        let sv = sigma_max(&n);
        assert!((0.99..=1.01).contains(&sv), "{} {sv}", store.name(s.weight));
    }
}

#[test]
fn window_starts_cover_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seen = vec![false; 69];
    for _ in 0..10_000 {
        let (s, w) = window_start(100, 32, &mut rng);
        assert_eq!(w, 32);
        assert!(s <= 68);
        seen[s] = true;
    }
    assert!(seen.iter().all(|&b| b));
    let y = Tensor::zeros(100, 3);
    let a = random_window(&y, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = random_window(&y, 32, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn windows_stay_in_bounds(m in 1usize..200, width in 1usize..64, seed in any::<u64>()) {
        let y = Tensor::zeros(m, 2);
        let c = random_window(&y, width, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(c.start + c.width <= m);
        prop_assert_eq!(c.width, width.min(m));
        prop_assert_eq!(c.frames.rows(), c.width);
    }

    #[test]
    fn hinge_is_non_negative(f in proptest::collection::vec(-5.0f64..5.0, 1..8), r in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
        let l = d_hinge_loss(&f, &r);
        prop_assert!(l >= 0.0);
        let zero = f.iter().all(|&x| x <= -1.0) && r.iter().all(|&x| x >= 1.0);
        prop_assert_eq!(l == 0.0, zero);
    }
}

#[test]
fn score_is_finite_and_deterministic() {
    let (store, d) = small_disc(6);
    let z = Tensor::zeros(5, 8);
    let s = d.score_value(&store, &z);
    assert!(s.is_finite());
    assert_eq!(s, d.score_value(&store, &z));
}

#[test]
fn score_gradient_wrt_input_matches_finite_differences() {
    let (store, d) = small_disc(7);
    let crop = random_matrix(4, 8, 8);
    let mut g = Graph::with_store(&store);
    let x = g.input(crop.clone());
    let s = d.score(&mut g, x);
    let back = g.backward(s);
    let analytic = back.grad(x).unwrap().clone();
    let numeric = etts_autograd::gradcheck::numeric_gradient(&crop, 1e-6, |c| d.score_value(&store, c));
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        assert!(etts_autograd::gradcheck::rel_error(*a, *n, 1e-6) < 1e-3, "{a} vs {n}");
    }
}

fn d_loss(d: &Discriminator, store: &ParamStore, fake: &Tensor, real: &Tensor) -> (f64, etts_autograd::Gradients) {
    let mut g = Graph::with_store(store);
    let f = g.constant(fake.clone());
    let r = g.constant(real.clone());
    let sf = d.score(&mut g, f);
    let sr = d.score(&mut g, r);
    let l = d_hinge_loss_graph(&mut g, sf, sr);
    let v = g.value(l).item();
    (v, g.backward(l).into_gradients(store.len()))
}

#[test]
fn hinge_loss_parameter_gradients_match_finite_differences() {
    let (store, d) = small_disc(10);
    let fake = random_matrix(6, 8, 11);
    let real = random_matrix(6, 8, 12).map(|v| v * 0.3);
    let (v, grads) = d_loss(&d, &store, &fake, &real);
    assert!(v > 0.0);
    let rep = gradient_check(&store, &grads, 500, 1e-6, 1e-3, 1e-6, |s| d_loss(&d, s, &fake, &real).0);
    assert!(rep.checked > 100);
    assert!(rep.passed(), "{:?}", rep.failures);
}

#[test]
fn generator_step_on_adversarial_term_raises_fake_score() {
    let (store, d) = small_disc(13);
    let fake = random_matrix(6, 8, 14);
    let before = d.score_value(&store, &fake);
    let mut g = Graph::with_store(&store);
    let x = g.input(fake.clone());
    let s = d.score(&mut g, x);
    // g_adv = real − fake; descending it ascends the fake score.
    let loss = g.neg(s);
    let grad = g.backward(loss).grad(x).unwrap().clone();
    let stepped = fake.zip_map(&grad, |a, gr| a - 1e-3 * gr);
    assert!(d.score_value(&store, &stepped) > before);
}
