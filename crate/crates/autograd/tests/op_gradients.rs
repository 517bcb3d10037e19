use etts_autograd::gradcheck::{numeric_gradient, rel_error};
use etts_autograd::graph::{BinEdge, ConvSpec};
use etts_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Checks d/dx of `sum(op(x...) ⊙ W)` for a fixed random `W` against central differences.
fn check(name: &str, inputs: Vec<Tensor>, op: impl Fn(&mut Graph<'_>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let y = op(&mut g, &vars);
        g.shape(y)
    };
    let weights = random(&mut rng, probe_shape.0, probe_shape.1, 1.0);
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let y = op(&mut g, &vars);
        g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = op(&mut g, &vars);
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w);
    let loss = g.sum(prod);
    let back = g.backward(loss);

    for (i, x) in inputs.iter().enumerate() {
        let analytic = back.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));
        let numeric = numeric_gradient(x, 1e-6, |probe| {
            let mut xs = inputs.clone();
            xs[i] = probe.clone();
            eval(&xs)
        });
        for k in 0..x.len() {
            let (a, n) = (analytic.data()[k], numeric.data()[k]);
            assert!(rel_error(a, n, 1e-4) < 1e-5, "{name}: input {i} elem {k}: analytic {a} numeric {n}");
        }
    }
}

#[test]
fn elementwise_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, 3, 4, 1.0);
    let b = random(&mut rng, 3, 4, 1.0);
    let row = random(&mut rng, 1, 4, 1.0);
    let col = random(&mut rng, 3, 1, 1.0);
    let s = random(&mut rng, 1, 1, 1.0);
    let pos = a.map(|v| v.abs() + 0.5);

    check("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check("sub", vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check("add_row", vec![a.clone(), row.clone()], |g, v| g.add_row(v[0], v[1]));
    check("mul_row", vec![a.clone(), row.clone()], |g, v| g.mul_row(v[0], v[1]));
    check("add_col", vec![a.clone(), col.clone()], |g, v| g.add_col(v[0], v[1]));
    check("mul_col", vec![a.clone(), col.clone()], |g, v| g.mul_col(v[0], v[1]));
    check("scale", vec![a.clone()], |g, v| g.scale(v[0], -1.7));
    check("add_scalar", vec![a.clone()], |g, v| g.add_scalar(v[0], 0.3));
    check("scale_by", vec![a.clone(), s.clone()], |g, v| g.scale_by(v[0], v[1]));
    check("reciprocal", vec![pos.clone()], |g, v| g.reciprocal(v[0]));
    check("sigmoid", vec![a.clone()], |g, v| g.sigmoid(v[0]));
    check("tanh", vec![a.clone()], |g, v| g.tanh(v[0]));
    check("relu", vec![a.clone()], |g, v| g.relu(v[0]));
    check("leaky_relu", vec![a.clone()], |g, v| g.leaky_relu(v[0], 0.2));
    check("exp", vec![a.clone()], |g, v| g.exp(v[0]));
    check("log", vec![pos.clone()], |g, v| g.log(v[0]));
    check("softplus", vec![a.clone()], |g, v| g.softplus(v[0]));
    check("abs", vec![a.clone()], |g, v| g.abs(v[0]));
    check("square", vec![a.clone()], |g, v| g.square(v[0]));
    check("sqrt", vec![pos.clone()], |g, v| g.sqrt(v[0]));
    check("clamp_min", vec![a.clone()], |g, v| g.clamp_min(v[0], 0.1));
}

#[test]
fn reductions_and_reshapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, 3, 4, 1.0);
    let b = random(&mut rng, 2, 4, 1.0);
    let c = random(&mut rng, 3, 2, 1.0);
    let r = random(&mut rng, 1, 4, 1.0);

    check("sum", vec![a.clone()], |g, v| g.sum(v[0]));
    check("mean", vec![a.clone()], |g, v| g.mean(v[0]));
    check("sum_rows", vec![a.clone()], |g, v| g.sum_rows(v[0]));
    check("sum_cols", vec![a.clone()], |g, v| g.sum_cols(v[0]));
    check("concat_rows", vec![a.clone(), b.clone()], |g, v| g.concat_rows(&[v[0], v[1]]));
    check("concat_cols", vec![a.clone(), c.clone()], |g, v| g.concat_cols(&[v[0], v[1]]));
    check("slice_rows", vec![a.clone()], |g, v| g.slice_rows(v[0], 1, 2));
    check("slice_cols", vec![a.clone()], |g, v| g.slice_cols(v[0], 1, 2));
    check("repeat_rows", vec![a.clone()], |g, v| g.repeat_rows(v[0], 3));
    check("broadcast_rows", vec![r.clone()], |g, v| g.broadcast_rows(v[0], 5));
    check("reshape", vec![a.clone()], |g, v| g.reshape(v[0], 2, 6));
    check("transpose", vec![a.clone()], |g, v| g.transpose(v[0]));
    check("matmul", vec![c.transpose(), a.clone()], |g, v| g.matmul(v[0], v[1]));
    check("softmax_rows", vec![a.clone()], |g, v| g.softmax_rows(v[0]));
    check("log_softmax_rows", vec![a.clone()], |g, v| g.log_softmax_rows(v[0]));
    check("logsumexp_rows", vec![a.clone()], |g, v| g.logsumexp_rows(v[0]));
}

#[test]
fn conv1d_all_padding_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, 9, 3, 1.0);
    for (kernel, dilation, stride, pl, pr) in [(3, 1, 1, 1, 1), (2, 4, 1, 4, 0), (3, 1, 2, 1, 1), (5, 2, 1, 0, 0)] {
        let w = random(&mut rng, kernel * 3, 2, 1.0);
        let spec = ConvSpec { kernel, dilation, stride, pad_left: pl, pad_right: pr, in_channels: 3 };
        check("conv1d", vec![x.clone(), w], move |g, v| g.conv1d(v[0], v[1], spec));
    }
}

#[test]
fn conv1d_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, 7, 2, 1.0);
    let w = random(&mut rng, 6, 3, 1.0);
    let spec = ConvSpec { kernel: 3, dilation: 2, stride: 1, pad_left: 4, pad_right: 0, in_channels: 2 };
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv1d(xv, wv, spec);
    let y = g.value(y);
    assert_eq!(y.shape(), (7, 3));
    for t in 0..7 {
        for o in 0..3 {
            let mut s = 0.0;
            for k in 0..3 {
                let src = t as isize + (k as isize) * 2 - 4;
                if src >= 0 {
                    for c in 0..2 {
                        s += x.get(src as usize, c) * w.get(k * 2 + c, o);
                    }
                }
            }
            assert!((y.get(t, o) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn lstm_cell_matches_unfused_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let gates = random(&mut rng, 2, 12, 2.0);
    let c = random(&mut rng, 2, 3, 1.0);
    check("lstm_cell", vec![gates.clone(), c.clone()], |g, v| g.lstm_cell(v[0], v[1]));

    let mut g = Graph::new();
    let gv = g.constant(gates);
    let cv = g.constant(c);
    let fused = g.lstm_cell(gv, cv);
    let i = g.slice_cols(gv, 0, 3);
    let f = g.slice_cols(gv, 3, 3);
    let gg = g.slice_cols(gv, 6, 3);
    let o = g.slice_cols(gv, 9, 3);
    let (i, f, gg, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(gg), g.sigmoid(o));
    let fc = g.mul(f, cv);
    let ig = g.mul(i, gg);
    let cn = g.add(fc, ig);
    let tc = g.tanh(cn);
    let h = g.mul(o, tc);
    let manual = g.concat_cols(&[h, cn]);
    let diff = g.value(fused).zip_map(g.value(manual), |a, b| (a - b).abs()).max_abs();
    assert!(diff < 1e-14);
}

#[test]
fn log_sigmoid_diff_branches() {
    let a = Tensor::row(&[0.7, 3.0, -1.0, 20.0, 0.1]);
    let b = Tensor::row(&[0.2, -4.0, -1.5, 19.9, -30.0]);
    let edges = vec![BinEdge::Interior, BinEdge::Interior, BinEdge::Lower, BinEdge::Interior, BinEdge::Upper];
    let e = edges.clone();
    check("log_sigmoid_diff", vec![a.clone(), b.clone()], move |g, v| g.log_sigmoid_diff(v[0], v[1], e.clone()));

    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let out = g.log_sigmoid_diff(av, bv, edges);
    let out = g.value(out).data().to_vec();
    assert!((out[0] - (sig(0.7) - sig(0.2)).ln()).abs() < 1e-12);
    assert!((out[1] - (sig(3.0) - sig(-4.0)).ln()).abs() < 1e-12);
    assert!((out[2] - sig(-1.0).ln()).abs() < 1e-12);
    assert!(out[3].is_finite());
    assert!((out[4] - (1.0 - sig(-30.0)).ln()).abs() < 1e-12);
}

#[test]
fn params_are_shared_across_uses() {
    let mut store = etts_autograd::ParamStore::new();
    let id = store.add("w", Tensor::row(&[2.0]));
    let mut g = Graph::with_store(&store);
    let a = g.param(id);
    let b = g.param(id);
    assert_eq!(a, b);
    let y = g.mul(a, b);
    let loss = g.sum(y);
    let back = g.backward(loss);
    assert_eq!(back.param_grads()[0].1.data(), &[4.0]);
}

#[test]
fn freeze_prefix_blocks_gradients_in_one_graph() {
    let mut store = etts_autograd::ParamStore::new();
    let a = store.add("gen/w", Tensor::row(&[2.0]));
    let b = store.add("disc/w", Tensor::row(&[3.0]));
    let mut g = Graph::with_store(&store);
    g.freeze_prefix("disc/");
    let av = g.param(a);
    let bv = g.param(b);
    let y = g.mul(av, bv);
    let loss = g.sum(y);
    let back = g.backward(loss);
    let ids: Vec<_> = back.param_grads().iter().map(|(id, _)| *id).collect();
    assert_eq!(ids, vec![a]);
    assert_eq!(back.param_grads()[0].1.data(), &[3.0]);
}
