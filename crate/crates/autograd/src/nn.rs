//! Layers built on top of [`Graph`].

use rand::Rng;

use crate::graph::{ConvSpec, Graph, Var};
use crate::params::{Init, ParamId};
use crate::tensor::Tensor;

/// Fully connected layer, `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, in_dim: usize, out_dim: usize) -> Self {
        let weight = init.glorot("weight", in_dim, out_dim);
        let bias = Some(init.zeros("bias", 1, out_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn no_bias<R: Rng>(init: &mut Init<'_, R>, in_dim: usize, out_dim: usize) -> Self {
        let weight = init.glorot("weight", in_dim, out_dim);
        Self { weight, bias: None, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        self.forward_with_weight(g, x, w)
    }

    /// Forward pass using an externally transformed weight (e.g. spectrally normalized).
    pub fn forward_with_weight(&self, g: &mut Graph<'_>, x: Var, w: Var) -> Var {
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Output at `t` sees inputs `≤ t` only.
    Causal,
    /// Symmetric padding keeping `T_out = ceil(T / stride)` for odd kernels.
    Same,
}

/// 1-D convolution over a `T × C_in` sequence.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        padding: Padding,
    ) -> Self {
        let weight = init.glorot("weight", kernel * in_channels, out_channels);
        let bias = Some(init.zeros("bias", 1, out_channels));
        Self { weight, bias, kernel, dilation, stride, padding, in_channels, out_channels }
    }

    pub fn spec(&self) -> ConvSpec {
        let span = self.dilation * (self.kernel - 1);
        let (pad_left, pad_right) = match self.padding {
            Padding::Causal => (span, 0),
            Padding::Same => (span / 2, span - span / 2),
        };
        ConvSpec {
            kernel: self.kernel,
            dilation: self.dilation,
            stride: self.stride,
            pad_left,
            pad_right,
            in_channels: self.in_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        self.forward_with_weight(g, x, w)
    }

    pub fn forward_with_weight(&self, g: &mut Graph<'_>, x: Var, w: Var) -> Var {
        let y = g.conv1d(x, w, self.spec());
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Single-direction LSTM with fused gate projections.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Recurrent state of an [`Lstm`], `B × H` each.
#[derive(Copy, Clone, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl Lstm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, input_dim: usize, hidden: usize) -> Self {
        let input_weight = init.glorot("input_weight", input_dim, 4 * hidden);
        let hidden_weight = init.glorot("hidden_weight", hidden, 4 * hidden);
        // forget gate starts open
        let mut b = Tensor::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.data_mut()[j] = 1.0;
        }
        let bias = init.constant("bias", b);
        Self { input_weight, hidden_weight, bias, input_dim, hidden }
    }

    pub fn zero_state(&self, g: &mut Graph<'_>, batch: usize) -> LstmState {
        let h = g.constant(Tensor::zeros(batch, self.hidden));
        let c = g.constant(Tensor::zeros(batch, self.hidden));
        LstmState { h, c }
    }

    /// Projects inputs for all timesteps at once: `T × in → T × 4H` (bias included).
    pub fn project_inputs(&self, g: &mut Graph<'_>, xs: Var) -> Var {
        let w = g.param(self.input_weight);
        let b = g.param(self.bias);
        let p = g.matmul(xs, w);
        g.add_row(p, b)
    }

    /// One step given already-projected inputs (`B × 4H`, bias included).
    pub fn step_projected(&self, g: &mut Graph<'_>, projected: Var, state: LstmState) -> LstmState {
        let wh = g.param(self.hidden_weight);
        let rec = g.matmul(state.h, wh);
        let gates = g.add(projected, rec);
        let hc = g.lstm_cell(gates, state.c);
        let h = g.slice_cols(hc, 0, self.hidden);
        let c = g.slice_cols(hc, self.hidden, self.hidden);
        LstmState { h, c }
    }

    pub fn step(&self, g: &mut Graph<'_>, x: Var, state: LstmState) -> LstmState {
        let p = self.project_inputs(g, x);
        self.step_projected(g, p, state)
    }

    /// Runs over a `T × in` sequence (batch of one) and returns `T × H`.
    pub fn run(&self, g: &mut Graph<'_>, xs: Var, reverse: bool) -> Var {
        let t_len = g.shape(xs).0;
        let proj = self.project_inputs(g, xs);
        let mut state = self.zero_state(g, 1);
        let mut outs = vec![None; t_len];
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in order {
            let p = g.row(proj, t);
            state = self.step_projected(g, p, state);
            outs[t] = Some(state.h);
        }
        let outs: Vec<Var> = outs.into_iter().map(|v| v.expect("every step visited")).collect();
        g.concat_rows(&outs)
    }
}

/// Bidirectional LSTM; output is `[forward | backward]`, `T × 2H`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, input_dim: usize, hidden: usize) -> Self {
        let forward = Lstm::new(&mut init.sub("fwd"), input_dim, hidden);
        let backward = Lstm::new(&mut init.sub("bwd"), input_dim, hidden);
        Self { forward, backward }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn run(&self, g: &mut Graph<'_>, xs: Var) -> Var {
        let f = self.forward.run(g, xs, false);
        let b = self.backward.run(g, xs, true);
        g.concat_cols(&[f, b])
    }

    /// Final states of both directions concatenated: `1 × 2H`.
    pub fn summary(&self, g: &mut Graph<'_>, xs: Var) -> Var {
        let t_len = g.shape(xs).0;
        let f = self.forward.run(g, xs, false);
        let b = self.backward.run(g, xs, true);
        let f_last = g.row(f, t_len - 1);
        let b_first = g.row(b, 0);
        g.concat_cols(&[f_last, b_first])
    }
}

/// Lookup table, `vocab × dim`.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(init: &mut Init<'_, R>, vocab: usize, dim: usize) -> Self {
        let table = init.normal("table", vocab, dim, (1.0 / dim as f64).sqrt());
        Self { table, vocab, dim }
    }

    /// Looks up ids via a one-hot product so gradients flow to the table.
    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize]) -> Var {
        let mut onehot = Tensor::zeros(ids.len(), self.vocab);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < self.vocab, "embedding id {id} out of range");
            onehot.set(r, id, 1.0);
        }
        let oh = g.constant(onehot);
        let t = g.param(self.table);
        g.matmul(oh, t)
    }
}

/// Inverted dropout mask as a constant node; identity when `p == 0` or not training.
pub fn dropout<R: Rng>(g: &mut Graph<'_>, x: Var, p: f64, rng: Option<&mut R>) -> Var {
    match rng {
        Some(rng) if p > 0.0 => {
            let (r, c) = g.shape(x);
            let keep = 1.0 - p;
            let mask: Vec<f64> = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
            let m = g.constant(Tensor::from_vec(r, c, mask));
            g.mul(x, m)
        }
        _ => x,
    }
}
