use etts_autograd::nn::{Conv1d, Linear, Padding};
use etts_autograd::{Graph, Init, Tensor, Var};
use rand::Rng;

/// Gated residual unit: dilated causal conv plus a frame-rate conditioning
/// projection that is repeated up to sample rate.
#[derive(Clone, Debug)]
pub struct GatedLayer {
    pub conv: Conv1d,
    pub cond: Linear,
    pub res: Linear,
    pub skip: Linear,
    pub gate: usize,
}

impl GatedLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        init: &mut Init<'_, R>,
        residual: usize,
        gate: usize,
        skip: usize,
        cond_dim: usize,
        kernel: usize,
        dilation: usize,
    ) -> Self {
        Self {
            conv: Conv1d::new(&mut init.sub("conv"), residual, 2 * gate, kernel, dilation, 1, Padding::Causal),
            cond: Linear::no_bias(&mut init.sub("cond"), cond_dim, 2 * gate),
            res: Linear::new(&mut init.sub("res"), gate, residual),
            skip: Linear::new(&mut init.sub("skip"), gate, skip),
            gate,
        }
    }

    pub fn dilation(&self) -> usize {
        self.conv.dilation
    }

    /// `h` is `T × R`, `cond` is `M × C` with `T = M·hop`. Returns the new residual stream and the skip output.
    pub fn forward(&self, g: &mut Graph<'_>, h: Var, cond: Var, hop: usize) -> (Var, Var) {
        let z = self.conv.forward(g, h);
        let c = self.cond.forward(g, cond);
        let c = g.repeat_rows(c, hop);
        let z = g.add(z, c);
        let a = g.slice_cols(z, 0, self.gate);
        let a = g.tanh(a);
        let b = g.slice_cols(z, self.gate, self.gate);
        let b = g.sigmoid(b);
        let gated = g.mul(a, b);
        let r = self.res.forward(g, gated);
        let out = g.add(h, r);
        let s = self.skip.forward(g, gated);
        (out, s)
    }
}

/// Prepends a zero and drops the last row so row `t` holds sample `t−1`.
pub fn shift_right(g: &mut Graph<'_>, x: Var) -> Var {
    let (t, c) = g.shape(x);
    if t <= 1 {
        return g.constant(Tensor::zeros(t, c));
    }
    let zero = g.constant(Tensor::zeros(1, c));
    let head = g.slice_rows(x, 0, t - 1);
    g.concat_rows(&[zero, head])
}
