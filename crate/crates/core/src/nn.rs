//! Layers built on the autodiff tape. Weights are stored `[in × out]` so a
//! packed `[rows × in]` batch multiplies on the left.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{BatchStats, Graph, Mat, ParamOwner, Segments, Var};
use crate::params::{uniform_init, ParamId, ParamStore, TensorKind};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Binds a parameter store to a tape for one forward pass.
pub struct Ctx<'a> {
    pub store: &'a ParamStore,
    pub owner: ParamOwner,
    /// Whether gradients are wanted at all for this store.
    pub track: bool,
}

impl Ctx<'_> {
    pub fn leaf(&self, g: &mut Graph, id: ParamId) -> Var {
        let track = self.track && self.store.kind(id) == TensorKind::Trainable;
        g.param(self.store, id, self.owner, track)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, inp, out, bound), TensorKind::Trainable);
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, 1, out, bound), TensorKind::Trainable);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Var {
        let w = ctx.leaf(g, self.weight);
        let b = ctx.leaf(g, self.bias);
        let y = g.matmul(x, w);
        g.add_bias(y, b)
    }
}

/// Same-padded 1-D convolution over time, channels last.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub kernel: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((inp * kernel) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, kernel * inp, out, bound),
            TensorKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, 1, out, bound), TensorKind::Trainable);
        Self { kernel, weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var, segs: &Rc<Segments>) -> Var {
        let cols = g.im2col(x, self.kernel, segs.clone());
        let w = ctx.leaf(g, self.weight);
        let b = ctx.leaf(g, self.bias);
        let y = g.matmul(cols, w);
        g.add_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Running-statistic update recorded during a training forward pass.
#[derive(Debug, Clone)]
pub struct PendingStats {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub stats: BatchStats,
}

impl PendingStats {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = store.value_mut(self.mean_id);
        for (r, b) in m.iter_mut().zip(&self.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let v = store.value_mut(self.var_id);
        for (r, b) in v.iter_mut().zip(&self.stats.var_unbiased) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
    }
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim)), TensorKind::Trainable),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim)), TensorKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Mat::zeros((1, dim)), TensorKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Mat::ones((1, dim)), TensorKind::Buffer),
        }
    }

    /// Training mode normalizes with the statistics of the (unpadded) rows
    /// and returns them for the running averages; inference mode uses the
    /// running averages.
    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var, train: bool) -> (Var, Option<PendingStats>) {
        let gamma = ctx.leaf(g, self.gamma);
        let beta = ctx.leaf(g, self.beta);
        if train {
            let (y, stats) = g.batch_norm(x, gamma, beta, NORM_EPS);
            let pending = PendingStats {
                mean_id: self.running_mean,
                var_id: self.running_var,
                stats,
            };
            (y, Some(pending))
        } else {
            // y = x · scale + shift, folded into a diagonal matmul so the
            // tape only needs its generic ops.
            let mean = ctx.store.value(self.running_mean);
            let var = ctx.store.value(self.running_var);
            let gv = ctx.store.value(self.gamma);
            let bv = ctx.store.value(self.beta);
            let dim = mean.ncols();
            let mut diag = Mat::zeros((dim, dim));
            let mut shift = Mat::zeros((1, dim));
            for c in 0..dim {
                let scale = gv[[0, c]] / (var[[0, c]] + NORM_EPS).sqrt();
                diag[[c, c]] = scale;
                shift[[0, c]] = bv[[0, c]] - mean[[0, c]] * scale;
            }
            let d = g.constant(diag);
            let sh = g.constant(shift);
            let y = g.matmul(x, d);
            (g.add_bias(y, sh), None)
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim)), TensorKind::Trainable),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim)), TensorKind::Trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Var {
        let gamma = ctx.leaf(g, self.gamma);
        let beta = ctx.leaf(g, self.beta);
        g.layer_norm(x, gamma, beta, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
struct LstmDirection {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

/// Single-layer bidirectional LSTM; output is `[rows × 2H]`, forward
/// half first.
#[derive(Debug, Clone)]
pub struct BiLstm {
    fwd: LstmDirection,
    bwd: LstmDirection,
}

impl BiLstm {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut dir = |tag: &str, rng: &mut R| LstmDirection {
            w_ih: store.add(
                format!("{name}.{tag}.w_ih"),
                uniform_init(rng, inp, 4 * hidden, bound),
                TensorKind::Trainable,
            ),
            w_hh: store.add(
                format!("{name}.{tag}.w_hh"),
                uniform_init(rng, hidden, 4 * hidden, bound),
                TensorKind::Trainable,
            ),
            bias: store.add(
                format!("{name}.{tag}.bias"),
                uniform_init(rng, 1, 4 * hidden, bound),
                TensorKind::Trainable,
            ),
        };
        let fwd = dir("fwd", rng);
        let bwd = dir("bwd", rng);
        Self { fwd, bwd }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var, segs: &Rc<Segments>) -> Var {
        let run = |d: &LstmDirection, reverse: bool, g: &mut Graph| {
            let wih = ctx.leaf(g, d.w_ih);
            let whh = ctx.leaf(g, d.w_hh);
            let b = ctx.leaf(g, d.bias);
            let xw = g.matmul(x, wih);
            let xw = g.add_bias(xw, b);
            g.lstm(xw, whh, segs.clone(), reverse)
        };
        let f = run(&self.fwd, false, g);
        let b = run(&self.bwd, true, g);
        g.concat_cols(f, b)
    }
}

/// Three linear layers with GELU in between; frame-wise.
#[derive(Debug, Clone)]
pub struct Mlp3 {
    layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            layers: [
                Linear::new(store, &format!("{name}.0"), inp, hidden, rng),
                Linear::new(store, &format!("{name}.1"), hidden, hidden, rng),
                Linear::new(store, &format!("{name}.2"), hidden, out, rng),
            ],
        }
    }

    pub fn output_layer(&self) -> &Linear {
        &self.layers[2]
    }

    pub fn forward(&self, g: &mut Graph, ctx: &Ctx, x: Var) -> Var {
        let h = self.layers[0].forward(g, ctx, x);
        let h = g.gelu(h);
        let h = self.layers[1].forward(g, ctx, h);
        let h = g.gelu(h);
        self.layers[2].forward(g, ctx, h)
    }
}
