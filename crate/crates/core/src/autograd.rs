//! Tape-based reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Sequence batches are kept *packed*: the frames of every utterance are
//! stacked row-wise and a [`Segments`] table records where each utterance
//! starts. Padding never enters the tape, so every op that mixes rows
//! (convolution, recurrence, pooling, normalization) only ever sees valid
//! frames.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which parameter store a leaf was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamOwner {
    Backend,
    Model,
}

/// Row spans `(start, len)` of a packed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    spans: Vec<(usize, usize)>,
    total: usize,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut spans = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            spans.push((start, len));
            start += len;
        }
        Self { spans, total: start }
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.total
    }

    pub fn spans(&self) -> &[(usize, usize)] {
        &self.spans
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.spans.iter().map(|&(_, l)| l).collect()
    }

    pub fn max_len(&self) -> usize {
        self.spans.iter().map(|&(_, l)| l).max().unwrap_or(0)
    }
}

#[derive(Debug)]
struct LstmCache {
    // per row: gates i, f, g, o (activated), cell state, tanh(cell)
    gates: Mat,
    cell: Mat,
    cell_tanh: Mat,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    Tanh(Var),
    ConcatCols(Var, Var),
    Im2Col {
        x: Var,
        kernel: usize,
        segs: Rc<Segments>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
        over_rows: bool,
    },
    Lstm {
        xw: Var,
        whh: Var,
        segs: Rc<Segments>,
        reverse: bool,
        cache: LstmCache,
    },
    SegmentMean {
        x: Var,
        segs: Rc<Segments>,
    },
    WeightedSum {
        layers: Vec<Var>,
        logits: Var,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        row_weights: Vec<f64>,
        probs: Mat,
    },
    SquaredError {
        pred: Var,
        target: Rc<Mat>,
        row_weights: Vec<f64>,
    },
    Combine(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    param: Option<(ParamOwner, ParamId)>,
}

/// Statistics produced by a training-mode batch normalization, for
/// running-average updates after the step.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node on the tape.
pub struct Gradients {
    by_node: Vec<Option<Mat>>,
}

const GELU_SQRT1_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * GELU_SQRT1_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * GELU_SQRT1_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Reads a parameter into the tape. `track` decides whether its gradient
    /// is accumulated.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, owner: ParamOwner, track: bool) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, track);
        self.nodes[v.0].param = Some((owner, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        let rg = self.rg(a) || self.rg(bias);
        self.push(value, Op::AddBias(a, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_cols: row mismatch");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    /// Unfolds each row into `kernel` neighbouring rows of its own segment,
    /// zero-filled past the segment edges ("same" padding; an even kernel
    /// puts the extra tap on the right).
    pub fn im2col(&mut self, x: Var, kernel: usize, segs: Rc<Segments>) -> Var {
        let xv = self.value(x);
        let c = xv.ncols();
        let left = (kernel - 1) / 2;
        let mut out = Mat::zeros((xv.nrows(), kernel * c));
        for &(start, len) in segs.spans() {
            for t in 0..len {
                for j in 0..kernel {
                    let src = t as isize + j as isize - left as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    out.slice_mut(s![start + t, j * c..(j + 1) * c])
                        .assign(&xv.row(start + src as usize));
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Im2Col { x, kernel, segs }, rg)
    }

    /// Batch normalization over all rows (training statistics).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let mean = xv.mean_axis(Axis(0)).expect("batch_norm on empty input");
        let centered = xv - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let inv = ndarray::Array1::from(inv_std.clone());
        let xhat = &centered * &inv;
        let value = &xhat * self.value(gamma) + self.value(beta);
        let denom = (n - 1.0).max(1.0);
        let stats = BatchStats {
            mean: mean.to_vec(),
            var_unbiased: var.iter().map(|v| v * n / denom).collect(),
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                over_rows: true,
            },
            rg,
        );
        (v, stats)
    }

    /// Per-row layer normalization.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.ncols() as f64;
        let mean = xv.mean_axis(Axis(1)).expect("layer_norm on empty row");
        let centered = xv - &mean.insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / c;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let inv = ndarray::Array1::from(inv_std.clone()).insert_axis(Axis(1));
        let xhat = &centered * &inv;
        let value = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                over_rows: false,
            },
            rg,
        )
    }

    /// One LSTM direction over every segment. `xw` holds the precomputed
    /// input projection plus bias, `[rows × 4H]` in gate order i, f, g, o;
    /// `whh` is `[H × 4H]`. Each segment starts from a zero state.
    pub fn lstm(&mut self, xw: Var, whh: Var, segs: Rc<Segments>, reverse: bool) -> Var {
        let xwv = self.value(xw);
        let whv = self.value(whh);
        let h = whv.nrows();
        let rows = xwv.nrows();
        let mut out = Mat::zeros((rows, h));
        let mut gates = Mat::zeros((rows, 4 * h));
        let mut cell = Mat::zeros((rows, h));
        let mut cell_tanh = Mat::zeros((rows, h));
        let nseg = segs.len();
        let mut h_state = Mat::zeros((nseg, h));
        let mut c_state = Mat::zeros((nseg, h));

        for t in 0..segs.max_len() {
            let active: Vec<(usize, usize)> = segs
                .spans()
                .iter()
                .enumerate()
                .filter(|(_, &(_, len))| len > t)
                .map(|(si, &(start, len))| (si, if reverse { start + len - 1 - t } else { start + t }))
                .collect();
            let mut hp = Mat::zeros((active.len(), h));
            for (a, &(si, _)) in active.iter().enumerate() {
                hp.row_mut(a).assign(&h_state.row(si));
            }
            let rec = hp.dot(whv);
            for (a, &(si, row)) in active.iter().enumerate() {
                let pre = &xwv.row(row) + &rec.row(a);
                for j in 0..h {
                    let i_g = sigmoid(pre[j]);
                    let f_g = sigmoid(pre[h + j]);
                    let g_g = pre[2 * h + j].tanh();
                    let o_g = sigmoid(pre[3 * h + j]);
                    let c = f_g * c_state[[si, j]] + i_g * g_g;
                    let ct = c.tanh();
                    let hv = o_g * ct;
                    gates[[row, j]] = i_g;
                    gates[[row, h + j]] = f_g;
                    gates[[row, 2 * h + j]] = g_g;
                    gates[[row, 3 * h + j]] = o_g;
                    cell[[row, j]] = c;
                    cell_tanh[[row, j]] = ct;
                    out[[row, j]] = hv;
                    c_state[[si, j]] = c;
                    h_state[[si, j]] = hv;
                }
            }
        }
        let rg = self.rg(xw) || self.rg(whh);
        self.push(
            out,
            Op::Lstm {
                xw,
                whh,
                segs,
                reverse,
                cache: LstmCache {
                    gates,
                    cell,
                    cell_tanh,
                },
            },
            rg,
        )
    }

    /// Mean over the rows of each segment: `[segments × C]`.
    pub fn segment_mean(&mut self, x: Var, segs: Rc<Segments>) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros((segs.len(), xv.ncols()));
        for (si, &(start, len)) in segs.spans().iter().enumerate() {
            let m = xv
                .slice(s![start..start + len, ..])
                .mean_axis(Axis(0))
                .expect("segment_mean on empty segment");
            out.row_mut(si).assign(&m);
        }
        let rg = self.rg(x);
        self.push(out, Op::SegmentMean { x, segs }, rg)
    }

    /// `Σ_n softmax(logits)_n · layers[n]`; `logits` is `[1 × N]`.
    pub fn weighted_sum(&mut self, layers: &[Var], logits: Var) -> Var {
        let lv = self.value(logits);
        let weights = softmax_row(lv.row(0).iter().copied());
        let mut out = Mat::zeros(self.value(layers[0]).raw_dim());
        for (w, &l) in weights.iter().zip(layers) {
            out.scaled_add(*w, self.value(l));
        }
        let rg = self.rg(logits) || layers.iter().any(|&l| self.rg(l));
        self.push(
            out,
            Op::WeightedSum {
                layers: layers.to_vec(),
                logits,
                weights,
            },
            rg,
        )
    }

    /// `Σ_r w_r · (−log softmax(logits_r)[target_r])` as a `[1 × 1]` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, row_weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), row_weights.len());
        let mut probs = Mat::zeros(lv.raw_dim());
        let mut total = 0.0;
        for (r, row) in lv.rows().into_iter().enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for (c, v) in row.iter().enumerate() {
                probs[[r, c]] = (v - lse).exp();
            }
            total += row_weights[r] * (lse - row[targets[r]]);
        }
        let rg = self.rg(logits);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets,
                row_weights,
                probs,
            },
            rg,
        )
    }

    /// `Σ_r w_r · Σ_c (pred − target)²` as a `[1 × 1]` node.
    pub fn squared_error(&mut self, pred: Var, target: Rc<Mat>, row_weights: Vec<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim());
        let mut total = 0.0;
        for (r, (p, t)) in pv.rows().into_iter().zip(target.rows()).enumerate() {
            let sq: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            total += row_weights[r] * sq;
        }
        let rg = self.rg(pred);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::SquaredError {
                pred,
                target,
                row_weights,
            },
            rg,
        )
    }

    /// Linear combination of equally shaped nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut out = Mat::zeros(self.value(terms[0].0).raw_dim());
        for &(v, c) in terms {
            out.scaled_add(c, self.value(v));
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::Combine(terms.to_vec()), rg)
    }

    /// Reverse sweep from a `[1 × 1]` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients { by_node: grads }
    }

    fn propagate(&self, node: &Node, dy: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, g: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(dy));
                }
            }
            Op::AddBias(a, bias) => {
                acc(*a, dy.clone());
                if self.rg(*bias) {
                    acc(*bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Gelu(a) => {
                let mut g = self.value(*a).mapv(gelu_grad);
                g *= dy;
                acc(*a, g);
            }
            Op::Tanh(a) => {
                let mut g = node.value.mapv(|y| 1.0 - y * y);
                g *= dy;
                acc(*a, g);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).ncols();
                acc(*a, dy.slice(s![.., ..ca]).to_owned());
                acc(*b, dy.slice(s![.., ca..]).to_owned());
            }
            Op::Im2Col { x, kernel, segs } => {
                let c = self.value(*x).ncols();
                let left = (kernel - 1) / 2;
                let mut gx = Mat::zeros((dy.nrows(), c));
                for &(start, len) in segs.spans() {
                    for t in 0..len {
                        for j in 0..*kernel {
                            let src = t as isize + j as isize - left as isize;
                            if src < 0 || src >= len as isize {
                                continue;
                            }
                            let mut dst = gx.row_mut(start + src as usize);
                            dst += &dy.slice(s![start + t, j * c..(j + 1) * c]);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                over_rows,
            } => {
                if self.rg(*gamma) || self.rg(*beta) {
                    // per-feature affine in both batch and layer norm
                    let (dg, db) = ((dy * xhat).sum_axis(Axis(0)), dy.sum_axis(Axis(0)));
                    acc(*gamma, dg.insert_axis(Axis(0)));
                    acc(*beta, db.insert_axis(Axis(0)));
                }
                if self.rg(*x) {
                    let dxhat = dy * self.value(*gamma);
                    acc(*x, norm_input_grad(&dxhat, xhat, inv_std, *over_rows));
                }
            }
            Op::Lstm {
                xw,
                whh,
                segs,
                reverse,
                cache,
            } => {
                let (gxw, gwhh) = self.lstm_backward(dy, self.value(*whh), segs, *reverse, cache, &node.value);
                acc(*xw, gxw);
                if self.rg(*whh) {
                    acc(*whh, gwhh);
                }
            }
            Op::SegmentMean { x, segs } => {
                let c = dy.ncols();
                let mut gx = Mat::zeros((segs.total_rows(), c));
                for (si, &(start, len)) in segs.spans().iter().enumerate() {
                    let share = &dy.row(si) / len as f64;
                    for r in start..start + len {
                        gx.row_mut(r).assign(&share);
                    }
                }
                acc(*x, gx);
            }
            Op::WeightedSum {
                layers,
                logits,
                weights,
            } => {
                let dw: Vec<f64> = layers.iter().map(|&l| (dy * self.value(l)).sum()).collect();
                for (&l, &w) in layers.iter().zip(weights) {
                    if self.rg(l) {
                        acc(l, dy * w);
                    }
                }
                if self.rg(*logits) {
                    let mean: f64 = weights.iter().zip(&dw).map(|(w, d)| w * d).sum();
                    let g: Vec<f64> = weights.iter().zip(&dw).map(|(w, d)| w * (d - mean)).collect();
                    acc(*logits, Mat::from_shape_vec((1, g.len()), g).unwrap());
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                row_weights,
                probs,
            } => {
                let up = dy[[0, 0]];
                let mut g = probs.clone();
                for (r, (&t, &w)) in targets.iter().zip(row_weights).enumerate() {
                    g[[r, t]] -= 1.0;
                    g.row_mut(r).mapv_inplace(|v| v * w * up);
                }
                acc(*logits, g);
            }
            Op::SquaredError {
                pred,
                target,
                row_weights,
            } => {
                let up = dy[[0, 0]];
                let mut g = self.value(*pred) - target.as_ref();
                for (r, &w) in row_weights.iter().enumerate() {
                    g.row_mut(r).mapv_inplace(|v| 2.0 * w * up * v);
                }
                acc(*pred, g);
            }
            Op::Combine(terms) => {
                for &(v, c) in terms {
                    acc(v, dy * c);
                }
            }
        }
    }

    fn lstm_backward(
        &self,
        dy: &Mat,
        whh: &Mat,
        segs: &Segments,
        reverse: bool,
        cache: &LstmCache,
        hidden: &Mat,
    ) -> (Mat, Mat) {
        let h = whh.nrows();
        let rows = dy.nrows();
        let mut gxw = Mat::zeros((rows, 4 * h));
        let mut gwhh = Mat::zeros((h, 4 * h));
        let nseg = segs.len();
        let mut dh_next = Mat::zeros((nseg, h));
        let mut dc_next = Mat::zeros((nseg, h));

        for t in (0..segs.max_len()).rev() {
            // (segment, row, previous row in recurrence order)
            let active: Vec<(usize, usize, Option<usize>)> = segs
                .spans()
                .iter()
                .enumerate()
                .filter(|(_, &(_, len))| len > t)
                .map(|(si, &(start, len))| {
                    if reverse {
                        let row = start + len - 1 - t;
                        (si, row, (t > 0).then(|| row + 1))
                    } else {
                        let row = start + t;
                        (si, row, (t > 0).then(|| row - 1))
                    }
                })
                .collect();
            let mut dgates = Mat::zeros((active.len(), 4 * h));
            let mut hprev = Mat::zeros((active.len(), h));
            for (a, &(si, row, prev)) in active.iter().enumerate() {
                for j in 0..h {
                    let i_g = cache.gates[[row, j]];
                    let f_g = cache.gates[[row, h + j]];
                    let g_g = cache.gates[[row, 2 * h + j]];
                    let o_g = cache.gates[[row, 3 * h + j]];
                    let ct = cache.cell_tanh[[row, j]];
                    let c_prev = prev.map_or(0.0, |p| cache.cell[[p, j]]);
                    let dh = dy[[row, j]] + dh_next[[si, j]];
                    let d_o = dh * ct * o_g * (1.0 - o_g);
                    let dc = dh * o_g * (1.0 - ct * ct) + dc_next[[si, j]];
                    let d_i = dc * g_g * i_g * (1.0 - i_g);
                    let d_f = dc * c_prev * f_g * (1.0 - f_g);
                    let d_g = dc * i_g * (1.0 - g_g * g_g);
                    dgates[[a, j]] = d_i;
                    dgates[[a, h + j]] = d_f;
                    dgates[[a, 2 * h + j]] = d_g;
                    dgates[[a, 3 * h + j]] = d_o;
                    dc_next[[si, j]] = dc * f_g;
                }
                if let Some(p) = prev {
                    hprev.row_mut(a).assign(&hidden.row(p));
                }
                gxw.row_mut(row).assign(&dgates.row(a));
            }
            gwhh += &hprev.t().dot(&dgates);
            let dhp = dgates.dot(&whh.t());
            for (a, &(si, _, _)) in active.iter().enumerate() {
                dh_next.row_mut(si).assign(&dhp.row(a));
            }
        }
        (gxw, gwhh)
    }
}

fn norm_input_grad(dxhat: &Mat, xhat: &Mat, inv_std: &[f64], over_rows: bool) -> Mat {
    let mut dx = Mat::zeros(dxhat.raw_dim());
    if over_rows {
        let n = dxhat.nrows() as f64;
        let sum_d = dxhat.sum_axis(Axis(0));
        let sum_dx = (dxhat * xhat).sum_axis(Axis(0));
        Zip::indexed(&mut dx).for_each(|(r, c), out| {
            *out = inv_std[c] / n * (n * dxhat[[r, c]] - sum_d[c] - xhat[[r, c]] * sum_dx[c]);
        });
    } else {
        let n = dxhat.ncols() as f64;
        let sum_d = dxhat.sum_axis(Axis(1));
        let sum_dx = (dxhat * xhat).sum_axis(Axis(1));
        Zip::indexed(&mut dx).for_each(|(r, c), out| {
            *out = inv_std[r] / n * (n * dxhat[[r, c]] - sum_d[r] - xhat[[r, c]] * sum_dx[r]);
        });
    }
    dx
}

pub fn softmax_row(values: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Sums leaf gradients for every parameter of `owner`, indexed by id.
    pub fn collect(&self, graph: &Graph, owner: ParamOwner, store_len: usize) -> Vec<Option<Mat>> {
        let mut out: Vec<Option<Mat>> = (0..store_len).map(|_| None).collect();
        for (node, grad) in graph.nodes.iter().zip(&self.by_node) {
            let (Some((o, id)), Some(g)) = (node.param, grad) else { continue };
            if o != owner || !node.requires_grad {
                continue;
            }
            match &mut out[id.index()] {
                Some(existing) => *existing += g,
                slot => *slot = Some(g.clone()),
            }
        }
        out
    }
}

/// Copies `rows` of `m` into a new matrix.
pub fn gather_rows(m: ArrayView2<f64>, rows: impl IntoIterator<Item = usize>) -> Mat {
    let rows: Vec<usize> = rows.into_iter().collect();
    m.select(Axis(0), &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: &dyn Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut g = Mat::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn seeded(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Mat::from_shape_fn((rows, cols), |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    fn check(build: &dyn Fn(&mut Graph, Var) -> Var, x: Mat) {
        let f = |xv: &Mat| {
            let mut g = Graph::new();
            let v = g.push(xv.clone(), Op::Leaf, true);
            let out = build(&mut g, v);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let v = g.push(x.clone(), Op::Leaf, true);
        let out = build(&mut g, v);
        let grads = g.backward(out);
        let analytic = grads.of(v).unwrap().clone();
        let numeric = numeric_grad(&f, &x);
        let err = (&analytic - &numeric).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-6, "max abs grad error {err}\n{analytic}\n{numeric}");
    }

    fn reduce(g: &mut Graph, v: Var) -> Var {
        let rows = g.value(v).nrows();
        let cols = g.value(v).ncols();
        let target = Rc::new(seeded(rows, cols, 99));
        g.squared_error(v, target, vec![1.0; rows])
    }

    #[test]
    fn lstm_gradient_both_directions() {
        let segs = Rc::new(Segments::from_lengths(&[3, 1, 4]));
        let whh = seeded(2, 8, 5);
        for reverse in [false, true] {
            let s2 = segs.clone();
            let w2 = whh.clone();
            check(
                &move |g, v| {
                    let w = g.constant(w2.clone());
                    let o = g.lstm(v, w, s2.clone(), reverse);
                    reduce(g, o)
                },
                seeded(8, 8, 3),
            );
            let x = seeded(8, 8, 3);
            let s3 = segs.clone();
            check(
                &move |g, v| {
                    let xc = g.constant(x.clone());
                    let o = g.lstm(xc, v, s3.clone(), reverse);
                    reduce(g, o)
                },
                whh.clone(),
            );
        }
    }

    #[test]
    fn norm_gradients() {
        let gamma = seeded(1, 3, 8);
        let beta = seeded(1, 3, 9);
        let (g1, b1) = (gamma.clone(), beta.clone());
        check(
            &move |g, v| {
                let ga = g.constant(g1.clone());
                let be = g.constant(b1.clone());
                let (o, _) = g.batch_norm(v, ga, be, 1e-5);
                reduce(g, o)
            },
            seeded(5, 3, 1),
        );
        check(
            &move |g, v| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let o = g.layer_norm(v, ga, be, 1e-5);
                reduce(g, o)
            },
            seeded(4, 3, 2),
        );
    }

    #[test]
    fn im2col_and_pooling_gradients() {
        let segs = Rc::new(Segments::from_lengths(&[2, 3]));
        for kernel in [1, 2, 3, 4] {
            let s2 = segs.clone();
            check(
                &move |g, v| {
                    let o = g.im2col(v, kernel, s2.clone());
                    reduce(g, o)
                },
                seeded(5, 2, 4),
            );
        }
        check(
            &move |g, v| {
                let o = g.segment_mean(v, segs.clone());
                let o = g.gelu(o);
                reduce(g, o)
            },
            seeded(5, 3, 6),
        );
    }

    #[test]
    fn weighted_sum_and_ce_gradients() {
        let layers = [seeded(3, 2, 10), seeded(3, 2, 11), seeded(3, 2, 12)];
        check(
            &move |g, v| {
                let ls: Vec<Var> = layers.iter().map(|l| g.constant(l.clone())).collect();
                let o = g.weighted_sum(&ls, v);
                let o = g.tanh(o);
                reduce(g, o)
            },
            seeded(1, 3, 13),
        );
        check(
            &|g, v| g.cross_entropy(v, vec![0, 3, 2], vec![0.5, 0.25, 0.25]),
            seeded(3, 4, 14),
        );
    }

    #[test]
    fn im2col_same_padding_layout() {
        let mut g = Graph::new();
        let x = g.constant(Mat::from_shape_vec((3, 1), vec![1.0, 2.0, 3.0]).unwrap());
        let o = g.im2col(x, 3, Rc::new(Segments::from_lengths(&[2, 1])));
        let expected = Mat::from_shape_vec((3, 3), vec![0.0, 1.0, 2.0, 1.0, 2.0, 0.0, 0.0, 3.0, 0.0]).unwrap();
        assert_eq!(g.value(o), &expected);
    }
}
