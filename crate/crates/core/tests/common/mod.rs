//! Independent reference implementations and fixtures shared by the
//! integration tests. Everything here is deliberately naive: scalar loops,
//! exhaustive enumeration, full-batch iteration.
#![allow(dead_code, clippy::needless_range_loop)]

use std::rc::Rc;

use distilmos::autograd::{Graph, ParamOwner};
use distilmos::data::{collate, generate_synthetic_corpus, PaddedBatch};
use distilmos::losses::{objective, AuxTargets};
use distilmos::model::{DistilMos, HeadMode, Mode, ModelConfig};
use distilmos::params::ParamStore;
use distilmos::ssl_backend::{BackendSpec, SslBackend, SyntheticBackend};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- metrics ----

pub fn mean(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v;
    }
    s / x.len() as f64
}

/// Covariance over product of standard deviations; None on zero variance.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        cov += (x[i] - mx) * (y[i] - my);
        vx += (x[i] - mx) * (x[i] - mx);
        vy += (y[i] - my) * (y[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx * vy).sqrt())
}

/// Rank of each value = 1 + (#smaller) + (#equal others)/2.
pub fn ranks_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            1.0 + less + (equal - 1.0) / 2.0
        })
        .collect()
}

pub fn srcc_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson_oracle(&ranks_oracle(x), &ranks_oracle(y))
}

/// Tau-b by enumerating every pair.
pub fn ktau_oracle(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut conc, mut disc, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    let mut n0 = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            n0 += 1;
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 {
                tie_x += 1;
            }
            if dy == 0.0 {
                tie_y += 1;
            }
            if dx * dy > 0.0 {
                conc += 1;
            } else if dx * dy < 0.0 {
                disc += 1;
            }
        }
    }
    let den = (((n0 - tie_x) * (n0 - tie_y)) as f64).sqrt();
    if den == 0.0 {
        return None;
    }
    Some((conc - disc) as f64 / den)
}

pub fn mse_oracle(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..x.len() {
        s += (x[i] - y[i]) * (x[i] - y[i]);
    }
    s / x.len() as f64
}

/// Random vector of small integers (heavy ties) or continuous values.
pub fn metric_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(2..=20);
    let tied = rng.random_bool(0.6);
    let draw = |rng: &mut ChaCha8Rng| {
        if tied {
            rng.random_range(1..=5) as f64 * 0.5
        } else {
            rng.random_range(1.0..5.0)
        }
    };
    let x: Vec<f64> = (0..n).map(|_| draw(rng)).collect();
    let y: Vec<f64> = x.iter().map(|&v| if rng.random_bool(0.5) { v } else { draw(rng) }).collect();
    (x, y)
}

// ---- losses ----

pub fn ce_oracle(logits: &Array2<f64>, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for t in 0..logits.nrows() {
        if !mask[t] {
            continue;
        }
        let mut denom = 0.0;
        for c in 0..logits.ncols() {
            denom += logits[[t, c]].exp();
        }
        total -= (logits[[t, targets[t]]].exp() / denom).ln();
        count += 1.0;
    }
    total / count
}

// ---- k-means ----

/// Index of the nearest centroid by exhaustive search; first index wins
/// ties.
pub fn nearest_oracle(centroids: &Array2<f32>, frame: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for c in 0..centroids.nrows() {
        let mut d = 0.0;
        for j in 0..frame.len() {
            let diff = frame[j] - centroids[[c, j]] as f64;
            d += diff * diff;
        }
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Full-batch Lloyd iterations to convergence.
pub fn lloyd(points: &Array2<f64>, init: &Array2<f64>, max_iter: usize) -> Array2<f64> {
    let mut centers = init.clone();
    for _ in 0..max_iter {
        let k = centers.nrows();
        let mut sums = Array2::<f64>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; k];
        for p in points.rows() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d: f64 = p.iter().zip(centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            counts[best] += 1;
            let mut row = sums.row_mut(best);
            row += &p;
        }
        let mut next = centers.clone();
        for c in 0..k {
            if counts[c] > 0 {
                next.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
        let shift: f64 = (&next - &centers).iter().map(|v| v * v).sum();
        centers = next;
        if shift < 1e-20 {
            break;
        }
    }
    centers
}

pub fn kmeans_objective(points: &Array2<f64>, centers: &Array2<f64>) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|p| {
            centers
                .rows()
                .into_iter()
                .map(|c| p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / points.nrows() as f64
}

// ---- CCA ----

fn covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    for i in 0..a.ncols() {
        let ma = a.column(i).mean();
        for j in 0..b.ncols() {
            let mb = b.column(j).mean();
            let mut s = 0.0;
            for r in 0..n {
                s += (a[(r, i)] - ma) * (b[(r, j)] - mb);
            }
            out[(i, j)] = s / (n - 1) as f64;
        }
    }
    out
}

/// Mean canonical correlation through the generalized eigenproblem
/// `Sxy Syy⁻¹ Syx a = ρ² Sxx a`, reduced with a Cholesky factor of `Sxx`.
/// `x` should be the side with fewer columns.
pub fn cca_oracle(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let to = |m: &Array2<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]]);
    let (xm, ym) = (to(x), to(y));
    let sxx = covariance(&xm, &xm);
    let syy = covariance(&ym, &ym);
    let sxy = covariance(&xm, &ym);
    let l = sxx.cholesky().expect("Sxx positive definite").l();
    let l_inv = l.clone().try_inverse().expect("invertible");
    let syy_inv = syy.try_inverse().expect("Syy invertible");
    let m = &l_inv * &sxy * syy_inv * sxy.transpose() * l_inv.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let d = x.ncols().min(y.ncols());
    let mut rho: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt().min(1.0)).collect();
    rho.sort_by(|a, b| b.total_cmp(a));
    rho[..d].iter().sum::<f64>() / d as f64
}

// ---- model fixtures ----

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Batch of synthetic utterances cut to the given frame counts.
pub fn batch_with_frames(frames: &[usize], hop: usize, seed: u64) -> PaddedBatch {
    let corpus = generate_synthetic_corpus(frames.len().max(3), seed).unwrap();
    let mut utts: Vec<_> = corpus.entries.iter().take(frames.len()).cloned().collect();
    for (u, &t) in utts.iter_mut().zip(frames) {
        let wave = u.waveform().unwrap();
        let mut w: Vec<f32> = wave.iter().copied().cycle().take(t * hop).collect();
        w.truncate(t * hop);
        u.audio = distilmos::data::AudioSource::Inline(std::sync::Arc::new(w));
    }
    let refs: Vec<_> = utts.iter().collect();
    collate(&refs).unwrap()
}

pub struct TinySetup {
    pub model: DistilMos,
    pub backend: SyntheticBackend,
    pub batch: PaddedBatch,
    pub tokens: Vec<Vec<usize>>,
    pub alpha: f64,
}

/// The gradient-check configuration: N=2, D=8, hidden 16, k=8, T=5.
pub fn tiny_setup(head_mode: HeadMode, frames: &[usize]) -> TinySetup {
    let spec = BackendSpec::synthetic(2, 8);
    let backend = SyntheticBackend::new(spec.clone(), 11).unwrap();
    let mut cfg = ModelConfig::new(2, 8);
    cfg.hidden_dim = 16;
    cfg.n_clusters = 8;
    cfg.head_mode = head_mode;
    let mut model = DistilMos::new(cfg, 12).unwrap();
    // non-trivial layer logits so the softmax derivative is exercised
    let id = model.layer_logits_id();
    model.params_mut().value_mut(id).assign(&ndarray::arr2(&[[0.3, -0.2]]));
    let batch = batch_with_frames(frames, spec.hop(), 13);
    let rows: usize = frames.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tokens = (0..2).map(|_| (0..rows).map(|_| rng.random_range(0..8)).collect()).collect();
    TinySetup {
        model,
        backend,
        batch,
        tokens,
        alpha: 0.1,
    }
}

/// Full training objective of the tiny setup for the current parameters.
pub fn tiny_loss(s: &TinySetup, track: bool) -> (Graph, distilmos::autograd::Var) {
    let mut g = Graph::new();
    let (layers, segs) = s.backend.encode_graph(&mut g, &s.batch, track).unwrap();
    let out = s.model.forward_graph(&mut g, &layers, &segs, Mode::Train, track).unwrap();
    let aux = match s.model.config().head_mode {
        HeadMode::TokenPrediction => AuxTargets::Tokens(s.tokens.clone()),
        HeadMode::None => AuxTargets::None,
        HeadMode::MseDistillation => {
            let rows = segs.total_rows();
            AuxTargets::Embeddings((0..2).map(|n| Rc::new(random_matrix(rows, 8, 20 + n))).collect())
        }
    };
    let obj = objective(&mut g, &out, &s.batch.mos, &aux, s.alpha).unwrap();
    (g, obj.total)
}

pub const GRAD_FLOOR: f64 = 1e-6;

pub struct GradReport {
    pub name: String,
    pub rel_error: f64,
    pub checked: usize,
}

/// Central differences on up to `per_tensor` entries of every trainable
/// tensor of both stores, compared with the tape's gradients. The error
/// is relative to the larger gradient norm, floored at `GRAD_FLOOR`: a conv
/// bias feeding batch norm has an exactly zero gradient, and there the
/// central difference is pure round-off (about 1e-10 at h = 1e-5).
pub fn gradient_check(s: &mut TinySetup, per_tensor: usize, h: f64) -> Vec<GradReport> {
    let (g, root) = tiny_loss(s, true);
    let grads = g.backward(root);
    let model_grads = grads.collect(&g, ParamOwner::Model, s.model.params().len());
    let backend_grads = grads.collect(&g, ParamOwner::Backend, s.backend.params().len());
    drop(grads);
    drop(g);

    let mut reports = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for owner in [ParamOwner::Model, ParamOwner::Backend] {
        let store_len = match owner {
            ParamOwner::Model => s.model.params().len(),
            ParamOwner::Backend => s.backend.params().len(),
        };
        for idx in 0..store_len {
            let (name, kind, len, ncols) = {
                let store: &ParamStore = match owner {
                    ParamOwner::Model => s.model.params(),
                    ParamOwner::Backend => s.backend.params(),
                };
                let e = &store.entries()[idx];
                (e.name.clone(), e.kind, e.value.len(), e.value.ncols())
            };
            if kind != distilmos::params::TensorKind::Trainable {
                continue;
            }
            let analytic = match owner {
                ParamOwner::Model => &model_grads[idx],
                ParamOwner::Backend => &backend_grads[idx],
            };
            let analytic = analytic.clone().unwrap_or_else(|| panic!("no gradient for {name}"));
            let picks: Vec<usize> = if len <= per_tensor {
                (0..len).collect()
            } else {
                (0..per_tensor).map(|_| rng.random_range(0..len)).collect()
            };
            let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
            for &flat in &picks {
                let (r, c) = (flat / ncols, flat % ncols);
                let eval = |delta: f64, s: &mut TinySetup| {
                    let store = match owner {
                        ParamOwner::Model => s.model.params_mut(),
                        ParamOwner::Backend => s.backend.params_mut(),
                    };
                    let id = store.ids().nth(idx).unwrap();
                    store.value_mut(id)[[r, c]] += delta;
                };
                eval(h, s);
                let up = {
                    let (g, v) = tiny_loss(s, false);
                    g.scalar(v)
                };
                eval(-2.0 * h, s);
                let down = {
                    let (g, v) = tiny_loss(s, false);
                    g.scalar(v)
                };
                eval(h, s);
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[[r, c]];
                diff += (a - numeric) * (a - numeric);
                norm_a += a * a;
                norm_n += numeric * numeric;
            }
            let scale = norm_a.sqrt().max(norm_n.sqrt()).max(GRAD_FLOOR);
            reports.push(GradReport {
                name: format!("{owner:?}/{name}"),
                rel_error: diff.sqrt() / scale,
                checked: picks.len(),
            });
        }
    }
    reports
}
