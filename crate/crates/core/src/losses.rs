//! Training objectives: MOS regression, per-layer token cross-entropy, the
//! weighted combination of the two, and the embedding-regression loss used
//! by the MSE-distillation ablation.
//!
//! The scalar functions here are the reference definitions. `objective`
//! builds the same quantities on a tape for training.

use std::rc::Rc;

use ndarray::{Array3, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Mat, Var};
use crate::model::{GraphOutput, HeadMode};
use crate::ssl_backend::LayerStack;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("non-finite loss input")]
    NonFiniteInput,
    #[error("target token {target} out of range for k = {k}")]
    TargetOutOfRange { target: usize, k: usize },
    #[error("every frame is masked")]
    AllFramesMasked,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mos: f64,
    /// Per-layer auxiliary losses (cross-entropy or embedding MSE).
    pub l_ce_per_layer: Vec<f64>,
    pub l_aux_mean: f64,
    pub total: f64,
    pub alpha: f64,
}

pub fn mos_loss(pred: f64, target: f64) -> Result<f64, LossError> {
    if !pred.is_finite() || !target.is_finite() {
        return Err(LossError::NonFiniteInput);
    }
    Ok((pred - target) * (pred - target))
}

/// Mean of per-utterance squared errors.
pub fn mos_loss_batch(preds: &[f64], targets: &[f64]) -> Result<f64, LossError> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(LossError::ShapeMismatch(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut sum = 0.0;
    for (&p, &t) in preds.iter().zip(targets) {
        sum += mos_loss(p, t)?;
    }
    Ok(sum / preds.len() as f64)
}

/// Mean negative log-likelihood of `targets` over unmasked frames.
pub fn token_ce_loss(logits: ArrayView2<f64>, targets: &[usize], mask: &[bool]) -> Result<f64, LossError> {
    let (t, k) = logits.dim();
    if targets.len() != t || mask.len() != t {
        return Err(LossError::ShapeMismatch(format!(
            "logits have {t} frames, targets {}, mask {}",
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((row, &target), _) in logits.rows().into_iter().zip(targets).zip(mask).filter(|(_, &m)| m) {
        if target >= k {
            return Err(LossError::TargetOutOfRange { target, k });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(LossError::NonFiniteInput);
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[target];
        count += 1;
    }
    if count == 0 {
        return Err(LossError::AllFramesMasked);
    }
    Ok(total / count as f64)
}

/// `total = l_mos + alpha · mean(aux)`; an empty `aux` means no auxiliary
/// objective, and then `total` is `l_mos` exactly.
pub fn combined_loss(l_mos: f64, aux: &[f64], alpha: f64) -> LossBreakdown {
    debug_assert!(alpha >= 0.0, "alpha must be non-negative");
    let (l_aux_mean, total) = if aux.is_empty() {
        (0.0, l_mos)
    } else {
        let mean = aux.iter().sum::<f64>() / aux.len() as f64;
        (mean, l_mos + alpha * mean)
    };
    LossBreakdown {
        l_mos,
        l_ce_per_layer: aux.to_vec(),
        l_aux_mean,
        total,
        alpha,
    }
}

/// Per-layer mean squared error over unmasked frames and channels.
pub fn embed_mse_loss(preds: &Array3<f64>, targets: &LayerStack, mask: &[bool]) -> Result<Vec<f64>, LossError> {
    if preds.dim() != targets.features.dim() || mask.len() != preds.dim().1 {
        return Err(LossError::ShapeMismatch(format!(
            "predictions {:?}, targets {:?}, mask {}",
            preds.dim(),
            targets.features.dim(),
            mask.len()
        )));
    }
    let (n_layers, _, dim) = preds.dim();
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(LossError::AllFramesMasked);
    }
    let mut out = Vec::with_capacity(n_layers);
    for n in 0..n_layers {
        let mut sum = 0.0;
        for (t, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for d in 0..dim {
                let e = preds[[n, t, d]] - targets.features[[n, t, d]];
                sum += e * e;
            }
        }
        out.push(sum / (valid * dim) as f64);
    }
    Ok(out)
}

/// Auxiliary targets for one packed batch.
#[derive(Debug, Clone)]
pub enum AuxTargets {
    None,
    /// Per layer, one token per packed row.
    Tokens(Vec<Vec<usize>>),
    /// Per layer, `[rows × D]` pretrained features.
    Embeddings(Vec<Rc<Mat>>),
}

impl AuxTargets {
    fn head_mode(&self) -> HeadMode {
        match self {
            AuxTargets::None => HeadMode::None,
            AuxTargets::Tokens(_) => HeadMode::TokenPrediction,
            AuxTargets::Embeddings(_) => HeadMode::MseDistillation,
        }
    }
}

/// Loss nodes recorded on a tape.
pub struct Objective {
    pub total: Var,
    pub l_mos: Var,
    pub aux: Vec<Var>,
    pub alpha: f64,
}

impl Objective {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let aux: Vec<f64> = self.aux.iter().map(|&v| g.scalar(v)).collect();
        combined_loss(g.scalar(self.l_mos), &aux, self.alpha)
    }
}

/// Records the combined objective for a forward pass. Reductions match the
/// scalar functions: utterances weigh equally, and within an utterance
/// frames (and channels) weigh equally.
pub fn objective(g: &mut Graph, out: &GraphOutput, mos: &[f64], aux: &AuxTargets, alpha: f64) -> Result<Objective, LossError> {
    let segs = &out.segs;
    let b = segs.len();
    if mos.len() != b {
        return Err(LossError::ShapeMismatch(format!("{} targets for {b} utterances", mos.len())));
    }
    if mos.iter().any(|v| !v.is_finite()) || g.value(out.mos).iter().any(|v| !v.is_finite()) {
        return Err(LossError::NonFiniteInput);
    }
    let target = Rc::new(Mat::from_shape_vec((b, 1), mos.to_vec()).expect("shape"));
    let l_mos = g.squared_error(out.mos, target, vec![1.0 / b as f64; b]);

    let frame_weights = |width: usize| -> Vec<f64> {
        segs.spans()
            .iter()
            .flat_map(|&(_, len)| std::iter::repeat_n(1.0 / (b * len * width) as f64, len))
            .collect()
    };

    if out.aux.is_empty() && aux.head_mode() != HeadMode::None {
        return Err(LossError::ShapeMismatch("auxiliary targets given without auxiliary outputs".into()));
    }
    let aux_nodes: Vec<Var> = match aux {
        AuxTargets::None => Vec::new(),
        AuxTargets::Tokens(per_layer) => {
            if per_layer.len() != out.aux.len() {
                return Err(LossError::ShapeMismatch(format!("{} token layers for {} heads", per_layer.len(), out.aux.len())));
            }
            let weights = frame_weights(1);
            let mut nodes = Vec::with_capacity(per_layer.len());
            for (&logits, tokens) in out.aux.iter().zip(per_layer) {
                let k = g.value(logits).ncols();
                if tokens.len() != segs.total_rows() {
                    return Err(LossError::ShapeMismatch("token count".into()));
                }
                if let Some(&bad) = tokens.iter().find(|&&t| t >= k) {
                    return Err(LossError::TargetOutOfRange { target: bad, k });
                }
                nodes.push(g.cross_entropy(logits, tokens.clone(), weights.clone()));
            }
            nodes
        }
        AuxTargets::Embeddings(per_layer) => {
            if per_layer.len() != out.aux.len() {
                return Err(LossError::ShapeMismatch(format!("{} target layers for {} heads", per_layer.len(), out.aux.len())));
            }
            let mut nodes = Vec::with_capacity(per_layer.len());
            for (&pred, target) in out.aux.iter().zip(per_layer) {
                if g.value(pred).dim() != target.dim() {
                    return Err(LossError::ShapeMismatch("embedding target".into()));
                }
                let weights = frame_weights(target.ncols());
                nodes.push(g.squared_error(pred, target.clone(), weights));
            }
            nodes
        }
    };

    let total = if aux_nodes.is_empty() {
        l_mos
    } else {
        let mut terms = vec![(l_mos, 1.0)];
        let c = alpha / aux_nodes.len() as f64;
        terms.extend(aux_nodes.iter().map(|&v| (v, c)));
        g.combine(&terms)
    };
    if !g.scalar(total).is_finite() {
        return Err(LossError::NonFiniteInput);
    }
    Ok(Objective {
        total,
        l_mos,
        aux: aux_nodes,
        alpha,
    })
}
