//! Layer-wise canonical correlation analysis between pooled model
//! representations and pooled encoder layer outputs.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{collate, Utterance};
use crate::model::{DistilMos, Mode};
use crate::ssl_backend::SslBackend;

#[derive(Debug, Error)]
pub enum CcaError {
    #[error("covariance is rank deficient after regularization")]
    RankDeficient,
    #[error("need at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("row counts differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
}

/// Relative ridge strength, scaled by the mean variance of each block.
pub const RIDGE_SCALE: f64 = 1e-6;

/// Eigenvalues below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CcaSummary {
    #[default]
    Mean,
    Top1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaCurve {
    pub model_tag: String,
    /// One value per encoder layer, layer 1 first.
    pub values: Vec<f64>,
}

/// Masked temporal mean of `[T × d]` features.
pub fn masked_mean(x: ArrayView2<f64>, mask: &[bool]) -> Array1<f64> {
    let mut sum = Array1::zeros(x.ncols());
    let mut count = 0usize;
    for (row, _) in x.rows().into_iter().zip(mask).filter(|(_, &m)| m) {
        sum += &row;
        count += 1;
    }
    if count > 0 {
        sum /= count as f64;
    }
    sum
}

/// Pooled encoder outputs, one `[U × D]` matrix per layer.
pub fn pooled_layer_reps<B: SslBackend + ?Sized>(backend: &B, utts: &[&Utterance], batch_size: usize) -> crate::Result<Vec<Array2<f64>>> {
    let spec = backend.spec();
    let mut out = vec![Array2::zeros((utts.len(), spec.dim)); spec.n_layers];
    let mut row = 0;
    for chunk in utts.chunks(batch_size.max(1)) {
        let batch = collate(chunk)?;
        for stack in backend.encode(&batch)? {
            for (n, reps) in out.iter_mut().enumerate() {
                reps.row_mut(row).assign(&masked_mean(stack.layer(n), &stack.mask));
            }
            row += 1;
        }
    }
    Ok(out)
}

/// Pooled Feature Processor outputs `[U × H]`.
pub fn pooled_fp_reps<B: SslBackend + ?Sized>(
    model: &DistilMos,
    backend: &B,
    utts: &[&Utterance],
    batch_size: usize,
) -> crate::Result<Array2<f64>> {
    let mut out = Array2::zeros((utts.len(), model.config().hidden_dim));
    let mut row = 0;
    for chunk in utts.chunks(batch_size.max(1)) {
        let batch = collate(chunk)?;
        for o in model.forward(backend, &batch, Mode::Inference)? {
            let mask = vec![true; o.fp_features.nrows()];
            out.row_mut(row).assign(&masked_mean(o.fp_features.view(), &mask));
            row += 1;
        }
    }
    Ok(out)
}

fn to_dmatrix(x: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[[i, j]])
}

fn centered(x: &Array2<f64>) -> DMatrix<f64> {
    let mut m = to_dmatrix(x);
    for mut col in m.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    m
}

/// Inverse square root of a covariance block. A ridge of
/// `RIDGE_SCALE · trace/d` is added only when the block is numerically
/// singular, which always happens when there are fewer than `d + 1`
/// samples. Full-rank blocks are whitened exactly.
fn whitener(cov: DMatrix<f64>) -> Result<DMatrix<f64>, CcaError> {
    let d = cov.nrows();
    let trace = cov.trace();
    if !(trace > 0.0) {
        return Err(CcaError::RankDeficient);
    }
    let eig = SymmetricEigen::new(cov.clone());
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let needs_ridge = min <= RANK_TOL * max;
    let eig = if needs_ridge {
        let ridge = RIDGE_SCALE * trace / d as f64;
        SymmetricEigen::new(cov + DMatrix::identity(d, d) * ridge)
    } else {
        eig
    };
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
        return Err(CcaError::RankDeficient);
    }
    let inv_sqrt = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose())
}

/// Canonical correlations of `x` `[U × d1]` and `y` `[U × d2]`, largest
/// first, `min(d1, d2)` of them.
pub fn canonical_correlations(x: &Array2<f64>, y: &Array2<f64>) -> Result<Vec<f64>, CcaError> {
    if x.nrows() != y.nrows() {
        return Err(CcaError::ShapeMismatch(x.nrows(), y.nrows()));
    }
    let u = x.nrows();
    if u < 3 {
        return Err(CcaError::TooFewSamples(u));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(CcaError::NonFinite);
    }
    let (xc, yc) = (centered(x), centered(y));
    let scale = 1.0 / (u - 1) as f64;
    let sxx = xc.transpose() * &xc * scale;
    let syy = yc.transpose() * &yc * scale;
    let sxy = xc.transpose() * &yc * scale;
    let wx = whitener(sxx)?;
    let wy = whitener(syy)?;
    let m = wx * sxy * wy;
    let mut sv: Vec<f64> = m.singular_values().iter().map(|s| s.clamp(0.0, 1.0)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.truncate(x.ncols().min(y.ncols()));
    Ok(sv)
}

pub fn cca_similarity(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64, CcaError> {
    cca_similarity_with(x, y, CcaSummary::Mean)
}

pub fn cca_similarity_with(x: &Array2<f64>, y: &Array2<f64>, summary: CcaSummary) -> Result<f64, CcaError> {
    let rho = canonical_correlations(x, y)?;
    Ok(match summary {
        CcaSummary::Mean => rho.iter().sum::<f64>() / rho.len() as f64,
        CcaSummary::Top1 => rho[0],
    })
}

/// Similarity of `reps` with each layer in `layer_reps`.
pub fn cca_curve(tag: &str, reps: &Array2<f64>, layer_reps: &[Array2<f64>], summary: CcaSummary) -> Result<CcaCurve, CcaError> {
    let values = layer_reps
        .iter()
        .map(|layer| cca_similarity_with(reps, layer, summary))
        .collect::<Result<_, _>>()?;
    Ok(CcaCurve {
        model_tag: tag.to_string(),
        values,
    })
}

/// Where a variant's representation comes from.
pub enum RepSource<'a> {
    /// Feature Processor output of a model running on its own encoder.
    FeatureProcessor {
        model: &'a DistilMos,
        backend: &'a dyn SslBackend,
    },
    /// Final layer of a (fine-tuned) encoder.
    FinalLayer { backend: &'a dyn SslBackend },
}

pub struct AnalysisEntry<'a> {
    pub tag: String,
    pub source: RepSource<'a>,
}

/// One curve per entry against the pooled layers of `reference`.
pub fn analyze(
    entries: &[AnalysisEntry<'_>],
    reference: &dyn SslBackend,
    utts: &[&Utterance],
    batch_size: usize,
    summary: CcaSummary,
) -> crate::Result<Vec<CcaCurve>> {
    let ref_spec = reference.spec();
    let layers = pooled_layer_reps(reference, utts, batch_size)?;
    let mut curves = Vec::with_capacity(entries.len());
    for entry in entries {
        let backend = match &entry.source {
            RepSource::FeatureProcessor { backend, .. } | RepSource::FinalLayer { backend } => *backend,
        };
        let spec = backend.spec();
        if spec.n_layers != ref_spec.n_layers || spec.dim != ref_spec.dim {
            return Err(CcaError::IncompatibleCheckpoint(format!(
                "{}: encoder {}x{} differs from reference {}x{}",
                entry.tag, spec.n_layers, spec.dim, ref_spec.n_layers, ref_spec.dim
            ))
            .into());
        }
        let reps = match &entry.source {
            RepSource::FeatureProcessor { model, backend } => pooled_fp_reps(model, *backend, utts, batch_size)?,
            RepSource::FinalLayer { backend } => pooled_layer_reps(*backend, utts, batch_size)?
                .pop()
                .expect("at least one layer"),
        };
        curves.push(cca_curve(&entry.tag, &reps, &layers, summary)?);
    }
    Ok(curves)
}

/// Tab-separated table with one row per layer and one column per curve.
pub fn curves_to_table(curves: &[CcaCurve]) -> String {
    let mut out = String::from("layer");
    for c in curves {
        out.push('\t');
        out.push_str(&c.model_tag);
    }
    out.push('\n');
    let n = curves.iter().map(|c| c.values.len()).max().unwrap_or(0);
    for layer in 0..n {
        out.push_str(&(layer + 1).to_string());
        for c in curves {
            out.push('\t');
            if let Some(v) = c.values.get(layer) {
                out.push_str(&format!("{v:.6}"));
            }
        }
        out.push('\n');
    }
    out
}
