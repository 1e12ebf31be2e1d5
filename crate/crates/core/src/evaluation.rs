//! Correlation and error metrics at utterance and system level, and batched
//! inference over a manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{collate, Utterance};
use crate::model::DistilMos;
use crate::ssl_backend::SslBackend;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("zero variance input; correlation undefined")]
    DegenerateInput,
    #[error("inputs have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-finite metric input")]
    NonFinite,
    #[error("malformed prediction dump line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

fn check(x: &[f64], y: &[f64], needed: usize) -> Result<(), MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < needed {
        return Err(MetricError::TooFewPoints { needed, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::DegenerateInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson linear correlation.
pub fn lcc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check(x, y, 2)?;
    pearson(x, y)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation (Pearson on average ranks).
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check(x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Sum of t(t-1)/2 over runs of equal values in a sorted sequence.
fn tied_pairs<T: PartialEq>(sorted: impl Iterator<Item = T>) -> u64 {
    let mut total = 0u64;
    let mut prev: Option<T> = None;
    let mut run = 0u64;
    for v in sorted {
        if prev.as_ref() == Some(&v) {
            run += 1;
        } else {
            total += run * run.saturating_sub(1) / 2;
            run = 1;
            prev = Some(v);
        }
    }
    total + run * run.saturating_sub(1) / 2
}

/// Stable merge sort of `v` counting exchanges (strict inversions).
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf[k] = v[i];
            i += 1;
        } else {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b, O(n log n).
pub fn ktau(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check(x, y, 2)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let n0 = n * (n - 1) / 2;
    let tx = tied_pairs(pairs.iter().map(|p| p.0));
    let txy = tied_pairs(pairs.iter().map(|p| (p.0, p.1)));
    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let swaps = merge_count(&mut ys, &mut buf);
    let ty = tied_pairs(ys.iter().copied());
    if tx == n0 || ty == n0 {
        return Err(MetricError::DegenerateInput);
    }
    // concordant - discordant = n0 - tx - ty + txy - 2 * discordant
    let num = n0 as f64 - tx as f64 - ty as f64 + txy as f64 - 2.0 * swaps as f64;
    let den = ((n0 - tx) as f64).sqrt() * ((n0 - ty) as f64).sqrt();
    Ok((num / den).clamp(-1.0, 1.0))
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    check(x, y, 1)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub utterance_id: String,
    pub system_id: String,
    pub predicted: f64,
    pub target: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub rows: Vec<PredictionRow>,
}

impl PredictionSet {
    pub fn predicted(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.predicted).collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.target).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("utterance_id\tsystem_id\tpredicted\ttarget\n");
        for r in &self.rows {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.utterance_id, r.system_id, r.predicted, r.target));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, MetricError> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| MetricError::Malformed {
                line: i + 1,
                reason: reason.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            rows.push(PredictionRow {
                utterance_id: f[0].to_string(),
                system_id: f[1].to_string(),
                predicted: f[2].parse().map_err(|_| bad("predicted"))?,
                target: f[3].parse().map_err(|_| bad("target"))?,
            });
        }
        Ok(Self { rows })
    }
}

/// One row per system with mean prediction and mean target, keyed and
/// ordered by system id.
pub fn system_level(preds: &PredictionSet) -> PredictionSet {
    let mut acc: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in &preds.rows {
        let e = acc.entry(&r.system_id).or_insert((0.0, 0.0, 0));
        e.0 += r.predicted;
        e.1 += r.target;
        e.2 += 1;
    }
    PredictionSet {
        rows: acc
            .into_iter()
            .map(|(sys, (p, t, n))| PredictionRow {
                utterance_id: sys.to_string(),
                system_id: sys.to_string(),
                predicted: p / n as f64,
                target: t / n as f64,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Utterance,
    System,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Utterance => "utterance",
            Level::System => "system",
        }
    }
}

/// Correlations are `None` when undefined (degenerate input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub level: Level,
    pub n: usize,
    pub lcc: Option<f64>,
    pub srcc: Option<f64>,
    pub ktau: Option<f64>,
    pub mse: f64,
}

impl MetricReport {
    pub fn compute(set: &PredictionSet, level: Level) -> Result<Self, MetricError> {
        let (p, t) = (set.predicted(), set.targets());
        let defined = |r: Result<f64, MetricError>| match r {
            Ok(v) => Ok(Some(v)),
            Err(MetricError::DegenerateInput | MetricError::TooFewPoints { .. }) => Ok(None),
            Err(e) => Err(e),
        };
        Ok(Self {
            level,
            n: p.len(),
            lcc: defined(lcc(&p, &t))?,
            srcc: defined(srcc(&p, &t))?,
            ktau: defined(ktau(&p, &t))?,
            mse: mse(&p, &t)?,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.3}"));
        write!(
            f,
            "level={} n={} LCC={} SRCC={} KTAU={} MSE={:.3}",
            self.level.as_str(),
            self.n,
            show(self.lcc),
            show(self.srcc),
            show(self.ktau),
            self.mse
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: PredictionSet,
    pub utterance: MetricReport,
    pub system: Option<MetricReport>,
}

impl Evaluation {
    pub fn from_predictions(predictions: PredictionSet, system: bool) -> Result<Self, MetricError> {
        let utterance = MetricReport::compute(&predictions, Level::Utterance)?;
        let system = if system {
            Some(MetricReport::compute(&system_level(&predictions), Level::System)?)
        } else {
            None
        };
        Ok(Self {
            predictions,
            utterance,
            system,
        })
    }

    pub fn write_dump(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.predictions.to_tsv())
    }
}

/// Inference over `utts` in batches of `batch_size`. Audio must be loaded.
pub fn predict_utterances<B: SslBackend + ?Sized>(
    model: &DistilMos,
    backend: &B,
    utts: &[&Utterance],
    batch_size: usize,
) -> crate::Result<PredictionSet> {
    let mut rows = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(batch_size.max(1)) {
        let batch = collate(chunk)?;
        let preds = model.predict(backend, &batch)?;
        for (u, p) in chunk.iter().zip(preds) {
            rows.push(PredictionRow {
                utterance_id: u.id.clone(),
                system_id: u.system_id.clone(),
                predicted: p,
                target: u.mos,
            });
        }
    }
    Ok(PredictionSet { rows })
}

/// Runs inference and computes the utterance-level report, plus the
/// system-level one when `system` is set.
pub fn evaluate<B: SslBackend + ?Sized>(
    model: &DistilMos,
    backend: &B,
    utts: &[&Utterance],
    batch_size: usize,
    system: bool,
) -> crate::Result<Evaluation> {
    let preds = predict_utterances(model, backend, utts, batch_size)?;
    Ok(Evaluation::from_predictions(preds, system)?)
}
