//! Per-layer k-means codebooks fit by streaming mini-batch updates, and the
//! token sequences they induce.
//!
//! Fitting follows Sculley's web-scale k-means: centers are seeded with
//! k-means++ over the first buffered frames, then every mini-batch assigns
//! its frames to the current centers and moves each center toward its
//! frames with per-center step `1 / count`. Counts start at zero, so the
//! seed centers only decide the first assignments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{collate, CorpusManifest, DataError, Split, Utterance};
use crate::ssl_backend::{BackendError, LayerStack, SslBackend};

pub const DEFAULT_K: usize = 200;
pub const DEFAULT_BATCH_SIZE: usize = 64;
pub const SWEEP_KS: [usize; 6] = [50, 100, 150, 200, 250, 300];
const MAGIC: &[u8; 4] = b"DMKM";
const ENCODE_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("layer {layer}: {frames} frames seen, need at least k = {k}")]
    InsufficientData { layer: usize, frames: usize, k: usize },
    #[error("feature dim {found} does not match expected {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("no codebook for layer {0}")]
    MissingLayerCodebook(usize),
    #[error("corrupt codebook file: {0}")]
    CorruptFile(String),
    #[error("invalid tokenizer parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// 1-based encoder layer index.
    pub layer_index: usize,
    /// `[k × D]`
    pub centroids: Array2<f32>,
    pub seed: u64,
    /// Frames consumed while fitting; not persisted.
    pub n_frames_seen: u64,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Mean squared distance of each frame to its assigned centroid.
    pub fn quantization_error(&self, frames: ArrayView2<f64>) -> Result<f64, TokenizerError> {
        let tokens = assign(self, frames)?;
        let total: f64 = tokens
            .iter()
            .zip(frames.rows())
            .map(|(&c, f)| sq_dist_f32(f.iter().copied(), self.centroids.row(c).iter().copied()))
            .sum();
        Ok(total / frames.nrows().max(1) as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub utterance_id: String,
    /// `[N × T]`
    pub tokens: Array2<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_dist_f32(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f32>) -> f64 {
    a.zip(b)
        .map(|(x, y)| {
            let d = x - y as f64;
            d * d
        })
        .sum()
}

fn nearest(centroids: &[f64], dim: usize, frame: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(center, frame);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Nearest centroid under squared Euclidean distance; ties go to the lowest
/// index.
pub fn assign(codebook: &Codebook, frames: ArrayView2<f64>) -> Result<Vec<usize>, TokenizerError> {
    if frames.ncols() != codebook.dim() {
        return Err(TokenizerError::DimMismatch {
            expected: codebook.dim(),
            found: frames.ncols(),
        });
    }
    let centers: Vec<f64> = codebook.centroids.iter().map(|&v| v as f64).collect();
    let dim = codebook.dim();
    Ok(frames
        .rows()
        .into_iter()
        .map(|row| {
            let f: Vec<f64> = row.to_vec();
            nearest(&centers, dim, &f)
        })
        .collect())
}

/// Streaming mini-batch k-means for one layer.
#[derive(Debug, Clone)]
pub struct MiniBatchKMeans {
    layer_index: usize,
    k: usize,
    dim: usize,
    batch_size: usize,
    seed: u64,
    init_size: usize,
    rng: ChaCha8Rng,
    buffer: Vec<f64>,
    centroids: Option<Vec<f64>>,
    counts: Vec<u64>,
    pending: Vec<f64>,
    seen: u64,
}

impl MiniBatchKMeans {
    pub fn new(layer_index: usize, k: usize, dim: usize, batch_size: usize, seed: u64) -> Result<Self, TokenizerError> {
        if k == 0 || batch_size == 0 || dim == 0 {
            return Err(TokenizerError::InvalidParameter("k, batch_size and dim must be positive".into()));
        }
        let layer_seed = seed ^ (layer_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(Self {
            layer_index,
            k,
            dim,
            batch_size,
            seed,
            init_size: (3 * k).max(batch_size),
            rng: ChaCha8Rng::seed_from_u64(layer_seed),
            buffer: Vec::new(),
            centroids: None,
            counts: vec![0; k],
            pending: Vec::new(),
            seen: 0,
        })
    }

    /// Feeds frames `[T × D]` in stream order.
    pub fn partial_fit(&mut self, frames: ArrayView2<f64>) -> Result<(), TokenizerError> {
        if frames.ncols() != self.dim {
            return Err(TokenizerError::DimMismatch {
                expected: self.dim,
                found: frames.ncols(),
            });
        }
        for row in frames.rows() {
            self.seen += 1;
            if self.centroids.is_none() {
                self.buffer.extend(row.iter());
                if self.buffer.len() / self.dim >= self.init_size {
                    self.initialize();
                }
            } else {
                self.pending.extend(row.iter());
                if self.pending.len() / self.dim >= self.batch_size {
                    let batch = std::mem::take(&mut self.pending);
                    self.update(&batch);
                }
            }
        }
        Ok(())
    }

    fn initialize(&mut self) {
        let buffer = std::mem::take(&mut self.buffer);
        self.centroids = Some(kmeans_plus_plus(&buffer, self.dim, self.k, &mut self.rng));
        for chunk in buffer.chunks(self.batch_size * self.dim) {
            self.update(chunk);
        }
    }

    fn update(&mut self, batch: &[f64]) {
        let dim = self.dim;
        let centroids = self.centroids.as_mut().expect("initialized");
        let labels: Vec<usize> = batch.chunks_exact(dim).map(|f| nearest(centroids, dim, f)).collect();
        for (frame, &c) in batch.chunks_exact(dim).zip(&labels) {
            self.counts[c] += 1;
            let eta = 1.0 / self.counts[c] as f64;
            for (v, x) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(frame) {
                *v = (1.0 - eta) * *v + eta * x;
            }
        }
    }

    /// Per-center update counts so far.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn finish(mut self) -> Result<Codebook, TokenizerError> {
        if self.centroids.is_none() {
            let frames = self.buffer.len() / self.dim;
            if frames < self.k {
                return Err(TokenizerError::InsufficientData {
                    layer: self.layer_index,
                    frames,
                    k: self.k,
                });
            }
            self.initialize();
        }
        if !self.pending.is_empty() {
            let batch = std::mem::take(&mut self.pending);
            self.update(&batch);
        }
        let empty = self.counts.iter().filter(|&&c| c == 0).count();
        if empty > 0 {
            log::warn!("layer {}: {empty} of {} clusters received no frames", self.layer_index, self.k);
        }
        let centroids = self.centroids.expect("initialized");
        Ok(Codebook {
            layer_index: self.layer_index,
            centroids: Array2::from_shape_vec((self.k, self.dim), centroids.iter().map(|&v| v as f32).collect())
                .expect("k × dim"),
            seed: self.seed,
            n_frames_seen: self.seen,
        })
    }
}

fn kmeans_plus_plus<R: Rng>(data: &[f64], dim: usize, k: usize, rng: &mut R) -> Vec<f64> {
    let n = data.len() / dim;
    let point = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(k * dim);
    centers.extend_from_slice(point(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(point(i), &centers[..dim])).collect();
    while centers.len() < k * dim {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a center
            Err(_) => rng.random_range(0..n),
        };
        let start = centers.len();
        centers.extend_from_slice(point(next));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(point(i), &centers[start..start + dim]));
        }
    }
    centers
}

/// Fits one codebook per layer from a stream of layer stacks. Only valid
/// (unmasked) frames are used; layers are fit independently.
pub fn fit_codebooks<I>(stream: I, k: usize, batch_size: usize, seed: u64) -> Result<Vec<Codebook>, TokenizerError>
where
    I: IntoIterator<Item = LayerStack>,
{
    let mut fits: Vec<MiniBatchKMeans> = Vec::new();
    for stack in stream {
        if fits.is_empty() {
            fits = (0..stack.n_layers())
                .map(|n| MiniBatchKMeans::new(n + 1, k, stack.dim(), batch_size, seed))
                .collect::<Result<_, _>>()?;
        }
        if stack.n_layers() != fits.len() {
            return Err(TokenizerError::MissingLayerCodebook(stack.n_layers().min(fits.len()) + 1));
        }
        for (n, fit) in fits.iter_mut().enumerate() {
            fit.partial_fit(stack.valid_layer(n))?;
        }
    }
    if fits.is_empty() {
        return Err(TokenizerError::InsufficientData { layer: 1, frames: 0, k });
    }
    fits.into_iter().map(MiniBatchKMeans::finish).collect()
}

/// Encodes utterances in chunks, yielding one stack per utterance in order.
pub fn encode_utterances<'a, B: SslBackend + ?Sized>(
    backend: &'a B,
    utts: &'a [&'a Utterance],
) -> impl Iterator<Item = Result<(String, LayerStack), TokenizerError>> + 'a {
    utts.chunks(ENCODE_CHUNK).flat_map(move |chunk| {
        let encoded = collate(chunk)
            .map_err(TokenizerError::from)
            .and_then(|batch| backend.encode(&batch).map_err(TokenizerError::from));
        match encoded {
            Ok(stacks) => chunk
                .iter()
                .zip(stacks)
                .map(|(u, s)| Ok((u.id.clone(), s)))
                .collect::<Vec<_>>(),
            Err(e) => vec![Err(e)],
        }
    })
}

/// Fits codebooks on the training split of an in-memory corpus.
pub fn fit_on_training_split<B: SslBackend + ?Sized>(
    manifest: &CorpusManifest,
    backend: &B,
    k: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Codebook>, TokenizerError> {
    let train = manifest.split(Split::Train);
    let mut first_err = None;
    let stream = encode_utterances(backend, &train).map_while(|r| match r {
        Ok((_, s)) => Some(s),
        Err(e) => {
            first_err = Some(e);
            None
        }
    });
    let fitted = fit_codebooks(stream, k, batch_size, seed);
    if let Some(e) = first_err {
        return Err(e);
    }
    fitted
}

fn check_coverage(codebooks: &[Codebook], n_layers: usize, dim: usize) -> Result<(), TokenizerError> {
    for n in 1..=n_layers {
        let cb = codebooks
            .iter()
            .find(|c| c.layer_index == n)
            .ok_or(TokenizerError::MissingLayerCodebook(n))?;
        if cb.dim() != dim {
            return Err(TokenizerError::DimMismatch {
                expected: dim,
                found: cb.dim(),
            });
        }
    }
    Ok(())
}

/// Token matrix `[N × T]` of one stack.
pub fn tokenize_stack(stack: &LayerStack, codebooks: &[Codebook]) -> Result<Array2<usize>, TokenizerError> {
    check_coverage(codebooks, stack.n_layers(), stack.dim())?;
    let t = stack.valid_frames();
    let mut tokens = Array2::zeros((stack.n_layers(), t));
    for n in 0..stack.n_layers() {
        let cb = codebooks.iter().find(|c| c.layer_index == n + 1).expect("checked");
        for (i, tok) in assign(cb, stack.valid_layer(n))?.into_iter().enumerate() {
            tokens[[n, i]] = tok;
        }
    }
    Ok(tokens)
}

/// Token sequences for every utterance of an in-memory corpus.
pub fn tokenize_corpus<B: SslBackend + ?Sized>(
    manifest: &CorpusManifest,
    backend: &B,
    codebooks: &[Codebook],
) -> Result<BTreeMap<String, TokenSequence>, TokenizerError> {
    let spec = backend.spec();
    check_coverage(codebooks, spec.n_layers, spec.dim)?;
    let utts: Vec<&Utterance> = manifest.entries.iter().collect();
    let mut out = BTreeMap::new();
    for item in encode_utterances(backend, &utts) {
        let (id, stack) = item?;
        let tokens = tokenize_stack(&stack, codebooks)?;
        out.insert(id.clone(), TokenSequence { utterance_id: id, tokens });
    }
    Ok(out)
}

/// Per-layer token counts.
pub fn token_histograms<'a>(seqs: impl IntoIterator<Item = &'a TokenSequence>, n_layers: usize, k: usize) -> Array2<u64> {
    let mut hist = Array2::zeros((n_layers, k));
    for s in seqs {
        for ((n, _), &tok) in s.tokens.indexed_iter() {
            hist[[n, tok]] += 1;
        }
    }
    hist
}

pub fn codebooks_to_bytes(codebooks: &[Codebook]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for cb in codebooks {
        out.extend_from_slice(&(cb.layer_index as u32).to_le_bytes());
        out.extend_from_slice(&(cb.k() as u32).to_le_bytes());
        out.extend_from_slice(&(cb.dim() as u32).to_le_bytes());
        out.extend_from_slice(&cb.seed.to_le_bytes());
        for v in cb.centroids.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn codebooks_from_bytes(bytes: &[u8]) -> Result<Vec<Codebook>, TokenizerError> {
    let corrupt = |m: &str| TokenizerError::CorruptFile(m.to_string());
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8], TokenizerError> {
        if pos + n > bytes.len() {
            return Err(corrupt("truncated record"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut out: Vec<Codebook> = Vec::new();
    while let Ok(head) = take(4) {
        let layer_index = u32::from_le_bytes(head.try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        if k == 0 || dim == 0 {
            return Err(corrupt("zero k or dim"));
        }
        if layer_index != out.len() + 1 {
            return Err(corrupt("layer indices are not consecutive from 1"));
        }
        if let Some(prev) = out.last() {
            if prev.dim() != dim {
                return Err(corrupt("inconsistent dims across layers"));
            }
        }
        let n = k.checked_mul(dim).ok_or_else(|| corrupt("shape overflow"))?;
        let raw = take(n.checked_mul(4).ok_or_else(|| corrupt("shape overflow"))?)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(corrupt("non-finite centroid"));
        }
        out.push(Codebook {
            layer_index,
            centroids: Array2::from_shape_vec((k, dim), values).expect("k × dim"),
            seed,
            n_frames_seen: 0,
        });
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    if out.is_empty() {
        return Err(corrupt("no layer records"));
    }
    Ok(out)
}

pub fn save_codebooks(path: &Path, codebooks: &[Codebook]) -> Result<(), TokenizerError> {
    fs::write(path, codebooks_to_bytes(codebooks))?;
    Ok(())
}

pub fn load_codebooks(path: &Path) -> Result<Vec<Codebook>, TokenizerError> {
    if !path.is_file() {
        return Err(TokenizerError::Data(DataError::MissingFile(path.to_path_buf())));
    }
    codebooks_from_bytes(&fs::read(path)?)
}

/// Hex SHA-256 of the serialized codebooks; checkpoints record it.
pub fn codebook_hash(codebooks: &[Codebook]) -> String {
    Sha256::digest(codebooks_to_bytes(codebooks))
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array3};

    fn stack_from(frames: Array2<f64>) -> LayerStack {
        let t = frames.nrows();
        let d = frames.ncols();
        LayerStack {
            features: frames.into_shape_with_order((1, t, d)).unwrap(),
            frame_rate: 50.0,
            mask: vec![true; t],
        }
    }

    fn codebook(rows: Vec<[f32; 2]>) -> Codebook {
        let k = rows.len();
        Codebook {
            layer_index: 1,
            centroids: Array2::from_shape_vec((k, 2), rows.into_iter().flatten().collect()).unwrap(),
            seed: 0,
            n_frames_seen: 0,
        }
    }

    #[test]
    fn assign_nearest_and_tie_break() {
        let cb = codebook(vec![[0.0, 0.0], [10.0, 10.0]]);
        assert_eq!(assign(&cb, arr2(&[[1.0, 1.0]]).view()).unwrap(), vec![0]);
        assert_eq!(assign(&cb, arr2(&[[5.0, 5.0]]).view()).unwrap(), vec![0]);
        let cb = codebook(vec![[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(assign(&cb, arr2(&[[0.0, 0.0], [1.0, 0.0]]).view()).unwrap(), vec![0, 0]);
        assert!(matches!(
            assign(&cb, Array2::zeros((1, 3)).view()),
            Err(TokenizerError::DimMismatch { expected: 2, found: 3 })
        ));
    }

    #[test]
    fn single_cluster_is_running_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array2::from_shape_simple_fn((500, 3), || rng.random_range(-2.0..5.0));
        let cb = fit_codebooks([stack_from(data.clone())], 1, 64, 0).unwrap();
        let mean = data.mean_axis(ndarray::Axis(0)).unwrap();
        for (c, m) in cb[0].centroids.iter().zip(mean.iter()) {
            assert!(((*c as f64) - m).abs() <= 1e-3 * m.abs().max(1.0), "{c} vs {m}");
        }
        assert_eq!(cb[0].n_frames_seen, 500);
    }

    #[test]
    fn fitting_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = Array2::from_shape_simple_fn((300, 4), || rng.random_range(-1.0..1.0));
        let a = fit_codebooks([stack_from(data.clone())], 8, 64, 11).unwrap();
        let b = fit_codebooks([stack_from(data)], 8, 64, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_frames_is_an_error() {
        let data = Array2::zeros((5, 2));
        assert!(matches!(
            fit_codebooks([stack_from(data)], 8, 4, 0),
            Err(TokenizerError::InsufficientData { frames: 5, k: 8, .. })
        ));
    }

    #[test]
    fn masked_frames_are_ignored() {
        let mut features = Array3::zeros((1, 6, 1));
        for t in 0..6 {
            features[[0, t, 0]] = if t < 4 { 1.0 } else { 100.0 };
        }
        let stack = LayerStack {
            features,
            frame_rate: 50.0,
            mask: vec![true, true, true, true, false, false],
        };
        let cb = fit_codebooks([stack], 1, 2, 0).unwrap();
        assert_eq!(cb[0].centroids[[0, 0]], 1.0);
        assert_eq!(cb[0].n_frames_seen, 4);
    }

    #[test]
    fn serialization_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cbs: Vec<Codebook> = (1..=3)
            .map(|n| Codebook {
                layer_index: n,
                centroids: Array2::from_shape_simple_fn((4, 3), || rng.random_range(-1.0f32..1.0)),
                seed: 99,
                n_frames_seen: 0,
            })
            .collect();
        let bytes = codebooks_to_bytes(&cbs);
        assert_eq!(&bytes[..4], b"DMKM");
        assert_eq!(bytes.len(), 4 + 3 * (20 + 4 * 3 * 4));
        assert_eq!(codebooks_from_bytes(&bytes).unwrap(), cbs);

        assert!(matches!(codebooks_from_bytes(&bytes[..bytes.len() - 3]), Err(TokenizerError::CorruptFile(_))));
        assert!(matches!(codebooks_from_bytes(b"XXXX"), Err(TokenizerError::CorruptFile(_))));

        // k header claims 5 rows but only 4 follow
        let mut one = codebooks_to_bytes(&cbs[..1]);
        one[8..12].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(codebooks_from_bytes(&one), Err(TokenizerError::CorruptFile(_))));
        // k header claims 3 rows but 4 follow
        let mut one = codebooks_to_bytes(&cbs[..1]);
        one[8..12].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(codebooks_from_bytes(&one), Err(TokenizerError::CorruptFile(_))));
    }
}
