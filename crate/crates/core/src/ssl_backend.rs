//! Per-layer frame features from waveforms.
//!
//! [`SslBackend`] is the adapter contract every encoder implements: it must
//! expose exactly one hidden state per Transformer block (the convolutional
//! front-end output is not a layer). [`SyntheticBackend`] is a small,
//! seeded, differentiable stand-in used for desk-scale runs and tests.

use std::rc::Rc;

use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Mat, ParamOwner, Segments, Var};
use crate::data::PaddedBatch;
use crate::nn::{Ctx, Linear};
use crate::params::{ParamStore, TensorKind};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("item {index} has {samples} samples, shorter than one {hop}-sample hop")]
    TooShortInput { index: usize, samples: usize, hop: usize },
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("backend parameters do not match spec: {0}")]
    ParamMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub name: String,
    pub n_layers: usize,
    pub dim: usize,
    pub frame_rate: f64,
    pub trainable: bool,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: u32,
    /// Keep the convolutional front-end fixed while the blocks fine-tune.
    #[serde(default)]
    pub freeze_frontend: bool,
}

fn default_sample_rate() -> u32 {
    crate::data::DEFAULT_SAMPLE_RATE
}

impl BackendSpec {
    pub fn synthetic(n_layers: usize, dim: usize) -> Self {
        Self {
            name: "synthetic".into(),
            n_layers,
            dim,
            frame_rate: 50.0,
            trainable: true,
            sample_rate: default_sample_rate(),
            freeze_frontend: false,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.n_layers < 1 || self.dim < 1 {
            return Err(BackendError::InvalidSpec("n_layers and dim must be >= 1".into()));
        }
        if !(self.frame_rate > 0.0) || self.frame_rate > self.sample_rate as f64 {
            return Err(BackendError::InvalidSpec(format!("bad frame_rate {}", self.frame_rate)));
        }
        Ok(())
    }

    /// Samples per frame.
    pub fn hop(&self) -> usize {
        (self.sample_rate as f64 / self.frame_rate).round() as usize
    }

    /// Frames produced for a waveform of `samples` samples.
    pub fn frame_count(&self, samples: usize) -> usize {
        samples / self.hop()
    }
}

/// Frame features of one utterance from every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    /// `[N × T × D]`
    pub features: Array3<f64>,
    pub frame_rate: f64,
    /// Valid-frame mask, a prefix of `true`s.
    pub mask: Vec<bool>,
}

impl LayerStack {
    pub fn n_layers(&self) -> usize {
        self.features.dim().0
    }

    pub fn frames(&self) -> usize {
        self.features.dim().1
    }

    pub fn dim(&self) -> usize {
        self.features.dim().2
    }

    pub fn valid_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Layer `n` (0-based), `[T × D]`.
    pub fn layer(&self, n: usize) -> ndarray::ArrayView2<'_, f64> {
        self.features.slice(s![n, .., ..])
    }

    /// Layer `n` restricted to valid frames.
    pub fn valid_layer(&self, n: usize) -> ndarray::ArrayView2<'_, f64> {
        self.features.slice(s![n, ..self.valid_frames(), ..])
    }
}

/// Splits packed per-layer matrices back into one stack per utterance.
pub fn unpack_layers(layers: &[Mat], segs: &Segments, frame_rate: f64) -> Vec<LayerStack> {
    segs.spans()
        .iter()
        .map(|&(start, len)| {
            let dim = layers[0].ncols();
            let mut features = Array3::zeros((layers.len(), len, dim));
            for (n, l) in layers.iter().enumerate() {
                features.slice_mut(s![n, .., ..]).assign(&l.slice(s![start..start + len, ..]));
            }
            LayerStack {
                features,
                frame_rate,
                mask: vec![true; len],
            }
        })
        .collect()
}

/// Packs the valid frames of each stack's layer `n` row-wise.
pub fn pack_layer(stacks: &[&LayerStack], n: usize) -> Mat {
    let views: Vec<_> = stacks.iter().map(|s| s.valid_layer(n)).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("consistent feature dims")
}

pub trait SslBackend {
    fn spec(&self) -> &BackendSpec;

    fn params(&self) -> &ParamStore;

    fn params_mut(&mut self) -> &mut ParamStore;

    /// Records the forward pass on `g`. Returns one packed `[rows × D]`
    /// node per layer and the per-utterance row spans; padded samples are
    /// never read. `track` requests gradients for trainable parameters.
    fn encode_graph(&self, g: &mut Graph, batch: &PaddedBatch, track: bool) -> Result<(Vec<Var>, Rc<Segments>), BackendError>;

    fn encode(&self, batch: &PaddedBatch) -> Result<Vec<LayerStack>, BackendError> {
        let mut g = Graph::new();
        let (layers, segs) = self.encode_graph(&mut g, batch, false)?;
        let mats: Vec<Mat> = layers.iter().map(|&v| g.value(v).clone()).collect();
        Ok(unpack_layers(&mats, &segs, self.spec().frame_rate))
    }
}

/// Strided framing, a linear "feature extractor", then residual GELU blocks
/// with one output per block.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    spec: BackendSpec,
    params: ParamStore,
    frontend: Linear,
    blocks: Vec<Linear>,
}

impl SyntheticBackend {
    pub fn new(spec: BackendSpec, seed: u64) -> Result<Self, BackendError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let frontend = Linear::new(&mut params, "frontend", spec.hop(), spec.dim, &mut rng);
        let blocks = (0..spec.n_layers)
            .map(|n| Linear::new(&mut params, &format!("block.{}", n + 1), spec.dim, spec.dim, &mut rng))
            .collect();
        let mut backend = Self {
            spec,
            params,
            frontend,
            blocks,
        };
        backend.apply_freeze();
        Ok(backend)
    }

    /// Rebuilds a backend from a spec and stored tensors (e.g. a checkpoint).
    pub fn from_params(spec: BackendSpec, stored: &ParamStore) -> Result<Self, BackendError> {
        let mut backend = Self::new(spec, 0)?;
        for id in backend.params.ids().collect::<Vec<_>>() {
            let name = backend.params.entries()[id.index()].name.clone();
            let src = stored
                .id(&name)
                .ok_or_else(|| BackendError::ParamMismatch(format!("missing tensor {name}")))?;
            let value = stored.value(src);
            if value.dim() != backend.params.value(id).dim() {
                return Err(BackendError::ParamMismatch(format!("shape of {name}")));
            }
            *backend.params.value_mut(id) = value.clone();
        }
        Ok(backend)
    }

    fn apply_freeze(&mut self) {
        let kind = if self.spec.freeze_frontend {
            TensorKind::Frozen
        } else {
            TensorKind::Trainable
        };
        self.params.set_kind(self.frontend.weight, kind);
        self.params.set_kind(self.frontend.bias, kind);
    }
}

impl SslBackend for SyntheticBackend {
    fn spec(&self) -> &BackendSpec {
        &self.spec
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn encode_graph(&self, g: &mut Graph, batch: &PaddedBatch, track: bool) -> Result<(Vec<Var>, Rc<Segments>), BackendError> {
        let hop = self.spec.hop();
        let mut frame_counts = Vec::with_capacity(batch.len());
        for (index, &samples) in batch.lengths.iter().enumerate() {
            let t = self.spec.frame_count(samples);
            if t == 0 {
                return Err(BackendError::TooShortInput { index, samples, hop });
            }
            frame_counts.push(t);
        }
        let segs = Rc::new(Segments::from_lengths(&frame_counts));
        let mut frames = Mat::zeros((segs.total_rows(), hop));
        for (b, &(start, len)) in segs.spans().iter().enumerate() {
            let wave = batch.waveform(b);
            for t in 0..len {
                for (j, v) in frames.row_mut(start + t).iter_mut().enumerate() {
                    *v = wave[t * hop + j] as f64;
                }
            }
        }
        let ctx = Ctx {
            store: &self.params,
            owner: ParamOwner::Backend,
            track: track && self.spec.trainable,
        };
        let x = g.constant(frames);
        let h = self.frontend.forward(g, &ctx, x);
        let mut h = g.gelu(h);
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let u = block.forward(g, &ctx, h);
            let u = g.gelu(u);
            h = g.add(h, u);
            outputs.push(h);
        }
        Ok((outputs, segs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collate, AudioSource, Split, Utterance};
    use rand::Rng;
    use std::sync::Arc;

    fn utt(samples: Vec<f32>) -> Utterance {
        Utterance {
            id: "u".into(),
            audio: AudioSource::Inline(Arc::new(samples)),
            system_id: "s".into(),
            mos: 3.0,
            split: Split::Train,
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn one_second_gives_fifty_frames() {
        let b = SyntheticBackend::new(BackendSpec::synthetic(4, 32), 1).unwrap();
        let u = utt(noise(16_000, 1));
        let out = b.encode(&collate(&[&u]).unwrap()).unwrap();
        assert_eq!(out[0].frames(), 50);
        assert_eq!(out[0].n_layers(), 4);
        assert_eq!(out[0].dim(), 32);
    }

    #[test]
    fn encoding_is_deterministic_and_monotone_in_length() {
        let b = SyntheticBackend::new(BackendSpec::synthetic(3, 8), 2).unwrap();
        let a = utt(noise(3_000, 4));
        let c = utt(noise(5_000, 5));
        let batch = collate(&[&a, &c]).unwrap();
        let x = b.encode(&batch).unwrap();
        let y = b.encode(&batch).unwrap();
        assert_eq!(x, y);
        assert!(x[0].frames() < x[1].frames());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SyntheticBackend::new(BackendSpec::synthetic(4, 32), 1).unwrap();
        let b = SyntheticBackend::new(BackendSpec::synthetic(4, 32), 1).unwrap();
        for (x, y) in a.params().entries().iter().zip(b.params().entries()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn zero_input_is_finite() {
        let b = SyntheticBackend::new(BackendSpec::synthetic(4, 32), 1).unwrap();
        let u = utt(vec![0.0; 3_200]);
        let out = b.encode(&collate(&[&u]).unwrap()).unwrap();
        assert!(out[0].features.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn first_and_last_layers_differ() {
        let b = SyntheticBackend::new(BackendSpec::synthetic(4, 32), 1).unwrap();
        let u = utt(noise(16_000, 9));
        let out = &b.encode(&collate(&[&u]).unwrap()).unwrap()[0];
        let (l1, l4) = (out.layer(0), out.layer(3));
        let dot: f64 = l1.iter().zip(l4.iter()).map(|(a, b)| a * b).sum();
        let n1: f64 = l1.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n4: f64 = l4.iter().map(|a| a * a).sum::<f64>().sqrt();
        let cos = dot / (n1 * n4);
        assert!(cos < 0.999, "cosine {cos}");
    }

    #[test]
    fn too_short_input_is_rejected() {
        let b = SyntheticBackend::new(BackendSpec::synthetic(2, 4), 1).unwrap();
        let u = utt(vec![0.1; 100]);
        assert!(matches!(
            b.encode(&collate(&[&u]).unwrap()),
            Err(BackendError::TooShortInput { samples: 100, hop: 320, .. })
        ));
    }

    #[test]
    fn frame_count_follows_floor_arithmetic() {
        let mut spec = BackendSpec::synthetic(2, 4);
        spec.sample_rate = 1_000;
        spec.frame_rate = 50.0;
        let b = SyntheticBackend::new(spec, 3).unwrap();
        for len in 1..=1000usize {
            let u = utt(vec![0.5; len]);
            let res = b.encode(&collate(&[&u]).unwrap());
            if len < 20 {
                assert!(matches!(res, Err(BackendError::TooShortInput { .. })));
            } else {
                assert_eq!(res.unwrap()[0].frames(), len / 20);
            }
        }
    }

    #[test]
    fn rebuild_from_params_round_trips() {
        let a = SyntheticBackend::new(BackendSpec::synthetic(2, 4), 11).unwrap();
        let b = SyntheticBackend::from_params(a.spec().clone(), a.params()).unwrap();
        let u = utt(noise(2_000, 1));
        let batch = collate(&[&u]).unwrap();
        assert_eq!(a.encode(&batch).unwrap(), b.encode(&batch).unwrap());
    }
}
