//! The MOS predictor: learnable layer-weighted sum over encoder layers,
//! linear projector, Feature Processor, CNN-BLSTM, mean-pooled MOS head, and
//! optional auxiliary heads that branch off the Feature Processor output.
//!
//! Auxiliary heads only exist on the training path. Building a model for
//! inference (`with_aux = false`) never allocates them, so inference cost
//! is the same for every head mode.

use std::rc::Rc;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{softmax_row, Graph, Mat, ParamOwner, Segments, Var};
use crate::data::PaddedBatch;
use crate::nn::{BatchNorm, BiLstm, Conv1d, Ctx, LayerNorm, Linear, Mlp3, PendingStats};
use crate::params::{ParamId, ParamStore, TensorKind};
use crate::ssl_backend::{BackendError, LayerStack, SslBackend};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("every frame is masked")]
    AllFramesMasked,
    #[error("operation requires head mode {required:?}, model has {actual:?}")]
    WrongHeadMode { required: HeadMode, actual: HeadMode },
    #[error("auxiliary heads were not constructed for this model")]
    AuxNotConstructed,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("missing or misshapen tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Per-layer token classification (the self-distillation objective).
    TokenPrediction,
    /// MOS regression only.
    None,
    /// Per-layer regression of the pretrained layer features.
    MseDistillation,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::TokenPrediction => "token_prediction",
            HeadMode::None => "none",
            HeadMode::MseDistillation => "mse_distillation",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "token_prediction" => Some(HeadMode::TokenPrediction),
            "none" => Some(HeadMode::None),
            "mse_distillation" => Some(HeadMode::MseDistillation),
            _ => None,
        }
    }

    /// Label used in result tables.
    pub fn variant_tag(self) -> &'static str {
        match self {
            HeadMode::TokenPrediction => "distilmos",
            HeadMode::None => "w/o token prediction",
            HeadMode::MseDistillation => "mse_distillation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub ssl_dim: usize,
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "defaults::fp_blocks")]
    pub fp_blocks: usize,
    #[serde(default = "defaults::conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "defaults::blstm_layers")]
    pub blstm_layers: usize,
    #[serde(default = "defaults::n_clusters")]
    pub n_clusters: usize,
    #[serde(default = "defaults::head_mode")]
    pub head_mode: HeadMode,
}

pub mod defaults {
    use super::HeadMode;

    pub fn hidden_dim() -> usize {
        256
    }
    pub fn fp_blocks() -> usize {
        3
    }
    pub fn conv_kernel() -> usize {
        3
    }
    pub fn blstm_layers() -> usize {
        1
    }
    pub fn n_clusters() -> usize {
        200
    }
    pub fn head_mode() -> HeadMode {
        HeadMode::TokenPrediction
    }
}

impl ModelConfig {
    pub fn new(n_layers: usize, ssl_dim: usize) -> Self {
        Self {
            n_layers,
            ssl_dim,
            hidden_dim: defaults::hidden_dim(),
            fp_blocks: defaults::fp_blocks(),
            conv_kernel: defaults::conv_kernel(),
            blstm_layers: defaults::blstm_layers(),
            n_clusters: defaults::n_clusters(),
            head_mode: defaults::head_mode(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.n_layers < 1 || self.ssl_dim < 1 {
            return bad("n_layers and ssl_dim must be >= 1");
        }
        if self.hidden_dim < 1 || self.fp_blocks < 1 || self.blstm_layers < 1 || self.conv_kernel < 1 {
            return bad("hidden_dim, fp_blocks, blstm_layers and conv_kernel must be >= 1");
        }
        if self.head_mode == HeadMode::TokenPrediction && self.n_clusters < 1 {
            return bad("n_clusters must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization; auxiliary heads run.
    Train,
    /// Running statistics; auxiliary heads skipped.
    Inference,
}

#[derive(Debug, Clone)]
struct FpBlock {
    linear: Linear,
    conv: Conv1d,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct CnnBlstm {
    conv: Conv1d,
    blstm: Vec<BiLstm>,
    proj: Linear,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
enum AuxHeads {
    Tokens(Vec<Mlp3>),
    Embeddings(Vec<Mlp3>),
}

/// Nodes produced by one forward pass on a tape.
pub struct GraphOutput {
    /// `[B × 1]`
    pub mos: Var,
    /// Packed Feature Processor output `[rows × H]`.
    pub fp: Var,
    /// Per-layer token logits or embedding predictions (train mode only).
    pub aux: Vec<Var>,
    pub segs: Rc<Segments>,
    pub pending: Vec<PendingStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub mos_pred: f64,
    /// `[T × H]`
    pub fp_features: Array2<f64>,
    /// `[N × T × k]`
    pub token_logits: Option<Array3<f64>>,
    /// `[N × T × D]`
    pub embed_preds: Option<Array3<f64>>,
}

#[derive(Debug, Clone)]
pub struct DistilMos {
    config: ModelConfig,
    params: ParamStore,
    layer_logits: ParamId,
    projector: Linear,
    fp: Vec<FpBlock>,
    cnn: CnnBlstm,
    head: Linear,
    aux: Option<AuxHeads>,
}

pub const AUX_PREFIX: &str = "aux.";

impl DistilMos {
    /// Seeded model with auxiliary heads for its head mode.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Self::build(config, seed, true)
    }

    /// Inference modules are initialized before auxiliary heads, so the
    /// shared part of the network is identical across head modes.
    pub fn build(config: ModelConfig, seed: u64, with_aux: bool) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let h = config.hidden_dim;
        let layer_logits = params.add("layer_weights", Mat::zeros((1, config.n_layers)), TensorKind::Trainable);
        let projector = Linear::new(&mut params, "projector", config.ssl_dim, h, &mut rng);
        let fp = (0..config.fp_blocks)
            .map(|i| FpBlock {
                linear: Linear::new(&mut params, &format!("fp.{i}.linear"), h, h, &mut rng),
                conv: Conv1d::new(&mut params, &format!("fp.{i}.conv"), h, h, config.conv_kernel, &mut rng),
                bn: BatchNorm::new(&mut params, &format!("fp.{i}.bn"), h),
            })
            .collect();
        let cnn = CnnBlstm {
            conv: Conv1d::new(&mut params, "cnn.conv", h, h, config.conv_kernel, &mut rng),
            blstm: (0..config.blstm_layers)
                .map(|l| {
                    let inp = if l == 0 { h } else { 2 * h };
                    BiLstm::new(&mut params, &format!("cnn.blstm.{l}"), inp, h, &mut rng)
                })
                .collect(),
            proj: Linear::new(&mut params, "cnn.proj", 2 * h, h, &mut rng),
            norm: LayerNorm::new(&mut params, "cnn.norm", h),
        };
        let head = Linear::new(&mut params, "head", h, 1, &mut rng);
        let aux = if with_aux {
            match config.head_mode {
                HeadMode::TokenPrediction => Some(AuxHeads::Tokens(
                    (0..config.n_layers)
                        .map(|n| Mlp3::new(&mut params, &format!("aux.token.{n}"), h, h, config.n_clusters, &mut rng))
                        .collect(),
                )),
                HeadMode::MseDistillation => Some(AuxHeads::Embeddings(
                    (0..config.n_layers)
                        .map(|n| Mlp3::new(&mut params, &format!("aux.embed.{n}"), h, h, config.ssl_dim, &mut rng))
                        .collect(),
                )),
                HeadMode::None => None,
            }
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            layer_logits,
            projector,
            fp,
            cnn,
            head,
            aux,
        })
    }

    /// Builds the network and copies every tensor it needs from `stored`,
    /// by name. Extra tensors (e.g. auxiliary heads when `with_aux` is
    /// false) are ignored.
    pub fn from_params(config: ModelConfig, stored: &ParamStore, with_aux: bool) -> Result<Self, ModelError> {
        let mut model = Self::build(config, 0, with_aux)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.entries()[id.index()].name.clone();
            let src = stored.id(&name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if stored.value(src).dim() != model.params.value(id).dim() {
                return Err(ModelError::MissingTensor(name));
            }
            *model.params.value_mut(id) = stored.value(src).clone();
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn aux_heads_constructed(&self) -> bool {
        self.aux.is_some()
    }

    /// Trainable scalars on the inference path.
    pub fn inference_param_count(&self) -> usize {
        self.params.count_params(|n| !n.starts_with(AUX_PREFIX))
    }

    pub fn total_param_count(&self) -> usize {
        self.params.count_params(|_| true)
    }

    /// Effective (softmax-normalized) layer weights.
    pub fn layer_weights(&self) -> Vec<f64> {
        softmax_row(self.params.value(self.layer_logits).iter().copied())
    }

    pub fn layer_logits_id(&self) -> ParamId {
        self.layer_logits
    }

    pub fn apply_pending(&mut self, pending: &[PendingStats]) {
        for p in pending {
            p.apply(&mut self.params);
        }
    }

    fn ctx(&self, track: bool) -> Ctx<'_> {
        Ctx {
            store: &self.params,
            owner: ParamOwner::Model,
            track,
        }
    }

    fn feature_processor_graph(
        &self,
        g: &mut Graph,
        ctx: &Ctx,
        x: Var,
        segs: &Rc<Segments>,
        mode: Mode,
        pending: &mut Vec<PendingStats>,
    ) -> Var {
        let mut x = self.projector.forward(g, ctx, x);
        for block in &self.fp {
            x = block.linear.forward(g, ctx, x);
            x = block.conv.forward(g, ctx, x, segs);
            let (y, stats) = block.bn.forward(g, ctx, x, mode == Mode::Train);
            pending.extend(stats);
            x = g.gelu(y);
        }
        x
    }

    fn cnn_blstm_graph(&self, g: &mut Graph, ctx: &Ctx, x: Var, segs: &Rc<Segments>) -> Var {
        let c = self.cnn.conv.forward(g, ctx, x, segs);
        let mut h = c;
        for l in &self.cnn.blstm {
            h = l.forward(g, ctx, h, segs);
        }
        let h = self.cnn.proj.forward(g, ctx, h);
        let h = g.gelu(h);
        let h = g.add(h, c);
        self.cnn.norm.forward(g, ctx, h)
    }

    /// Records the full network on `g` given packed per-layer features.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        layers: &[Var],
        segs: &Rc<Segments>,
        mode: Mode,
        track: bool,
    ) -> Result<GraphOutput, ModelError> {
        if layers.len() != self.config.n_layers {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} layers, got {}",
                self.config.n_layers,
                layers.len()
            )));
        }
        for &l in layers {
            let dim = g.value(l).dim();
            if dim != (segs.total_rows(), self.config.ssl_dim) {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer features {dim:?}, expected ({}, {})",
                    segs.total_rows(),
                    self.config.ssl_dim
                )));
            }
        }
        let ctx = self.ctx(track);
        let mut pending = Vec::new();
        let logits = ctx.leaf(g, self.layer_logits);
        let x = g.weighted_sum(layers, logits);
        let fp = self.feature_processor_graph(g, &ctx, x, segs, mode, &mut pending);

        let aux = match (&self.aux, mode) {
            (Some(AuxHeads::Tokens(heads)), Mode::Train) | (Some(AuxHeads::Embeddings(heads)), Mode::Train) => {
                heads.iter().map(|m| m.forward(g, &ctx, fp)).collect()
            }
            _ => Vec::new(),
        };

        let seq = self.cnn_blstm_graph(g, &ctx, fp, segs);
        let pooled = g.segment_mean(seq, segs.clone());
        let mos = self.head.forward(g, &ctx, pooled);
        Ok(GraphOutput {
            mos,
            fp,
            aux,
            segs: segs.clone(),
            pending,
        })
    }

    /// Encodes the batch with `backend` and runs the network.
    pub fn forward<B: SslBackend + ?Sized>(&self, backend: &B, batch: &PaddedBatch, mode: Mode) -> Result<Vec<ForwardOutput>, ModelError> {
        let mut g = Graph::new();
        let (layers, segs) = backend.encode_graph(&mut g, batch, false)?;
        let out = self.forward_graph(&mut g, &layers, &segs, mode, false)?;
        Ok(self.split_outputs(&g, &out))
    }

    /// Runs the network on precomputed layer stacks.
    pub fn forward_stacks(&self, stacks: &[&LayerStack], mode: Mode) -> Result<Vec<ForwardOutput>, ModelError> {
        let mut g = Graph::new();
        let segs = Rc::new(Segments::from_lengths(&stacks.iter().map(|s| s.valid_frames()).collect::<Vec<_>>()));
        let layers: Vec<Var> = (0..self.config.n_layers)
            .map(|n| {
                if stacks.iter().any(|s| s.n_layers() != self.config.n_layers) {
                    return Err(ModelError::ShapeMismatch("layer count".into()));
                }
                Ok(g.constant(crate::ssl_backend::pack_layer(stacks, n)))
            })
            .collect::<Result<_, _>>()?;
        let out = self.forward_graph(&mut g, &layers, &segs, mode, false)?;
        Ok(self.split_outputs(&g, &out))
    }

    fn split_outputs(&self, g: &Graph, out: &GraphOutput) -> Vec<ForwardOutput> {
        let mos = g.value(out.mos);
        let fp = g.value(out.fp);
        let is_tokens = matches!(self.aux, Some(AuxHeads::Tokens(_)));
        out.segs
            .spans()
            .iter()
            .enumerate()
            .map(|(b, &(start, len))| {
                let aux = (!out.aux.is_empty()).then(|| {
                    let width = g.value(out.aux[0]).ncols();
                    let mut a = Array3::zeros((out.aux.len(), len, width));
                    for (n, &v) in out.aux.iter().enumerate() {
                        a.index_axis_mut(Axis(0), n)
                            .assign(&g.value(v).slice(ndarray::s![start..start + len, ..]));
                    }
                    a
                });
                let (token_logits, embed_preds) = if is_tokens { (aux, None) } else { (None, aux) };
                ForwardOutput {
                    mos_pred: mos[[b, 0]],
                    fp_features: fp.slice(ndarray::s![start..start + len, ..]).to_owned(),
                    token_logits,
                    embed_preds,
                }
            })
            .collect()
    }

    /// MOS predictions only.
    pub fn predict<B: SslBackend + ?Sized>(&self, backend: &B, batch: &PaddedBatch) -> Result<Vec<f64>, ModelError> {
        Ok(self.forward(backend, batch, Mode::Inference)?.into_iter().map(|o| o.mos_pred).collect())
    }

    /// Projector and Feature Processor on one sequence `[T × D]`.
    pub fn feature_processor(&self, x: &Array2<f64>, mode: Mode) -> Result<Array2<f64>, ModelError> {
        self.check_dim(x, self.config.ssl_dim)?;
        let mut g = Graph::new();
        let segs = Rc::new(Segments::from_lengths(&[x.nrows()]));
        let v = g.constant(x.clone());
        let ctx = self.ctx(false);
        let out = self.feature_processor_graph(&mut g, &ctx, v, &segs, mode, &mut Vec::new());
        Ok(g.value(out).clone())
    }

    /// CNN-BLSTM on one sequence `[T × H]`.
    pub fn cnn_blstm(&self, x: &Array2<f64>) -> Result<Array2<f64>, ModelError> {
        self.check_dim(x, self.config.hidden_dim)?;
        let mut g = Graph::new();
        let segs = Rc::new(Segments::from_lengths(&[x.nrows()]));
        let v = g.constant(x.clone());
        let out = self.cnn_blstm_graph(&mut g, &self.ctx(false), v, &segs);
        Ok(g.value(out).clone())
    }

    /// Masked mean over time followed by the affine head.
    pub fn mos_head(&self, x: &Array2<f64>, mask: &[bool]) -> Result<f64, ModelError> {
        self.check_dim(x, self.config.hidden_dim)?;
        mos_head_affine(x, mask, self.params.value(self.head.weight), self.params.value(self.head.bias))
    }

    /// Token logits `[N × T × k]` from Feature Processor output `[T × H]`.
    pub fn token_predictors(&self, fp: &Array2<f64>) -> Result<Array3<f64>, ModelError> {
        if self.config.head_mode != HeadMode::TokenPrediction {
            return Err(ModelError::WrongHeadMode {
                required: HeadMode::TokenPrediction,
                actual: self.config.head_mode,
            });
        }
        let Some(AuxHeads::Tokens(heads)) = &self.aux else {
            return Err(ModelError::AuxNotConstructed);
        };
        self.check_dim(fp, self.config.hidden_dim)?;
        let mut g = Graph::new();
        let v = g.constant(fp.clone());
        let ctx = self.ctx(false);
        let mut out = Array3::zeros((heads.len(), fp.nrows(), self.config.n_clusters));
        for (n, m) in heads.iter().enumerate() {
            let y = m.forward(&mut g, &ctx, v);
            out.index_axis_mut(Axis(0), n).assign(g.value(y));
        }
        Ok(out)
    }

    /// Output layer of token predictor `n`, for inspection and tests.
    pub fn token_predictor_output(&self, n: usize) -> Option<(ParamId, ParamId)> {
        match &self.aux {
            Some(AuxHeads::Tokens(heads)) => heads.get(n).map(|m| (m.output_layer().weight, m.output_layer().bias)),
            _ => None,
        }
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.weight, self.head.bias)
    }

    fn check_dim(&self, x: &Array2<f64>, dim: usize) -> Result<(), ModelError> {
        if x.ncols() != dim || x.nrows() == 0 {
            return Err(ModelError::ShapeMismatch(format!("input {:?}, expected [T >= 1 × {dim}]", x.dim())));
        }
        Ok(())
    }
}

fn mos_head_affine(x: &Array2<f64>, mask: &[bool], weight: &Mat, bias: &Mat) -> Result<f64, ModelError> {
    if mask.len() != x.nrows() {
        return Err(ModelError::ShapeMismatch("mask length".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(ModelError::AllFramesMasked);
    }
    let mut pooled = ndarray::Array1::<f64>::zeros(x.ncols());
    for (row, _) in x.rows().into_iter().zip(mask).filter(|(_, &m)| m) {
        pooled += &row;
    }
    pooled /= count as f64;
    Ok(pooled.dot(&weight.column(0)) + bias[[0, 0]])
}

/// `Σ_n softmax(weights)_n · stack[n]` over valid frames, `[T × D]`.
pub fn layer_weighted_sum(stack: &LayerStack, weights: &[f64]) -> Result<Array2<f64>, ModelError> {
    if weights.len() != stack.n_layers() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} weights for {} layers",
            weights.len(),
            stack.n_layers()
        )));
    }
    let w = softmax_row(weights.iter().copied());
    let mut out = Array2::zeros((stack.valid_frames(), stack.dim()));
    for (n, wn) in w.iter().enumerate() {
        out.scaled_add(*wn, &stack.valid_layer(n));
    }
    Ok(out)
}
