//! Training loop: AdamW with decoupled weight decay, one-cycle learning
//! rate, global-norm clipping, periodic validation and best-checkpoint
//! selection, resumable from saved state.
//!
//! Batch composition is a pure function of `(seed, step)`, so resuming only
//! needs the step counter, the parameters and the optimizer moments.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Mat, ParamOwner};
use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::data::{collate, CorpusManifest, DataError, Split, Utterance};
use crate::evaluation::{predict_utterances, srcc};
use crate::losses::{self, AuxTargets, LossError};
use crate::model::{DistilMos, HeadMode, Mode, ModelConfig};
use crate::params::{ParamStore, TensorKind};
use crate::ssl_backend::{LayerStack, SslBackend, SyntheticBackend};
use crate::tokenizer::{codebook_hash, encode_utterances, tokenize_stack, Codebook};

const STATE_MAGIC: &[u8; 4] = b"DMTS";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VALID_LOG: &str = "valid_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STATE_FILE: &str = "train_state.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("head mode token_prediction requires codebooks")]
    MissingCodebooks,
    #[error("codebooks do not match the model: {0}")]
    CodebookMismatch(String),
    #[error("non-finite loss at step {step} (batch {batch_ids:?}); dump written to {}", dump.display())]
    NonFiniteLoss {
        step: usize,
        batch_ids: Vec<String>,
        dump: PathBuf,
    },
    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneCycle {
    #[serde(default = "defaults::warmup_fraction")]
    pub warmup_fraction: f64,
    /// Starting lr is `peak / div_factor`.
    #[serde(default = "defaults::div_factor")]
    pub div_factor: f64,
    /// Final lr is the starting lr divided by this.
    #[serde(default = "defaults::final_div_factor")]
    pub final_div_factor: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            warmup_fraction: defaults::warmup_fraction(),
            div_factor: defaults::div_factor(),
            final_div_factor: defaults::final_div_factor(),
        }
    }
}

impl OneCycle {
    pub fn warmup_steps(&self, total: usize) -> usize {
        ((self.warmup_fraction * total as f64).round() as usize).min(total)
    }

    /// Cosine rise to `peak` over the warmup, then cosine decay.
    pub fn lr(&self, step: usize, total: usize, peak: f64) -> Result<f64, TrainError> {
        if step > total {
            return Err(TrainError::StepOutOfRange { step, total });
        }
        let initial = peak / self.div_factor;
        let last = initial / self.final_div_factor;
        let warm = self.warmup_steps(total);
        if step == warm {
            return Ok(peak);
        }
        let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * (1.0 + (PI * frac).cos()) / 2.0;
        Ok(if step < warm {
            cos_interp(initial, peak, step as f64 / warm as f64)
        } else {
            cos_interp(peak, last, (step - warm) as f64 / (total - warm) as f64)
        })
    }
}

/// Learning rate under the default one-cycle policy.
pub fn one_cycle_lr(step: usize, total_steps: usize, peak_lr: f64) -> Result<f64, TrainError> {
    OneCycle::default().lr(step, total_steps, peak_lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    #[serde(default = "defaults::steps")]
    pub steps: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::betas")]
    pub betas: (f64, f64),
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::checkpoint_every")]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub scheduler: OneCycle,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::head_mode")]
    pub head_mode: HeadMode,
    #[serde(default = "defaults::eval_batch_size")]
    pub eval_batch_size: usize,
}

pub mod defaults {
    use crate::model::HeadMode;

    pub fn steps() -> usize {
        10_000
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn lr() -> f64 {
        1e-4
    }
    pub fn betas() -> (f64, f64) {
        (0.9, 0.98)
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn clip_norm() -> f64 {
        10.0
    }
    pub fn alpha() -> f64 {
        0.1
    }
    pub fn checkpoint_every() -> usize {
        1000
    }
    pub fn warmup_fraction() -> f64 {
        0.3
    }
    pub fn div_factor() -> f64 {
        25.0
    }
    pub fn final_div_factor() -> f64 {
        1e4
    }
    pub fn head_mode() -> HeadMode {
        HeadMode::TokenPrediction
    }
    pub fn eval_batch_size() -> usize {
        16
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: defaults::steps(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            betas: defaults::betas(),
            weight_decay: defaults::weight_decay(),
            clip_norm: defaults::clip_norm(),
            alpha: defaults::alpha(),
            checkpoint_every: defaults::checkpoint_every(),
            scheduler: OneCycle::default(),
            seed: 0,
            head_mode: defaults::head_mode(),
            eval_batch_size: defaults::eval_batch_size(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.checkpoint_every == 0 || self.eval_batch_size == 0 {
            return bad("steps, batch_size, checkpoint_every and eval_batch_size must be > 0");
        }
        if !(self.lr > 0.0) || !(self.alpha >= 0.0) || !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("lr and clip_norm must be > 0; alpha and weight_decay >= 0");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas must lie in [0, 1)");
        }
        let s = &self.scheduler;
        if !(0.0..1.0).contains(&s.warmup_fraction) || !(s.div_factor >= 1.0) || !(s.final_div_factor >= 1.0) {
            return bad("scheduler: warmup_fraction in [0, 1), divisors >= 1");
        }
        Ok(())
    }
}

/// Gradients for one parameter store, indexed by tensor id.
pub type GradGroup = Vec<Option<Mat>>;

pub fn global_norm(groups: &[GradGroup]) -> f64 {
    groups
        .iter()
        .flatten()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(groups: &mut [GradGroup], clip_norm: f64) -> f64 {
    let norm = global_norm(groups);
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in groups.iter_mut().flatten().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Adam with decoupled weight decay; one moment pair per parameter store.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Completed updates.
    pub t: u64,
    pub moments: Vec<(ParamStore, ParamStore)>,
}

fn zeros_like(store: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for e in store.entries() {
        out.add(e.name.clone(), Mat::zeros(e.value.raw_dim()), TensorKind::Buffer);
    }
    out
}

impl AdamW {
    pub fn new(betas: (f64, f64), weight_decay: f64, stores: &[&ParamStore]) -> Self {
        Self {
            betas,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: stores.iter().map(|s| (zeros_like(s), zeros_like(s))).collect(),
        }
    }

    /// Applies one update to every store. Tensors without a gradient, or
    /// not trainable, are left untouched.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &[GradGroup], lr: f64) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((store, group), (m_store, v_store)) in stores.iter_mut().zip(grads).zip(&mut self.moments) {
            for id in store.ids().collect::<Vec<_>>() {
                let Some(g) = &group[id.index()] else { continue };
                if store.kind(id) != TensorKind::Trainable {
                    continue;
                }
                let m = m_store.value_mut(id);
                m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
                let v = v_store.value_mut(id);
                v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                let (m, v) = (m_store.value(id), v_store.value(id));
                let decay = 1.0 - lr * self.weight_decay;
                let p = store.value_mut(id);
                ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                    *p *= decay;
                    *p -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
                });
            }
        }
    }
}

/// Indices of the utterances in batch `step`. Each epoch is a seeded
/// permutation cut into consecutive batches; the last batch of an epoch may
/// be short.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size);
    let (epoch, within) = (step / per_epoch, step % per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    order.shuffle(&mut rng);
    order[within * batch_size..((within + 1) * batch_size).min(n)].to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub l_mos: f64,
    pub l_aux_mean: f64,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidRecord {
    /// Completed updates at the time of validation.
    pub step: usize,
    pub valid_srcc: Option<f64>,
    pub checkpoint: String,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `train_state.bin` in the run directory if present.
    pub resume: bool,
    /// Stop (after saving state) once this many updates are complete.
    pub stop_after: Option<usize>,
}

pub struct TrainInputs<'a> {
    /// Corpus with audio loaded.
    pub manifest: &'a CorpusManifest,
    /// Frozen copy of the pretrained encoder: source of token and embedding
    /// targets, and the starting point for fine-tuning.
    pub pretrained: &'a SyntheticBackend,
    pub codebooks: Option<&'a [Codebook]>,
    /// `head_mode` is taken from the training config.
    pub model_config: ModelConfig,
    pub run_dir: &'a Path,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub best_step: usize,
    pub best_valid_srcc: Option<f64>,
    /// Completed updates.
    pub completed_steps: usize,
    pub log: Vec<LogRecord>,
    pub validations: Vec<ValidRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StateMeta {
    next_step: usize,
    best_step: Option<usize>,
    best_valid_srcc: Option<f64>,
    adam_t: u64,
    config: TrainingConfig,
    model_config: ModelConfig,
    codebook_hash: Option<String>,
}

fn better(candidate: Option<f64>, best: Option<Option<f64>>) -> bool {
    let score = |v: Option<f64>| v.unwrap_or(f64::NEG_INFINITY);
    match best {
        None => true,
        Some(b) => score(candidate) > score(b),
    }
}

enum Targets {
    None,
    Tokens(HashMap<String, ndarray::Array2<usize>>),
    Embeddings(HashMap<String, LayerStack>),
}

fn prepare_targets(
    mode: HeadMode,
    utts: &[&Utterance],
    pretrained: &SyntheticBackend,
    codebooks: Option<&[Codebook]>,
) -> crate::Result<Targets> {
    Ok(match mode {
        HeadMode::None => Targets::None,
        HeadMode::TokenPrediction => {
            let codebooks = codebooks.ok_or(TrainError::MissingCodebooks)?;
            let mut map = HashMap::new();
            for item in encode_utterances(pretrained, utts) {
                let (id, stack) = item?;
                map.insert(id, tokenize_stack(&stack, codebooks)?);
            }
            Targets::Tokens(map)
        }
        HeadMode::MseDistillation => {
            let mut map = HashMap::new();
            for item in encode_utterances(pretrained, utts) {
                let (id, stack) = item?;
                map.insert(id, stack);
            }
            Targets::Embeddings(map)
        }
    })
}

fn batch_targets(targets: &Targets, ids: &[String], n_layers: usize) -> AuxTargets {
    match targets {
        Targets::None => AuxTargets::None,
        Targets::Tokens(map) => AuxTargets::Tokens(
            (0..n_layers)
                .map(|n| ids.iter().flat_map(|id| map[id].index_axis(Axis(0), n).to_vec()).collect())
                .collect(),
        ),
        Targets::Embeddings(map) => {
            let stacks: Vec<&LayerStack> = ids.iter().map(|id| &map[id]).collect();
            AuxTargets::Embeddings(
                (0..n_layers)
                    .map(|n| Rc::new(crate::ssl_backend::pack_layer(&stacks, n)))
                    .collect(),
            )
        }
    }
}

fn append_line(path: &Path, line: &str) -> Result<(), TrainError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io_err(path))?;
    writeln!(f, "{line}").map_err(io_err(path))
}

/// Keeps only records with `step < keep_below`.
fn truncate_log<T: Serialize + for<'de> Deserialize<'de>>(path: &Path, keep_below: usize, step_of: impl Fn(&T) -> usize) -> Result<Vec<T>, TrainError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let kept: Vec<T> = text
        .lines()
        .filter_map(|l| serde_json::from_str::<T>(l).ok())
        .filter(|r| step_of(r) < keep_below)
        .collect();
    let mut out = String::new();
    for r in &kept {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))?;
    Ok(kept)
}

/// Reads a JSON-lines training log.
pub fn read_train_log(path: &Path) -> Result<Vec<LogRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Resume(format!("bad log line: {e}"))))
        .collect()
}

pub fn read_valid_log(path: &Path) -> Result<Vec<ValidRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Resume(format!("bad log line: {e}"))))
        .collect()
}

/// Validation SRCC of `model` on `utts`; `None` when undefined.
pub fn validation_srcc<B: SslBackend + ?Sized>(model: &DistilMos, backend: &B, utts: &[&Utterance], batch_size: usize) -> crate::Result<Option<f64>> {
    let preds = predict_utterances(model, backend, utts, batch_size)?;
    Ok(srcc(&preds.predicted(), &preds.targets()).ok())
}

pub fn train(config: &TrainingConfig, inputs: TrainInputs<'_>, options: &TrainOptions) -> crate::Result<TrainOutcome> {
    config.validate()?;
    let run_dir = inputs.run_dir;
    fs::create_dir_all(run_dir.join(CHECKPOINT_DIR)).map_err(io_err(run_dir))?;

    let mut model_config = inputs.model_config.clone();
    model_config.head_mode = config.head_mode;
    let spec = inputs.pretrained.spec();
    if model_config.n_layers != spec.n_layers || model_config.ssl_dim != spec.dim {
        return Err(TrainError::InvalidConfig(format!(
            "model expects {}x{} encoder features, backend gives {}x{}",
            model_config.n_layers, model_config.ssl_dim, spec.n_layers, spec.dim
        ))
        .into());
    }
    let codebook_hash = match (config.head_mode, inputs.codebooks) {
        (HeadMode::TokenPrediction, None) => return Err(TrainError::MissingCodebooks.into()),
        (HeadMode::TokenPrediction, Some(cbs)) => {
            if cbs.len() != spec.n_layers || cbs.iter().any(|c| c.k() != model_config.n_clusters) {
                return Err(TrainError::CodebookMismatch(format!(
                    "{} codebooks with k = {:?}; model wants {} layers with k = {}",
                    cbs.len(),
                    cbs.iter().map(|c| c.k()).collect::<Vec<_>>(),
                    spec.n_layers,
                    model_config.n_clusters
                ))
                .into());
            }
            Some(codebook_hash(cbs))
        }
        _ => None,
    };

    let train_utts = inputs.manifest.split(Split::Train);
    let valid_utts = inputs.manifest.split(Split::Valid);
    if train_utts.is_empty() {
        return Err(DataError::EmptySplit(Split::Train).into());
    }
    if valid_utts.is_empty() {
        return Err(DataError::EmptySplit(Split::Valid).into());
    }
    let targets = prepare_targets(config.head_mode, &train_utts, inputs.pretrained, inputs.codebooks)?;

    let mut model = DistilMos::new(model_config.clone(), config.seed)?;
    let mut backend = inputs.pretrained.clone();
    let mut adam = AdamW::new(config.betas, config.weight_decay, &[model.params(), backend.params()]);
    let mut start = 0usize;
    let mut best: Option<(usize, Option<f64>)> = None;

    let state_path = run_dir.join(STATE_FILE);
    let train_log = run_dir.join(TRAIN_LOG);
    let valid_log = run_dir.join(VALID_LOG);
    if options.resume && state_path.exists() {
        let bytes = checkpoint::read_file(&state_path)?;
        let (meta, groups): (StateMeta, _) = checkpoint::read_container(STATE_MAGIC, &bytes)?;
        if meta.config != *config || meta.model_config != model_config || meta.codebook_hash != codebook_hash {
            return Err(TrainError::Resume("saved state was produced with a different configuration".into()).into());
        }
        let mut groups: HashMap<String, ParamStore> = groups.into_iter().collect();
        let mut take = |name: &str| groups.remove(name).ok_or_else(|| TrainError::Resume(format!("state lacks {name}")));
        model = DistilMos::from_params(model_config.clone(), &take("model")?, true)?;
        backend = SyntheticBackend::from_params(spec.clone(), &take("backend")?)?;
        adam.moments = vec![(take("model.m")?, take("model.v")?), (take("backend.m")?, take("backend.v")?)];
        adam.t = meta.adam_t;
        start = meta.next_step;
        best = meta.best_step.map(|s| (s, meta.best_valid_srcc));
    } else {
        for p in [&train_log, &valid_log] {
            if p.exists() {
                fs::remove_file(p).map_err(io_err(p))?;
            }
        }
    }
    let mut log: Vec<LogRecord> = truncate_log(&train_log, start, |r: &LogRecord| r.step)?;
    let mut validations: Vec<ValidRecord> = truncate_log(&valid_log, start + 1, |r: &ValidRecord| r.step)?;
    fs::write(
        run_dir.join("train_config.json"),
        serde_json::to_string_pretty(&(config, &model_config)).expect("config serializes"),
    )
    .map_err(io_err(run_dir))?;

    let end = options.stop_after.map_or(config.steps, |s| s.min(config.steps));
    for step in start..end {
        let idx = batch_indices(train_utts.len(), config.batch_size, config.seed, step);
        let chosen: Vec<&Utterance> = idx.iter().map(|&i| train_utts[i]).collect();
        let batch = collate(&chosen)?;
        let lr = config.scheduler.lr(step, config.steps, config.lr)?;

        let mut g = Graph::new();
        let (layers, segs) = backend.encode_graph(&mut g, &batch, true)?;
        let out = model.forward_graph(&mut g, &layers, &segs, Mode::Train, true)?;
        let aux = batch_targets(&targets, &batch.ids, model_config.n_layers);
        let non_finite = |detail: String| -> crate::Error {
            let dump = run_dir.join(format!("nonfinite_step_{step}.json"));
            let body = serde_json::json!({ "step": step, "batch_ids": batch.ids, "detail": detail });
            // best effort: the error itself carries the batch ids
            let _ = fs::write(&dump, serde_json::to_string_pretty(&body).expect("json"));
            TrainError::NonFiniteLoss {
                step,
                batch_ids: batch.ids.clone(),
                dump,
            }
            .into()
        };
        let objective = match losses::objective(&mut g, &out, &batch.mos, &aux, config.alpha) {
            Ok(o) => o,
            Err(LossError::NonFiniteInput) => return Err(non_finite("loss".into())),
            Err(e) => return Err(e.into()),
        };
        let breakdown = objective.breakdown(&g);
        let grads = g.backward(objective.total);
        let mut groups = vec![
            grads.collect(&g, ParamOwner::Model, model.params().len()),
            grads.collect(&g, ParamOwner::Backend, backend.params().len()),
        ];
        drop(grads);
        let grad_norm = clip_gradients(&mut groups, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(non_finite(format!("gradient norm {grad_norm}")));
        }
        let pending = out.pending;
        drop(g);
        adam.step(&mut [model.params_mut(), backend.params_mut()], &groups, lr);
        model.apply_pending(&pending);

        let record = LogRecord {
            step,
            l_mos: breakdown.l_mos,
            l_aux_mean: breakdown.l_aux_mean,
            total: breakdown.total,
            lr,
            grad_norm,
        };
        append_line(&train_log, &serde_json::to_string(&record).expect("record serializes"))?;
        log.push(record);

        let done = step + 1;
        if done % config.checkpoint_every == 0 || done == config.steps {
            let inference = DistilMos::from_params(model_config.clone(), model.params(), false)?;
            let valid_srcc = validation_srcc(&inference, &backend, &valid_utts, config.eval_batch_size)?;
            let ck = Checkpoint::capture(&model, &backend, codebook_hash.clone(), done, valid_srcc);
            let ck_path = run_dir.join(CHECKPOINT_DIR).join(format!("step_{done:06}.ckpt"));
            ck.save(&ck_path)?;
            if better(valid_srcc, best.map(|b| b.1)) {
                best = Some((done, valid_srcc));
                ck.save(&run_dir.join(BEST_CHECKPOINT))?;
            }
            let record = ValidRecord {
                step: done,
                valid_srcc,
                checkpoint: ck_path.display().to_string(),
            };
            append_line(&valid_log, &serde_json::to_string(&record).expect("record serializes"))?;
            validations.push(record);
            save_state(&state_path, done, best, &adam, config, &model_config, &codebook_hash, &model, &backend)?;
        }
    }
    let completed = end.max(start);
    if options.stop_after.is_some() && completed < config.steps {
        save_state(&state_path, completed, best, &adam, config, &model_config, &codebook_hash, &model, &backend)?;
    }
    let (best_step, best_valid_srcc) = best.unwrap_or((0, None));
    Ok(TrainOutcome {
        best_checkpoint: run_dir.join(BEST_CHECKPOINT),
        best_step,
        best_valid_srcc,
        completed_steps: completed,
        log,
        validations,
    })
}

#[allow(clippy::too_many_arguments)]
fn save_state(
    path: &Path,
    next_step: usize,
    best: Option<(usize, Option<f64>)>,
    adam: &AdamW,
    config: &TrainingConfig,
    model_config: &ModelConfig,
    codebook_hash: &Option<String>,
    model: &DistilMos,
    backend: &SyntheticBackend,
) -> Result<(), CheckpointError> {
    let meta = StateMeta {
        next_step,
        best_step: best.map(|b| b.0),
        best_valid_srcc: best.and_then(|b| b.1),
        adam_t: adam.t,
        config: config.clone(),
        model_config: model_config.clone(),
        codebook_hash: codebook_hash.clone(),
    };
    let bytes = checkpoint::write_container(
        STATE_MAGIC,
        &meta,
        &[
            ("model", model.params()),
            ("backend", backend.params()),
            ("model.m", &adam.moments[0].0),
            ("model.v", &adam.moments[0].1),
            ("backend.m", &adam.moments[1].0),
            ("backend.v", &adam.moments[1].1),
        ],
    );
    checkpoint::write_file(path, &bytes)
}
