use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use distilmos::cca::{self, AnalysisEntry, CcaSummary, RepSource};
use distilmos::checkpoint::Checkpoint;
use distilmos::data::{self, AudioSource, CorpusManifest, Split, Utterance};
use distilmos::evaluation::{self, Evaluation};
use distilmos::model::{DistilMos, HeadMode};
use distilmos::ssl_backend::{SslBackend, SyntheticBackend};
use distilmos::tokenizer::{self, Codebook};
use distilmos::trainer::{self, TrainInputs, TrainOptions};
use log::info;

use crate::config::RunConfig;
use crate::plot;
use crate::ConfigError;

/// Lifts module errors into the crate error so exit codes can classify them.
trait Core<T> {
    fn core(self) -> anyhow::Result<T>;
}

impl<T, E: Into<distilmos::Error>> Core<T> for Result<T, E> {
    fn core(self) -> anyhow::Result<T> {
        self.map_err(|e| anyhow::Error::new(e.into()))
    }
}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(ConfigError(msg.into()))
}

fn load_corpus(path: &Path) -> anyhow::Result<CorpusManifest> {
    let manifest = data::load_manifest(path).core()?;
    data::materialize(&manifest).core()
}

fn select<'a>(manifest: &'a CorpusManifest, split: &str) -> anyhow::Result<Vec<&'a Utterance>> {
    if split == "all" {
        return Ok(manifest.entries.iter().collect());
    }
    let s = Split::parse(split).ok_or_else(|| config_err(format!("unknown split {split:?}; use train, valid, test or all")))?;
    let utts = manifest.split(s);
    if utts.is_empty() {
        return Err(distilmos::Error::from(data::DataError::EmptySplit(s)).into());
    }
    Ok(utts)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn pretrained(cfg: &RunConfig) -> anyhow::Result<SyntheticBackend> {
    SyntheticBackend::new(cfg.backend.spec.clone(), cfg.backend.seed).core()
}

pub fn synth(out: &Path, utterances: usize, seed: u64) -> anyhow::Result<()> {
    let corpus = data::generate_synthetic_corpus(utterances, seed).core()?;
    let manifest = data::write_corpus(&corpus, &out.join("corpus")).core()?;
    let mut cfg = RunConfig::desk("corpus/manifest.txt".into(), "codebooks.bin".into(), "runs/distilmos".into());
    cfg.backend.seed = seed;
    cfg.tokenizer.seed = seed;
    cfg.training.seed = seed;
    write_text(&out.join("run.toml"), &cfg.to_toml())?;
    println!("wrote {} utterances to {}", corpus.entries.len(), manifest.display());
    println!("wrote {}", out.join("run.toml").display());
    Ok(())
}

pub fn fit_tokens(config: &Path, k: Option<usize>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(k) = k {
        cfg.tokenizer.k = k;
    }
    let out = out.unwrap_or_else(|| cfg.paths.codebooks.clone());
    let corpus = load_corpus(&cfg.paths.manifest)?;
    let backend = pretrained(&cfg)?;
    let codebooks = fit_and_save(&cfg, &corpus, &backend, &out)?;
    let train = corpus.split(Split::Train);
    let stacks = tokenizer::encode_utterances(&backend, &train)
        .map(|r| r.map(|(_, s)| s))
        .collect::<Result<Vec<_>, _>>()
        .core()?;
    println!("layer\tk\tframes\tquantization_error");
    for cb in &codebooks {
        let (mut total, mut frames) = (0.0, 0usize);
        for s in &stacks {
            let layer = s.valid_layer(cb.layer_index - 1);
            total += cb.quantization_error(layer).core()? * layer.nrows() as f64;
            frames += layer.nrows();
        }
        let err = total / frames.max(1) as f64;
        println!("{}\t{}\t{}\t{err:.6}", cb.layer_index, cb.k(), cb.n_frames_seen);
    }
    println!("wrote {} codebooks to {}", codebooks.len(), out.display());
    Ok(())
}

fn fit_and_save(cfg: &RunConfig, corpus: &CorpusManifest, backend: &SyntheticBackend, out: &Path) -> anyhow::Result<Vec<Codebook>> {
    let t = &cfg.tokenizer;
    let codebooks = tokenizer::fit_on_training_split(corpus, backend, t.k, t.batch_size, t.seed).core()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    tokenizer::save_codebooks(out, &codebooks).core()?;
    Ok(codebooks)
}

#[derive(Default)]
pub struct TrainOverrides {
    pub head_mode: Option<HeadMode>,
    pub run_dir: Option<PathBuf>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub codebooks: Option<PathBuf>,
}

pub fn train(config: &Path, overrides: TrainOverrides, resume: bool, stop_after: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(h) = overrides.head_mode {
        cfg.training.head_mode = h;
    }
    if let Some(d) = overrides.run_dir {
        cfg.paths.run_dir = d;
    }
    if let Some(s) = overrides.steps {
        cfg.training.steps = s;
    }
    if let Some(s) = overrides.seed {
        cfg.training.seed = s;
    }
    if let Some(c) = overrides.codebooks {
        cfg.paths.codebooks = c;
    }
    cfg.validate()?;
    let corpus = load_corpus(&cfg.paths.manifest)?;
    let backend = pretrained(&cfg)?;
    let outcome = run_training(&cfg, &corpus, &backend, resume, stop_after)?;
    if outcome.completed_steps < cfg.training.steps {
        println!(
            "stopped after {} of {} steps; continue with --resume",
            outcome.completed_steps, cfg.training.steps
        );
        return Ok(());
    }
    let best = Checkpoint::load(&outcome.best_checkpoint).core()?;
    let eval = evaluate_checkpoint(&best, &corpus.split(Split::Test), 16, true)?;
    let report = format!("{}\n{}\n", eval.utterance, eval.system.as_ref().expect("system level requested"));
    write_text(&cfg.paths.run_dir.join("reports").join("test.txt"), &report)?;
    println!(
        "best checkpoint: {} (step {}, valid SRCC {})",
        outcome.best_checkpoint.display(),
        outcome.best_step,
        outcome.best_valid_srcc.map_or("undefined".to_string(), |v| format!("{v:.4}"))
    );
    print!("{report}");
    Ok(())
}

fn run_training(
    cfg: &RunConfig,
    corpus: &CorpusManifest,
    backend: &SyntheticBackend,
    resume: bool,
    stop_after: Option<usize>,
) -> anyhow::Result<trainer::TrainOutcome> {
    let codebooks = if cfg.training.head_mode == HeadMode::TokenPrediction {
        if !cfg.paths.codebooks.is_file() {
            return Err(anyhow::Error::new(distilmos::Error::from(trainer::TrainError::MissingCodebooks)))
                .with_context(|| format!("no codebook file at {}; run fit-tokens first", cfg.paths.codebooks.display()));
        }
        let cbs = tokenizer::load_codebooks(&cfg.paths.codebooks).core()?;
        if let Some(cb) = cbs.iter().find(|c| c.k() != cfg.tokenizer.k) {
            return Err(config_err(format!(
                "codebook file has k = {}, config says k = {}",
                cb.k(),
                cfg.tokenizer.k
            )));
        }
        Some(cbs)
    } else {
        None
    };
    let run_dir = &cfg.paths.run_dir;
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml())?;
    info!(
        "training {} for {} steps into {}",
        cfg.training.head_mode.as_str(),
        cfg.training.steps,
        run_dir.display()
    );
    trainer::train(
        &cfg.training,
        TrainInputs {
            manifest: corpus,
            pretrained: backend,
            codebooks: codebooks.as_deref(),
            model_config: cfg.model_config(),
            run_dir,
        },
        &TrainOptions { resume, stop_after },
    )
    .core()
}

fn evaluate_checkpoint(ck: &Checkpoint, utts: &[&Utterance], batch_size: usize, system: bool) -> anyhow::Result<Evaluation> {
    let model = ck.build_model(false).core()?;
    let backend = ck.build_backend().core()?;
    evaluation::evaluate(&model, &backend, utts, batch_size, system).map_err(anyhow::Error::new)
}

pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub split: String,
    pub system_level: bool,
    pub zero_shot: bool,
    pub dump: Option<PathBuf>,
    pub codebooks: Option<PathBuf>,
    pub batch_size: usize,
}

pub fn evaluate(args: &EvaluateArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).core()?;
    if let Some(path) = &args.codebooks {
        let cbs = tokenizer::load_codebooks(path).core()?;
        ck.check_codebooks(&tokenizer::codebook_hash(&cbs)).core()?;
    }
    let corpus = load_corpus(&args.manifest)?;
    if corpus.sample_rate != ck.meta.backend_spec.sample_rate {
        return Err(config_err(format!(
            "manifest is sampled at {} Hz, checkpoint encoder expects {} Hz",
            corpus.sample_rate, ck.meta.backend_spec.sample_rate
        )));
    }
    let utts = if args.zero_shot { select(&corpus, "all")? } else { select(&corpus, &args.split)? };
    // zero-shot results are utterance-level only
    let system = args.system_level && !args.zero_shot;
    let eval = evaluate_checkpoint(&ck, &utts, args.batch_size, system)?;
    println!("{}", eval.utterance);
    if let Some(sys) = &eval.system {
        println!("{sys}");
    }
    if let Some(path) = &args.dump {
        write_text(path, &eval.predictions.to_tsv())?;
    }
    Ok(())
}

pub fn sweep_k(config: &Path, ks: &[usize], out: Option<PathBuf>, plot_path: Option<PathBuf>) -> anyhow::Result<()> {
    let base = RunConfig::load(config)?;
    if ks.is_empty() {
        return Err(config_err("empty k list"));
    }
    let corpus = load_corpus(&base.paths.manifest)?;
    let backend = pretrained(&base)?;
    let test = select(&corpus, "test")?;
    let mut table = String::from("k\tutterance_srcc\tsystem_srcc\n");
    for &k in ks {
        let mut cfg = base.clone();
        cfg.tokenizer.k = k;
        cfg.training.head_mode = HeadMode::TokenPrediction;
        cfg.paths.run_dir = base.paths.run_dir.join(format!("k_{k}"));
        cfg.paths.codebooks = cfg.paths.run_dir.join("codebooks.bin");
        cfg.validate()?;
        fit_and_save(&cfg, &corpus, &backend, &cfg.paths.codebooks)?;
        let outcome = run_training(&cfg, &corpus, &backend, false, None)?;
        let ck = Checkpoint::load(&outcome.best_checkpoint).core()?;
        let eval = evaluate_checkpoint(&ck, &test, 16, true)?;
        let show = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
        let sys = eval.system.as_ref().and_then(|s| s.srcc);
        table.push_str(&format!("{k}\t{}\t{}\n", show(eval.utterance.srcc), show(sys)));
        info!("k = {k}: {}", eval.utterance);
    }
    let out = out.unwrap_or_else(|| base.paths.run_dir.join("sweep_k.tsv"));
    write_text(&out, &table)?;
    print!("{table}");
    if let Some(p) = plot_path {
        plot::plot_table(&table, &p, "SRCC by number of clusters")?;
    }
    Ok(())
}

pub fn analyze_cca(
    config: &Path,
    specs: &[String],
    split: &str,
    out: Option<PathBuf>,
    plot_path: Option<PathBuf>,
    top1: bool,
) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let corpus = load_corpus(&cfg.paths.manifest)?;
    let utts = select(&corpus, split)?;
    let reference = pretrained(&cfg)?;

    let mut loaded: Vec<(String, DistilMos, SyntheticBackend)> = Vec::new();
    for spec in specs {
        let (tag, path) = spec
            .split_once('=')
            .ok_or_else(|| config_err(format!("expected tag=path, got {spec:?}")))?;
        let ck = Checkpoint::load(Path::new(path)).core()?;
        ck.check_backend(reference.spec()).core()?;
        loaded.push((tag.to_string(), ck.build_model(false).core()?, ck.build_backend().core()?));
    }
    let random_init = DistilMos::build(loaded[0].1.config().clone(), cfg.training.seed, false).core()?;
    // the encoder fine-tuned by plain MOS regression stands in for an
    // SSL-MOS style model
    let ssl_mos = loaded
        .iter()
        .find(|(t, ..)| t == HeadMode::None.variant_tag())
        .unwrap_or(&loaded[0]);

    let mut entries: Vec<AnalysisEntry<'_>> = loaded
        .iter()
        .map(|(tag, model, backend)| AnalysisEntry {
            tag: tag.clone(),
            source: RepSource::FeatureProcessor { model, backend },
        })
        .collect();
    entries.push(AnalysisEntry {
        tag: "ssl-mos-style".into(),
        source: RepSource::FinalLayer { backend: &ssl_mos.2 },
    });
    entries.push(AnalysisEntry {
        tag: "random-init".into(),
        source: RepSource::FeatureProcessor {
            model: &random_init,
            backend: &reference,
        },
    });
    let summary = if top1 { CcaSummary::Top1 } else { CcaSummary::Mean };
    let curves = cca::analyze(&entries, &reference, &utts, 16, summary).core()?;
    let table = cca::curves_to_table(&curves);
    let out = out.unwrap_or_else(|| cfg.paths.run_dir.join("reports").join("cca.tsv"));
    write_text(&out, &table)?;
    print!("{table}");
    if let Some(p) = plot_path {
        plot::plot_table(&table, &p, "CCA with pretrained layers")?;
    }
    Ok(())
}

pub fn predict(checkpoint: &Path, audio: Option<PathBuf>, manifest: Option<PathBuf>, id: Option<String>) -> anyhow::Result<()> {
    let ck = Checkpoint::load(checkpoint).core()?;
    let model = ck.build_model(false).core()?;
    let backend = ck.build_backend().core()?;
    let utt = match (audio, manifest, id) {
        (Some(path), _, _) => {
            let samples = data::read_wav(&path, backend.spec().sample_rate).core()?;
            Utterance {
                id: path.display().to_string(),
                audio: AudioSource::Inline(Arc::new(samples)),
                system_id: String::new(),
                mos: f64::NAN,
                split: Split::Test,
            }
        }
        (None, Some(m), Some(id)) => {
            let corpus = load_corpus(&m)?;
            corpus
                .entries
                .into_iter()
                .find(|u| u.id == id)
                .ok_or_else(|| config_err(format!("no utterance {id:?} in {}", m.display())))?
        }
        _ => return Err(config_err("give --audio, or --manifest with --id")),
    };
    let batch = data::collate(&[&utt]).core()?;
    let mos = model.predict(&backend, &batch).core()?[0];
    println!("{mos:.4}");
    Ok(())
}
