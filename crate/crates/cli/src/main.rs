//! `distilmos` command line: corpus synthesis, token fitting, training,
//! evaluation, the k sweep, CCA analysis, single-file prediction and plots.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distilmos::model::HeadMode;
use distilmos::ErrorClass;

/// Invalid or inconsistent configuration (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser)]
#[command(name = "distilmos", version, about = "MOS prediction with layer-wise token self-distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn parse_head_mode(s: &str) -> Result<HeadMode, String> {
    HeadMode::parse(s).ok_or_else(|| format!("unknown head mode {s:?}; use token_prediction, none or mse_distillation"))
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (MOS falls with corruption level) and a
    /// matching desk-scale config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        utterances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit per-layer k-means codebooks on the training split.
    FitTokens {
        #[arg(long)]
        config: PathBuf,
        /// Override the tokenizer k.
        #[arg(long)]
        k: Option<usize>,
        /// Override the codebook output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; the run directory receives logs and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_head_mode)]
        head_mode: Option<HeadMode>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the run directory's saved state.
        #[arg(long)]
        resume: bool,
        /// Stop after this many completed steps, keeping resumable state.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Codebook file, if not the configured one.
        #[arg(long)]
        codebooks: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a manifest.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Split to score; ignored with --zero-shot, which scores every row.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        system_level: bool,
        #[arg(long)]
        zero_shot: bool,
        /// Write the prediction table (tab separated) here.
        #[arg(long)]
        dump: Option<PathBuf>,
        /// Refuse checkpoints trained against other codebooks.
        #[arg(long)]
        codebooks: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Fit codebooks and train for each k; report test SRCC per k.
    SweepK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = distilmos::tokenizer::SWEEP_KS.to_vec())]
        ks: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Layer-wise CCA of trained models against the pretrained encoder.
    AnalyzeCca {
        #[arg(long)]
        config: PathBuf,
        /// `tag=path`; tags distilmos, mse_distillation, "w/o token prediction".
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Use the top canonical correlation instead of the mean.
        #[arg(long)]
        top1: bool,
    },
    /// Predict the MOS of one utterance.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A WAV file.
        #[arg(long, conflicts_with_all = ["manifest", "id"])]
        audio: Option<PathBuf>,
        /// Or an utterance of a manifest.
        #[arg(long, requires = "id")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        id: Option<String>,
    },
    /// Render a tab-separated table (first column on x) as an SVG line plot.
    Plot {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "")]
        title: String,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<distilmos::Error>() {
            return match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { out, utterances, seed } => commands::synth(&out, utterances, seed),
        Command::FitTokens { config, k, out } => commands::fit_tokens(&config, k, out),
        Command::Train {
            config,
            head_mode,
            run_dir,
            steps,
            seed,
            resume,
            stop_after,
            codebooks,
        } => commands::train(
            &config,
            commands::TrainOverrides {
                head_mode,
                run_dir,
                steps,
                seed,
                codebooks,
            },
            resume,
            stop_after,
        ),
        Command::Evaluate {
            checkpoint,
            manifest,
            split,
            system_level,
            zero_shot,
            dump,
            codebooks,
            batch_size,
        } => commands::evaluate(&commands::EvaluateArgs {
            checkpoint,
            manifest,
            split,
            system_level,
            zero_shot,
            dump,
            codebooks,
            batch_size,
        }),
        Command::SweepK { config, ks, out, plot } => commands::sweep_k(&config, &ks, out, plot),
        Command::AnalyzeCca {
            config,
            checkpoints,
            split,
            out,
            plot,
            top1,
        } => commands::analyze_cca(&config, &checkpoints, &split, out, plot, top1),
        Command::Predict {
            checkpoint,
            audio,
            manifest,
            id,
        } => commands::predict(&checkpoint, audio, manifest, id),
        Command::Plot { table, out, title } => plot::plot_table_file(&table, &out, &title),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
