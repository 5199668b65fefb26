//! Command-line entry point.
//!
//! Every subcommand resolves a [`RunConfig`] from an optional TOML file
//! (`--config`, or the `DINO_PRETSSEL_CONFIG` environment variable), a preset
//! and `--set section.key=value` overrides. Failures print a single
//! `error: <kind>: <message>` line; exit codes are 0 (ok), 1 (runtime
//! failure) and 2 (usage or validation).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::audio::read_wav;
use crate::config::{Preset, RunConfig};
use crate::corpus::{generate_synthetic_corpus, Manifest, Split};
use crate::error::{Error, Result};
use crate::evaluation::{embedding_robustness, reconstruction_eval, snr_metric, RobustnessOptions};
use crate::features::{load_codebook, save_codebook, FeatureFrontend, FeatureSet};
use crate::inference::{run_requests, InferenceRequest};
use crate::training::{Checkpoint, ModelBundle, TrainData, Trainer};

pub const CONFIG_ENV: &str = "DINO_PRETSSEL_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "dino-pretssel", version, about = "Noise-robust expressive unit-to-Mel pipeline")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file.
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Base preset: paper, toy or smoke (default toy).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override one key, e.g. `--set loss.lambda_dino=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl GlobalArgs {
    fn explicit(&self) -> bool {
        self.config.is_some() || self.preset.is_some() || !self.overrides.is_empty()
    }

    fn resolve(&self) -> Result<RunConfig> {
        let preset = self.preset.as_deref().map(str::parse::<Preset>).transpose()?;
        RunConfig::resolve(self.config.as_deref(), preset, &self.overrides)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic corpus generation and manifest checks.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Feature extraction and unit codebook training.
    #[command(subcommand)]
    Features(FeaturesCmd),
    /// Train stage 1 (reconstruction) or stage 2 (DINO).
    Train(TrainArgs),
    /// Generate Mel spectrograms from units plus reference audio.
    Infer(InferArgs),
    /// Evaluation reports.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Debug, Subcommand)]
enum CorpusCmd {
    Generate {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum FeaturesCmd {
    /// Extract the feature cache; fits a codebook first unless one is given.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    TrainCodebook {
        #[arg(long)]
        manifest: PathBuf,
        /// Codebook size (defaults to features.vocab_size).
        #[arg(long = "V", alias = "vocab-size")]
        vocab: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: u8,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Checkpoint to resume from; for stage 2, a stage-1 checkpoint starts DINO training.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSON-lines request file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write Griffin-Lim waveforms for listening checks.
    #[arg(long)]
    wav_debug: bool,
    /// Embed references with the EMA teacher instead of the student.
    #[arg(long)]
    teacher: bool,
}

#[derive(Debug, Subcommand)]
enum EvalCmd {
    /// SNR of denoised outputs against their originals.
    Snr {
        /// JSON-lines of {"original": path, "denoised": path}.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean↔noisy embedding similarity and cluster separation.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated SNRs in dB (defaults to eval.snrs_db).
        #[arg(long, value_delimiter = ',')]
        snrs: Option<Vec<f64>>,
        #[arg(long)]
        teacher: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mel reconstruction error on held-out utterances.
    Recon {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn dispatch<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.kind());
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.global.resolve()?;
    match cli.command {
        Command::Corpus(CorpusCmd::Generate { n, seed, out }) => {
            let m = generate_synthetic_corpus(&cfg.corpus, n, seed, &out)?;
            emit(&json!({ "manifest": out.join("manifest.jsonl"), "utterances": m.entries.len() }), None)
        }
        Command::Corpus(CorpusCmd::Validate { manifest }) => {
            let m = Manifest::read(&manifest)?;
            let problems = m.validate(&cfg.corpus);
            if !problems.is_empty() {
                return Err(Error::Manifest(problems.join("; ")));
            }
            emit(&json!({ "valid": true, "utterances": m.entries.len() }), None)
        }
        Command::Features(FeaturesCmd::TrainCodebook { manifest, vocab, out }) => {
            let m = Manifest::read(&manifest)?;
            let v = vocab.unwrap_or(cfg.features.vocab_size);
            let (stats, book) = FeatureFrontend::new(&cfg.features).fit_codebook(&m, v)?;
            save_codebook(&out, &stats, &book)?;
            emit(&json!({ "codebook": out, "size": book.size() }), None)
        }
        Command::Features(FeaturesCmd::Extract { manifest, out, codebook }) => {
            let m = Manifest::read(&manifest)?;
            let fe = FeatureFrontend::new(&cfg.features);
            let (stats, book) = match codebook {
                Some(p) => load_codebook(&p)?,
                None => fe.fit_codebook(&m, cfg.features.vocab_size)?,
            };
            let set = fe.extract_manifest(&m, &stats, &book)?;
            set.save(&out)?;
            emit(&json!({ "features": out, "records": set.records.len(), "vocab": set.vocab_size() }), None)
        }
        Command::Train(args) => train(&cfg, args),
        Command::Infer(args) => {
            let models = load_models(&args.checkpoint, &cli.global, &cfg)?;
            let requests = InferenceRequest::read_jsonl(&args.input)?;
            let base = args.input.parent().unwrap_or(Path::new("."));
            let outs = run_requests(&models, &requests, base, &args.out, args.wav_debug, args.teacher)?;
            emit(&json!({ "outputs": outs }), None)
        }
        Command::Eval(EvalCmd::Snr { pairs, out }) => emit(&snr_report(&pairs)?, out.as_deref()),
        Command::Eval(EvalCmd::Robustness { checkpoint, manifest, snrs, teacher, out }) => {
            let models = load_models(&checkpoint, &cli.global, &cfg)?;
            let m = Manifest::read(&manifest)?;
            let opts = RobustnessOptions {
                snrs_db: snrs.unwrap_or_else(|| models.cfg.eval.snrs_db.clone()),
                seed: models.cfg.eval.seed,
                use_teacher: teacher,
                noise_entries: models.cfg.augment.noise_bank_size,
            };
            emit(&embedding_robustness(&models, &m, &opts)?, out.as_deref())
        }
        Command::Eval(EvalCmd::Recon { checkpoint, manifest, features, out }) => {
            let models = load_models(&checkpoint, &cli.global, &cfg)?;
            let m = Manifest::read(&manifest)?;
            let set = FeatureSet::load(&features)?;
            let mut held_out: Vec<&str> = m
                .entries
                .iter()
                .filter(|e| e.split != Split::Train)
                .map(|e| e.utterance_id.as_str())
                .collect();
            if held_out.is_empty() {
                log::warn!("manifest has no dev/test entries; evaluating on every utterance");
                held_out = m.entries.iter().map(|e| e.utterance_id.as_str()).collect();
            }
            let by_id = set.by_id();
            let records = held_out
                .iter()
                .map(|id| {
                    by_id
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::InvalidArgument(format!("no features for utterance {id:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            emit(&reconstruction_eval(&models, &records, models.cfg.train.batch_size)?, out.as_deref())
        }
    }
}

fn train(cfg: &RunConfig, args: TrainArgs) -> Result<()> {
    if args.stage == 2 && args.resume.is_none() {
        return Err(Error::InvalidArgument("train --stage 2 requires --resume <stage-1 checkpoint>".into()));
    }
    let ckpt = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(c) = &ckpt {
        c.warn_on_fingerprint_mismatch(cfg)?;
    }
    let manifest = Manifest::read(&args.manifest)?;
    let features = FeatureSet::load(&args.features)?;
    let mut trainer = Trainer::for_stage(cfg, args.stage, &features, ckpt.as_ref())?;
    let data = TrainData::new(&manifest, features, cfg, trainer.needs_audio())?;
    let total = trainer.total_steps();
    let logs = trainer.run(&data, total, Some(&args.out))?;
    let last = logs.last();
    emit(
        &json!({
            "stage": args.stage,
            "steps": trainer.step,
            "checkpoint": trainer.final_path(&args.out),
            "final_total_loss": last.map(|l| l.total),
        }),
        None,
    )
}

/// Loads a checkpoint's models. When the user supplied any config source,
/// a fingerprint mismatch with the checkpoint is reported as a warning.
fn load_models(path: &Path, global: &GlobalArgs, cfg: &RunConfig) -> Result<ModelBundle> {
    let ckpt = Checkpoint::load(path)?;
    if global.explicit() {
        ckpt.warn_on_fingerprint_mismatch(cfg)?;
    }
    ModelBundle::from_checkpoint(&ckpt)
}

#[derive(Debug, Deserialize)]
struct SnrPair {
    original: PathBuf,
    denoised: PathBuf,
}

#[derive(Debug, Serialize)]
struct SnrPairReport {
    original: PathBuf,
    denoised: PathBuf,
    snr_db: f64,
    residual_floored: bool,
    denoised_floored: bool,
}

fn snr_report(pairs_path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(pairs_path).map_err(|e| Error::io(pairs_path, e))?;
    let base = pairs_path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let pair: SnrPair = serde_json::from_str(line)
            .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", pairs_path.display(), i + 1)))?;
        let original = read_wav(&base.join(&pair.original))?;
        let denoised = read_wav(&base.join(&pair.denoised))?;
        let v = snr_metric(&original, &denoised)?;
        rows.push(SnrPairReport {
            original: pair.original,
            denoised: pair.denoised,
            snr_db: v.db,
            residual_floored: v.residual_floored,
            denoised_floored: v.denoised_floored,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!("{} lists no pairs", pairs_path.display())));
    }
    let mean = rows.iter().map(|r| r.snr_db).sum::<f64>() / rows.len() as f64;
    Ok(json!({ "mean_snr_db": mean, "pairs": rows }))
}

/// Prints `value` as JSON and, when `out` is given, also writes it there.
fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    println!("{text}");
    Ok(())
}
