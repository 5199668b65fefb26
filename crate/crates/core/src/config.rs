//! Run configuration: one TOML file with a section per subsystem.
//!
//! Resolution order is preset defaults, then the file, then `section.key=value`
//! overrides. Unknown keys are rejected and every violation is reported at
//! once. The fingerprint is a SHA-256 over the canonical JSON form of the
//! resolved values, so it ignores key order, whitespace and no-op overrides.
//!
//! Presets:
//! - `paper`: published architecture and training hyperparameters (documentation only, untested at scale)
//! - `toy`: desk-scale dimensions with the published crop lengths and schedules
//! - `smoke`: a shrunken toy variant sized for single-core test runs

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Environment variable naming a default config file for the CLI.
pub const CONFIG_ENV: &str = "DINO_PRETSSEL_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub languages: Vec<String>,
    pub n_speakers: usize,
    pub n_styles: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    /// Training entries shorter than this are rejected by `corpus validate`.
    pub min_train_duration_s: f64,
    pub resample_temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub vocab_size: usize,
    pub log_floor: f64,
    pub voicing_threshold: f64,
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub unvoiced_default_hz: f64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub kmeans_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub noise_prob: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub long_crop_s: f64,
    pub short_crop_s: f64,
    pub n_long: usize,
    pub n_short: usize,
    pub freq_mask_max: usize,
    pub time_mask_max: usize,
    /// Teacher long crops reuse the student's noisy realisation instead of drawing their own.
    pub teacher_shares_noise: bool,
    /// Apply the noise policy to the stage-1 expressivity input as well.
    pub stage1_noise: bool,
    /// Optional user noise recordings; synthetic noise is used when empty.
    pub noise_files: Vec<String>,
    pub noise_bank_size: usize,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_bands: usize,
    pub tdnn_hidden: usize,
    pub initial_kernel: usize,
    pub block_kernels: Vec<usize>,
    pub block_dilations: Vec<usize>,
    pub res2net_scale: usize,
    pub se_channels: usize,
    pub attentive_pool_hidden: usize,
    pub final_hidden: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcousticConfig {
    /// Width of unit embeddings, language embeddings and every FFT block.
    pub hidden: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub conv_kernel: usize,
    pub conv_channels: usize,
    pub heads: usize,
    pub dropout: f64,
    pub prosody_kernel: usize,
    pub prosody_channels: usize,
    pub prosody_dropout: f64,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
    pub postnet_dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DinoConfig {
    pub tau_student: f64,
    pub tau_teacher_start: f64,
    pub tau_teacher_end: f64,
    pub tau_teacher_warmup_iters: usize,
    pub center_momentum: f64,
    pub ema_start: f64,
    pub ema_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_local: f64,
    pub lambda_film: f64,
    pub lambda_dino: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_local: 1.0,
            lambda_film: 1e-4,
            lambda_dino: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> candle_core::DType {
        match self {
            Precision::F32 => candle_core::DType::F32,
            Precision::F64 => candle_core::DType::F64,
        }
    }
}

/// Which student embedding conditions the acoustic model during stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Conditioning {
    FirstLongCrop,
    FullUtterance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub precision: Precision,
    pub checkpoint_every: usize,
    pub stage2_conditioning: Stage2Conditioning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub snrs_db: Vec<f64>,
    pub seed: u64,
    pub embedding_window_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub acoustic: AcousticConfig,
    pub dino: DinoConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Toy,
    Smoke,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            "smoke" => Ok(Preset::Smoke),
            other => Err(Error::Config(vec![format!(
                "preset: unknown preset {other:?} (expected paper, toy or smoke)"
            )])),
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let toy = Self::toy();
        match preset {
            Preset::Toy => toy,
            Preset::Paper => Self {
                features: FeatureConfig {
                    vocab_size: 10_000,
                    ..toy.features
                },
                encoder: EncoderConfig {
                    tdnn_hidden: 512,
                    se_channels: 128,
                    attentive_pool_hidden: 128,
                    final_hidden: 1536,
                    ..toy.encoder
                },
                head: HeadConfig {
                    hidden: 2048,
                    bottleneck: 256,
                    out_dim: 65_536,
                },
                acoustic: AcousticConfig {
                    hidden: 256,
                    encoder_layers: 4,
                    decoder_layers: 4,
                    conv_channels: 1024,
                    prosody_channels: 512,
                    postnet_channels: 512,
                    ..toy.acoustic
                },
                train: TrainConfig {
                    stage1_iters: 500_000,
                    stage2_iters: 300_000,
                    batch_size: 16,
                    ..toy.train
                },
                ..toy
            },
            Preset::Smoke => Self {
                corpus: CorpusConfig {
                    n_speakers: 4,
                    n_styles: 2,
                    min_duration_s: 2.0,
                    max_duration_s: 2.6,
                    min_train_duration_s: 1.5,
                    ..toy.corpus
                },
                features: FeatureConfig {
                    vocab_size: 64,
                    ..toy.features
                },
                augment: AugmentConfig {
                    long_crop_s: 1.5,
                    short_crop_s: 1.0,
                    noise_bank_size: 4,
                    ..toy.augment
                },
                encoder: EncoderConfig {
                    tdnn_hidden: 32,
                    se_channels: 16,
                    attentive_pool_hidden: 16,
                    final_hidden: 96,
                    ..toy.encoder
                },
                head: HeadConfig {
                    hidden: 64,
                    bottleneck: 256,
                    out_dim: 256,
                },
                acoustic: AcousticConfig {
                    hidden: 32,
                    conv_channels: 64,
                    prosody_channels: 32,
                    postnet_channels: 32,
                    ..toy.acoustic
                },
                train: TrainConfig {
                    stage1_iters: 300,
                    stage2_iters: 300,
                    batch_size: 4,
                    grad_accum: 1,
                    lr: 1e-3,
                    checkpoint_every: 0,
                    ..toy.train
                },
                ..toy
            },
        }
    }

    fn toy() -> Self {
        Self {
            corpus: CorpusConfig {
                languages: vec!["en".into(), "es".into()],
                n_speakers: 4,
                n_styles: 2,
                min_duration_s: 6.5,
                max_duration_s: 8.0,
                min_train_duration_s: 6.0,
                resample_temperature: 5.0,
            },
            features: FeatureConfig {
                vocab_size: 256,
                log_floor: 1e-5,
                voicing_threshold: 0.45,
                f0_min_hz: 60.0,
                f0_max_hz: 400.0,
                unvoiced_default_hz: 100.0,
                kmeans_max_iters: 100,
                kmeans_tol: 1e-4,
                kmeans_seed: 0,
            },
            augment: AugmentConfig {
                noise_prob: 0.5,
                snr_min_db: 6.0,
                snr_max_db: 40.0,
                long_crop_s: 6.0,
                short_crop_s: 4.0,
                n_long: 2,
                n_short: 4,
                freq_mask_max: 8,
                time_mask_max: 10,
                teacher_shares_noise: false,
                stage1_noise: false,
                noise_files: Vec::new(),
                noise_bank_size: 6,
                noise_seed: 1234,
            },
            encoder: EncoderConfig {
                input_bands: crate::MEL_BANDS,
                tdnn_hidden: 128,
                initial_kernel: 5,
                block_kernels: vec![3, 3, 3],
                block_dilations: vec![2, 3, 4],
                res2net_scale: 8,
                se_channels: 32,
                attentive_pool_hidden: 64,
                final_hidden: 384,
                embed_dim: crate::EMBED_DIM,
            },
            head: HeadConfig {
                hidden: 256,
                bottleneck: 256,
                out_dim: 1024,
            },
            acoustic: AcousticConfig {
                hidden: 64,
                encoder_layers: 2,
                decoder_layers: 2,
                conv_kernel: 9,
                conv_channels: 128,
                heads: 2,
                dropout: 0.2,
                prosody_kernel: 5,
                prosody_channels: 64,
                prosody_dropout: 0.5,
                postnet_layers: 5,
                postnet_channels: 64,
                postnet_kernel: 5,
                postnet_dropout: 0.5,
            },
            dino: DinoConfig {
                tau_student: 0.1,
                tau_teacher_start: 0.04,
                tau_teacher_end: 0.07,
                tau_teacher_warmup_iters: 20_000,
                center_momentum: 0.9,
                ema_start: 0.996,
                ema_end: 1.0,
            },
            loss: LossWeights::default(),
            train: TrainConfig {
                stage1_iters: 2000,
                stage2_iters: 2000,
                batch_size: 4,
                grad_accum: 4,
                lr: 1e-4,
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-8,
                seed: 0,
                precision: Precision::F32,
                checkpoint_every: 500,
                stage2_conditioning: Stage2Conditioning::FirstLongCrop,
            },
            eval: EvalConfig {
                snrs_db: vec![0.0, 10.0, 20.0],
                seed: 99,
                embedding_window_s: 4.0,
            },
        }
    }

    /// Resolves preset, optional file and overrides into a validated config.
    ///
    /// The file may name its own preset with a top-level `preset = "..."` key;
    /// an explicit `preset` argument wins.
    pub fn resolve(file: Option<&Path>, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                parse_table(&text)?
            }
            None => toml::Table::new(),
        };
        Self::resolve_table(file_table, preset, overrides)
    }

    pub fn resolve_str(text: &str, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        Self::resolve_table(parse_table(text)?, preset, overrides)
    }

    fn resolve_table(mut file_table: toml::Table, preset: Option<Preset>, overrides: &[String]) -> Result<Self> {
        let file_preset = match file_table.remove("preset") {
            Some(toml::Value::String(s)) => Some(s.parse::<Preset>()?),
            Some(other) => {
                return Err(Error::Config(vec![format!("preset: expected a string, found {other}")]));
            }
            None => None,
        };
        let base = Self::preset(preset.or(file_preset).unwrap_or(Preset::Toy));
        let mut merged = match toml::Value::try_from(&base) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("config serializes to a table"),
        };
        let mut errors = Vec::new();
        merge_into(&mut merged, &file_table, "", &mut errors);
        for ov in overrides {
            match parse_override(ov) {
                Ok((path, value)) => set_path(&mut merged, &path, value, &mut errors),
                Err(e) => errors.push(e),
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let cfg: RunConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks cross-field constraints, collecting every violation.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut positive = |key: &str, v: usize| {
            if v == 0 {
                errs.push(format!("{key}: must be positive"));
            }
        };
        positive("corpus.n_speakers", self.corpus.n_speakers);
        positive("corpus.n_styles", self.corpus.n_styles);
        positive("features.vocab_size", self.features.vocab_size);
        positive("features.kmeans_max_iters", self.features.kmeans_max_iters);
        positive("augment.n_long", self.augment.n_long);
        positive("encoder.tdnn_hidden", self.encoder.tdnn_hidden);
        positive("encoder.se_channels", self.encoder.se_channels);
        positive("encoder.attentive_pool_hidden", self.encoder.attentive_pool_hidden);
        positive("encoder.final_hidden", self.encoder.final_hidden);
        positive("encoder.res2net_scale", self.encoder.res2net_scale);
        positive("head.hidden", self.head.hidden);
        positive("head.bottleneck", self.head.bottleneck);
        positive("head.out_dim", self.head.out_dim);
        positive("acoustic.hidden", self.acoustic.hidden);
        positive("acoustic.heads", self.acoustic.heads);
        positive("acoustic.conv_channels", self.acoustic.conv_channels);
        positive("acoustic.conv_kernel", self.acoustic.conv_kernel);
        positive("acoustic.prosody_channels", self.acoustic.prosody_channels);
        positive("acoustic.prosody_kernel", self.acoustic.prosody_kernel);
        positive("acoustic.postnet_layers", self.acoustic.postnet_layers);
        positive("acoustic.postnet_channels", self.acoustic.postnet_channels);
        positive("acoustic.postnet_kernel", self.acoustic.postnet_kernel);
        positive("train.stage1_iters", self.train.stage1_iters);
        positive("train.stage2_iters", self.train.stage2_iters);
        positive("train.batch_size", self.train.batch_size);
        positive("train.grad_accum", self.train.grad_accum);

        if self.corpus.languages.is_empty() {
            errs.push("corpus.languages: at least one language is required".into());
        }
        if !(self.corpus.min_duration_s > 0.0 && self.corpus.min_duration_s <= self.corpus.max_duration_s) {
            errs.push("corpus.min_duration_s, corpus.max_duration_s: need 0 < min <= max".into());
        }
        if self.corpus.resample_temperature <= 0.0 {
            errs.push("corpus.resample_temperature: must be > 0".into());
        }
        if self.features.log_floor <= 0.0 {
            errs.push("features.log_floor: must be > 0".into());
        }
        if !(self.features.f0_min_hz > 0.0 && self.features.f0_min_hz < self.features.f0_max_hz) {
            errs.push("features.f0_min_hz, features.f0_max_hz: need 0 < min < max".into());
        }
        if !(0.0..=1.0).contains(&self.augment.noise_prob) {
            errs.push("augment.noise_prob: must lie in [0, 1]".into());
        }
        if self.augment.snr_min_db > self.augment.snr_max_db {
            errs.push(format!(
                "augment.snr_min_db, augment.snr_max_db: min ({}) exceeds max ({})",
                self.augment.snr_min_db, self.augment.snr_max_db
            ));
        }
        if !(self.augment.short_crop_s > 0.0 && self.augment.short_crop_s <= self.augment.long_crop_s) {
            errs.push("augment.short_crop_s, augment.long_crop_s: need 0 < short <= long".into());
        }
        if self.augment.n_long + self.augment.n_short < 2 {
            errs.push("augment.n_long, augment.n_short: at least two crops are required".into());
        }
        if self.augment.noise_bank_size == 0 && self.augment.noise_files.is_empty() {
            errs.push("augment.noise_bank_size: must be positive when no noise_files are given".into());
        }
        let e = &self.encoder;
        if e.input_bands != crate::MEL_BANDS {
            errs.push(format!("encoder.input_bands: must equal {}", crate::MEL_BANDS));
        }
        if e.embed_dim != crate::EMBED_DIM {
            errs.push(format!("encoder.embed_dim: fixed at {} for checkpoint compatibility", crate::EMBED_DIM));
        }
        if e.block_kernels.len() != e.block_dilations.len() || e.block_kernels.is_empty() {
            errs.push("encoder.block_kernels, encoder.block_dilations: need equal nonzero lengths".into());
        }
        if e.res2net_scale > 0 && !e.tdnn_hidden.is_multiple_of(e.res2net_scale) {
            errs.push("encoder.tdnn_hidden: must be divisible by encoder.res2net_scale".into());
        }
        if e.initial_kernel.is_multiple_of(2) || e.block_kernels.iter().any(|k| k % 2 == 0) {
            errs.push("encoder.initial_kernel, encoder.block_kernels: kernels must be odd".into());
        }
        let a = &self.acoustic;
        if a.heads > 0 && !a.hidden.is_multiple_of(a.heads) {
            errs.push("acoustic.hidden: must be divisible by acoustic.heads".into());
        }
        if a.conv_kernel.is_multiple_of(2) || a.prosody_kernel.is_multiple_of(2) || a.postnet_kernel.is_multiple_of(2) {
            errs.push("acoustic.*_kernel: kernels must be odd".into());
        }
        for (key, p) in [
            ("acoustic.dropout", a.dropout),
            ("acoustic.prosody_dropout", a.prosody_dropout),
            ("acoustic.postnet_dropout", a.postnet_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                errs.push(format!("{key}: must lie in [0, 1)"));
            }
        }
        let d = &self.dino;
        if d.tau_student <= 0.0 || d.tau_teacher_start <= 0.0 || d.tau_teacher_end <= 0.0 {
            errs.push("dino.tau_*: temperatures must be > 0".into());
        }
        if d.tau_teacher_start.max(d.tau_teacher_end) >= d.tau_student {
            errs.push("dino.tau_teacher_end, dino.tau_student: teacher must stay sharper than student".into());
        }
        if !(0.0..=1.0).contains(&d.center_momentum) {
            errs.push("dino.center_momentum: must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&d.ema_start) || !(0.0..=1.0).contains(&d.ema_end) {
            errs.push("dino.ema_start, dino.ema_end: must lie in [0, 1]".into());
        }
        let l = &self.loss;
        for (key, w) in [
            ("loss.lambda_local", l.lambda_local),
            ("loss.lambda_film", l.lambda_film),
            ("loss.lambda_dino", l.lambda_dino),
        ] {
            if w < 0.0 {
                errs.push(format!("{key}: must be nonnegative"));
            }
        }
        if self.train.lr <= 0.0 {
            errs.push("train.lr: must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            errs.push("train.beta1, train.beta2: must lie in [0, 1)".into());
        }
        if self.eval.embedding_window_s <= 0.0 {
            errs.push("eval.embedding_window_s: must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Stable hex digest of the resolved values.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(vec![format!("parse error: {}", e.message())]))
}

fn merge_into(dst: &mut toml::Table, src: &toml::Table, prefix: &str, errors: &mut Vec<String>) {
    for (key, value) in src {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match (dst.get_mut(key), value) {
            (None, _) => errors.push(format!("{path}: unknown key")),
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge_into(d, s, &path, errors),
            (Some(toml::Value::Table(_)), _) => errors.push(format!("{path}: expected a table")),
            (Some(slot), v) => *slot = coerce_like(slot, v.clone()),
        }
    }
}

/// Integer literals are accepted where the default is a float.
fn coerce_like(template: &toml::Value, v: toml::Value) -> toml::Value {
    match (template, v) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (toml::Value::Array(t), toml::Value::Array(items)) if t.first().is_some_and(|x| x.is_float()) => {
            toml::Value::Array(
                items
                    .into_iter()
                    .map(|x| match x {
                        toml::Value::Integer(i) => toml::Value::Float(i as f64),
                        other => other,
                    })
                    .collect(),
            )
        }
        (_, v) => v,
    }
}

fn parse_override(s: &str) -> std::result::Result<(Vec<String>, toml::Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("{s}: override must look like section.key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value, errors: &mut Vec<String>) {
    let joined = path.join(".");
    let mut cur = table;
    for (i, part) in path.iter().enumerate() {
        let last = i + 1 == path.len();
        match cur.get_mut(part) {
            None => {
                errors.push(format!("{joined}: unknown key"));
                return;
            }
            Some(slot) if last => {
                if slot.is_table() {
                    errors.push(format!("{joined}: cannot override a whole section"));
                } else {
                    *slot = coerce_like(slot, value);
                }
                return;
            }
            Some(toml::Value::Table(t)) => cur = t,
            Some(_) => {
                errors.push(format!("{joined}: unknown key"));
                return;
            }
        }
    }
}
