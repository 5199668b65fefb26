//! Two-stage trainer.
//!
//! Stage 1 trains the student expressivity encoder jointly with the acoustic
//! model on the reconstruction objective. Stage 2 adds an EMA teacher and the
//! multi-crop DINO term computed on noise-augmented crops. In both stages the
//! acoustic model consumes units, prosody and target Mels from the clean
//! feature cache; only the expressivity inputs are ever augmented.
//!
//! Every random draw of step `n` comes from generators keyed by
//! `(seed, stage, n, slot)`, so a step is a pure function of the model state
//! and its index. That is what makes resumed runs and gradient accumulation
//! reproduce uninterrupted, unaccumulated runs exactly.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acoustic::{AcousticInput, AcousticModel, ProsodyTensors};
use crate::augment::{apply_noise_policy, reflect_pad, sample_crops, spec_augment, NoiseBank, NoisePolicy};
use crate::config::{RunConfig, Stage2Conditioning};
use crate::container::{Container, ContainerKind};
use crate::corpus::{LanguageSampler, Manifest, Split};
use crate::dino::{collapse_metrics, dino_loss_tensor, student_log_probs, DinoState};
use crate::error::{Error, Result};
use crate::expressivity::{clone_student_to_teacher, mel_batch, ExpressivityNet};
use crate::features::{CleanWaveform, FeatureRecord, FeatureSet, MelExtractor, MelSpectrogram, NormStats, UnitSequence};
use crate::losses::{self, compose, compose_tensor, LossReport, Stage};
use crate::nn::{accumulate, global_sq_norm, scalar, Adam, Ctx, ParamStore};
use crate::SAMPLE_RATE;

pub const STUDENT_PREFIX: &str = "student/";
pub const TEACHER_PREFIX: &str = "teacher/";
pub const ACOUSTIC_PREFIX: &str = "acoustic/";

fn stage_of(n: u8) -> Result<Stage> {
    match n {
        1 => Ok(Stage::Pretssel),
        2 => Ok(Stage::Dino),
        other => Err(Error::InvalidArgument(format!("stage must be 1 or 2, got {other}"))),
    }
}

fn keyed_rng(seed: u64, stage: u8, step: usize, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 56) ^ ((step as u64) << 20) ^ slot);
    rng
}

const SAMPLER_SLOT: u64 = 0;
const DROPOUT_SLOT_BASE: u64 = 1 << 19;

/// Training utterances with their cached features and, when augmentation
/// needs them, their clean waveforms.
pub struct TrainData {
    pub features: FeatureSet,
    /// Indices into `features.records` of the training split.
    pub train: Vec<usize>,
    audio: BTreeMap<usize, CleanWaveform>,
    sampler: LanguageSampler,
}

impl TrainData {
    pub fn new(manifest: &Manifest, features: FeatureSet, cfg: &RunConfig, load_audio: bool) -> Result<Self> {
        let by_id: BTreeMap<&str, usize> = features
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.utterance_id.as_str(), i))
            .collect();
        let mut train = Vec::new();
        let mut audio = BTreeMap::new();
        for entry in manifest.split(Split::Train) {
            let &i = by_id.get(entry.utterance_id.as_str()).ok_or_else(|| {
                Error::Training(format!(
                    "missing features for training utterance {:?}; run `features extract` first",
                    entry.utterance_id
                ))
            })?;
            train.push(i);
            if load_audio {
                audio.insert(i, CleanWaveform::load(&manifest.audio_path(entry))?);
            }
        }
        if train.is_empty() {
            return Err(Error::Training("manifest has no training utterances".into()));
        }
        let langs: Vec<&str> = train
            .iter()
            .map(|&i| features.records[i].language_id.as_str())
            .collect();
        let sampler = LanguageSampler::new(&langs, cfg.corpus.resample_temperature)?;
        Ok(Self {
            features,
            train,
            audio,
            sampler,
        })
    }

    pub fn record(&self, i: usize) -> &FeatureRecord {
        &self.features.records[i]
    }

    fn waveform(&self, i: usize) -> Result<&CleanWaveform> {
        self.audio.get(&i).ok_or_else(|| {
            Error::Training(format!(
                "waveform for {:?} was not loaded",
                self.features.records[i].utterance_id
            ))
        })
    }

    fn has_audio(&self) -> bool {
        !self.audio.is_empty()
    }
}

/// Every network of a run plus the normalization statistics its Mels use.
pub struct ModelBundle {
    pub cfg: RunConfig,
    pub stats: NormStats,
    pub vocab: usize,
    pub student_ps: ParamStore,
    pub student: ExpressivityNet,
    pub acoustic_ps: ParamStore,
    pub acoustic: AcousticModel,
    pub teacher: Option<(ParamStore, ExpressivityNet)>,
}

impl ModelBundle {
    /// Freshly initialized student and acoustic model (no teacher).
    pub fn init(cfg: &RunConfig, stats: NormStats, vocab: usize) -> Result<Self> {
        let dtype = cfg.train.precision.dtype();
        let (student_ps, student) = ExpressivityNet::build(&cfg.encoder, &cfg.head, dtype, cfg.train.seed)?;
        let mut acoustic_ps = ParamStore::new(dtype, cfg.train.seed);
        let acoustic = AcousticModel::new(&mut acoustic_ps, &cfg.acoustic, vocab, &cfg.corpus.languages)?;
        Ok(Self {
            cfg: cfg.clone(),
            stats,
            vocab,
            student_ps,
            student,
            acoustic_ps,
            acoustic,
            teacher: None,
        })
    }

    /// Rebuilds the networks described by a checkpoint and loads its weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ckpt.config()?;
        let mut bundle = Self::init(&cfg, ckpt.stats()?, ckpt.vocab()?)?;
        bundle.student_ps.load_from(&ckpt.container, STUDENT_PREFIX)?;
        bundle.acoustic_ps.load_from(&ckpt.container, ACOUSTIC_PREFIX)?;
        if ckpt.has_teacher() {
            let (ps, net) = ExpressivityNet::build(&cfg.encoder, &cfg.head, cfg.train.precision.dtype(), 0)?;
            ps.load_from(&ckpt.container, TEACHER_PREFIX)?;
            bundle.teacher = Some((ps, net));
        }
        Ok(bundle)
    }

    pub fn dtype(&self) -> DType {
        self.student_ps.dtype()
    }

    /// The student, or the teacher when requested (errors if there is none).
    pub fn expressivity(&self, teacher: bool) -> Result<&ExpressivityNet> {
        if !teacher {
            return Ok(&self.student);
        }
        self.teacher
            .as_ref()
            .map(|(_, net)| net)
            .ok_or_else(|| Error::InvalidArgument("checkpoint has no teacher encoder (stage-1 checkpoint)".into()))
    }

    pub fn language_index(&self, lang: &str) -> Result<usize> {
        self.acoustic.language_index(lang)
    }
}

/// A versioned checkpoint container with typed accessors.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub container: Container,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self> {
        let container = Container::read(path, ContainerKind::Checkpoint)?;
        let ckpt = Self { container };
        ckpt.stage()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.container.write(path)
    }

    fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .container
            .meta
            .get(key)
            .ok_or_else(|| Error::Container(format!("checkpoint lacks {key:?}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn stage(&self) -> Result<u8> {
        let s: u8 = self.meta_field("stage")?;
        stage_of(s).map_err(|_| Error::Container(format!("checkpoint has invalid stage {s}")))?;
        Ok(s)
    }

    pub fn step(&self) -> Result<usize> {
        self.meta_field("step")
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.meta_field("fingerprint")
    }

    pub fn config(&self) -> Result<RunConfig> {
        self.meta_field("config")
    }

    pub fn stats(&self) -> Result<NormStats> {
        self.meta_field("stats")
    }

    pub fn vocab(&self) -> Result<usize> {
        self.meta_field("vocab")
    }

    pub fn dino(&self) -> Result<Option<DinoState>> {
        self.meta_field("dino")
    }

    pub fn has_teacher(&self) -> bool {
        self.container.names().any(|n| n.starts_with(TEACHER_PREFIX))
    }

    /// Logs a warning when the checkpoint was produced under another config.
    pub fn warn_on_fingerprint_mismatch(&self, cfg: &RunConfig) -> Result<bool> {
        let theirs = self.fingerprint()?;
        let ours = cfg.fingerprint();
        if theirs != ours {
            log::warn!("config fingerprint {ours} differs from the checkpoint's {theirs}");
            return Ok(true);
        }
        Ok(false)
    }
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub stage: u8,
    /// Zero-based index of the completed step.
    pub step: usize,
    pub mel: f64,
    pub local: f64,
    pub film: f64,
    pub dino: Option<f64>,
    pub total: f64,
    pub tau_teacher: Option<f64>,
    pub lambda_ema: Option<f64>,
    pub center_norm: Option<f64>,
    pub teacher_entropy: Option<f64>,
    pub teacher_max_mass: Option<f64>,
}

/// Augmented views of one sampled utterance.
#[derive(Debug, Clone)]
pub struct BatchItem {
    /// Index into the feature set.
    pub record: usize,
    /// Stage-1 (and full-utterance stage-2) expressivity input.
    pub full: Option<MelSpectrogram>,
    pub student_long: Vec<MelSpectrogram>,
    pub student_short: Vec<MelSpectrogram>,
    pub teacher_long: Vec<MelSpectrogram>,
    /// SNR of each student crop (long then short); `None` = left clean.
    pub student_snrs: Vec<Option<f64>>,
}

/// The sampled utterances of one optimizer step, in slot order.
#[derive(Debug, Clone)]
pub struct Batch {
    pub step: usize,
    pub items: Vec<BatchItem>,
}

struct MicroResult {
    teacher_sq_norm: f64,
    mel: f64,
    local: f64,
    film: f64,
    dino: Option<f64>,
    grads: BTreeMap<String, Tensor>,
    teacher_logits: Vec<Vec<f64>>,
    teacher_probs: Vec<Vec<f64>>,
}

/// Accumulated result of one step's forward and backward passes.
pub struct StepGradients {
    pub report: LossReport,
    /// Student and acoustic-model gradients by parameter name.
    pub grads: BTreeMap<String, Tensor>,
    /// Squared norm of any gradient that reached the teacher (always 0).
    pub teacher_grad_sq_norm: f64,
    teacher_logits: Vec<Vec<f64>>,
    teacher_probs: Vec<Vec<f64>>,
}

/// The unit sequences the acoustic model consumes for `batch`: always the
/// cached clean-audio units, whatever augmentation the batch carries.
pub fn acoustic_units<'a>(data: &'a TrainData, items: &[BatchItem]) -> Vec<&'a UnitSequence> {
    items.iter().map(|it| &data.record(it.record).units).collect()
}

/// Trainer state: networks, optimizer, DINO state and step counter.
pub struct Trainer {
    pub models: ModelBundle,
    pub stage: u8,
    /// Number of completed optimizer steps in the current stage.
    pub step: usize,
    pub adam: Adam,
    pub dino: Option<DinoState>,
    mel: MelExtractor,
    noise: Option<NoiseBank>,
}

impl Trainer {
    /// Fresh stage-1 trainer over a feature cache.
    pub fn stage1(cfg: &RunConfig, features: &FeatureSet) -> Result<Self> {
        let models = ModelBundle::init(cfg, features.stats.clone(), features.vocab_size())?;
        Self::assemble(models, 1, 0, None, None)
    }

    /// Stage-2 trainer initialized from a stage-1 checkpoint: the teacher
    /// starts as a copy of the student, the center at zero and the
    /// optimizer afresh.
    pub fn stage2_from(cfg: &RunConfig, stage1: &Checkpoint) -> Result<Self> {
        if stage1.stage()? != 1 {
            return Err(Error::InvalidArgument("stage 2 must start from a stage-1 checkpoint".into()));
        }
        let mut models = ModelBundle::from_checkpoint(stage1)?;
        models.cfg = cfg.clone();
        models.teacher = Some(clone_student_to_teacher(&models.student_ps, &cfg.encoder, &cfg.head)?);
        let dino = DinoState::new(&cfg.dino, cfg.head.out_dim, cfg.train.stage2_iters)?;
        Self::assemble(models, 2, 0, None, Some(dino))
    }

    /// Continues the run saved in `ckpt` under `cfg`.
    pub fn resume(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.warn_on_fingerprint_mismatch(cfg)?;
        let stage = ckpt.stage()?;
        let mut models = ModelBundle::from_checkpoint(ckpt)?;
        models.cfg = cfg.clone();
        let dino = ckpt.dino()?;
        if stage == 2 && (dino.is_none() || models.teacher.is_none()) {
            return Err(Error::Container("stage-2 checkpoint lacks teacher or DINO state".into()));
        }
        let adam = Adam::load_from(&ckpt.container)?;
        Self::assemble(models, stage, ckpt.step()?, Some(adam), dino)
    }

    /// Trainer for `stage` given an optional checkpoint, following the CLI
    /// rules: stage 1 starts fresh or resumes; stage 2 starts from a stage-1
    /// checkpoint or resumes a stage-2 one.
    pub fn for_stage(cfg: &RunConfig, stage: u8, features: &FeatureSet, ckpt: Option<&Checkpoint>) -> Result<Self> {
        stage_of(stage)?;
        match (stage, ckpt) {
            (1, None) => Self::stage1(cfg, features),
            (_, None) => Err(Error::InvalidArgument(
                "stage 2 requires a stage-1 checkpoint (pass --resume)".into(),
            )),
            (s, Some(c)) => match (s, c.stage()?) {
                (1, 1) | (2, 2) => Self::resume(cfg, c),
                (2, 1) => Self::stage2_from(cfg, c),
                _ => Err(Error::InvalidArgument("cannot resume stage 1 from a stage-2 checkpoint".into())),
            },
        }
    }

    fn assemble(models: ModelBundle, stage: u8, step: usize, adam: Option<Adam>, dino: Option<DinoState>) -> Result<Self> {
        let cfg = &models.cfg;
        cfg.validate()?;
        let t = &cfg.train;
        let adam = adam.unwrap_or_else(|| Adam::new(t.lr, t.beta1, t.beta2, t.eps));
        let needs_noise = stage == 2 || cfg.augment.stage1_noise;
        let noise = if needs_noise {
            Some(NoiseBank::from_config(&cfg.augment, crop_samples(cfg.augment.long_crop_s))?)
        } else {
            None
        };
        Ok(Self {
            mel: MelExtractor::new(cfg.features.log_floor),
            models,
            stage,
            step,
            adam,
            dino,
            noise,
        })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.models.cfg
    }

    /// Whether batches need clean waveforms (crops or noisy stage-1 inputs).
    pub fn needs_audio(&self) -> bool {
        self.noise.is_some()
    }

    pub fn total_steps(&self) -> usize {
        match self.stage {
            1 => self.cfg().train.stage1_iters,
            _ => self.cfg().train.stage2_iters,
        }
    }

    fn noisy_mel(&self, clean: &[f64], rng: &mut ChaCha8Rng) -> Result<(MelSpectrogram, Option<f64>)> {
        let bank = self.noise.as_ref().expect("noise bank exists when augmentation is on");
        let policy = NoisePolicy::from(&self.cfg().augment);
        let (audio, draw) = apply_noise_policy(clean, bank, &policy, rng)?;
        let mel = self.models.stats.normalize(&self.mel.extract(&audio)?);
        Ok((mel, draw.map(|d| d.snr_db)))
    }

    /// Samples and augments the utterances of step `step`. Each utterance
    /// slot draws from its own generator, so the result does not depend on
    /// how the batch is later split into micro-batches.
    pub fn prepare_batch(&self, data: &TrainData, step: usize) -> Result<Batch> {
        let cfg = self.cfg();
        let seed = cfg.train.seed;
        let n = cfg.train.batch_size * cfg.train.grad_accum;
        let mut sampler_rng = keyed_rng(seed, self.stage, step, SAMPLER_SLOT);
        let picks: Vec<usize> = (0..n).map(|_| data.train[data.sampler.sample(&mut sampler_rng)]).collect();
        if self.needs_audio() && !data.has_audio() {
            return Err(Error::Training("augmentation needs waveforms; load TrainData with audio".into()));
        }
        let a = &cfg.augment;
        let mut items = Vec::with_capacity(n);
        for (slot, &record) in picks.iter().enumerate() {
            let mut rng = keyed_rng(seed, self.stage, step, slot as u64 + 1);
            let rec = data.record(record);
            let mut item = BatchItem {
                record,
                full: None,
                student_long: Vec::new(),
                student_short: Vec::new(),
                teacher_long: Vec::new(),
                student_snrs: Vec::new(),
            };
            if self.stage == 1 {
                item.full = Some(if a.stage1_noise {
                    let (mel, snr) = self.noisy_mel(data.waveform(record)?.samples(), &mut rng)?;
                    item.student_snrs.push(snr);
                    mel
                } else {
                    rec.mel.clone()
                });
                items.push(item);
                continue;
            }
            if cfg.train.stage2_conditioning == Stage2Conditioning::FullUtterance {
                item.full = Some(rec.mel.clone());
            }
            let wave = data.waveform(record)?.samples();
            let long_len = crop_samples(a.long_crop_s);
            let short_len = crop_samples(a.short_crop_s);
            let plan = sample_crops(wave.len(), long_len, short_len, a.n_long, a.n_short, &mut rng)?;
            let padded = reflect_pad(wave, plan.padded_len);
            for crop in &plan.long {
                let seg = &padded[crop.start..crop.end()];
                let (noisy, snr) = self.noisy_mel(seg, &mut rng)?;
                let teacher = if a.teacher_shares_noise {
                    noisy.clone()
                } else {
                    self.noisy_mel(seg, &mut rng)?.0
                };
                let (student, _) = spec_augment(&noisy, a.freq_mask_max, a.time_mask_max, &mut rng)?;
                item.student_long.push(student);
                item.teacher_long.push(teacher);
                item.student_snrs.push(snr);
            }
            for crop in &plan.short {
                let (noisy, snr) = self.noisy_mel(&padded[crop.start..crop.end()], &mut rng)?;
                let (student, _) = spec_augment(&noisy, a.freq_mask_max, a.time_mask_max, &mut rng)?;
                item.student_short.push(student);
                item.student_snrs.push(snr);
            }
            items.push(item);
        }
        Ok(Batch { step, items })
    }

    /// Forward and backward over one micro-batch. Loss terms are scaled by
    /// this micro-batch's share of the full batch's normalizers (frames for
    /// the Mel loss, units for prosody, utterances for the rest), so summed
    /// micro-batch gradients equal the full-batch gradient.
    fn micro_step(&self, data: &TrainData, items: &[BatchItem], shares: [f64; 3], ctx: &mut Ctx) -> Result<MicroResult> {
        let cfg = self.cfg();
        let m = &self.models;
        let dtype = m.dtype();
        let b = items.len();
        let records: Vec<&FeatureRecord> = items.iter().map(|it| data.record(it.record)).collect();
        let [mel_share, unit_share, utt_share] = shares;

        let mut dino_term = None;
        let mut teacher_logits = Vec::new();
        let mut teacher_probs = Vec::new();
        let embedding = if self.stage == 1 {
            let mels: Vec<&MelSpectrogram> = items.iter().map(|it| it.full.as_ref().expect("stage-1 input")).collect();
            let (x, mask) = mel_batch(&mels, dtype)?;
            m.student.encoder.forward(&x, &mask)?
        } else {
            let dino = self.dino.as_ref().expect("stage-2 state");
            let (_, teacher) = m.teacher.as_ref().expect("stage-2 teacher");
            let n_long = cfg.augment.n_long;
            let n_short = cfg.augment.n_short;
            let crop_major = |f: &dyn Fn(&BatchItem) -> &Vec<MelSpectrogram>, n: usize| -> Vec<&MelSpectrogram> {
                (0..n).flat_map(|l| items.iter().map(move |it| &f(it)[l])).collect()
            };
            let encode = |net: &ExpressivityNet, mels: Vec<&MelSpectrogram>| -> Result<(Tensor, Tensor)> {
                let (x, mask) = mel_batch(&mels, dtype)?;
                let e = net.encoder.forward(&x, &mask)?;
                let q = net.head.forward(&e)?.logits;
                Ok((e, q))
            };
            let (e_long, q_long) = encode(&m.student, crop_major(&|it| &it.student_long, n_long))?;
            let (_, q_teacher) = encode(teacher, crop_major(&|it| &it.teacher_long, n_long))?;
            let q_teacher = q_teacher.detach();
            let mut tp = Vec::with_capacity(n_long);
            let mut slp = Vec::with_capacity(n_long + n_short);
            for l in 0..n_long {
                let p = dino.teacher_probs_tensor(&q_teacher.narrow(0, l * b, b)?)?;
                teacher_probs.extend(p.to_dtype(DType::F64)?.to_vec2::<f64>()?);
                tp.push(p);
                slp.push(student_log_probs(&q_long.narrow(0, l * b, b)?, dino.tau_student)?);
            }
            if n_short > 0 {
                let (_, q_short) = encode(&m.student, crop_major(&|it| &it.student_short, n_short))?;
                for s in 0..n_short {
                    slp.push(student_log_probs(&q_short.narrow(0, s * b, b)?, dino.tau_student)?);
                }
            }
            teacher_logits = q_teacher.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            dino_term = Some(dino_loss_tensor(&tp, &slp)?);
            match cfg.train.stage2_conditioning {
                Stage2Conditioning::FirstLongCrop => e_long.narrow(0, 0, b)?,
                Stage2Conditioning::FullUtterance => {
                    let mels: Vec<&MelSpectrogram> = items.iter().map(|it| it.full.as_ref().expect("full input")).collect();
                    let (x, mask) = mel_batch(&mels, dtype)?;
                    m.student.encoder.forward(&x, &mask)?
                }
            }
        };

        let seqs = acoustic_units(data, items);
        let langs = records
            .iter()
            .map(|r| m.acoustic.language_index(&r.language_id))
            .collect::<Result<Vec<_>>>()?;
        let input = AcousticInput::new(&seqs, &langs, embedding)?;
        let n_units = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let tracks: Vec<_> = records.iter().map(|r| &r.prosody).collect();
        let targets = ProsodyTensors::from_tracks(&tracks, n_units, dtype)?;
        let out = m.acoustic.forward(&input, Some(&targets), ctx)?;
        let target_mels: Vec<&MelSpectrogram> = records.iter().map(|r| &r.mel).collect();
        let (target, _) = mel_batch(&target_mels, dtype)?;
        let target = target.transpose(1, 2)?.contiguous()?;

        let mel = losses::mel_loss(&out.mel_pre, &out.mel_post, &target, &out.frame_mask)?;
        let local = losses::local_prosody_loss(&out.prosody, &targets, &input.unit_mask)?;
        let film = losses::film_regularizer(&out.film)?;
        let mel = mel.affine(mel_share, 0.0)?;
        let local = local.total.affine(unit_share, 0.0)?;
        let film = film.affine(utt_share, 0.0)?;
        let dino_term = dino_term.map(|d| d.affine(utt_share, 0.0)).transpose()?;
        let total = compose_tensor(&mel, &local, &film, dino_term.as_ref(), &cfg.loss)?;

        let gs = total.backward()?;
        let mut grads = m.student_ps.grads(&gs);
        grads.extend(m.acoustic_ps.grads(&gs));
        let teacher_sq_norm = match &m.teacher {
            Some((ps, _)) => global_sq_norm(&ps.grads(&gs))?,
            None => 0.0,
        };
        Ok(MicroResult {
            teacher_sq_norm,
            mel: scalar(&mel)?,
            local: scalar(&local)?,
            film: scalar(&film)?,
            dino: dino_term.as_ref().map(scalar).transpose()?,
            grads,
            teacher_logits,
            teacher_probs,
        })
    }

    /// Loss report and gradients for a prepared batch, without updating
    /// anything. Micro-batches follow `train.batch_size`.
    pub fn gradients(&self, data: &TrainData, batch: &Batch) -> Result<StepGradients> {
        let cfg = self.cfg();
        let stage = stage_of(self.stage)?;
        let records: Vec<&FeatureRecord> = batch.items.iter().map(|it| data.record(it.record)).collect();
        let frames_total: usize = records.iter().map(|r| r.mel.frames).sum();
        let units_total: usize = records.iter().map(|r| r.units.len()).sum();
        let utts_total = records.len();

        let mut grads = BTreeMap::new();
        let (mut mel, mut local, mut film, mut dino) = (0.0, 0.0, 0.0, None::<f64>);
        let mut teacher_logits = Vec::new();
        let mut teacher_probs = Vec::new();
        let mut teacher_grad_sq_norm = 0.0;
        for (k, chunk) in batch.items.chunks(cfg.train.batch_size).enumerate() {
            let recs = &records[k * cfg.train.batch_size..k * cfg.train.batch_size + chunk.len()];
            let shares = [
                recs.iter().map(|r| r.mel.frames).sum::<usize>() as f64 / frames_total as f64,
                recs.iter().map(|r| r.units.len()).sum::<usize>() as f64 / units_total as f64,
                chunk.len() as f64 / utts_total as f64,
            ];
            let mut ctx = Ctx::train(keyed_rng(cfg.train.seed, self.stage, batch.step, DROPOUT_SLOT_BASE + k as u64));
            let r = self.micro_step(data, chunk, shares, &mut ctx)?;
            mel += r.mel;
            local += r.local;
            film += r.film;
            if let Some(d) = r.dino {
                dino = Some(dino.unwrap_or(0.0) + d);
            }
            accumulate(&mut grads, r.grads)?;
            teacher_grad_sq_norm += r.teacher_sq_norm;
            teacher_logits.extend(r.teacher_logits);
            teacher_probs.extend(r.teacher_probs);
        }

        Ok(StepGradients {
            report: compose(mel, local, film, dino, &cfg.loss, stage)?,
            grads,
            teacher_grad_sq_norm,
            teacher_logits,
            teacher_probs,
        })
    }

    /// Runs one optimizer step on a prepared batch and returns its log line.
    /// A non-finite loss aborts before any state changes.
    pub fn train_step(&mut self, data: &TrainData, batch: &Batch) -> Result<StepLog> {
        let StepGradients {
            report,
            grads,
            teacher_grad_sq_norm,
            teacher_logits,
            teacher_probs,
        } = self.gradients(data, batch)?;
        if !report.is_finite() {
            let ids: Vec<&str> = batch
                .items
                .iter()
                .map(|it| data.record(it.record).utterance_id.as_str())
                .collect();
            return Err(Error::NonFiniteLoss {
                step: batch.step,
                batch_id: ids.join(","),
                detail: serde_json::to_string(&report)?,
            });
        }
        if teacher_grad_sq_norm != 0.0 {
            return Err(Error::Training("gradient reached the teacher".into()));
        }

        self.adam.step(&[&self.models.student_ps, &self.models.acoustic_ps], &grads)?;
        let mut log = StepLog {
            stage: self.stage,
            step: batch.step,
            mel: report.mel,
            local: report.local,
            film: report.film,
            dino: report.dino,
            total: report.total,
            tau_teacher: None,
            lambda_ema: None,
            center_norm: None,
            teacher_entropy: None,
            teacher_max_mass: None,
        };
        if let Some(state) = self.dino.as_mut() {
            let (teacher_ps, _) = self.models.teacher.as_ref().expect("stage-2 teacher");
            let lambda = state.lambda_ema();
            log.tau_teacher = Some(state.tau_teacher());
            log.lambda_ema = Some(lambda);
            teacher_ps.ema_from(&self.models.student_ps, lambda)?;
            state.update_center(&teacher_logits)?;
            state.advance();
            log.center_norm = Some(state.center_norm());
            let c = collapse_metrics(&teacher_probs)?;
            log.teacher_entropy = Some(c.mean_entropy);
            log.teacher_max_mass = Some(c.max_dim_mass);
        }
        self.step = batch.step + 1;
        Ok(log)
    }

    /// Trains until `until` completed steps (capped at the stage's total).
    /// With an output directory, appends log lines to `log_stage{S}.jsonl`,
    /// writes periodic checkpoints and a final `stage{S}.ckpt`.
    pub fn run(&mut self, data: &TrainData, until: usize, out_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        let until = until.min(self.total_steps());
        let mut log_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(format!("log_stage{}.jsonl", self.stage));
                let f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, f))
            }
            None => None,
        };
        let every = self.cfg().train.checkpoint_every;
        let mut logs = Vec::new();
        while self.step < until {
            let batch = self.prepare_batch(data, self.step)?;
            let log = match self.train_step(data, &batch) {
                Ok(log) => log,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    if let Some(dir) = out_dir {
                        let path = dir.join(format!("nonfinite_stage{}_step{}.json", self.stage, batch.step));
                        let ids: Vec<&str> = batch
                            .items
                            .iter()
                            .map(|it| data.record(it.record).utterance_id.as_str())
                            .collect();
                        let dump = json!({"stage": self.stage, "step": batch.step, "utterances": ids, "error": e.to_string()});
                        std::fs::write(&path, serde_json::to_vec_pretty(&dump)?).map_err(|err| Error::io(&path, err))?;
                    }
                    log::error!("{e}");
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some((path, f)) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&log)?).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if log.step % 10 == 0 {
                log::info!("stage {} step {} total {:.5}", log.stage, log.step, log.total);
            }
            logs.push(log);
            if let Some(dir) = out_dir {
                if every > 0 && self.step.is_multiple_of(every) && self.step < until {
                    self.checkpoint()?.save(&self.periodic_path(dir))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.save(&self.final_path(dir))?;
        }
        Ok(logs)
    }

    pub fn final_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("stage{}.ckpt", self.stage))
    }

    fn periodic_path(&self, dir: &Path) -> PathBuf {
        dir.join(format!("stage{}_step{:07}.ckpt", self.stage, self.step))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let m = &self.models;
        let meta = json!({
            "stage": self.stage,
            "step": self.step,
            "fingerprint": m.cfg.fingerprint(),
            "config": m.cfg,
            "stats": m.stats,
            "vocab": m.vocab,
            "dino": self.dino,
        });
        let mut c = Container::new(ContainerKind::Checkpoint, meta);
        m.student_ps.save_into(&mut c, STUDENT_PREFIX)?;
        m.acoustic_ps.save_into(&mut c, ACOUSTIC_PREFIX)?;
        if let Some((ps, _)) = &m.teacher {
            ps.save_into(&mut c, TEACHER_PREFIX)?;
        }
        self.adam.save_into(&mut c)?;
        Ok(Checkpoint { container: c })
    }
}

/// Crop length in samples.
pub fn crop_samples(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE as f64).round() as usize
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use super::*;
    use crate::config::{Precision, Preset};
    use crate::corpus::generate_synthetic_corpus;
    use crate::features::FeatureFrontend;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::preset(Preset::Smoke);
        c.corpus.min_duration_s = 1.3;
        c.corpus.max_duration_s = 1.6;
        c.corpus.min_train_duration_s = 1.0;
        c.features.vocab_size = 12;
        c.augment.long_crop_s = 0.8;
        c.augment.short_crop_s = 0.5;
        c.augment.n_short = 2;
        c.encoder.tdnn_hidden = 16;
        c.encoder.se_channels = 4;
        c.encoder.attentive_pool_hidden = 8;
        c.encoder.final_hidden = 24;
        c.head.hidden = 16;
        c.head.bottleneck = 16;
        c.head.out_dim = 24;
        c.acoustic.hidden = 16;
        c.acoustic.conv_channels = 16;
        c.acoustic.prosody_channels = 8;
        c.acoustic.postnet_channels = 8;
        c.acoustic.postnet_layers = 2;
        c.acoustic.dropout = 0.0;
        c.acoustic.prosody_dropout = 0.0;
        c.acoustic.postnet_dropout = 0.0;
        c.train.precision = Precision::F64;
        c.train.stage1_iters = 6;
        c.train.stage2_iters = 6;
        c
    }

    struct Fixture {
        _dir: tempfile::TempDir,
        manifest: Manifest,
        features: FeatureSet,
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let cfg = tiny_config();
            let dir = tempfile::tempdir().unwrap();
            let manifest = generate_synthetic_corpus(&cfg.corpus, 6, 5, dir.path()).unwrap();
            let fe = FeatureFrontend::new(&cfg.features);
            let (stats, book) = fe.fit_codebook(&manifest, cfg.features.vocab_size).unwrap();
            let features = fe.extract_manifest(&manifest, &stats, &book).unwrap();
            Fixture {
                _dir: dir,
                manifest,
                features,
            }
        })
    }

    fn data(cfg: &RunConfig) -> TrainData {
        let f = fixture();
        TrainData::new(&f.manifest, f.features.clone(), cfg, true).unwrap()
    }

    fn stage1_checkpoint(cfg: &RunConfig, steps: usize) -> Checkpoint {
        let d = data(cfg);
        let mut t = Trainer::stage1(cfg, &d.features).unwrap();
        t.run(&d, steps, None).unwrap();
        t.checkpoint().unwrap()
    }

    #[test]
    fn gradient_accumulation_matches_larger_batch() {
        for stage in [1u8, 2] {
            let mut big = tiny_config();
            big.train.batch_size = 4;
            big.train.grad_accum = 1;
            let mut acc = big.clone();
            acc.train.batch_size = 1;
            acc.train.grad_accum = 4;
            let d = data(&big);
            let make = |cfg: &RunConfig| match stage {
                1 => Trainer::stage1(cfg, &d.features).unwrap(),
                _ => Trainer::stage2_from(cfg, &stage1_checkpoint(&big, 1)).unwrap(),
            };
            let (mut a, mut b) = (make(&big), make(&acc));
            let la = a.run(&d, 2, None).unwrap();
            let lb = b.run(&d, 2, None).unwrap();
            for (x, y) in la.iter().zip(&lb) {
                assert!((x.total - y.total).abs() < 1e-9, "stage {stage}: {} vs {}", x.total, y.total);
            }
            let diff = a.models.student_ps.max_abs_diff(&b.models.student_ps).unwrap();
            let diff_am = a.models.acoustic_ps.max_abs_diff(&b.models.acoustic_ps).unwrap();
            assert!(diff < 1e-6 && diff_am < 1e-6, "stage {stage}: {diff} {diff_am}");
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let s1 = stage1_checkpoint(&cfg, 2);
        let mut full = Trainer::stage2_from(&cfg, &s1).unwrap();
        let all = full.run(&d, 4, None).unwrap();

        let mut first = Trainer::stage2_from(&cfg, &s1).unwrap();
        let head = first.run(&d, 2, None).unwrap();
        let bytes = first.checkpoint().unwrap().container.to_bytes().unwrap();
        let ckpt = Checkpoint {
            container: Container::from_bytes(&bytes).unwrap(),
        };
        let mut resumed = Trainer::resume(&cfg, &ckpt).unwrap();
        assert_eq!(resumed.step, 2);
        let tail = resumed.run(&d, 4, None).unwrap();
        let joined: Vec<StepLog> = head.into_iter().chain(tail).collect();
        assert_eq!(joined, all);
        assert_eq!(resumed.models.student_ps.max_abs_diff(&full.models.student_ps).unwrap(), 0.0);
        let (tr, _) = resumed.models.teacher.as_ref().unwrap();
        let (tf, _) = full.models.teacher.as_ref().unwrap();
        assert_eq!(tr.max_abs_diff(tf).unwrap(), 0.0);
        assert_eq!(resumed.dino, full.dino);
    }

    #[test]
    fn fixed_seed_reruns_give_identical_logs() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let run = || {
            let mut t = Trainer::stage1(&cfg, &d.features).unwrap();
            t.run(&d, 3, None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn stage_two_starts_from_a_copy_of_the_student() {
        let cfg = tiny_config();
        let t = Trainer::stage2_from(&cfg, &stage1_checkpoint(&cfg, 1)).unwrap();
        let (teacher, _) = t.models.teacher.as_ref().unwrap();
        assert_eq!(teacher.max_abs_diff(&t.models.student_ps).unwrap(), 0.0);
        let dino = t.dino.as_ref().unwrap();
        assert!(dino.center.iter().all(|&c| c == 0.0));
        assert_eq!(dino.center.len(), cfg.head.out_dim);
        assert_eq!((t.stage, t.step), (2, 0));
    }

    #[test]
    fn stage_two_requires_a_stage_one_checkpoint() {
        let cfg = tiny_config();
        let d = data(&cfg);
        assert!(matches!(
            Trainer::for_stage(&cfg, 2, &d.features, None),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn teacher_is_an_exact_ema_of_the_updated_student() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let mut t = Trainer::stage2_from(&cfg, &stage1_checkpoint(&cfg, 1)).unwrap();
        t.run(&d, 1, None).unwrap();
        let (teacher, _) = t.models.teacher.as_ref().unwrap();
        let before = teacher.deep_clone().unwrap();
        let lambda = t.dino.as_ref().unwrap().lambda_ema();
        let batch = t.prepare_batch(&d, 1).unwrap();
        t.train_step(&d, &batch).unwrap();
        let expected = before.deep_clone().unwrap();
        expected.ema_from(&t.models.student_ps, lambda).unwrap();
        let (teacher, _) = t.models.teacher.as_ref().unwrap();
        assert_eq!(teacher.max_abs_diff(&expected).unwrap(), 0.0);
        assert!(teacher.max_abs_diff(&before).unwrap() > 0.0);
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let t = Trainer::stage2_from(&cfg, &stage1_checkpoint(&cfg, 1)).unwrap();
        let g = t.gradients(&d, &t.prepare_batch(&d, 0).unwrap()).unwrap();
        assert_eq!(g.teacher_grad_sq_norm, 0.0);
        assert!(g.grads.keys().all(|k| t.models.teacher.as_ref().unwrap().0.get(k).is_none() || k.starts_with("enc") || k.starts_with("head")));
        assert!(g.grads.contains_key("head.l1.weight"));
    }

    #[test]
    fn zero_dino_weight_reduces_to_the_reconstruction_objective() {
        let mut cfg = tiny_config();
        cfg.loss.lambda_dino = 0.0;
        let d = data(&cfg);
        let mut t = Trainer::stage2_from(&cfg, &stage1_checkpoint(&cfg, 1)).unwrap();
        for log in t.run(&d, 2, None).unwrap() {
            assert!(log.dino.is_some());
            let eq1 = log.mel + cfg.loss.lambda_local * log.local + cfg.loss.lambda_film * log.film;
            assert!((log.total - eq1).abs() < 1e-9);
        }
    }

    #[test]
    fn acoustic_model_consumes_clean_units() {
        let mut cfg = tiny_config();
        cfg.augment.noise_prob = 1.0;
        cfg.augment.snr_min_db = 0.0;
        cfg.augment.snr_max_db = 0.0;
        let f = fixture();
        let d = data(&cfg);
        let t = Trainer::stage2_from(&cfg, &stage1_checkpoint(&cfg, 1)).unwrap();
        let batch = t.prepare_batch(&d, 0).unwrap();
        let fe = FeatureFrontend::new(&cfg.features);
        let units = acoustic_units(&d, &batch.items);
        for (item, used) in batch.items.iter().zip(units) {
            assert!(item.student_snrs.iter().all(|s| s == &Some(0.0)));
            let entry = &f.manifest.entries[item.record];
            let clean = CleanWaveform::load(&f.manifest.audio_path(entry)).unwrap();
            let from_clean = fe.units(&clean, &d.features.stats, &d.features.codebook).unwrap();
            assert_eq!(used, &from_clean);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let noise = crate::augment::NoiseKind::White.generate(clean.samples().len(), &mut rng);
            let noisy = crate::augment::mix_at_snr(clean.samples(), &noise, 0.0).unwrap().audio;
            let from_noisy = fe.units(&CleanWaveform::new(noisy), &d.features.stats, &d.features.codebook).unwrap();
            assert_ne!(used, &from_noisy);
        }
    }

    #[test]
    fn checkpoint_round_trip_gives_identical_forward() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let s1 = stage1_checkpoint(&cfg, 1);
        let mut t = Trainer::stage2_from(&cfg, &s1).unwrap();
        t.run(&d, 1, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        t.checkpoint().unwrap().save(&path).unwrap();
        let back = ModelBundle::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
        let mel = &d.features.records[0].mel;
        for teacher in [false, true] {
            let a = t.models.expressivity(teacher).unwrap().encoder.embed(mel, DType::F64).unwrap();
            let b = back.expressivity(teacher).unwrap().encoder.embed(mel, DType::F64).unwrap();
            assert_eq!(a, b);
        }
        let e = t.models.student.encoder.embed(mel, DType::F64).unwrap();
        let units = &d.features.records[0].units;
        let x = crate::inference::generate(&t.models, units, "en", &e).unwrap();
        assert_eq!(x, crate::inference::generate(&back, units, "en", &e).unwrap());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let cfg = tiny_config();
        let bytes = stage1_checkpoint(&cfg, 0).container.to_bytes().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cut.ckpt");
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_without_updating() {
        let cfg = tiny_config();
        let d = data(&cfg);
        let mut t = Trainer::stage1(&cfg, &d.features).unwrap();
        let var = t.models.acoustic_ps.get("am.mel_out.bias").unwrap();
        var.set(&var.as_tensor().affine(0.0, f64::NAN).unwrap()).unwrap();
        let before = t.models.student_ps.deep_clone().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = t.run(&d, 1, Some(dir.path())).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, batch_id, .. } => {
                assert_eq!(step, 0);
                assert!(batch_id.contains("utt"));
            }
            other => panic!("unexpected {other}"),
        }
        assert_eq!(t.step, 0);
        assert!(dir.path().join("nonfinite_stage1_step0.json").exists());
        assert_eq!(t.models.student_ps.max_abs_diff(&before).unwrap(), 0.0);
    }

    #[test]
    fn missing_features_are_reported() {
        let cfg = tiny_config();
        let f = fixture();
        let mut features = f.features.clone();
        features.records.pop();
        assert!(matches!(
            TrainData::new(&f.manifest, features, &cfg, false),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn run_writes_logs_and_checkpoints() {
        let mut cfg = tiny_config();
        cfg.train.checkpoint_every = 2;
        let d = data(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::stage1(&cfg, &d.features).unwrap();
        let logs = t.run(&d, 3, Some(dir.path())).unwrap();
        let text = std::fs::read_to_string(dir.path().join("log_stage1.jsonl")).unwrap();
        let parsed: Vec<StepLog> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(parsed, logs);
        assert!(dir.path().join("stage1_step0000002.ckpt").exists());
        let last = Checkpoint::load(&t.final_path(dir.path())).unwrap();
        assert_eq!(last.step().unwrap(), 3);
        assert_eq!(last.fingerprint().unwrap(), cfg.fingerprint());
    }
}
