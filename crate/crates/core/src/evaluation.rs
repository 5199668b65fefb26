//! Objective metrics: the denoiser-based SNR estimate, embedding noise
//! robustness (clean↔noisy cosine and label-cluster silhouette) and Mel
//! reconstruction error.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::AcousticInput;
use crate::augment::{mix_at_snr, NoiseBank};
use crate::audio;
use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::expressivity::mel_batch;
use crate::features::{FeatureRecord, MelExtractor, MelSpectrogram};
use crate::nn::Ctx;
use crate::training::ModelBundle;

/// Energies below this are treated as zero.
pub const ENERGY_FLOOR: f64 = 1e-12;

/// An SNR estimate with flags for the degenerate cases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrValue {
    pub db: f64,
    /// `s == ŝ`: the residual energy was floored, so `db` is a cap.
    pub residual_floored: bool,
    /// `ŝ == 0`: the denoised energy was floored, so `db` is a large negative.
    pub denoised_floored: bool,
}

/// `10·log10(‖ŝ‖² / ‖s − ŝ‖²)` for the original `s` and denoised `ŝ`.
pub fn snr_metric(original: &[f64], denoised: &[f64]) -> Result<SnrValue> {
    if original.len() != denoised.len() {
        return Err(Error::InvalidArgument(format!(
            "snr metric needs equal lengths, got {} and {}",
            original.len(),
            denoised.len()
        )));
    }
    let signal: f64 = denoised.iter().map(|x| x * x).sum();
    let residual: f64 = original.iter().zip(denoised).map(|(s, d)| (s - d) * (s - d)).sum();
    let residual_floored = residual < ENERGY_FLOOR;
    let denoised_floored = signal < ENERGY_FLOOR;
    let db = 10.0 * (signal.max(ENERGY_FLOOR) / residual.max(ENERGY_FLOOR)).log10();
    Ok(SnrValue {
        db,
        residual_floored,
        denoised_floored,
    })
}

/// Speech enhancement front end for the SNR estimate.
pub trait Denoiser {
    fn denoise(&self, noisy: &[f64]) -> Result<Vec<f64>>;
}

/// Returns a known clean signal: the exact denoiser used to validate the metric.
pub struct OracleDenoiser {
    pub clean: Vec<f64>,
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, noisy: &[f64]) -> Result<Vec<f64>> {
        if noisy.len() != self.clean.len() {
            return Err(Error::InvalidArgument("oracle denoiser length mismatch".into()));
        }
        Ok(self.clean.clone())
    }
}

pub fn estimate_snr(noisy: &[f64], denoiser: &dyn Denoiser) -> Result<SnrValue> {
    snr_metric(noisy, &denoiser.denoise(noisy)?)
}

/// Mixes `noise` into `clean` at `snr_db` and measures it back with the
/// oracle denoiser.
pub fn oracle_snr_check(clean: &[f64], noise: &[f64], snr_db: f64) -> Result<f64> {
    let mix = mix_at_snr(clean, noise, snr_db)?;
    let oracle = OracleDenoiser { clean: clean.to_vec() };
    Ok(estimate_snr(&mix.audio, &oracle)?.db)
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean silhouette with cosine distance. Points in singleton clusters score 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[String]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::InvalidArgument("silhouette needs one label per point".into()));
    }
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least two clusters".into()));
    }
    let n = points.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - cosine(&points[i], &points[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mean_to = |i: usize, members: &[usize]| -> f64 {
        let others: Vec<usize> = members.iter().copied().filter(|&j| j != i).collect();
        others.iter().map(|&j| dist[i * n + j]).sum::<f64>() / others.len() as f64
    };
    let mut total = 0.0;
    for i in 0..n {
        let own = &clusters[labels[i].as_str()];
        if own.len() < 2 {
            continue;
        }
        let a = mean_to(i, own);
        let b = clusters
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, m)| mean_to(i, m))
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Robustness at one SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrBreakdown {
    pub snr_db: f64,
    pub mean_cosine: f64,
    /// Silhouette of the noisy embeddings over `speaker|style` labels.
    pub silhouette: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// Mean clean↔noisy cosine over every utterance and SNR.
    pub mean_clean_noisy_cosine: f64,
    /// Mean noisy-embedding silhouette over the SNR list.
    pub cluster_separation: f64,
    pub clean_silhouette: f64,
    pub per_snr: Vec<SnrBreakdown>,
    pub n_utterances: usize,
    /// Entries without speaker or style labels, left out.
    pub excluded_unlabeled: usize,
}

impl RobustnessReport {
    pub fn at(&self, snr_db: f64) -> Option<&SnrBreakdown> {
        self.per_snr.iter().find(|b| b.snr_db == snr_db)
    }
}

/// Options for [`embedding_robustness`].
#[derive(Debug, Clone)]
pub struct RobustnessOptions {
    pub snrs_db: Vec<f64>,
    pub seed: u64,
    /// Embed with the teacher instead of the student.
    pub use_teacher: bool,
    /// Held-out noise bank size (synthetic white/pink/babble).
    pub noise_entries: usize,
}

/// Encodes every labeled utterance clean and at each SNR, reporting the
/// clean↔noisy cosine and how well noisy embeddings keep the
/// (speaker, style) clusters. Noise comes from a bank seeded by the
/// evaluation seed, independent of the training noise.
pub fn embedding_robustness(models: &ModelBundle, manifest: &Manifest, opts: &RobustnessOptions) -> Result<RobustnessReport> {
    let net = models.expressivity(opts.use_teacher)?;
    let dtype = models.dtype();
    let extractor = MelExtractor::new(models.cfg.features.log_floor);
    let embed = |wave: &[f64]| -> Result<Vec<f64>> {
        let mel = models.stats.normalize(&extractor.extract(wave)?);
        net.encoder.embed(&mel, dtype)
    };
    let mut excluded = 0;
    let mut labels = Vec::new();
    let mut waves = Vec::new();
    for entry in &manifest.entries {
        match (&entry.speaker_label, &entry.style_label) {
            (Some(sp), Some(st)) => {
                labels.push(format!("{sp}|{st}"));
                waves.push(audio::read_wav(&manifest.audio_path(entry))?);
            }
            _ => excluded += 1,
        }
    }
    if waves.is_empty() {
        return Err(Error::InvalidArgument("no labeled utterances to evaluate".into()));
    }
    let max_len = waves.iter().map(Vec::len).max().unwrap_or(0);
    let bank = NoiseBank::synthetic(opts.noise_entries.max(1), max_len, opts.seed);
    let clean: Vec<Vec<f64>> = waves.iter().map(|w| embed(w)).collect::<Result<_>>()?;

    let mut per_snr = Vec::with_capacity(opts.snrs_db.len());
    for (k, &snr) in opts.snrs_db.iter().enumerate() {
        let mut noisy = Vec::with_capacity(waves.len());
        for (i, w) in waves.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(((k as u64) << 32) | i as u64);
            let noise = bank.draw(w.len(), &mut rng)?;
            noisy.push(embed(&mix_at_snr(w, &noise, snr)?.audio)?);
        }
        let mean_cosine = clean.iter().zip(&noisy).map(|(a, b)| cosine(a, b)).sum::<f64>() / clean.len() as f64;
        per_snr.push(SnrBreakdown {
            snr_db: snr,
            mean_cosine,
            silhouette: silhouette(&noisy, &labels)?,
        });
    }
    let n_snr = per_snr.len().max(1) as f64;
    Ok(RobustnessReport {
        mean_clean_noisy_cosine: per_snr.iter().map(|b| b.mean_cosine).sum::<f64>() / n_snr,
        cluster_separation: per_snr.iter().map(|b| b.silhouette).sum::<f64>() / n_snr,
        clean_silhouette: silhouette(&clean, &labels)?,
        per_snr,
        n_utterances: waves.len(),
        excluded_unlabeled: excluded,
    })
}

/// Masked sum of `|pred − target|` over `[B, F, 80]` and the number of valid cells.
pub fn masked_l1(pred: &Tensor, target: &Tensor, frame_mask: &Tensor) -> Result<(f64, f64)> {
    let bands = pred.dim(2)? as f64;
    let diff = (pred - target)?.abs()?.broadcast_mul(&frame_mask.unsqueeze(2)?)?;
    let sum = diff.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let count = frame_mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()? * bands;
    Ok((sum, count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconReport {
    /// Mean absolute error over valid (frame, band) cells, normalized Mel space.
    pub mean_l1: f64,
    pub n_utterances: usize,
}

/// Generates every record from its ground-truth units and durations, with
/// the embedding of its own clean Mel and self-predicted prosody, and
/// measures the PostNet output against the target.
pub fn reconstruction_eval(models: &ModelBundle, records: &[&FeatureRecord], batch_size: usize) -> Result<ReconReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("reconstruction eval needs at least one utterance".into()));
    }
    let dtype = models.dtype();
    let (mut sum, mut count) = (0.0, 0.0);
    for chunk in records.chunks(batch_size.max(1)) {
        let mels: Vec<&MelSpectrogram> = chunk.iter().map(|r| &r.mel).collect();
        let (x, mask) = mel_batch(&mels, dtype)?;
        let e = models.student.encoder.forward(&x, &mask)?;
        let seqs: Vec<_> = chunk.iter().map(|r| &r.units).collect();
        let langs = chunk
            .iter()
            .map(|r| models.language_index(&r.language_id))
            .collect::<Result<Vec<_>>>()?;
        let out = models
            .acoustic
            .forward(&AcousticInput::new(&seqs, &langs, e)?, None, &mut Ctx::eval())?;
        let target = x.transpose(1, 2)?.contiguous()?;
        let (s, c) = masked_l1(&out.mel_post, &target, &out.frame_mask)?;
        sum += s;
        count += c;
    }
    Ok(ReconReport {
        mean_l1: sum / count,
        n_utterances: records.len(),
    })
}
