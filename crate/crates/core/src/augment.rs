//! Noise mixing, multi-crop sampling and SpecAugment.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::audio;
use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::SAMPLE_RATE;

/// Result of mixing noise into speech.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixed {
    pub audio: Vec<f64>,
    pub gain: f64,
    /// Set when the noise had zero power and speech was returned untouched.
    pub noise_silent: bool,
}

/// Mixes `noise` into `speech` so that the speech-to-added-noise power ratio
/// equals `snr_db`. Noise is tiled or cropped to the speech length. An
/// infinite SNR is the no-noise sentinel and returns speech unchanged.
pub fn mix_at_snr(speech: &[f64], noise: &[f64], snr_db: f64) -> Result<Mixed> {
    let p_speech = audio::power(speech);
    if speech.is_empty() || p_speech <= 0.0 {
        return Err(Error::Augment("speech is silent; SNR is undefined".into()));
    }
    if snr_db.is_nan() {
        return Err(Error::Augment("SNR must not be NaN".into()));
    }
    if snr_db == f64::INFINITY {
        return Ok(Mixed {
            audio: speech.to_vec(),
            gain: 0.0,
            noise_silent: false,
        });
    }
    if noise.is_empty() {
        return Err(Error::Augment("noise waveform is empty".into()));
    }
    let noise = tile(noise, speech.len());
    let p_noise = audio::power(&noise);
    if p_noise <= 0.0 {
        log::warn!("noise is silent; returning speech unchanged");
        return Ok(Mixed {
            audio: speech.to_vec(),
            gain: 0.0,
            noise_silent: true,
        });
    }
    let gain = (p_speech / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let audio = speech.iter().zip(&noise).map(|(s, n)| s + gain * n).collect();
    Ok(Mixed {
        audio,
        gain,
        noise_silent: false,
    })
}

/// Repeats `x` until it reaches `len` samples.
pub fn tile(x: &[f64], len: usize) -> Vec<f64> {
    x.iter().copied().cycle().take(len).collect()
}

/// Extends `x` to at least `len` samples by mirroring around its edges
/// (without repeating the edge sample).
pub fn reflect_pad(x: &[f64], len: usize) -> Vec<f64> {
    if x.len() >= len || x.is_empty() {
        return x.to_vec();
    }
    if x.len() == 1 {
        return vec![x[0]; len];
    }
    let period = 2 * (x.len() - 1);
    (0..len)
        .map(|i| {
            let k = i % period;
            if k < x.len() {
                x[k]
            } else {
                x[period - k]
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

impl NoiseKind {
    pub fn generate(self, len: usize, rng: &mut impl Rng) -> Vec<f64> {
        let white = |rng: &mut dyn rand::RngCore, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        };
        match self {
            NoiseKind::White => white(rng, len),
            NoiseKind::Pink => {
                // Paul Kellet's economy pink filter.
                let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
                white(rng, len)
                    .into_iter()
                    .map(|w| {
                        b0 = 0.99765 * b0 + w * 0.0990460;
                        b1 = 0.96300 * b1 + w * 0.2965164;
                        b2 = 0.57000 * b2 + w * 1.0526913;
                        b0 + b1 + b2 + w * 0.1848
                    })
                    .collect()
            }
            NoiseKind::Babble => {
                // Several "talkers": resonant-filtered noise with slow
                // syllable-rate amplitude modulation.
                let sr = SAMPLE_RATE as f64;
                let mut out = vec![0.0; len];
                for _ in 0..5 {
                    let fc: f64 = rng.random_range(300.0..2500.0);
                    let rate: f64 = rng.random_range(2.0..6.0);
                    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let r = 0.97;
                    let theta = std::f64::consts::TAU * fc / sr;
                    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
                    let (mut y1, mut y2) = (0.0, 0.0);
                    for (i, o) in out.iter_mut().enumerate() {
                        let w: f64 = rng.sample(StandardNormal);
                        let y = w + a1 * y1 + a2 * y2;
                        y2 = y1;
                        y1 = y;
                        let env = 0.5 * (1.0 + (std::f64::consts::TAU * rate * i as f64 / sr + phase).sin());
                        *o += y * env * env;
                    }
                }
                out
            }
        }
    }
}

/// A fixed set of noise waveforms to draw from.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    pub entries: Vec<Vec<f64>>,
    pub seed: u64,
}

impl NoiseBank {
    /// `n` synthetic entries of `len` samples, cycling white/pink/babble.
    pub fn synthetic(n: usize, len: usize, seed: u64) -> Self {
        let kinds = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble];
        let entries = (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                kinds[i % kinds.len()].generate(len, &mut rng)
            })
            .collect();
        Self { entries, seed }
    }

    /// Loads noise files, tiling any that are shorter than `min_len`.
    pub fn from_files(paths: &[impl AsRef<Path>], min_len: usize, seed: u64) -> Result<Self> {
        let entries = paths
            .iter()
            .map(|p| {
                let w = audio::read_wav(p.as_ref())?;
                if w.is_empty() {
                    return Err(Error::Augment(format!("{}: empty noise file", p.as_ref().display())));
                }
                Ok(if w.len() < min_len { tile(&w, min_len) } else { w })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, seed })
    }

    /// Builds the bank described by the config: user files when given,
    /// synthetic noise otherwise. Every entry is at least `min_len` long.
    pub fn from_config(cfg: &AugmentConfig, min_len: usize) -> Result<Self> {
        if cfg.noise_files.is_empty() {
            Ok(Self::synthetic(cfg.noise_bank_size, min_len, cfg.noise_seed))
        } else {
            Self::from_files(&cfg.noise_files, min_len, cfg.noise_seed)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A random entry, cut to `len` samples at a random offset.
    pub fn draw(&self, len: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        if self.entries.is_empty() {
            return Err(Error::Augment("noise bank is empty".into()));
        }
        let e = &self.entries[rng.random_range(0..self.entries.len())];
        let e = if e.len() < len { tile(e, len) } else { e.clone() };
        let off = rng.random_range(0..=e.len() - len);
        Ok(e[off..off + len].to_vec())
    }
}

/// A window into a (possibly padded) utterance, in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub start: usize,
    pub len: usize,
}

impl Crop {
    pub fn start_s(&self) -> f64 {
        self.start as f64 / SAMPLE_RATE as f64
    }

    pub fn len_s(&self) -> f64 {
        self.len as f64 / SAMPLE_RATE as f64
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropPlan {
    pub long: Vec<Crop>,
    pub short: Vec<Crop>,
    /// Utterance length after reflection padding.
    pub padded_len: usize,
}

impl CropPlan {
    pub fn all(&self) -> impl Iterator<Item = &Crop> {
        self.long.iter().chain(&self.short)
    }
}

/// Samples `n_long` windows of `long_len` and `n_short` of `short_len`
/// uniformly within an utterance of `utt_len` samples (padded to `long_len`
/// when shorter).
pub fn sample_crops(
    utt_len: usize,
    long_len: usize,
    short_len: usize,
    n_long: usize,
    n_short: usize,
    rng: &mut impl Rng,
) -> Result<CropPlan> {
    if n_long == 0 {
        return Err(Error::Augment("at least one long crop is required".into()));
    }
    if long_len == 0 || short_len == 0 || short_len > long_len {
        return Err(Error::Augment(format!(
            "invalid crop lengths: long {long_len}, short {short_len}"
        )));
    }
    let padded_len = utt_len.max(long_len);
    let mut window = |len: usize| Crop {
        start: rng.random_range(0..=padded_len - len),
        len,
    };
    let long = (0..n_long).map(|_| window(long_len)).collect();
    let short = (0..n_short).map(|_| window(short_len)).collect();
    Ok(CropPlan {
        long,
        short,
        padded_len,
    })
}

/// Noise policy parameters: mix probability and SNR range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePolicy {
    pub prob: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl From<&AugmentConfig> for NoisePolicy {
    fn from(c: &AugmentConfig) -> Self {
        Self {
            prob: c.noise_prob,
            snr_min_db: c.snr_min_db,
            snr_max_db: c.snr_max_db,
        }
    }
}

/// What the noise policy did to a crop.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub snr_db: f64,
    pub noise: Vec<f64>,
    pub gain: f64,
}

/// With probability `prob` mixes a random bank entry at an SNR drawn
/// uniformly from the policy range; otherwise returns the crop unchanged.
pub fn apply_noise_policy(
    crop: &[f64],
    bank: &NoiseBank,
    policy: &NoisePolicy,
    rng: &mut impl Rng,
) -> Result<(Vec<f64>, Option<NoiseDraw>)> {
    if bank.is_empty() {
        return Err(Error::Augment("noise bank is empty".into()));
    }
    if rng.random::<f64>() >= policy.prob {
        return Ok((crop.to_vec(), None));
    }
    let snr_db = if policy.snr_max_db > policy.snr_min_db {
        rng.random_range(policy.snr_min_db..=policy.snr_max_db)
    } else {
        policy.snr_min_db
    };
    let noise = bank.draw(crop.len(), rng)?;
    if audio::power(crop) <= 0.0 {
        // Pure-silence crops (possible in padded regions) stay clean.
        return Ok((crop.to_vec(), None));
    }
    let m = mix_at_snr(crop, &noise, snr_db)?;
    Ok((
        m.audio,
        Some(NoiseDraw {
            snr_db,
            noise,
            gain: m.gain,
        }),
    ))
}

/// Rectangles chosen by one SpecAugment draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecMasks {
    pub freq_start: usize,
    pub freq_width: usize,
    pub time_start: usize,
    pub time_width: usize,
}

impl SpecMasks {
    pub fn sample(bands: usize, frames: usize, freq_max: usize, time_max: usize, rng: &mut impl Rng) -> Self {
        let freq_width = rng.random_range(0..=freq_max.min(bands));
        let freq_start = rng.random_range(0..=bands - freq_width);
        let time_width = rng.random_range(0..=time_max.min(frames));
        let time_start = rng.random_range(0..=frames - time_width);
        Self {
            freq_start,
            freq_width,
            time_start,
            time_width,
        }
    }

    pub fn masked_cells(&self, bands: usize, frames: usize) -> usize {
        self.freq_width * frames + self.time_width * bands - self.freq_width * self.time_width
    }
}

/// Replaces the masked cells with the per-band mean of the unmasked input.
pub fn apply_masks(mel: &MelSpectrogram, m: &SpecMasks) -> MelSpectrogram {
    let mut out = mel.clone();
    let bands = mel.values.len() / mel.frames.max(1);
    for b in 0..bands {
        let row = mel.band(b);
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let dst = out.band_mut(b);
        if (m.freq_start..m.freq_start + m.freq_width).contains(&b) {
            dst.fill(mean);
        } else {
            dst[m.time_start..m.time_start + m.time_width].fill(mean);
        }
    }
    out
}

/// One frequency and one time mask of random width (student branch only).
pub fn spec_augment(
    mel: &MelSpectrogram,
    freq_max: usize,
    time_max: usize,
    rng: &mut impl Rng,
) -> Result<(MelSpectrogram, SpecMasks)> {
    if mel.frames == 0 {
        return Err(Error::Augment("SpecAugment needs at least one frame".into()));
    }
    let bands = mel.values.len() / mel.frames;
    let m = SpecMasks::sample(bands, mel.frames, freq_max, time_max, rng);
    Ok((apply_masks(mel, &m), m))
}
