//! Expressive generation: units, durations, target language and a reference
//! recording in, denormalized Mel out. A Griffin-Lim style inversion is
//! provided for listening checks only; it is not a vocoder.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::acoustic::AcousticInput;
use crate::audio;
use crate::container::{BlobData, Container, ContainerKind};
use crate::error::{Error, Result};
use crate::features::mel::{hann, HOP_LENGTH, N_FFT, WIN_LENGTH};
use crate::features::{MelExtractor, MelSpectrogram, UnitSequence};
use crate::nn::Ctx;
use crate::training::ModelBundle;
use crate::{MEL_BANDS, SAMPLE_RATE};

/// Shortest accepted reference recording.
pub const MIN_REFERENCE_S: f64 = 0.5;
pub const DEFAULT_WINDOW_S: f64 = 4.0;

fn default_window() -> f64 {
    DEFAULT_WINDOW_S
}

/// One line of an inference request file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    /// Output file stem; defaults to the line number.
    #[serde(default)]
    pub id: Option<String>,
    pub units: Vec<u32>,
    pub durations: Vec<u32>,
    pub language_id: String,
    /// Relative paths resolve against the request file's directory.
    pub reference_audio_path: PathBuf,
    #[serde(default = "default_window")]
    pub embedding_window_s: f64,
}

impl InferenceRequest {
    pub fn read_jsonl(path: &Path) -> Result<Vec<Self>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), i + 1)))
            })
            .collect()
    }

    pub fn unit_sequence(&self) -> Result<UnitSequence> {
        UnitSequence::new(self.units.clone(), self.durations.clone())
    }
}

/// The trailing `min(window_s, duration)` seconds of `audio`.
pub fn reference_window(audio: &[f64], window_s: f64) -> &[f64] {
    let n = ((window_s * SAMPLE_RATE as f64).round() as usize).min(audio.len());
    &audio[audio.len() - n..]
}

/// Expressivity embedding of the trailing window of a reference recording.
pub fn embed_reference(models: &ModelBundle, audio: &[f64], window_s: f64, use_teacher: bool) -> Result<Vec<f64>> {
    if audio.is_empty() {
        return Err(Error::InvalidArgument("reference audio is empty".into()));
    }
    let net = models.expressivity(use_teacher)?;
    let window = reference_window(audio, window_s);
    let min = net.encoder.min_frames();
    let mel = MelExtractor::new(models.cfg.features.log_floor)
        .extract(window)
        .map_err(|_| too_short(window.len(), min))?;
    if mel.frames < min {
        return Err(too_short(window.len(), min));
    }
    net.encoder.embed(&models.stats.normalize(&mel), models.dtype())
}

fn too_short(samples: usize, min_frames: usize) -> Error {
    Error::InvalidArgument(format!(
        "reference of {samples} samples is shorter than the encoder's receptive field of {min_frames} frames ({} samples)",
        WIN_LENGTH + (min_frames - 1) * HOP_LENGTH
    ))
}

/// Mel for `units` in `language`, conditioned on `embedding`, with
/// self-predicted prosody, denormalized with the training statistics.
pub fn generate(models: &ModelBundle, units: &UnitSequence, language: &str, embedding: &[f64]) -> Result<MelSpectrogram> {
    if let Some(&bad) = units.units.iter().find(|&&u| u as usize >= models.vocab) {
        return Err(Error::InvalidArgument(format!(
            "unit {bad} is outside the model's vocabulary of {}",
            models.vocab
        )));
    }
    let lang = models.language_index(language)?;
    let e = Tensor::from_slice(embedding, (1, embedding.len()), &Device::Cpu)?.to_dtype(models.dtype())?;
    let out = models
        .acoustic
        .forward(&AcousticInput::new(&[units], &[lang], e)?, None, &mut Ctx::eval())?;
    // [1, F, 80] → band-major values.
    let mel = out.mel_post.squeeze(0)?.t()?.to_dtype(DType::F64)?.contiguous()?;
    let frames = mel.dim(1)?;
    let normalized = MelSpectrogram::new(frames, mel.flatten_all()?.to_vec1::<f64>()?)?;
    Ok(models.stats.denormalize(&normalized))
}

/// Writes a denormalized Mel as a container.
pub fn save_mel(path: &Path, mel: &MelSpectrogram, id: &str) -> Result<()> {
    let mut c = Container::new(
        ContainerKind::Mel,
        json!({"id": id, "frames": mel.frames, "bands": MEL_BANDS, "denormalized": true}),
    );
    c.put("mel", vec![MEL_BANDS, mel.frames], BlobData::F64(mel.values.clone()))?;
    c.write(path)
}

pub fn load_mel(path: &Path) -> Result<MelSpectrogram> {
    let c = Container::read(path, ContainerKind::Mel)?;
    let (shape, values) = c.f64s("mel")?;
    MelSpectrogram::new(shape[1], values.to_vec())
}

/// Low-fidelity waveform from a denormalized log-Mel: filterbank
/// back-projection to a linear magnitude, then `iters` rounds of
/// phase re-estimation. Returns exactly `frames · 160` samples at 16 kHz.
pub fn debug_invert(mel: &MelSpectrogram, log_floor: f64, iters: usize, seed: u64) -> Vec<f64> {
    let extractor = MelExtractor::new(log_floor);
    let fb = extractor.filters();
    let bins = N_FFT / 2 + 1;
    let frames = mel.frames;
    let col_norm: Vec<f64> = (0..bins)
        .map(|k| (0..MEL_BANDS).map(|b| fb[b * bins + k] * fb[b * bins + k]).sum())
        .collect();
    // Magnitude per frame and bin; mel cells at the floor contribute nothing.
    let mut mag = vec![0.0; frames * bins];
    for t in 0..frames {
        for k in 0..bins {
            if col_norm[k] <= 0.0 {
                continue;
            }
            let s: f64 = (0..MEL_BANDS)
                .map(|b| fb[b * bins + k] * (mel.get(b, t).exp() - log_floor).max(0.0))
                .sum();
            mag[t * bins + k] = s / col_norm[k];
        }
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(N_FFT);
    let inv = planner.plan_fft_inverse(N_FFT);
    let window = hann(WIN_LENGTH);
    let len = (frames.max(1) - 1) * HOP_LENGTH + WIN_LENGTH;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: Vec<f64> = (0..frames * bins)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();
    let mut wave = vec![0.0; len];
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    for it in 0..=iters {
        // Inverse: overlap-add of windowed frames, normalized by Σ window².
        wave.iter_mut().for_each(|x| *x = 0.0);
        let mut norm = vec![0.0; len];
        for t in 0..frames {
            for k in 0..N_FFT {
                let kk = if k < bins { k } else { N_FFT - k };
                let m = mag[t * bins + kk];
                let p = if k < bins { phase[t * bins + kk] } else { -phase[t * bins + kk] };
                buf[k] = Complex::from_polar(m, p);
            }
            inv.process(&mut buf);
            let start = t * HOP_LENGTH;
            for i in 0..WIN_LENGTH {
                wave[start + i] += buf[i].re / N_FFT as f64 * window[i];
                norm[start + i] += window[i] * window[i];
            }
        }
        for (x, n) in wave.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *x /= n;
            }
        }
        if it == iters {
            break;
        }
        for t in 0..frames {
            let start = t * HOP_LENGTH;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < WIN_LENGTH {
                    Complex::new(wave[start + i] * window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            fwd.process(&mut buf);
            for k in 0..bins {
                phase[t * bins + k] = buf[k].arg();
            }
        }
    }
    wave.truncate(frames * HOP_LENGTH);
    wave.resize(frames * HOP_LENGTH, 0.0);
    wave
}

/// Outputs written for one request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub id: String,
    pub mel_path: PathBuf,
    pub wav_path: Option<PathBuf>,
    pub frames: usize,
}

/// Runs every request, writing `{id}.mel` (and `{id}.wav` with
/// `wav_debug`) into `out_dir`.
pub fn run_requests(
    models: &ModelBundle,
    requests: &[InferenceRequest],
    base_dir: &Path,
    out_dir: &Path,
    wav_debug: bool,
    use_teacher: bool,
) -> Result<Vec<InferenceOutput>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outputs = Vec::with_capacity(requests.len());
    for (i, req) in requests.iter().enumerate() {
        let id = req.id.clone().unwrap_or_else(|| format!("req{i:05}"));
        let path = if req.reference_audio_path.is_absolute() {
            req.reference_audio_path.clone()
        } else {
            base_dir.join(&req.reference_audio_path)
        };
        let reference = audio::read_wav(&path)?;
        if audio::duration_s(&reference) < MIN_REFERENCE_S {
            return Err(Error::InvalidArgument(format!(
                "{id}: reference {} is shorter than {MIN_REFERENCE_S} s",
                path.display()
            )));
        }
        let e = embed_reference(models, &reference, req.embedding_window_s, use_teacher)?;
        let mel = generate(models, &req.unit_sequence()?, &req.language_id, &e)?;
        let mel_path = out_dir.join(format!("{id}.mel"));
        save_mel(&mel_path, &mel, &id)?;
        let wav_path = if wav_debug {
            let p = out_dir.join(format!("{id}.wav"));
            audio::write_wav(&p, &debug_invert(&mel, models.cfg.features.log_floor, 32, 0))?;
            Some(p)
        } else {
            None
        };
        outputs.push(InferenceOutput {
            id,
            mel_path,
            wav_path,
            frames: mel.frames,
        });
    }
    Ok(outputs)
}

/// Mean over bands of the Pearson correlation across time; bands with no
/// variance in either input are skipped.
pub fn mean_band_correlation(a: &MelSpectrogram, b: &MelSpectrogram) -> Result<f64> {
    if a.frames != b.frames {
        return Err(Error::InvalidArgument(format!("frame counts differ: {} vs {}", a.frames, b.frames)));
    }
    let mut total = 0.0;
    let mut n = 0;
    for band in 0..MEL_BANDS {
        let (x, y) = (a.band(band), b.band(band));
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let my = y.iter().sum::<f64>() / y.len() as f64;
        let sxy: f64 = x.iter().zip(y).map(|(p, q)| (p - mx) * (q - my)).sum();
        let sxx: f64 = x.iter().map(|p| (p - mx) * (p - mx)).sum();
        let syy: f64 = y.iter().map(|q| (q - my) * (q - my)).sum();
        if sxx > 1e-12 && syy > 1e-12 {
            total += sxy / (sxx * syy).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no band varies over time".into()));
    }
    Ok(total / n as f64)
}
