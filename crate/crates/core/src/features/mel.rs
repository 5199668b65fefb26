use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{MEL_BANDS, SAMPLE_RATE};

pub const WIN_LENGTH: usize = 400;
pub const HOP_LENGTH: usize = 160;
pub const N_FFT: usize = 512;
pub const STD_FLOOR: f64 = 1e-8;

/// Log-Mel matrix stored band-major: `values[band * frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub values: Vec<f64>,
    /// Statistics this matrix was normalized with, if any.
    pub norm: Option<NormStats>,
}

impl MelSpectrogram {
    pub fn new(frames: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || values.len() != frames * MEL_BANDS {
            return Err(Error::Feature(format!(
                "mel needs {MEL_BANDS}×T values with T ≥ 1, got {} values for T = {frames}",
                values.len()
            )));
        }
        Ok(Self {
            frames,
            values,
            norm: None,
        })
    }

    pub fn get(&self, band: usize, t: usize) -> f64 {
        self.values[band * self.frames + t]
    }

    pub fn band(&self, band: usize) -> &[f64] {
        &self.values[band * self.frames..(band + 1) * self.frames]
    }

    pub fn band_mut(&mut self, band: usize) -> &mut [f64] {
        let t = self.frames;
        &mut self.values[band * t..(band + 1) * t]
    }

    /// Frames `[start, end)` as a new matrix.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames {
            return Err(Error::Feature(format!(
                "frame range {start}..{end} invalid for {} frames",
                self.frames
            )));
        }
        let n = end - start;
        let mut values = Vec::with_capacity(n * MEL_BANDS);
        for b in 0..MEL_BANDS {
            values.extend_from_slice(&self.band(b)[start..end]);
        }
        Ok(Self {
            frames: n,
            values,
            norm: self.norm.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Number of frames for a waveform of `len` samples (no centering).
pub fn frame_count(len: usize) -> Option<usize> {
    (len >= WIN_LENGTH).then(|| 1 + (len - WIN_LENGTH) / HOP_LENGTH)
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / len as f64).cos())
        .collect()
}

/// Triangular HTK-scale filterbank over 0..8 kHz with unit peak height.
/// Returns (filters as `bands × bins` row-major, band center frequencies).
pub fn mel_filterbank(n_fft: usize, bands: usize) -> (Vec<f64>, Vec<f64>) {
    let bins = n_fft / 2 + 1;
    let sr = SAMPLE_RATE as f64;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(sr / 2.0));
    let edges: Vec<f64> = (0..bands + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (bands + 1) as f64))
        .collect();
    let mut fb = vec![0.0; bands * bins];
    for b in 0..bands {
        let (l, c, r) = (edges[b], edges[b + 1], edges[b + 2]);
        for k in 0..bins {
            let f = k as f64 * sr / n_fft as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[b * bins + k] = w;
        }
    }
    (fb, edges[1..=bands].to_vec())
}

/// 80-band log-Mel extractor: 25 ms Hann window, 10 ms hop, 512-point FFT,
/// magnitude spectrum, `ln(max(x, floor))`.
#[derive(Clone)]
pub struct MelExtractor {
    window: Vec<f64>,
    filters: Vec<f64>,
    centers: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    log_floor: f64,
}

impl std::fmt::Debug for MelExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelExtractor").field("log_floor", &self.log_floor).finish()
    }
}

impl MelExtractor {
    pub fn new(log_floor: f64) -> Self {
        let (filters, centers) = mel_filterbank(N_FFT, MEL_BANDS);
        Self {
            window: hann(WIN_LENGTH),
            filters,
            centers,
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
            log_floor,
        }
    }

    pub fn band_centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn filters(&self) -> &[f64] {
        &self.filters
    }

    pub fn log_floor(&self) -> f64 {
        self.log_floor
    }

    pub fn extract(&self, wave: &[f64]) -> Result<MelSpectrogram> {
        let frames = frame_count(wave.len()).ok_or_else(|| {
            Error::Feature(format!(
                "waveform of {} samples is shorter than one {WIN_LENGTH}-sample frame",
                wave.len()
            ))
        })?;
        let bins = N_FFT / 2 + 1;
        let mut values = vec![0.0; frames * MEL_BANDS];
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut mag = vec![0.0; bins];
        for t in 0..frames {
            let start = t * HOP_LENGTH;
            for (i, c) in buf.iter_mut().enumerate() {
                *c = if i < WIN_LENGTH {
                    Complex::new(wave[start + i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            for (k, m) in mag.iter_mut().enumerate() {
                *m = buf[k].norm();
            }
            for b in 0..MEL_BANDS {
                let row = &self.filters[b * bins..(b + 1) * bins];
                let e: f64 = row.iter().zip(&mag).map(|(w, m)| w * m).sum();
                values[b * frames + t] = e.max(self.log_floor).ln();
            }
        }
        MelSpectrogram::new(frames, values)
    }
}

/// Per-band normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; MEL_BANDS],
            std: vec![1.0; MEL_BANDS],
        }
    }

    /// Per-band mean and standard deviation over every frame of every input.
    pub fn fit<'a>(mels: impl IntoIterator<Item = &'a MelSpectrogram>) -> Result<Self> {
        let mut sum = vec![0.0; MEL_BANDS];
        let mut count = 0usize;
        let mels: Vec<&MelSpectrogram> = mels.into_iter().collect();
        for m in &mels {
            for (b, s) in sum.iter_mut().enumerate() {
                *s += m.band(b).iter().sum::<f64>();
            }
            count += m.frames;
        }
        if count == 0 {
            return Err(Error::Feature("cannot fit normalization stats on zero frames".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; MEL_BANDS];
        for m in &mels {
            for (b, s) in sq.iter_mut().enumerate() {
                *s += m.band(b).iter().map(|v| (v - mean[b]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, mel: &MelSpectrogram) -> MelSpectrogram {
        let mut out = mel.clone();
        for b in 0..MEL_BANDS {
            let (m, s) = (self.mean[b], self.std[b].max(STD_FLOOR));
            out.band_mut(b).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        out.norm = Some(self.clone());
        out
    }

    pub fn denormalize(&self, mel: &MelSpectrogram) -> MelSpectrogram {
        let mut out = mel.clone();
        for b in 0..MEL_BANDS {
            let (m, s) = (self.mean[b], self.std[b].max(STD_FLOOR));
            out.band_mut(b).iter_mut().for_each(|v| *v = *v * s + m);
        }
        out.norm = None;
        out
    }
}
