//! Frame-level pitch and energy at a 5 ms hop.
//!
//! Frame `k` is centered on sample `80·k`; samples outside the waveform read as
//! zero. A waveform of `n` samples therefore yields `n / 80 + 1` frames, which
//! always covers the 4-frames-per-unit span that unit pooling needs.

use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

use super::mel::hann;

pub const PROSODY_HOP: usize = 80;
pub const ENERGY_WINDOW: usize = 560;
pub const PITCH_WINDOW: usize = 800;

pub fn prosody_frame_count(len: usize) -> usize {
    len / PROSODY_HOP + 1
}

/// Continuous log-F0 and voicing flags per 5 ms frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchTrack {
    pub log_f0: Vec<f64>,
    pub vuv: Vec<bool>,
}

/// Pluggable F0 estimator.
pub trait PitchExtractor: Send + Sync {
    /// Raw per-frame F0 in Hz, 0 where unvoiced.
    fn raw_f0(&self, wave: &[f64]) -> Result<Vec<f64>>;

    /// F0 used when no frame is voiced.
    fn default_hz(&self) -> f64;

    fn extract(&self, wave: &[f64]) -> Result<PitchTrack> {
        let raw = self.raw_f0(wave)?;
        Ok(interpolate_unvoiced(&raw, self.default_hz()))
    }
}

/// Fills unvoiced (zero) frames by linear interpolation between the nearest
/// voiced neighbours in Hz, copies the nearest voiced value at the edges, then
/// takes the natural log.
pub fn interpolate_unvoiced(raw_hz: &[f64], default_hz: f64) -> PitchTrack {
    let vuv: Vec<bool> = raw_hz.iter().map(|&f| f > 0.0).collect();
    let voiced: Vec<usize> = (0..raw_hz.len()).filter(|&i| vuv[i]).collect();
    let log_f0 = if voiced.is_empty() {
        vec![default_hz.ln(); raw_hz.len()]
    } else {
        let mut filled = raw_hz.to_vec();
        let first = voiced[0];
        let last = *voiced.last().expect("nonempty");
        filled[..first].iter_mut().for_each(|f| *f = raw_hz[first]);
        filled[last + 1..].iter_mut().for_each(|f| *f = raw_hz[last]);
        for w in voiced.windows(2) {
            let (a, b) = (w[0], w[1]);
            for i in a + 1..b {
                let t = (i - a) as f64 / (b - a) as f64;
                filled[i] = raw_hz[a] + (raw_hz[b] - raw_hz[a]) * t;
            }
        }
        filled.iter().map(|f| f.ln()).collect()
    };
    PitchTrack { log_f0, vuv }
}

/// Normalized-autocorrelation pitch estimator.
///
/// For each 50 ms window the normalized correlation between the window and
/// its lagged copy is scanned over the lag range of `[f0_min, f0_max]`. A frame
/// is voiced when the peak correlation reaches `voicing_threshold`; the
/// shortest lag whose local peak is within 90 % of the best one is chosen
/// (guards against sub-harmonic picks) and refined by parabolic interpolation.
#[derive(Debug, Clone)]
pub struct AutocorrelationPitch {
    pub f0_min_hz: f64,
    pub f0_max_hz: f64,
    pub voicing_threshold: f64,
    pub unvoiced_default_hz: f64,
    /// Windows with RMS below this are treated as silence.
    pub silence_rms: f64,
}

impl AutocorrelationPitch {
    pub fn new(f0_min_hz: f64, f0_max_hz: f64, voicing_threshold: f64, unvoiced_default_hz: f64) -> Self {
        Self {
            f0_min_hz,
            f0_max_hz,
            voicing_threshold,
            unvoiced_default_hz,
            silence_rms: 1e-4,
        }
    }

    fn frame_f0(&self, seg: &[f64], corr: &mut Vec<f64>) -> f64 {
        let sr = SAMPLE_RATE as f64;
        let min_lag = (sr / self.f0_max_hz).floor().max(2.0) as usize;
        let max_lag = ((sr / self.f0_min_hz).ceil() as usize).min(seg.len() / 2);
        if min_lag + 2 > max_lag {
            return 0.0;
        }
        let energy: f64 = seg.iter().map(|x| x * x).sum();
        if (energy / seg.len() as f64).sqrt() < self.silence_rms {
            return 0.0;
        }
        let n = seg.len();
        // prefix sums of squares for the two overlapping energies
        let mut prefix = Vec::with_capacity(n + 1);
        prefix.push(0.0);
        for x in seg {
            prefix.push(prefix.last().copied().unwrap_or(0.0) + x * x);
        }
        corr.clear();
        corr.resize(max_lag + 2, 0.0);
        let lo = min_lag.saturating_sub(1).max(1);
        let hi = (max_lag + 1).min(n - 1);
        for lag in lo..=hi {
            let m = n - lag;
            let cross: f64 = seg[..m].iter().zip(&seg[lag..]).map(|(a, b)| a * b).sum();
            let e1 = prefix[m];
            let e2 = prefix[n] - prefix[lag];
            let denom = (e1 * e2).sqrt();
            corr[lag] = if denom > 1e-12 { cross / denom } else { 0.0 };
        }
        let (best_lag, best) = (min_lag..=max_lag)
            .map(|l| (l, corr[l]))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best < self.voicing_threshold {
            return 0.0;
        }
        let is_peak = |l: usize| corr[l] >= corr[l - 1] && corr[l] >= corr[l + 1];
        let lag = (min_lag..=max_lag)
            .find(|&l| corr[l] >= 0.9 * best && is_peak(l))
            .unwrap_or(best_lag);
        let (a, b, c) = (corr[lag - 1], corr[lag], corr[lag + 1]);
        let curvature = a - 2.0 * b + c;
        let delta = if curvature.abs() > 1e-12 {
            (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        sr / (lag as f64 + delta)
    }
}

impl PitchExtractor for AutocorrelationPitch {
    fn raw_f0(&self, wave: &[f64]) -> Result<Vec<f64>> {
        if wave.len() < PITCH_WINDOW {
            return Err(Error::Feature(format!(
                "pitch extraction needs at least {PITCH_WINDOW} samples, got {}",
                wave.len()
            )));
        }
        let frames = prosody_frame_count(wave.len());
        let half = PITCH_WINDOW / 2;
        let mut seg = vec![0.0; PITCH_WINDOW];
        let mut corr = Vec::new();
        Ok((0..frames)
            .map(|k| {
                let center = k * PROSODY_HOP;
                for (i, s) in seg.iter_mut().enumerate() {
                    let idx = (center + i).checked_sub(half);
                    *s = idx.and_then(|j| wave.get(j)).copied().unwrap_or(0.0);
                }
                self.frame_f0(&seg, &mut corr)
            })
            .collect())
    }

    fn default_hz(&self) -> f64 {
        self.unvoiced_default_hz
    }
}

/// Log of Hann-weighted RMS over 35 ms windows every 5 ms, floored before the log.
pub fn extract_energy(wave: &[f64], log_floor: f64) -> Result<Vec<f64>> {
    if wave.len() < ENERGY_WINDOW {
        return Err(Error::Feature(format!(
            "energy extraction needs at least {ENERGY_WINDOW} samples, got {}",
            wave.len()
        )));
    }
    let window = hann(ENERGY_WINDOW);
    let wsum: f64 = window.iter().sum();
    let half = ENERGY_WINDOW / 2;
    Ok((0..prosody_frame_count(wave.len()))
        .map(|k| {
            let center = k * PROSODY_HOP;
            let acc: f64 = window
                .iter()
                .enumerate()
                .filter_map(|(i, w)| {
                    let j = (center + i).checked_sub(half)?;
                    wave.get(j).map(|x| w * x * x)
                })
                .sum();
            (acc / wsum).sqrt().max(log_floor).ln()
        })
        .collect())
}
