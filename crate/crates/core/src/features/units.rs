//! Discrete units: a K-means codebook over 20 ms pooled Mel frames,
//! run-length reduction, and pooling of 5 ms tracks to the reduced unit scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::MEL_BANDS;

use super::mel::MelSpectrogram;

/// 5 ms prosody frames per 20 ms unit step.
pub const PROSODY_FRAMES_PER_UNIT: usize = 4;
/// 10 ms Mel frames per 20 ms unit step.
pub const MEL_FRAMES_PER_UNIT: usize = 2;

/// Reduced unit sequence: adjacent units differ, durations count 20 ms steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    pub durations: Vec<u32>,
}

impl UnitSequence {
    pub fn new(units: Vec<u32>, durations: Vec<u32>) -> Result<Self> {
        if units.is_empty() || units.len() != durations.len() {
            return Err(Error::Feature(format!(
                "unit sequence needs equal nonzero lengths, got {} units and {} durations",
                units.len(),
                durations.len()
            )));
        }
        if durations.contains(&0) {
            return Err(Error::Feature("unit durations must be positive".into()));
        }
        Ok(Self { units, durations })
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Σ durations, in 20 ms steps.
    pub fn total_steps(&self) -> usize {
        self.durations.iter().map(|&d| d as usize).sum()
    }

    /// Mel frame count produced by length regulation.
    pub fn mel_frames(&self) -> usize {
        self.total_steps() * MEL_FRAMES_PER_UNIT
    }

    pub fn max_unit(&self) -> u32 {
        self.units.iter().copied().max().unwrap_or(0)
    }
}

/// Run-length encoding of a raw unit stream.
pub fn deduplicate(raw: &[u32]) -> Result<UnitSequence> {
    if raw.is_empty() {
        return Err(Error::Feature("cannot deduplicate an empty unit sequence".into()));
    }
    let mut units = Vec::new();
    let mut durations: Vec<u32> = Vec::new();
    for &u in raw {
        match (units.last(), durations.last_mut()) {
            (Some(&prev), Some(d)) if prev == u => *d += 1,
            _ => {
                units.push(u);
                durations.push(1);
            }
        }
    }
    UnitSequence::new(units, durations)
}

/// Exact inverse of [`deduplicate`].
pub fn expand(seq: &UnitSequence) -> Vec<u32> {
    seq.units
        .iter()
        .zip(&seq.durations)
        .flat_map(|(&u, &d)| std::iter::repeat_n(u, d as usize))
        .collect()
}

/// Averages Mel frames in pairs to the 20 ms unit rate; a trailing odd frame is dropped.
pub fn pool_pairs(mel: &MelSpectrogram) -> Vec<Vec<f64>> {
    (0..mel.frames / MEL_FRAMES_PER_UNIT)
        .map(|s| {
            (0..MEL_BANDS)
                .map(|b| 0.5 * (mel.get(b, 2 * s) + mel.get(b, 2 * s + 1)))
                .collect()
        })
        .collect()
}

/// `V × d` centroid matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub centroids: Vec<f64>,
}

impl Codebook {
    pub fn new(dim: usize, centroids: Vec<f64>) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::Feature("codebook is empty or has a ragged shape".into()));
        }
        Ok(Self { dim, centroids })
    }

    pub fn size(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for j in 0..self.size() {
            let d = sq_dist(x, self.centroid(j));
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    }

    /// Nearest-centroid assignment of every pooled 20 ms step.
    pub fn quantize(&self, mel: &MelSpectrogram) -> Result<Vec<u32>> {
        if self.dim != MEL_BANDS {
            return Err(Error::Feature(format!(
                "codebook dimension {} does not match {MEL_BANDS} Mel bands",
                self.dim
            )));
        }
        let steps = pool_pairs(mel);
        if steps.is_empty() {
            return Err(Error::Feature("need at least two Mel frames to form one unit step".into()));
        }
        Ok(steps.iter().map(|x| self.nearest(x).0 as u32).collect())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Seeded K-means with k-means++ initialisation. Stops after `max_iters`
/// Lloyd iterations or when the relative inertia change drops below `tol`.
pub fn train_codebook(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<Codebook> {
    if k == 0 {
        return Err(Error::Feature("codebook size must be positive".into()));
    }
    if points.len() < k {
        return Err(Error::Feature(format!(
            "need at least {k} pooled frames to fit {k} centroids, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(&points[rng.random_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let start = centroids.len();
        centroids.extend_from_slice(&points[pick]);
        for (p, d) in points.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &centroids[start..start + dim]));
        }
    }
    let mut book = Codebook::new(dim, centroids)?;
    let mut prev_inertia = f64::INFINITY;
    let mut assign = vec![0usize; points.len()];
    for _ in 0..max_iters {
        let mut inertia = 0.0;
        for (a, p) in assign.iter_mut().zip(points) {
            let (j, d) = book.nearest(p);
            *a = j;
            inertia += d;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (&j, p) in assign.iter().zip(points) {
            counts[j] += 1;
            for (s, x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                for (c, s) in book.centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s / counts[j] as f64;
                }
            }
        }
        let rel = (prev_inertia - inertia).abs() / inertia.max(1e-12);
        if prev_inertia.is_finite() && rel < tol {
            break;
        }
        prev_inertia = inertia;
    }
    Ok(book)
}

/// Mean of a 5 ms track over each unit's span (4 frames per 20 ms step).
pub fn pool_to_units(frames: &[f64], seq: &UnitSequence) -> Result<Vec<f64>> {
    let needed = seq.total_steps() * PROSODY_FRAMES_PER_UNIT;
    if frames.len() < needed {
        return Err(Error::Feature(format!(
            "unit spans need {needed} prosody frames, got {}",
            frames.len()
        )));
    }
    let mut out = Vec::with_capacity(seq.len());
    let mut pos = 0;
    for &d in &seq.durations {
        let n = d as usize * PROSODY_FRAMES_PER_UNIT;
        out.push(frames[pos..pos + n].iter().sum::<f64>() / n as f64);
        pos += n;
    }
    Ok(out)
}

/// Pools voicing flags; a pooled value of exactly 0.5 counts as voiced.
pub fn pool_vuv(vuv: &[bool], seq: &UnitSequence) -> Result<Vec<bool>> {
    let as_f: Vec<f64> = vuv.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    Ok(pool_to_units(&as_f, seq)?.into_iter().map(|p| p >= 0.5).collect())
}
