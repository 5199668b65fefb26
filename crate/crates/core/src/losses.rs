//! Mel, local-prosody and FiLM losses, and total-loss composition.
//!
//! Every loss is a mean over valid (unmasked) elements; "L2" is the squared
//! error.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::acoustic::{FilmParams, ProsodyTensors};
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::nn::scalar;

fn valid_count(mask: &Tensor) -> Result<Tensor> {
    let n = mask.sum_all()?;
    if scalar(&n)? <= 0.0 {
        return Err(Error::Loss("mask selects no elements".into()));
    }
    Ok(n)
}

/// Masked mean of `x` where `mask` broadcasts against `x`'s leading dims.
fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = if mask.rank() < x.rank() { mask.unsqueeze(mask.rank())? } else { mask.clone() };
    let per_row = x.dims()[m.rank() - 1..].iter().product::<usize>() / m.dims()[m.rank() - 1];
    let n = (valid_count(mask)? * per_row as f64)?;
    Ok(x.broadcast_mul(&m)?.sum_all()?.div(&n)?)
}

fn check_shapes(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Loss(format!("{what}: shape {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// L1 + L2 of the pre- and post-PostNet Mels against the target
/// (`[B, F, 80]`, mask `[B, F]`).
pub fn mel_loss(pre: &Tensor, post: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_shapes(pre, target, "mel_pre")?;
    check_shapes(post, target, "mel_post")?;
    let mut total: Option<Tensor> = None;
    for y in [pre, post] {
        let d = (y - target)?;
        let term = (masked_mean(&d.abs()?, mask)? + masked_mean(&d.sqr()?, mask)?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("two terms"))
}

/// Numerically stable binary cross-entropy from logits, elementwise.
pub fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok(((logits.relu()? - (logits * labels)?)? + soft)?)
}

/// Components of the local prosody loss.
#[derive(Debug, Clone)]
pub struct LocalLoss {
    pub total: Tensor,
    pub log_f0: Tensor,
    pub log_energy: Tensor,
    pub vuv: Tensor,
}

/// L2 on log-F0 and log-energy plus BCE on the VUV logits, per unit.
pub fn local_prosody_loss(pred: &ProsodyTensors, target: &ProsodyTensors, mask: &Tensor) -> Result<LocalLoss> {
    check_shapes(&pred.log_f0, &target.log_f0, "log_f0")?;
    check_shapes(&pred.log_energy, &target.log_energy, "log_energy")?;
    check_shapes(&pred.vuv, &target.vuv, "vuv")?;
    check_shapes(&pred.log_f0, mask, "unit mask")?;
    let log_f0 = masked_mean(&(&pred.log_f0 - &target.log_f0)?.sqr()?, mask)?;
    let log_energy = masked_mean(&(&pred.log_energy - &target.log_energy)?.sqr()?, mask)?;
    let vuv = masked_mean(&bce_with_logits(&pred.vuv, &target.vuv)?, mask)?;
    Ok(LocalLoss {
        total: ((&log_f0 + &log_energy)? + &vuv)?,
        log_f0,
        log_energy,
        vuv,
    })
}

/// Mean over layers of `mean((γ−1)²) + mean(β²)`.
pub fn film_regularizer(film: &[FilmParams]) -> Result<Tensor> {
    if film.is_empty() {
        return Err(Error::Loss("no FiLM layers to regularize".into()));
    }
    let mut acc: Option<Tensor> = None;
    for f in film {
        let term = ((f.gamma.affine(1.0, -1.0)?.sqr()?.mean_all()?) + f.beta.sqr()?.mean_all()?)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok((acc.expect("nonempty") / film.len() as f64)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretssel,
    Dino,
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mel: f64,
    pub local: f64,
    pub film: f64,
    pub dino: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.mel, self.local, self.film, self.dino.unwrap_or(0.0), self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `mel + λ_l·local + λ_f·film (+ λ_dino·dino)`.
pub fn compose(mel: f64, local: f64, film: f64, dino: Option<f64>, w: &LossWeights, stage: Stage) -> Result<LossReport> {
    let total = mel + w.lambda_local * local + w.lambda_film * film;
    let total = match (stage, dino) {
        (Stage::Pretssel, None) => total,
        (Stage::Dino, Some(d)) => total + w.lambda_dino * d,
        (Stage::Pretssel, Some(_)) => return Err(Error::Loss("DINO term given for a PRETSSEL-stage loss".into())),
        (Stage::Dino, None) => return Err(Error::Loss("DINO-stage loss is missing the DINO term".into())),
    };
    Ok(LossReport {
        mel,
        local,
        film,
        dino,
        total,
    })
}

/// Differentiable counterpart of [`compose`].
pub fn compose_tensor(mel: &Tensor, local: &Tensor, film: &Tensor, dino: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    let t = ((mel + local.affine(w.lambda_local, 0.0)?)? + film.affine(w.lambda_film, 0.0)?)?;
    Ok(match dino {
        Some(d) => (t + d.affine(w.lambda_dino, 0.0)?)?,
        None => t,
    })
}
