//! Self-distillation: tempered softmax, centering, multi-crop cross-entropy,
//! EMA teacher updates and the temperature / momentum schedules.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::DinoConfig;
use crate::error::{Error, Result};
use crate::nn;

/// Lower clamp for log-probabilities inside the cross-entropy.
pub const LOG_CLAMP: f64 = -30.0;

/// `p_i = exp(q_i/τ) / Σ_k exp(q_k/τ)`, max-subtracted.
pub fn tempered_softmax(q: &[f64], tau: f64) -> Result<Vec<f64>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Dino(format!("temperature must be positive, got {tau}")));
    }
    if q.is_empty() || q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dino("logits must be finite and nonempty".into()));
    }
    let m = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// `−Σ a_i log b_i` with `log b` clamped below at −30.
pub fn cross_entropy(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&ai, &bi)| -ai * bi.ln().max(LOG_CLAMP))
        .sum()
}

fn check_crops(n_teacher: usize, n_student: usize) -> Result<()> {
    if n_teacher < 1 || n_student < 2 || n_student < n_teacher {
        return Err(Error::Dino(format!(
            "need L ≥ 1 teacher crops and L+M ≥ 2 student crops with L ≤ L+M, got {n_teacher} and {n_student}"
        )));
    }
    Ok(())
}

/// Multi-crop loss over distributions of a single utterance: `teacher[l]` are
/// the L long-crop teacher distributions, `student[m]` the L+M student ones,
/// with long crops first so index `l` refers to the same crop in both.
pub fn dino_loss(teacher: &[Vec<f64>], student: &[Vec<f64>]) -> Result<f64> {
    check_crops(teacher.len(), student.len())?;
    let mut sum = 0.0;
    for (l, pt) in teacher.iter().enumerate() {
        for (m, ps) in student.iter().enumerate() {
            if m != l {
                sum += cross_entropy(pt, ps);
            }
        }
    }
    Ok(sum / dino_term_count(teacher.len(), student.len() - teacher.len()) as f64)
}

/// Number of cross-entropy terms: `L·(L+M−1)`.
pub fn dino_term_count(l: usize, m: usize) -> usize {
    l * (l + m - 1)
}

/// Differentiable multi-crop loss. `teacher_p`: L tensors `[B, K]` of
/// (detached) probabilities; `student_logp`: L+M tensors `[B, K]` of student
/// log-probabilities. Averages over the batch.
pub fn dino_loss_tensor(teacher_p: &[Tensor], student_logp: &[Tensor]) -> Result<Tensor> {
    check_crops(teacher_p.len(), student_logp.len())?;
    let b = teacher_p[0].dim(0)?;
    let clamped: Vec<Tensor> = student_logp
        .iter()
        .map(|s| Ok((s.affine(1.0, -LOG_CLAMP)?.relu()? + LOG_CLAMP)?))
        .collect::<Result<_>>()?;
    let mut acc: Option<Tensor> = None;
    for (l, pt) in teacher_p.iter().enumerate() {
        let pt = pt.detach();
        for (m, ls) in clamped.iter().enumerate() {
            if m == l {
                continue;
            }
            let ce = (&pt * ls)?.sum_all()?.neg()?;
            acc = Some(match acc {
                Some(a) => (a + ce)?,
                None => ce,
            });
        }
    }
    let n = dino_term_count(teacher_p.len(), student_logp.len() - teacher_p.len()) * b;
    Ok((acc.expect("at least one term") / n as f64)?)
}

/// Student log-probabilities `log softmax(q/τ_s)`.
pub fn student_log_probs(q: &Tensor, tau_student: f64) -> Result<Tensor> {
    nn::log_softmax(&q.affine(1.0 / tau_student, 0.0)?, D::Minus1)
}

/// Linear teacher-temperature warm-up, constant afterwards.
pub fn teacher_temperature(iteration: usize, start: f64, end: f64, warmup: usize) -> f64 {
    if warmup == 0 {
        return end;
    }
    let frac = (iteration as f64 / warmup as f64).min(1.0);
    start + (end - start) * frac
}

/// Cosine schedule of the EMA momentum from `start` (iteration 0) to `end`
/// (iteration `total`).
pub fn ema_momentum(iteration: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let frac = (iteration as f64 / total as f64).min(1.0);
    end - (end - start) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
}

/// Collapse diagnostics over a batch of teacher distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    pub mean_entropy: f64,
    pub max_dim_mass: f64,
}

pub fn collapse_metrics(teacher_p: &[Vec<f64>]) -> Result<CollapseMetrics> {
    let k = teacher_p.first().map(Vec::len).unwrap_or(0);
    if k == 0 || teacher_p.iter().any(|p| p.len() != k) {
        return Err(Error::Dino("collapse metrics need equal-length nonempty distributions".into()));
    }
    let n = teacher_p.len() as f64;
    let entropy: f64 = teacher_p
        .iter()
        .map(|p| -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / n;
    let max_mass = (0..k)
        .map(|i| teacher_p.iter().map(|p| p[i]).sum::<f64>() / n)
        .fold(0.0, f64::max);
    Ok(CollapseMetrics {
        mean_entropy: entropy,
        max_dim_mass: max_mass,
    })
}

/// Mutable DINO state: teacher center, schedules and iteration counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DinoState {
    pub center: Vec<f64>,
    pub center_momentum: f64,
    pub tau_student: f64,
    pub tau_teacher_start: f64,
    pub tau_teacher_end: f64,
    pub tau_teacher_warmup_iters: usize,
    pub ema_start: f64,
    pub ema_end: f64,
    pub total_iters: usize,
    pub iteration: usize,
}

impl DinoState {
    pub fn new(cfg: &DinoConfig, k: usize, total_iters: usize) -> Result<Self> {
        if cfg.tau_teacher_start.max(cfg.tau_teacher_end) >= cfg.tau_student {
            return Err(Error::Dino("teacher temperature must stay below the student's".into()));
        }
        Ok(Self {
            center: vec![0.0; k],
            center_momentum: cfg.center_momentum,
            tau_student: cfg.tau_student,
            tau_teacher_start: cfg.tau_teacher_start,
            tau_teacher_end: cfg.tau_teacher_end,
            tau_teacher_warmup_iters: cfg.tau_teacher_warmup_iters,
            ema_start: cfg.ema_start,
            ema_end: cfg.ema_end,
            total_iters,
            iteration: 0,
        })
    }

    pub fn tau_teacher(&self) -> f64 {
        teacher_temperature(
            self.iteration,
            self.tau_teacher_start,
            self.tau_teacher_end,
            self.tau_teacher_warmup_iters,
        )
    }

    pub fn lambda_ema(&self) -> f64 {
        ema_momentum(self.iteration, self.total_iters, self.ema_start, self.ema_end)
    }

    pub fn center_norm(&self) -> f64 {
        self.center.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    fn check_k(&self, k: usize) -> Result<()> {
        if k != self.center.len() {
            return Err(Error::Dino(format!("logit dimension {k} does not match center of {}", self.center.len())));
        }
        Ok(())
    }

    /// `q − c` for one logit vector, using the current center.
    pub fn center_logits(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check_k(q.len())?;
        Ok(q.iter().zip(&self.center).map(|(a, c)| a - c).collect())
    }

    /// Teacher distribution `softmax((q − c)/τ_t)` for one logit vector.
    pub fn teacher_probs(&self, q: &[f64]) -> Result<Vec<f64>> {
        tempered_softmax(&self.center_logits(q)?, self.tau_teacher())
    }

    /// Detached teacher probabilities for a `[B, K]` logit batch.
    pub fn teacher_probs_tensor(&self, q: &Tensor) -> Result<Tensor> {
        self.check_k(q.dim(D::Minus1)?)?;
        let c = Tensor::from_slice(&self.center, (1, self.center.len()), &Device::Cpu)?.to_dtype(q.dtype())?;
        let z = q.detach().broadcast_sub(&c)?.affine(1.0 / self.tau_teacher(), 0.0)?;
        Ok(nn::softmax(&z, D::Minus1)?.detach())
    }

    /// `c ← m·c + (1−m)·mean(q)` over uncentered teacher logits.
    pub fn update_center(&mut self, teacher_logits: &[Vec<f64>]) -> Result<()> {
        if teacher_logits.is_empty() {
            return Err(Error::Dino("center update needs at least one teacher logit vector".into()));
        }
        for q in teacher_logits {
            self.check_k(q.len())?;
        }
        let n = teacher_logits.len() as f64;
        let m = self.center_momentum;
        for (i, c) in self.center.iter_mut().enumerate() {
            let mean = teacher_logits.iter().map(|q| q[i]).sum::<f64>() / n;
            *c = m * *c + (1.0 - m) * mean;
        }
        Ok(())
    }

    pub fn update_center_tensor(&mut self, teacher_logits: &Tensor) -> Result<()> {
        let rows = teacher_logits.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        self.update_center(&rows)
    }

    pub fn advance(&mut self) {
        self.iteration += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Preset, RunConfig};
    use proptest::prelude::*;

    fn state(k: usize) -> DinoState {
        DinoState::new(&RunConfig::preset(Preset::Toy).dino, k, 1000).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = tempered_softmax(&[0.3; 5], 0.7).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let p = tempered_softmax(&[1.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.7310585786300049).abs() < 1e-12 && (p[1] - 0.2689414213699951).abs() < 1e-12);
        let p = tempered_softmax(&[1.0, 0.0], 0.1).unwrap();
        assert!((p[0] - 0.9999546021312976).abs() < 1e-12);
        assert!(tempered_softmax(&[f64::NAN], 1.0).is_err());
        assert!(tempered_softmax(&[1.0], 0.0).is_err());
    }

    #[test]
    fn centering_examples() {
        let mut s = state(3);
        s.update_center(&[vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert!(s.center.iter().all(|&c| (c - 0.1).abs() < 1e-15));
        let mut frozen = state(3);
        frozen.center_momentum = 1.0;
        frozen.center = vec![0.5, 0.2, 0.1];
        frozen.update_center(&[vec![9.0; 3]]).unwrap();
        assert_eq!(frozen.center, vec![0.5, 0.2, 0.1]);
        assert!(s.update_center(&[vec![1.0; 4]]).is_err());
        // A dimension-constant center leaves the distribution unchanged.
        let mut c = state(3);
        c.center = vec![0.7; 3];
        let q = [0.3, -1.0, 2.0];
        let a = c.teacher_probs(&q).unwrap();
        let b = tempered_softmax(&q, c.tau_teacher()).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn dino_loss_examples() {
        assert_eq!(dino_term_count(2, 4), 10);
        let k = 8;
        let uniform = vec![1.0 / k as f64; k];
        let mut onehot = vec![0.0; k];
        onehot[3] = 1.0;
        let l = dino_loss(&[onehot.clone(), onehot], &vec![uniform.clone(); 6]).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-12);
        let l = dino_loss(&vec![uniform.clone(); 2], &vec![uniform; 6]).unwrap();
        assert!((l - (k as f64).ln()).abs() < 1e-12);
        assert!(dino_loss(&[], &[vec![1.0]]).is_err());
        assert!(dino_loss(&[vec![1.0]], &[vec![1.0]]).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(teacher_temperature(0, 0.04, 0.07, 20_000), 0.04);
        assert!((teacher_temperature(10_000, 0.04, 0.07, 20_000) - 0.055).abs() < 1e-15);
        assert_eq!(teacher_temperature(20_000, 0.04, 0.07, 20_000), 0.07);
        assert_eq!(teacher_temperature(50_000, 0.04, 0.07, 20_000), 0.07);
        assert_eq!(ema_momentum(0, 300_000, 0.996, 1.0), 0.996);
        assert!((ema_momentum(150_000, 300_000, 0.996, 1.0) - 0.998).abs() < 1e-9);
        assert_eq!(ema_momentum(300_000, 300_000, 0.996, 1.0), 1.0);
    }

    #[test]
    fn collapse_examples() {
        let k = 10;
        let uniform = vec![0.1; k];
        let mut onehot = vec![0.0; k];
        onehot[3] = 1.0;
        let m = collapse_metrics(&[uniform.clone(), uniform.clone()]).unwrap();
        assert!((m.mean_entropy - (k as f64).ln()).abs() < 1e-12 && (m.max_dim_mass - 0.1).abs() < 1e-12);
        let m = collapse_metrics(&[onehot.clone()]).unwrap();
        assert_eq!((m.mean_entropy, m.max_dim_mass), (0.0, 1.0));
        let m = collapse_metrics(&[uniform, onehot]).unwrap();
        assert!((m.mean_entropy - 0.5 * (k as f64).ln()).abs() < 1e-12);
        assert!((m.max_dim_mass - (0.5 + 0.5 / k as f64)).abs() < 1e-12);
    }

    #[test]
    fn tensor_loss_matches_vector_loss() {
        let qs: Vec<Vec<f64>> = (0..6).map(|i| (0..5).map(|j| ((i * 5 + j) as f64 * 0.7).sin()).collect()).collect();
        let qt: Vec<Vec<f64>> = qs[..2].iter().map(|q| q.iter().map(|v| v * 1.3).collect()).collect();
        let s = state(5);
        let tp: Vec<Vec<f64>> = qt.iter().map(|q| s.teacher_probs(q).unwrap()).collect();
        let sp: Vec<Vec<f64>> = qs.iter().map(|q| tempered_softmax(q, s.tau_student).unwrap()).collect();
        let want = dino_loss(&tp, &sp).unwrap();
        let t = |v: &Vec<f64>| Tensor::from_slice(v, (1, 5), &Device::Cpu).unwrap();
        let tpt: Vec<Tensor> = qt.iter().map(|q| s.teacher_probs_tensor(&t(q)).unwrap()).collect();
        let slp: Vec<Tensor> = qs.iter().map(|q| student_log_probs(&t(q), s.tau_student).unwrap()).collect();
        let got = nn::scalar(&dino_loss_tensor(&tpt, &slp).unwrap()).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(q in prop::collection::vec(-1e4f64..1e4, 1..40), tau in 0.01f64..5.0) {
            let p = tempered_softmax(&q, tau).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn identical_distributions_bound_loss_by_entropy(
            raw in prop::collection::vec(0.01f64..1.0, 2..12),
            m in 0usize..4,
        ) {
            let s: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let h = -p.iter().map(|v| v * v.ln()).sum::<f64>();
            let loss = dino_loss(&vec![p.clone(); 2], &vec![p; 2 + m]).unwrap();
            prop_assert!((loss - h).abs() < 1e-12);
        }

        #[test]
        fn loss_is_symmetric_in_short_crops(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut dist = || {
                let v: Vec<f64> = (0..6).map(|_| r.random_range(0.01..1.0)).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect::<Vec<f64>>()
            };
            let teacher = vec![dist(), dist()];
            let mut student: Vec<Vec<f64>> = (0..6).map(|_| dist()).collect();
            let a = dino_loss(&teacher, &student).unwrap();
            student[2..].reverse();
            let b = dino_loss(&teacher, &student).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn teacher_stays_sharper(it in 0usize..100_000) {
            prop_assert!(teacher_temperature(it, 0.04, 0.07, 20_000) < 0.1);
            let l = ema_momentum(it, 100_000, 0.996, 1.0);
            prop_assert!((0.0..=1.0).contains(&l));
        }
    }
}
