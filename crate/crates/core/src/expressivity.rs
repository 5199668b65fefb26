//! ECAPA-style expressivity encoder with layer normalization, and the DINO
//! projection head.

use candle_core::{DType, Device, Tensor, D};

use crate::config::{EncoderConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::nn::{self, Conv1d, Init, LayerNorm, Linear, ParamStore};
use crate::MEL_BANDS;

const STD_EPS: f64 = 1e-6;

/// Stacks Mels into a zero-padded `[B, 80, T_max]` tensor plus a `[B, T_max]`
/// frame mask (1 = valid).
pub fn mel_batch(mels: &[&MelSpectrogram], dtype: DType) -> Result<(Tensor, Tensor)> {
    let t_max = mels.iter().map(|m| m.frames).max().unwrap_or(0);
    if t_max == 0 {
        return Err(Error::Model("empty Mel batch".into()));
    }
    let mut data = Vec::with_capacity(mels.len() * MEL_BANDS * t_max);
    let mut mask = Vec::with_capacity(mels.len() * t_max);
    for m in mels {
        for b in 0..MEL_BANDS {
            data.extend_from_slice(m.band(b));
            data.extend(std::iter::repeat_n(0.0, t_max - m.frames));
        }
        mask.extend((0..t_max).map(|t| if t < m.frames { 1.0 } else { 0.0 }));
    }
    let x = Tensor::from_vec(data, (mels.len(), MEL_BANDS, t_max), &Device::Cpu)?.to_dtype(dtype)?;
    let mask = Tensor::from_vec(mask, (mels.len(), t_max), &Device::Cpu)?.to_dtype(dtype)?;
    Ok((x, mask))
}

fn apply_mask(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&mask.unsqueeze(1)?)?)
}

/// Masked mean over time of `[B, C, T]` → `[B, C, 1]`.
fn masked_mean(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(1)?;
    Ok(x.broadcast_mul(&m)?.sum_keepdim(2)?.broadcast_div(&m.sum_keepdim(2)?)?)
}

/// Conv → ReLU → channel LayerNorm → mask.
#[derive(Debug, Clone)]
struct TdnnUnit {
    conv: Conv1d,
    ln: LayerNorm,
}

impl TdnnUnit {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, dil: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(ps, &format!("{name}.conv"), c_in, c_out, k, dil)?,
            ln: LayerNorm::new(ps, &format!("{name}.ln"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let y = self.ln.forward_channels(&self.conv.forward(x)?.relu()?)?;
        apply_mask(&y, mask)
    }
}

#[derive(Debug, Clone)]
struct SeRes2Block {
    pre: TdnnUnit,
    branches: Vec<TdnnUnit>,
    post: TdnnUnit,
    se1: Linear,
    se2: Linear,
    scale: usize,
}

impl SeRes2Block {
    fn new(ps: &mut ParamStore, name: &str, c: usize, cfg: &EncoderConfig, k: usize, dil: usize) -> Result<Self> {
        let scale = cfg.res2net_scale;
        let w = c / scale;
        Ok(Self {
            pre: TdnnUnit::new(ps, &format!("{name}.pre"), c, c, 1, 1)?,
            branches: (1..scale)
                .map(|i| TdnnUnit::new(ps, &format!("{name}.res2.{i}"), w, w, k, dil))
                .collect::<Result<_>>()?,
            post: TdnnUnit::new(ps, &format!("{name}.post"), c, c, 1, 1)?,
            se1: Linear::new(ps, &format!("{name}.se1"), c, cfg.se_channels)?,
            se2: Linear::new(ps, &format!("{name}.se2"), cfg.se_channels, c)?,
            scale,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let h = self.pre.forward(x, mask)?;
        let chunks = h.chunk(self.scale, 1)?;
        let mut outs = vec![chunks[0].clone()];
        let mut prev: Option<Tensor> = None;
        for (i, branch) in self.branches.iter().enumerate() {
            let inp = match &prev {
                Some(p) => (&chunks[i + 1] + p)?,
                None => chunks[i + 1].clone(),
            };
            let y = branch.forward(&inp, mask)?;
            outs.push(y.clone());
            prev = Some(y);
        }
        let h = self.post.forward(&Tensor::cat(&outs, 1)?, mask)?;
        // Squeeze-excitation over the masked time average.
        let s = masked_mean(&h, mask)?.squeeze(2)?;
        let s = nn::sigmoid(&self.se2.forward(&self.se1.forward(&s)?.relu()?)?)?;
        let h = h.broadcast_mul(&s.unsqueeze(2)?)?;
        Ok((h + x)?)
    }
}

/// Attentive statistics pooling with global context.
#[derive(Debug, Clone)]
struct AttentivePool {
    att: TdnnUnit,
    score: Conv1d,
}

impl AttentivePool {
    fn forward(&self, h: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let mean = masked_mean(h, mask)?;
        let var = masked_mean(&h.broadcast_sub(&mean)?.sqr()?, mask)?;
        let std = (var.affine(1.0, -STD_EPS)?.relu()? + STD_EPS)?.sqrt()?;
        let ctx = Tensor::cat(
            &[
                h.clone(),
                mean.broadcast_as(h.shape())?.contiguous()?,
                std.broadcast_as(h.shape())?.contiguous()?,
            ],
            1,
        )?;
        let a = self.att.forward(&ctx, mask)?.tanh()?;
        let logits = self.score.forward(&a)?;
        // Padded frames get a large negative score.
        let neg = mask.affine(1e9, -1e9)?.unsqueeze(1)?;
        let alpha = nn::softmax(&logits.broadcast_add(&neg)?, 2)?;
        let mu = (&alpha * h)?.sum(2)?;
        let ex2 = (&alpha * h.sqr()?)?.sum(2)?;
        let var = (ex2 - mu.sqr()?)?;
        let sd = (var.affine(1.0, -STD_EPS)?.relu()? + STD_EPS)?.sqrt()?;
        Ok(Tensor::cat(&[mu, sd], 1)?)
    }
}

/// Utterance-level expressivity encoder producing `embed_dim` vectors.
#[derive(Debug, Clone)]
pub struct Encoder {
    tdnn: TdnnUnit,
    blocks: Vec<SeRes2Block>,
    mfa: TdnnUnit,
    pool: AttentivePool,
    pool_ln: LayerNorm,
    out: Linear,
    min_frames: usize,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let c = cfg.tdnn_hidden;
        let blocks = cfg
            .block_kernels
            .iter()
            .zip(&cfg.block_dilations)
            .enumerate()
            .map(|(i, (&k, &d))| SeRes2Block::new(ps, &format!("{prefix}.block{i}"), c, cfg, k, d))
            .collect::<Result<Vec<_>>>()?;
        let f = cfg.final_hidden;
        Ok(Self {
            tdnn: TdnnUnit::new(ps, &format!("{prefix}.tdnn"), cfg.input_bands, c, cfg.initial_kernel, 1)?,
            mfa: TdnnUnit::new(ps, &format!("{prefix}.mfa"), c * blocks.len(), f, 1, 1)?,
            pool: AttentivePool {
                att: TdnnUnit::new(ps, &format!("{prefix}.pool.att"), 3 * f, cfg.attentive_pool_hidden, 1, 1)?,
                score: Conv1d::new(ps, &format!("{prefix}.pool.score"), cfg.attentive_pool_hidden, f, 1, 1)?,
            },
            pool_ln: LayerNorm::new(ps, &format!("{prefix}.pool_ln"), 2 * f)?,
            out: Linear::new(ps, &format!("{prefix}.out"), 2 * f, cfg.embed_dim)?,
            blocks,
            min_frames: min_frames(cfg),
        })
    }

    /// Smallest input length whose central frame sees a full receptive field.
    pub fn min_frames(&self) -> usize {
        self.min_frames
    }

    /// `x`: `[B, 80, T]`, `mask`: `[B, T]` → `[B, embed_dim]`.
    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let lens = mask.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(&short) = lens.iter().find(|&&l| (l as usize) < self.min_frames) {
            return Err(Error::Model(format!(
                "input has {short} frames; the encoder needs at least {}",
                self.min_frames
            )));
        }
        let x = apply_mask(x, mask)?;
        let mut h = self.tdnn.forward(&x, mask)?;
        let mut feats = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            h = b.forward(&h, mask)?;
            feats.push(h.clone());
        }
        let h = self.mfa.forward(&Tensor::cat(&feats, 1)?, mask)?;
        let pooled = self.pool_ln.forward(&self.pool.forward(&h, mask)?)?;
        self.out.forward(&pooled)
    }

    /// Embeds one Mel (eval mode).
    pub fn embed(&self, mel: &MelSpectrogram, dtype: DType) -> Result<Vec<f64>> {
        let (x, mask) = mel_batch(&[mel], dtype)?;
        Ok(self.forward(&x, &mask)?.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?)
    }
}

pub fn min_frames(cfg: &EncoderConfig) -> usize {
    1 + (cfg.initial_kernel - 1)
        + cfg
            .block_kernels
            .iter()
            .zip(&cfg.block_dilations)
            .map(|(k, d)| (k - 1) * d)
            .sum::<usize>()
}

/// Projection head output.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    /// L2-normalized bottleneck, `[B, bottleneck]`.
    pub bottleneck: Tensor,
    /// Logits `q`, `[B, K]`.
    pub logits: Tensor,
}

/// MLP → L2 normalization → weight-normalized linear to K logits.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    l1: Linear,
    l2: Linear,
    l3: Linear,
    /// Direction parameter of the weight-normalized output layer (gain fixed at 1).
    v: Tensor,
}

impl ProjectionHead {
    pub fn new(ps: &mut ParamStore, prefix: &str, embed_dim: usize, cfg: &HeadConfig) -> Result<Self> {
        let a = 1.0 / (cfg.bottleneck as f64).sqrt();
        Ok(Self {
            l1: Linear::new(ps, &format!("{prefix}.l1"), embed_dim, cfg.hidden)?,
            l2: Linear::new(ps, &format!("{prefix}.l2"), cfg.hidden, cfg.hidden)?,
            l3: Linear::new(ps, &format!("{prefix}.l3"), cfg.hidden, cfg.bottleneck)?,
            v: ps.param(&format!("{prefix}.last.v"), &[cfg.out_dim, cfg.bottleneck], Init::Uniform(a))?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.v.dims()[0]
    }

    pub fn forward(&self, e: &Tensor) -> Result<HeadOutput> {
        let h = self.l1.forward(e)?.gelu_erf()?;
        let h = self.l2.forward(&h)?.gelu_erf()?;
        let z = self.l3.forward(&h)?;
        let z = z.broadcast_div(&(z.sqr()?.sum_keepdim(D::Minus1)? + 1e-24)?.sqrt()?)?;
        let w = self
            .v
            .broadcast_div(&self.v.sqr()?.sum_keepdim(1)?.sqrt()?)?;
        let logits = z.matmul(&w.t()?)?;
        Ok(HeadOutput { bottleneck: z, logits })
    }
}

/// Encoder plus projection head over one parameter store (student or teacher).
#[derive(Debug, Clone)]
pub struct ExpressivityNet {
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

pub const ENCODER_PREFIX: &str = "enc";
pub const HEAD_PREFIX: &str = "head";

impl ExpressivityNet {
    pub fn new(ps: &mut ParamStore, enc: &EncoderConfig, head: &HeadConfig) -> Result<Self> {
        Ok(Self {
            encoder: Encoder::new(ps, ENCODER_PREFIX, enc)?,
            head: ProjectionHead::new(ps, HEAD_PREFIX, enc.embed_dim, head)?,
        })
    }

    /// Freshly initialized network in its own store.
    pub fn build(enc: &EncoderConfig, head: &HeadConfig, dtype: DType, seed: u64) -> Result<(ParamStore, Self)> {
        let mut ps = ParamStore::new(dtype, seed);
        let net = Self::new(&mut ps, enc, head)?;
        Ok((ps, net))
    }
}

/// Builds a teacher whose parameters equal the student's. The teacher store
/// is never handed to the optimizer.
pub fn clone_student_to_teacher(
    student: &ParamStore,
    enc: &EncoderConfig,
    head: &HeadConfig,
) -> Result<(ParamStore, ExpressivityNet)> {
    let (ps, net) = ExpressivityNet::build(enc, head, student.dtype(), 0)?;
    ps.copy_from(student)?;
    Ok((ps, net))
}
