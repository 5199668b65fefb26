//! FastSpeech2-style unit-to-Mel acoustic model with FiLM conditioning.

use candle_core::{DType, Device, Tensor, D};

use crate::config::AcousticConfig;
use crate::error::{Error, Result};
use crate::features::units::MEL_FRAMES_PER_UNIT;
use crate::features::{ProsodyTrack, UnitSequence};
use crate::nn::{self, Conv1d, Ctx, Embedding, Init, LayerNorm, Linear, ParamStore};
use crate::{EMBED_DIM, MEL_BANDS};

pub const PREFIX: &str = "am";

fn mask_rows(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    // x: [B, N, H], mask: [B, N]
    Ok(x.broadcast_mul(&mask.unsqueeze(2)?)?)
}

/// Sinusoidal position table `[n, dim]`.
pub fn positions(n: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(n * dim);
    for p in 0..n {
        for i in 0..dim {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let a = p as f64 * rate;
            v.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Ok(Tensor::from_vec(v, (n, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Repeats unit `i` of item `b` `2·durations[b][i]` times. Returns
/// `[B, F_max, H]` states and the `[B, F_max]` frame mask.
pub fn length_regulate(h: &Tensor, durations: &[Vec<u32>]) -> Result<(Tensor, Tensor)> {
    let (b, n, hid) = h.dims3()?;
    if durations.len() != b {
        return Err(Error::Model(format!("{} duration lists for batch of {b}", durations.len())));
    }
    let mut frames = Vec::with_capacity(b);
    for d in durations {
        if d.len() > n {
            return Err(Error::Model(format!("{} durations for {n} unit slots", d.len())));
        }
        if let Some(i) = d.iter().position(|&x| x == 0) {
            return Err(Error::Model(format!("duration at unit {i} is zero")));
        }
        frames.push(d.iter().map(|&x| x as usize * MEL_FRAMES_PER_UNIT).sum::<usize>());
    }
    let f_max = frames.iter().copied().max().unwrap_or(0).max(1);
    let mut idx = Vec::with_capacity(b * f_max);
    let mut mask = Vec::with_capacity(b * f_max);
    for (bi, d) in durations.iter().enumerate() {
        for (i, &dur) in d.iter().enumerate() {
            for _ in 0..dur as usize * MEL_FRAMES_PER_UNIT {
                idx.push((bi * n + i) as u32);
                mask.push(1.0);
            }
        }
        for _ in frames[bi]..f_max {
            idx.push((bi * n) as u32);
            mask.push(0.0);
        }
    }
    let idx = Tensor::from_vec(idx, b * f_max, &Device::Cpu)?;
    let mask = Tensor::from_vec(mask, (b, f_max), &Device::Cpu)?.to_dtype(h.dtype())?;
    let out = h.reshape((b * n, hid))?.index_select(&idx, 0)?.reshape((b, f_max, hid))?;
    Ok((mask_rows(&out, &mask)?, mask))
}

/// FiLM scale and shift for one conditioned layer, each `[B, H]`.
#[derive(Debug, Clone)]
pub struct FilmParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

/// Linear FiLM generator: zero weights, bias = [1…, 0…] so it starts at
/// identity conditioning.
#[derive(Debug, Clone)]
struct FilmGenerator {
    lin: Linear,
    hidden: usize,
}

impl FilmGenerator {
    fn new(ps: &mut ParamStore, name: &str, hidden: usize) -> Result<Self> {
        let mut bias = vec![1.0; hidden];
        bias.extend(std::iter::repeat_n(0.0, hidden));
        Ok(Self {
            lin: Linear::with_init(ps, name, EMBED_DIM, 2 * hidden, Init::Const(0.0), Some(Init::Values(bias)))?,
            hidden,
        })
    }

    fn forward(&self, e: &Tensor) -> Result<FilmParams> {
        let gb = self.lin.forward(e)?;
        Ok(FilmParams {
            gamma: gb.narrow(1, 0, self.hidden)?,
            beta: gb.narrow(1, self.hidden, self.hidden)?,
        })
    }
}

#[derive(Debug, Clone)]
struct FftBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    ln2: LayerNorm,
    film: FilmGenerator,
    heads: usize,
    dropout: f64,
}

impl FftBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &AcousticConfig) -> Result<Self> {
        let h = cfg.hidden;
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.attn.q"), h, h)?,
            k: Linear::new(ps, &format!("{name}.attn.k"), h, h)?,
            v: Linear::new(ps, &format!("{name}.attn.v"), h, h)?,
            o: Linear::new(ps, &format!("{name}.attn.o"), h, h)?,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), h)?,
            conv1: Conv1d::new(ps, &format!("{name}.ffn.conv1"), h, cfg.conv_channels, cfg.conv_kernel, 1)?,
            conv2: Conv1d::new(ps, &format!("{name}.ffn.conv2"), cfg.conv_channels, h, 1, 1)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), h)?,
            film: FilmGenerator::new(ps, &format!("{name}.film"), h)?,
            heads: cfg.heads,
            dropout: cfg.dropout,
        })
    }

    fn attention(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, n, h) = x.dims3()?;
        let dh = h / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = q.matmul(&k.t()?)?.affine(1.0 / (dh as f64).sqrt(), 0.0)?;
        let key_mask = mask.affine(1e9, -1e9)?.reshape((b, 1, 1, n))?;
        let att = nn::softmax(&scores.broadcast_add(&key_mask)?, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, h))?;
        self.o.forward(&y)
    }

    fn forward(&self, x: &Tensor, mask: &Tensor, e: &Tensor, ctx: &mut Ctx) -> Result<(Tensor, FilmParams)> {
        let a = ctx.dropout(&self.attention(x, mask)?, self.dropout)?;
        let x = mask_rows(&self.ln1.forward(&(x + a)?)?, mask)?;
        let f = self.conv1.forward(&x.transpose(1, 2)?)?.relu()?;
        let f = self.conv2.forward(&f)?.transpose(1, 2)?;
        let f = ctx.dropout(&f, self.dropout)?;
        let x = mask_rows(&self.ln2.forward(&(&x + f)?)?, mask)?;
        let film = self.film.forward(e)?;
        let y = x
            .broadcast_mul(&film.gamma.unsqueeze(1)?)?
            .broadcast_add(&film.beta.unsqueeze(1)?)?;
        Ok((mask_rows(&y, mask)?, film))
    }
}

/// Two conv layers then a linear projection to one value per unit.
#[derive(Debug, Clone)]
struct ProsodyPredictor {
    c1: Conv1d,
    ln1: LayerNorm,
    c2: Conv1d,
    ln2: LayerNorm,
    out: Linear,
    dropout: f64,
}

impl ProsodyPredictor {
    fn new(ps: &mut ParamStore, name: &str, cfg: &AcousticConfig) -> Result<Self> {
        let (h, c, k) = (cfg.hidden, cfg.prosody_channels, cfg.prosody_kernel);
        Ok(Self {
            c1: Conv1d::new(ps, &format!("{name}.conv1"), h, c, k, 1)?,
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c)?,
            c2: Conv1d::new(ps, &format!("{name}.conv2"), c, c, k, 1)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c)?,
            out: Linear::new(ps, &format!("{name}.out"), c, 1)?,
            dropout: cfg.prosody_dropout,
        })
    }

    /// `[B, N, H]` → `[B, N]`.
    fn forward(&self, x: &Tensor, mask: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let m = mask.unsqueeze(1)?;
        let y = self.ln1.forward_channels(&self.c1.forward(&x.transpose(1, 2)?)?.relu()?)?;
        let y = ctx.dropout(&y.broadcast_mul(&m)?, self.dropout)?;
        let y = self.ln2.forward_channels(&self.c2.forward(&y)?.relu()?)?;
        let y = ctx.dropout(&y.broadcast_mul(&m)?, self.dropout)?;
        Ok(self.out.forward(&y.transpose(1, 2)?)?.squeeze(2)?.broadcast_mul(mask)?)
    }
}

/// Per-unit prosody tensors, each `[B, N]`.
#[derive(Debug, Clone)]
pub struct ProsodyTensors {
    pub log_f0: Tensor,
    /// Ground truth: 0/1 flags. Predictions: logits.
    pub vuv: Tensor,
    pub log_energy: Tensor,
}

impl ProsodyTensors {
    /// Pads per-utterance tracks to `n` units.
    pub fn from_tracks(tracks: &[&ProsodyTrack], n: usize, dtype: DType) -> Result<Self> {
        let pad = |f: &dyn Fn(&ProsodyTrack) -> Vec<f64>| -> Result<Tensor> {
            let mut v = Vec::with_capacity(tracks.len() * n);
            for t in tracks {
                let row = f(t);
                v.extend_from_slice(&row);
                v.extend(std::iter::repeat_n(0.0, n - row.len()));
            }
            Ok(Tensor::from_vec(v, (tracks.len(), n), &Device::Cpu)?.to_dtype(dtype)?)
        };
        Ok(Self {
            log_f0: pad(&|t| t.log_f0.clone())?,
            vuv: pad(&|t| t.vuv.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())?,
            log_energy: pad(&|t| t.log_energy.clone())?,
        })
    }
}

/// Batched acoustic-model input.
#[derive(Debug, Clone)]
pub struct AcousticInput {
    /// `[B, N]` unit ids (u32), zero-padded.
    pub units: Tensor,
    /// `[B, N]` unit mask.
    pub unit_mask: Tensor,
    pub durations: Vec<Vec<u32>>,
    /// `[B]` language indices (u32).
    pub languages: Tensor,
    /// `[B, 512]` expressivity embeddings.
    pub embedding: Tensor,
}

impl AcousticInput {
    pub fn new(seqs: &[&UnitSequence], languages: &[usize], embedding: Tensor) -> Result<Self> {
        let b = seqs.len();
        if b == 0 || languages.len() != b {
            return Err(Error::Model("acoustic batch needs one language per sequence".into()));
        }
        let n = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(b * n);
        let mut mask = Vec::with_capacity(b * n);
        for s in seqs {
            ids.extend_from_slice(&s.units);
            ids.extend(std::iter::repeat_n(0u32, n - s.len()));
            mask.extend((0..n).map(|i| if i < s.len() { 1.0 } else { 0.0 }));
        }
        let dtype = embedding.dtype();
        Ok(Self {
            units: Tensor::from_vec(ids, (b, n), &Device::Cpu)?,
            unit_mask: Tensor::from_vec(mask, (b, n), &Device::Cpu)?.to_dtype(dtype)?,
            durations: seqs.iter().map(|s| s.durations.clone()).collect(),
            languages: Tensor::from_vec(languages.iter().map(|&l| l as u32).collect::<Vec<_>>(), b, &Device::Cpu)?,
            embedding,
        })
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct AcousticOutput {
    /// `[B, F, 80]` before PostNet.
    pub mel_pre: Tensor,
    /// `[B, F, 80]` after the PostNet residual.
    pub mel_post: Tensor,
    /// `[B, F]` valid-frame mask.
    pub frame_mask: Tensor,
    /// Predicted prosody; `vuv` holds logits.
    pub prosody: ProsodyTensors,
    pub film: Vec<FilmParams>,
}

#[derive(Debug, Clone)]
struct PostNet {
    convs: Vec<Conv1d>,
    lns: Vec<LayerNorm>,
    dropout: f64,
}

impl PostNet {
    fn new(ps: &mut ParamStore, name: &str, cfg: &AcousticConfig) -> Result<Self> {
        let n = cfg.postnet_layers;
        let mut convs = Vec::with_capacity(n);
        let mut lns = Vec::with_capacity(n.saturating_sub(1));
        for i in 0..n {
            let c_in = if i == 0 { MEL_BANDS } else { cfg.postnet_channels };
            let c_out = if i + 1 == n { MEL_BANDS } else { cfg.postnet_channels };
            convs.push(Conv1d::new(ps, &format!("{name}.conv{i}"), c_in, c_out, cfg.postnet_kernel, 1)?);
            if i + 1 < n {
                lns.push(LayerNorm::new(ps, &format!("{name}.ln{i}"), c_out)?);
            }
        }
        Ok(Self {
            convs,
            lns,
            dropout: cfg.postnet_dropout,
        })
    }

    /// Residual over `[B, F, 80]`.
    fn residual(&self, mel: &Tensor, mask: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        let m = mask.unsqueeze(1)?;
        let mut y = mel.transpose(1, 2)?.contiguous()?;
        for (i, conv) in self.convs.iter().enumerate() {
            y = conv.forward(&y)?;
            if let Some(ln) = self.lns.get(i) {
                y = ln.forward_channels(&y)?.tanh()?;
                y = ctx.dropout(&y, self.dropout)?;
            }
            y = y.broadcast_mul(&m)?;
        }
        Ok(y.transpose(1, 2)?)
    }
}

/// Unit-to-Mel acoustic model.
#[derive(Debug, Clone)]
pub struct AcousticModel {
    units: Embedding,
    langs: Embedding,
    pub languages: Vec<String>,
    encoder: Vec<FftBlock>,
    f0: ProsodyPredictor,
    vuv: ProsodyPredictor,
    energy: ProsodyPredictor,
    f0_embed: Conv1d,
    vuv_embed: Conv1d,
    energy_embed: Conv1d,
    decoder: Vec<FftBlock>,
    mel_out: Linear,
    postnet: PostNet,
    hidden: usize,
}

impl AcousticModel {
    pub fn new(ps: &mut ParamStore, cfg: &AcousticConfig, vocab: usize, languages: &[String]) -> Result<Self> {
        if languages.is_empty() || vocab == 0 {
            return Err(Error::Model("acoustic model needs a vocabulary and at least one language".into()));
        }
        let p = PREFIX;
        let h = cfg.hidden;
        let k = cfg.prosody_kernel;
        Ok(Self {
            units: Embedding::new(ps, &format!("{p}.unit_embed"), vocab, h)?,
            langs: Embedding::new(ps, &format!("{p}.lang_embed"), languages.len(), h)?,
            languages: languages.to_vec(),
            encoder: (0..cfg.encoder_layers)
                .map(|i| FftBlock::new(ps, &format!("{p}.encoder{i}"), cfg))
                .collect::<Result<_>>()?,
            f0: ProsodyPredictor::new(ps, &format!("{p}.pred_f0"), cfg)?,
            vuv: ProsodyPredictor::new(ps, &format!("{p}.pred_vuv"), cfg)?,
            energy: ProsodyPredictor::new(ps, &format!("{p}.pred_energy"), cfg)?,
            f0_embed: Conv1d::new(ps, &format!("{p}.embed_f0"), 1, h, k, 1)?,
            vuv_embed: Conv1d::new(ps, &format!("{p}.embed_vuv"), 1, h, k, 1)?,
            energy_embed: Conv1d::new(ps, &format!("{p}.embed_energy"), 1, h, k, 1)?,
            decoder: (0..cfg.decoder_layers)
                .map(|i| FftBlock::new(ps, &format!("{p}.decoder{i}"), cfg))
                .collect::<Result<_>>()?,
            mel_out: Linear::new(ps, &format!("{p}.mel_out"), h, MEL_BANDS)?,
            postnet: PostNet::new(ps, &format!("{p}.postnet"), cfg)?,
            hidden: h,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.units.len()
    }

    pub fn language_index(&self, lang: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|l| l == lang)
            .ok_or_else(|| Error::Model(format!("unknown language {lang:?}; model knows {:?}", self.languages)))
    }

    fn embed_stream(conv: &Conv1d, v: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let y = conv.forward(&v.broadcast_mul(mask)?.unsqueeze(1)?)?.transpose(1, 2)?;
        mask_rows(&y, mask)
    }

    /// Forward pass. Ground-truth prosody, when given, drives the variance
    /// adaptor (training); otherwise the model's own predictions do.
    pub fn forward(&self, input: &AcousticInput, targets: Option<&ProsodyTensors>, ctx: &mut Ctx) -> Result<AcousticOutput> {
        let max_id = input.units.flatten_all()?.max(0)?.to_scalar::<u32>()?;
        if max_id as usize >= self.vocab_size() {
            return Err(Error::Model(format!(
                "unit id {max_id} out of range for vocabulary of {}",
                self.vocab_size()
            )));
        }
        let max_lang = input.languages.max(0)?.to_scalar::<u32>()?;
        if max_lang as usize >= self.languages.len() {
            return Err(Error::Model(format!("language index {max_lang} out of range")));
        }
        let dtype = input.embedding.dtype();
        let mask = &input.unit_mask;
        let (_, n) = mask.dims2()?;
        let e = &input.embedding;

        let x = self
            .units
            .forward(&input.units)?
            .broadcast_add(&self.langs.forward(&input.languages)?.unsqueeze(1)?)?
            .broadcast_add(&positions(n, self.hidden, dtype)?.unsqueeze(0)?)?;
        let mut x = mask_rows(&x, mask)?;
        let mut film = Vec::with_capacity(self.encoder.len() + self.decoder.len());
        for blk in &self.encoder {
            let (y, f) = blk.forward(&x, mask, e, ctx)?;
            x = y;
            film.push(f);
        }

        let prosody = ProsodyTensors {
            log_f0: self.f0.forward(&x, mask, ctx)?,
            vuv: self.vuv.forward(&x, mask, ctx)?,
            log_energy: self.energy.forward(&x, mask, ctx)?,
        };
        let (f0, vuv, energy) = match targets {
            Some(t) => (t.log_f0.clone(), t.vuv.clone(), t.log_energy.clone()),
            None => (
                prosody.log_f0.detach(),
                prosody.vuv.ge(0.0)?.to_dtype(dtype)?,
                prosody.log_energy.detach(),
            ),
        };
        let x = (x
            + Self::embed_stream(&self.f0_embed, &f0, mask)?
            + Self::embed_stream(&self.vuv_embed, &vuv, mask)?
            + Self::embed_stream(&self.energy_embed, &energy, mask)?)?;

        let (y, frame_mask) = length_regulate(&x, &input.durations)?;
        let f = y.dim(1)?;
        let mut y = mask_rows(
            &y.broadcast_add(&positions(f, self.hidden, dtype)?.unsqueeze(0)?)?,
            &frame_mask,
        )?;
        for blk in &self.decoder {
            let (z, fp) = blk.forward(&y, &frame_mask, e, ctx)?;
            y = z;
            film.push(fp);
        }
        let mel_pre = mask_rows(&self.mel_out.forward(&y)?, &frame_mask)?;
        let mel_post = (&mel_pre + self.postnet.residual(&mel_pre, &frame_mask, ctx)?)?;
        Ok(AcousticOutput {
            mel_pre,
            mel_post,
            frame_mask,
            prosody,
            film,
        })
    }

    /// PostNet refinement alone: `mel + residual(mel)` over `[B, F, 80]`.
    pub fn postnet_refine(&self, mel: &Tensor, frame_mask: &Tensor, ctx: &mut Ctx) -> Result<Tensor> {
        Ok((mel + self.postnet.residual(mel, frame_mask, ctx)?)?)
    }

    /// Local prosody predictions from per-unit states `[B, N, H]`.
    pub fn predict_local_prosody(&self, states: &Tensor, mask: &Tensor, ctx: &mut Ctx) -> Result<ProsodyTensors> {
        Ok(ProsodyTensors {
            log_f0: self.f0.forward(states, mask, ctx)?,
            vuv: self.vuv.forward(states, mask, ctx)?,
            log_energy: self.energy.forward(states, mask, ctx)?,
        })
    }
}
