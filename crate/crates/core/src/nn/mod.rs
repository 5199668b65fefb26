//! Small seeded neural-network toolkit on top of `candle-core` autograd.
//!
//! Every parameter lives in a named [`ParamStore`]; layers hold cheap clones of
//! the underlying tensors, so in-place optimizer or EMA updates are visible to
//! every layer that shares the parameter.

mod adam;

pub use adam::Adam;

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::container::Container;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Parameter initializers.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Uniform(f64),
    Normal(f64),
    Const(f64),
    Values(Vec<f64>),
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    seed: u64,
}

fn name_stream(name: &str) -> u64 {
    // FNV-1a: gives every parameter its own RNG stream, independent of
    // construction order.
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &'static Device {
        &Device::Cpu
    }

    /// Creates a parameter. Names must be unique.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Model(format!("duplicate parameter {name:?}")));
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(name_stream(name));
        let values: Vec<f64> = match init {
            Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..=a)).collect(),
            Init::Normal(s) => (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect(),
            Init::Const(c) => vec![c; n],
            Init::Values(v) => {
                if v.len() != n {
                    return Err(Error::Model(format!("{name}: {} init values for {n} elements", v.len())));
                }
                v
            }
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Gradients of every parameter present in `grads`, by name.
    pub fn grads(&self, grads: &GradStore) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(v.as_tensor()).map(|g| (k.clone(), g.detach())))
            .collect()
    }

    fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.vars.len() != other.vars.len() {
            return Err(Error::Model(format!(
                "parameter count mismatch: {} vs {}",
                self.vars.len(),
                other.vars.len()
            )));
        }
        for (k, v) in &self.vars {
            let o = other
                .vars
                .get(k)
                .ok_or_else(|| Error::Model(format!("missing parameter {k:?}")))?;
            if v.dims() != o.dims() {
                return Err(Error::Model(format!("{k}: shape {:?} vs {:?}", v.dims(), o.dims())));
            }
        }
        Ok(())
    }

    /// Overwrites every parameter with the value of the same-named one in `src`.
    pub fn copy_from(&self, src: &ParamStore) -> Result<()> {
        self.check_same_layout(src)?;
        for (k, v) in &self.vars {
            v.set(&src.vars[k].as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// θ ← λ·θ + (1−λ)·θ_src for every parameter.
    pub fn ema_from(&self, src: &ParamStore, lambda: f64) -> Result<()> {
        self.check_same_layout(src)?;
        for (k, v) in &self.vars {
            let s = src.vars[k].as_tensor().to_dtype(self.dtype)?;
            let upd = (v.as_tensor().affine(lambda, 0.0)? + s.affine(1.0 - lambda, 0.0)?)?;
            v.set(&upd)?;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> Result<f64> {
        self.check_same_layout(other)?;
        let mut m = 0.0f64;
        for (k, v) in &self.vars {
            let d = (v.as_tensor() - other.vars[k].as_tensor())?
                .abs()?
                .flatten_all()?
                .max(0)?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            m = m.max(d);
        }
        Ok(m)
    }

    /// Element-wise copy of the whole store as a new, independent store.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            vars,
            dtype: self.dtype,
            seed: self.seed,
        })
    }

    pub fn save_into(&self, c: &mut Container, prefix: &str) -> Result<()> {
        for (k, v) in &self.vars {
            c.put_tensor(format!("{prefix}{k}"), v.as_tensor())?;
        }
        Ok(())
    }

    /// Loads every parameter from `prefix`-named blobs; all must be present
    /// with matching shapes.
    pub fn load_from(&self, c: &Container, prefix: &str) -> Result<()> {
        for (k, v) in &self.vars {
            let t = c.tensor(&format!("{prefix}{k}"), &Device::Cpu)?;
            if t.dims() != v.dims() {
                return Err(Error::Container(format!(
                    "{prefix}{k}: stored shape {:?}, model expects {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Forward-pass context: train/eval mode plus the dropout RNG.
pub struct Ctx {
    pub train: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self { train: true, rng }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok((x * mask)?)
    }
}

/// Fully connected layer over the last dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let a = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[d_out, d_in], Init::Uniform(a))?,
            bias: Some(ps.param(&format!("{name}.bias"), &[d_out], Init::Uniform(a))?),
        })
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        weight: Init,
        bias: Option<Init>,
    ) -> Result<Self> {
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[d_out, d_in], weight)?,
            bias: bias
                .map(|b| ps.param(&format!("{name}.bias"), &[d_out], b))
                .transpose()?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, self.bias.as_ref())
    }
}

/// `x · wᵀ + b` over the last dimension of an arbitrary-rank input.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d_in = *dims.last().ok_or_else(|| Error::Model("linear on a scalar".into()))?;
    let rows = x.elem_count() / d_in.max(1);
    let y = x.reshape((rows, d_in))?.matmul(&w.t()?)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out = dims;
    *out.last_mut().expect("nonempty") = w.dim(0)?;
    Ok(y.reshape(out)?)
}

/// 1-D convolution over `[B, C, T]` with "same" padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub dilation: usize,
}

impl Conv1d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, dilation: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Model(format!("{name}: kernel size must be odd, got {kernel}")));
        }
        let a = 1.0 / ((c_in * kernel) as f64).sqrt();
        Ok(Self {
            weight: ps.param(&format!("{name}.weight"), &[c_out, c_in, kernel], Init::Uniform(a))?,
            bias: ps.param(&format!("{name}.bias"), &[c_out], Init::Uniform(a))?,
            dilation,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.dims()[2]
    }

    /// Frames of context consumed on each side.
    pub fn half_width(&self) -> usize {
        self.dilation * (self.kernel() - 1) / 2
    }

    /// Unfold + matmul rather than the backend's conv kernel, whose backward
    /// pass returns wrong weight gradients on CPU.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, t) = x.dims3()?;
        let (c_out, _, k) = self.weight.dims3()?;
        let cols = if k == 1 {
            x.clone()
        } else {
            let p = self.half_width();
            let xp = x.pad_with_zeros(2, p, p)?;
            let taps = (0..k)
                .map(|j| xp.narrow(2, j * self.dilation, t))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Tensor::stack(&taps, 2)?.reshape((b, c * k, t))?
        };
        let y = self.weight.reshape((c_out, c * k))?.broadcast_matmul(&cols)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, (), 1))?)?)
    }
}

/// Layer normalization with learned affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.param(&format!("{name}.gamma"), &[dim], Init::Const(1.0))?,
            beta: ps.param(&format!("{name}.beta"), &[dim], Init::Const(0.0))?,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = normalize(x, D::Minus1)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }

    /// Normalizes over the channel dimension of a `[B, C, T]` tensor.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        let y = normalize(x, 1)?;
        let g = self.gamma.reshape((1, (), 1))?;
        let b = self.beta.reshape((1, (), 1))?;
        Ok(y.broadcast_mul(&g)?.broadcast_add(&b)?)
    }
}

fn normalize<Dm: candle_core::shape::Dim + Copy>(x: &Tensor, dim: Dm) -> Result<Tensor> {
    let mean = x.mean_keepdim(dim)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(dim)?;
    Ok(xc.broadcast_div(&(var + LN_EPS)?.sqrt()?)?)
}

/// Lookup table of `n × dim` vectors.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, n: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: ps.param(&format!("{name}.weight"), &[n, dim], Init::Normal((dim as f64).powf(-0.5)))?,
        })
    }

    pub fn len(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `ids` of any shape → `[..ids, dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let y = self.table.index_select(&ids.flatten_all()?, 0)?;
        dims.push(self.table.dim(1)?);
        Ok(y.reshape(dims)?)
    }
}

/// Numerically stable softmax.
pub fn softmax<Dm: candle_core::shape::Dim + Copy>(x: &Tensor, dim: Dm) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax<Dm: candle_core::shape::Dim + Copy>(x: &Tensor, dim: Dm) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let xs = x.broadcast_sub(&m)?;
    Ok(xs.broadcast_sub(&xs.exp()?.sum_keepdim(dim)?.log()?)?)
}

/// Sigmoid via tanh, finite for any input and with finite gradients.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

/// Adds `b` into `acc` (name-wise), inserting missing entries.
pub fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>) -> Result<()> {
    for (k, g) in grads {
        let v = match acc.remove(&k) {
            Some(a) => (a + g)?,
            None => g,
        };
        acc.insert(k, v);
    }
    Ok(())
}

/// Sum of squares of every tensor, as f64.
pub fn global_sq_norm(ts: &BTreeMap<String, Tensor>) -> Result<f64> {
    ts.values().try_fold(0.0, |acc, t| {
        Ok(acc + t.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    })
}

/// Scalar tensor → f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
