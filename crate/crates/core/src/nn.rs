//! Tensor building blocks on top of `candle-core`.
//!
//! Everything is built from candle ops with backward passes, plus the CPU
//! kernels in [`crate::kernels`] where candle's generic paths are slow, and
//! parameters come from a [`ParamStore`] initialized from an explicit seed,
//! so training is reproducible and the same code runs in `f32` (training) and
//! `f64` (gradient checks).
//!
//! Sequence tensors are `(batch, time, channels)`. Padding is always on the
//! right; a [`SeqMask`] zeroes padded frames before every convolution and
//! excludes them as attention keys, so a padded sample computes exactly what
//! it would compute alone.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels;

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// Named trainable tensors.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    /// Skip random draws and fill every tensor with zeros (for counting
    /// parameters of large configs).
    zero_init: bool,
}

impl ParamStore {
    pub fn new(dtype: DType, rng: ChaCha8Rng) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            vars: BTreeMap::new(),
            rng,
            zero_init: false,
        }
    }

    pub fn zeroed(dtype: DType) -> Self {
        let mut s = Self::new(dtype, rand::SeedableRng::seed_from_u64(0));
        s.zero_init = true;
        s
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Internal(format!("parameter {name} registered twice")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            _ if self.zero_init => vec![0.0; n],
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::Internal(format!("bad init std {std}: {e}")))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Overwrites every parameter from `tensors`, which must match names,
    /// shapes and dtype exactly.
    pub fn assign(
        &self,
        tensors: &std::collections::HashMap<String, Tensor>,
        path: &std::path::Path,
    ) -> Result<()> {
        if tensors.len() != self.vars.len() {
            return Err(Error::format(
                path,
                format!("{} tensors, model has {}", tensors.len(), self.vars.len()),
            ));
        }
        for (name, var) in &self.vars {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::format(path, format!("missing tensor {name}")))?;
            if t.dims() != var.dims() || t.dtype() != var.dtype() {
                return Err(Error::format(
                    path,
                    format!(
                        "tensor {name}: {:?} {:?}, expected {:?} {:?}",
                        t.dims(),
                        t.dtype(),
                        var.dims(),
                        var.dtype()
                    ),
                ));
            }
            var.set(t)?;
        }
        Ok(())
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameter count of every var whose name starts with `prefix.`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        let dotted = format!("{prefix}.");
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(&dotted))
            .map(|(_, v)| v.elem_count())
            .sum()
    }
}

/// Forward-pass context: dropout is active only when a generator is present.
pub struct Ctx {
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self { dropout_rng: None }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            dropout_rng: Some(RefCell::new(rng)),
        }
    }

    pub fn dropout(&self, x: &Tensor, p: f64) -> Result<Tensor> {
        let Some(rng) = &self.dropout_rng else {
            return Ok(x.clone());
        };
        if p <= 0.0 {
            return Ok(x.clone());
        }
        let scale = 1.0 / (1.0 - p);
        let mut rng = rng.borrow_mut();
        let keep: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let mask = Tensor::from_vec(keep, x.shape(), x.device())?.to_dtype(x.dtype())?;
        Ok(x.mul(&mask)?)
    }
}

/// Per-sample valid lengths of a right-padded batch.
#[derive(Debug, Clone)]
pub struct SeqMask {
    lengths: Vec<usize>,
    max_len: usize,
    /// `(B, L, 1)`, 1 at valid frames.
    frame: Tensor,
    /// `(B, 1, 1, L)`, 0 at valid keys and a large negative value at padding.
    key_bias: Tensor,
    /// Contiguous copies of `frame` expanded to `(B, L, C)`, keyed by `C`.
    expanded: RefCell<HashMap<usize, Tensor>>,
    /// Contiguous copies of `key_bias` expanded to `(B, H, Lq, L)`.
    expanded_bias: RefCell<HashMap<(usize, usize), Tensor>>,
}

const NEG_INF: f64 = -1e9;

impl SeqMask {
    pub fn new(lengths: &[usize], max_len: usize, dtype: DType, device: &Device) -> Result<Self> {
        let b = lengths.len();
        let mut valid = vec![0f64; b * max_len];
        for (i, &n) in lengths.iter().enumerate() {
            assert!(n <= max_len);
            valid[i * max_len..i * max_len + n].fill(1.0);
        }
        let bias: Vec<f64> = valid.iter().map(|&v| if v > 0.0 { 0.0 } else { NEG_INF }).collect();
        let frame = Tensor::from_vec(valid, (b, max_len, 1), device)?.to_dtype(dtype)?;
        let key_bias = Tensor::from_vec(bias, (b, 1, 1, max_len), device)?.to_dtype(dtype)?;
        Ok(Self {
            lengths: lengths.to_vec(),
            max_len,
            frame,
            key_bias,
            expanded: RefCell::default(),
            expanded_bias: RefCell::default(),
        })
    }

    pub fn from_lengths(lengths: &[usize], dtype: DType, device: &Device) -> Result<Self> {
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        Self::new(lengths, max_len, dtype, device)
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn total(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// `(B, L, 1)` multiplicative mask.
    pub fn frame(&self) -> &Tensor {
        &self.frame
    }

    /// `(B, L)` multiplicative mask.
    pub fn flat(&self) -> Result<Tensor> {
        Ok(self.frame.squeeze(2)?)
    }

    /// Zeroes padded frames of a `(B, L, C)` tensor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let mut cache = self.expanded.borrow_mut();
        let m = match cache.get(&c) {
            Some(m) => m.clone(),
            None => {
                let m = self.frame.broadcast_as((b, l, c))?.contiguous()?;
                cache.insert(c, m.clone());
                m
            }
        };
        Ok(x.contiguous()?.mul(&m)?)
    }

    pub fn key_bias(&self) -> &Tensor {
        &self.key_bias
    }

    /// Key bias expanded for `heads` heads and `queries` query positions.
    pub fn attention_bias(&self, heads: usize, queries: usize) -> Result<Tensor> {
        let mut cache = self.expanded_bias.borrow_mut();
        if let Some(t) = cache.get(&(heads, queries)) {
            return Ok(t.clone());
        }
        let t = self
            .key_bias
            .broadcast_as((self.batch(), heads, queries, self.max_len))?
            .contiguous()?;
        cache.insert((heads, queries), t.clone());
        Ok(t)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::softmax_last(x)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::log_softmax_last(x)?)
}

/// Repeats a `(C,)` parameter over `rows` rows as `(rows, C)`. Done as a
/// rank-one matmul so the backward pass is a matmul too.
fn tile_rows(v: &Tensor, rows: usize) -> Result<Tensor> {
    let c = v.dim(0)?;
    let ones = Tensor::ones((rows, 1), v.dtype(), v.device())?;
    Ok(ones.matmul(&v.reshape((1, c))?)?)
}

/// `(len, dim)` sinusoidal position table.
pub fn sinusoid_table(len: usize, dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut v = vec![0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = (-(2.0 * i as f64 / dim as f64) * 10_000f64.ln()).exp();
            let a = pos as f64 * freq;
            v[pos * dim + 2 * i] = a.sin();
            v[pos * dim + 2 * i + 1] = a.cos();
        }
    }
    Ok(Tensor::from_vec(v, (len, dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            weight: store.get(&format!("{name}.weight"), &[fan_in, fan_out], Init::Normal(std))?,
            bias: store.get(&format!("{name}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    pub fn param_count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let fan_in = dims[dims.len() - 1];
        let rows = x.elem_count() / fan_in;
        let y = (x.reshape((rows, fan_in))?.matmul(&self.weight)? + tile_rows(&self.bias, rows)?)?;
        let mut out_dims = dims.to_vec();
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: store.get(&format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let d = dims[dims.len() - 1];
        let rows = x.elem_count() / d;
        let normed = kernels::normalize(&x.reshape((rows, d))?, 1e-5)?;
        let y = (normed.mul(&tile_rows(&self.gamma, rows)?)? + tile_rows(&self.beta, rows)?)?;
        Ok(y.reshape(dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
    dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Self::with_std(store, name, rows, dim, 1.0)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        dim: usize,
        std: f64,
    ) -> Result<Self> {
        Ok(Self {
            table: store.get(&format!("{name}.table"), &[rows, dim], Init::Normal(std))?,
            dim,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn param_count(rows: usize, dim: usize) -> usize {
        rows * dim
    }

    /// Looks up a `u32` id tensor of any shape; output appends `dim`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        dims.push(self.dim);
        Ok(rows.reshape(dims)?)
    }
    /// Looks up `ids` laid out as `dims`, giving a zero vector wherever the id
    /// is [`Embedding::ABSENT`].
    pub fn forward_or_zero(&self, ids: Vec<u32>, dims: &[usize]) -> Result<Tensor> {
        let rows = self.table.dim(0)?;
        let n = ids.len();
        let ids: Vec<u32> = ids
            .into_iter()
            .map(|i| if i == Self::ABSENT { rows as u32 } else { i })
            .collect();
        let zero = Tensor::zeros((1, self.dim), self.table.dtype(), self.table.device())?;
        let table = Tensor::cat(&[&self.table, &zero], 0)?;
        let idx = Tensor::from_vec(ids, n, self.table.device())?;
        let mut out_dims = dims.to_vec();
        out_dims.push(self.dim);
        Ok(table.index_select(&idx, 0)?.reshape(out_dims)?)
    }

    pub const ABSENT: u32 = u32::MAX;
}

/// 1-D convolution over time with "same" zero padding (odd kernels).
#[derive(Debug, Clone)]
pub struct Conv1d {
    kernel: usize,
    proj: Linear,
}

impl Conv1d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "convolution kernel {kernel} must be odd"
            )));
        }
        Ok(Self {
            kernel,
            proj: Linear::new(store, name, kernel * in_ch, out_ch)?,
        })
    }

    pub fn param_count(in_ch: usize, out_ch: usize, kernel: usize) -> usize {
        Linear::param_count(kernel * in_ch, out_ch)
    }

    /// `x` must already be zero at padded frames.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.kernel == 1 {
            return self.proj.forward(x);
        }
        self.proj.forward(&kernels::unfold_time(x, self.kernel)?)
    }
}

/// Per-channel convolution over time.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    weight: Tensor,
    bias: Tensor,
}

impl DepthwiseConv1d {
    pub fn new(store: &mut ParamStore, name: &str, ch: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidInput(format!(
                "convolution kernel {kernel} must be odd"
            )));
        }
        let std = 1.0 / (kernel as f64).sqrt();
        Ok(Self {
            weight: store.get(&format!("{name}.weight"), &[kernel, ch], Init::Normal(std))?,
            bias: store.get(&format!("{name}.bias"), &[ch], Init::Zeros)?,
        })
    }

    pub fn param_count(ch: usize, kernel: usize) -> usize {
        kernel * ch + ch
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        let bias = tile_rows(&self.bias, b * l)?.reshape((b, l, c))?;
        Ok((kernels::depthwise_conv(x, &self.weight)? + bias)?)
    }
}

/// Multi-head scaled dot-product attention with separate query and memory.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidInput(format!(
                "attention dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(store, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Returns the output and the `(B, H, Lq, Lk)` attention weights.
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        memory: &Tensor,
        memory_mask: &SeqMask,
    ) -> Result<(Tensor, Tensor)> {
        let (b, lq, _) = query.dims3()?;
        let lk = memory.dim(1)?;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(memory)?)?;
        let v = self.split_heads(&self.v.forward(memory)?)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        if memory_mask.max_len() != lk {
            return Err(Error::Internal(format!(
                "memory has {lk} frames, mask covers {}",
                memory_mask.max_len()
            )));
        }
        let scores = (scores + memory_mask.attention_bias(self.heads, lq)?)?;
        let weights = softmax_last(&scores)?;
        let ctx = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, self.dim))?;
        Ok((self.o.forward(&ctx)?, weights))
    }

    pub fn forward(&self, query: &Tensor, memory: &Tensor, memory_mask: &SeqMask) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, memory, memory_mask)?.0)
    }
}

/// Shape of a stack of feed-forward transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FftStackConfig {
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the convolutional feed-forward part.
    pub filter: usize,
    pub kernel: usize,
}

/// Self-attention then two time convolutions, each with a residual
/// connection followed by layer normalization.
#[derive(Debug, Clone)]
pub struct FftBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    conv1: Conv1d,
    conv2: Conv1d,
    norm2: LayerNorm,
    dropout: f64,
}

impl FftBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: &FftStackConfig,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, cfg.heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            conv1: Conv1d::new(store, &format!("{name}.conv1"), dim, cfg.filter, cfg.kernel)?,
            conv2: Conv1d::new(store, &format!("{name}.conv2"), cfg.filter, dim, cfg.kernel)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            dropout,
        })
    }

    pub fn param_count(dim: usize, cfg: &FftStackConfig) -> usize {
        MultiHeadAttention::param_count(dim)
            + 2 * LayerNorm::param_count(dim)
            + Conv1d::param_count(dim, cfg.filter, cfg.kernel)
            + Conv1d::param_count(cfg.filter, dim, cfg.kernel)
    }

    pub fn forward(&self, x: &Tensor, mask: &SeqMask, ctx: &Ctx) -> Result<Tensor> {
        let a = ctx.dropout(&self.attn.forward(x, x, mask)?, self.dropout)?;
        let h = mask.apply(&self.norm1.forward(&(x + a)?)?)?;
        let f = mask.apply(&self.conv1.forward(&h)?.relu()?)?;
        let f = ctx.dropout(&self.conv2.forward(&f)?, self.dropout)?;
        mask.apply(&self.norm2.forward(&(h + f)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct FftStack {
    blocks: Vec<FftBlock>,
}

impl FftStack {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: &FftStackConfig,
        dropout: f64,
    ) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|i| FftBlock::new(store, &format!("{name}.{i}"), dim, cfg, dropout))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn param_count(dim: usize, cfg: &FftStackConfig) -> usize {
        cfg.layers * FftBlock::param_count(dim, cfg)
    }

    pub fn forward(&self, x: &Tensor, mask: &SeqMask, ctx: &Ctx) -> Result<Tensor> {
        let mut h = mask.apply(x)?;
        for b in &self.blocks {
            h = b.forward(&h, mask, ctx)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ConformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub linear_units: usize,
    pub kernel: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm: LayerNorm,
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, dim: usize, units: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim)?,
            up: Linear::new(store, &format!("{name}.up"), dim, units)?,
            down: Linear::new(store, &format!("{name}.down"), units, dim)?,
        })
    }

    fn param_count(dim: usize, units: usize) -> usize {
        LayerNorm::param_count(dim) + Linear::param_count(dim, units) + Linear::param_count(units, dim)
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx, dropout: f64) -> Result<Tensor> {
        let h = self.up.forward(&self.norm.forward(x)?)?.silu()?;
        ctx.dropout(&self.down.forward(&h)?, dropout)
    }
}

/// Macaron-style Conformer layer: half-step feed-forward, self-attention,
/// convolution module, half-step feed-forward, final normalization.
///
/// The convolution module normalizes with layer norm rather than batch norm
/// so that samples in a batch never influence each other.
#[derive(Debug, Clone)]
pub struct ConformerLayer {
    ff1: FeedForward,
    attn_norm: LayerNorm,
    attn: MultiHeadAttention,
    conv_norm: LayerNorm,
    pointwise_value: Linear,
    pointwise_gate: Linear,
    depthwise: DepthwiseConv1d,
    conv_inner_norm: LayerNorm,
    pointwise_out: Linear,
    ff2: FeedForward,
    final_norm: LayerNorm,
    dropout: f64,
}

impl ConformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, cfg: &ConformerConfig) -> Result<Self> {
        let p = |s: &str| format!("{name}.{s}");
        Ok(Self {
            ff1: FeedForward::new(store, &p("ff1"), dim, cfg.linear_units)?,
            attn_norm: LayerNorm::new(store, &p("attn_norm"), dim)?,
            attn: MultiHeadAttention::new(store, &p("attn"), dim, cfg.heads)?,
            conv_norm: LayerNorm::new(store, &p("conv_norm"), dim)?,
            pointwise_value: Linear::new(store, &p("pointwise_value"), dim, dim)?,
            pointwise_gate: Linear::new(store, &p("pointwise_gate"), dim, dim)?,
            depthwise: DepthwiseConv1d::new(store, &p("depthwise"), dim, cfg.kernel)?,
            conv_inner_norm: LayerNorm::new(store, &p("conv_inner_norm"), dim)?,
            pointwise_out: Linear::new(store, &p("pointwise_out"), dim, dim)?,
            ff2: FeedForward::new(store, &p("ff2"), dim, cfg.linear_units)?,
            final_norm: LayerNorm::new(store, &p("final_norm"), dim)?,
            dropout: cfg.dropout,
        })
    }

    pub fn param_count(dim: usize, cfg: &ConformerConfig) -> usize {
        2 * FeedForward::param_count(dim, cfg.linear_units)
            + LayerNorm::param_count(dim) * 4
            + MultiHeadAttention::param_count(dim)
            + 2 * Linear::param_count(dim, dim)
            + DepthwiseConv1d::param_count(dim, cfg.kernel)
            + Linear::param_count(dim, dim)
    }

    pub fn forward(&self, x: &Tensor, mask: &SeqMask, ctx: &Ctx) -> Result<Tensor> {
        let x = (x + (self.ff1.forward(x, ctx, self.dropout)? * 0.5)?)?;
        let h = self.attn_norm.forward(&x)?;
        let x = (&x + ctx.dropout(&self.attn.forward(&h, &h, mask)?, self.dropout)?)?;
        let x = (&x + self.conv_module(&x, mask, ctx)?)?;
        let x = (&x + (self.ff2.forward(&x, ctx, self.dropout)? * 0.5)?)?;
        mask.apply(&self.final_norm.forward(&x)?)
    }

    fn conv_module(&self, x: &Tensor, mask: &SeqMask, ctx: &Ctx) -> Result<Tensor> {
        let h = self.conv_norm.forward(x)?;
        let glu = self
            .pointwise_value
            .forward(&h)?
            .mul(&candle_sigmoid(&self.pointwise_gate.forward(&h)?)?)?;
        let c = self.depthwise.forward(&mask.apply(&glu)?)?;
        let c = self.conv_inner_norm.forward(&c)?.silu()?;
        ctx.dropout(&self.pointwise_out.forward(&c)?, self.dropout)
    }
}

fn candle_sigmoid(x: &Tensor) -> Result<Tensor> {
    // 1 / (1 + e^-x), from primitives with backward support
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}
