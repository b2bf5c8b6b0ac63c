//! Duration path: the attention stack shared by the prompt duration
//! extractor and the target duration predictor, the prompt duration encoder,
//! the length regulator and the log-domain duration losses.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{
    sinusoid_table, Conv1d, Ctx, FftStack, FftStackConfig, LayerNorm, Linear, MultiHeadAttention,
    ParamStore, SeqMask,
};

/// Per-phoneme frame counts with their natural logs.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationSeq {
    raw: Vec<u32>,
    log_domain: Vec<f64>,
}

impl DurationSeq {
    pub fn new(raw: Vec<u32>) -> Result<Self> {
        if let Some(i) = raw.iter().position(|&d| d == 0) {
            return Err(invalid!("duration at index {i} is 0; durations must be >= 1"));
        }
        let log_domain = raw.iter().map(|&d| (d as f64).ln()).collect();
        Ok(Self { raw, log_domain })
    }

    pub fn raw(&self) -> &[u32] {
        &self.raw
    }

    pub fn log_domain(&self) -> &[f64] {
        &self.log_domain
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.raw.iter().map(|&d| d as usize).sum()
    }
}

/// `max(1, round(exp(x)))` with halves rounded up.
pub fn duration_to_frames(log_durations: &[f64]) -> Vec<u32> {
    log_durations
        .iter()
        .map(|&x| {
            // `as` saturates, so absurd predictions cannot wrap around
            let frames = (x.exp() + 0.5).floor();
            (frames as u32).max(1)
        })
        .collect()
}

/// Repeats row `i` of `states` (`(P, d)`) `durations[i]` times.
pub fn length_regulate(states: &Tensor, durations: &[u32]) -> Result<Tensor> {
    let phonemes = states.dim(0)?;
    if durations.len() != phonemes {
        return Err(invalid!(
            "{} durations for {phonemes} phoneme states",
            durations.len()
        ));
    }
    let idx = regulate_index(durations, 0)?;
    let idx = Tensor::from_vec(idx, durations_total(durations), states.device())?;
    Ok(states.index_select(&idx, 0)?)
}

fn durations_total(durations: &[u32]) -> usize {
    durations.iter().map(|&d| d as usize).sum()
}

fn regulate_index(durations: &[u32], offset: u32) -> Result<Vec<u32>> {
    let mut idx = Vec::with_capacity(durations_total(durations));
    for (i, &d) in durations.iter().enumerate() {
        if d == 0 {
            return Err(invalid!("duration at index {i} is 0; durations must be >= 1"));
        }
        idx.extend(std::iter::repeat_n(offset + i as u32, d as usize));
    }
    Ok(idx)
}

/// Batched length regulation of right-padded `(B, P, d)` states into
/// `(B, L, d)` frames, `L` the longest expansion; padded frames are zero.
pub fn length_regulate_batch(states: &Tensor, durations: &[Vec<u32>]) -> Result<(Tensor, SeqMask)> {
    let (b, p, d) = states.dims3()?;
    if durations.len() != b {
        return Err(invalid!("{} duration rows for batch of {b}", durations.len()));
    }
    let lengths: Vec<usize> = durations.iter().map(|r| durations_total(r)).collect();
    let max_len = lengths.iter().copied().max().unwrap_or(0);
    // Row 0 of the pool is zeros and backs every padded frame.
    let pool = Tensor::cat(
        &[
            &Tensor::zeros((1, d), states.dtype(), states.device())?,
            &states.reshape((b * p, d))?,
        ],
        0,
    )?;
    let mut idx = Vec::with_capacity(b * max_len);
    for (i, row) in durations.iter().enumerate() {
        if row.len() > p {
            return Err(invalid!("{} durations for {p} padded phoneme slots", row.len()));
        }
        let mut r = regulate_index(row, 1 + (i * p) as u32)?;
        r.resize(max_len, 0);
        idx.extend(r);
    }
    let idx = Tensor::from_vec(idx, b * max_len, states.device())?;
    let frames = pool.index_select(&idx, 0)?.reshape((b, max_len, d))?;
    let mask = SeqMask::new(&lengths, max_len, states.dtype(), states.device())?;
    Ok((frames, mask))
}

/// Shape of a duration extractor or predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionBlockConfig {
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub kernel: usize,
}

impl AttentionBlockConfig {
    pub fn validate(&self, name: &str) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.layers == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("{name}: all sizes must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "{name}: hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("{name}: kernel {} must be odd", self.kernel)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DurationLayer {
    norm: LayerNorm,
    attn: MultiHeadAttention,
    conv: Conv1d,
}

/// Layers of `h += conv(attn(norm(h), memory))` ending in a scalar
/// log-duration per query position.
#[derive(Debug, Clone)]
pub struct DurationAttentionStack {
    layers: Vec<DurationLayer>,
    head: Linear,
}

impl DurationAttentionStack {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &AttentionBlockConfig) -> Result<Self> {
        let d = cfg.hidden;
        let layers = (0..cfg.layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                Ok(DurationLayer {
                    norm: LayerNorm::new(store, &format!("{p}.norm"), d)?,
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), d, cfg.heads)?,
                    conv: Conv1d::new(store, &format!("{p}.conv"), d, d, cfg.kernel)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            head: Linear::new(store, &format!("{name}.head"), d, 1)?,
        })
    }

    pub fn param_count(cfg: &AttentionBlockConfig) -> usize {
        let d = cfg.hidden;
        cfg.layers
            * (LayerNorm::param_count(d)
                + MultiHeadAttention::param_count(d)
                + Conv1d::param_count(d, d, cfg.kernel))
            + Linear::param_count(d, 1)
    }

    /// Returns hidden states `(B, P, d)` and log-durations `(B, P)`.
    pub fn forward(
        &self,
        query: &Tensor,
        query_mask: &SeqMask,
        memory: &Tensor,
        memory_mask: &SeqMask,
    ) -> Result<(Tensor, Tensor)> {
        let mut h = query_mask.apply(query)?;
        for layer in &self.layers {
            let a = layer.attn.forward(&layer.norm.forward(&h)?, memory, memory_mask)?;
            let c = layer.conv.forward(&query_mask.apply(&a)?)?;
            h = query_mask.apply(&(h + c)?)?;
        }
        let log_dur = self.head.forward(&h)?.squeeze(D::Minus1)?;
        Ok((h, log_dur.broadcast_mul(&query_mask.flat()?)?))
    }
}

/// Embeds extracted prompt durations together with the extractor's hidden
/// states and sinusoidal positions, then runs FFT blocks.
#[derive(Debug, Clone)]
pub struct PromptDurationEncoder {
    value_proj: Linear,
    blocks: FftStack,
    dim: usize,
}

impl PromptDurationEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        cfg: &FftStackConfig,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            value_proj: Linear::new(store, &format!("{name}.value_proj"), 1, dim)?,
            blocks: FftStack::new(store, &format!("{name}.blocks"), dim, cfg, dropout)?,
            dim,
        })
    }

    pub fn param_count(dim: usize, cfg: &FftStackConfig) -> usize {
        Linear::param_count(1, dim) + FftStack::param_count(dim, cfg)
    }

    pub fn forward(
        &self,
        hidden: &Tensor,
        log_durations: &Tensor,
        mask: &SeqMask,
        ctx: &Ctx,
    ) -> Result<Tensor> {
        let (_, p, _) = hidden.dims3()?;
        let value = self.value_proj.forward(&log_durations.unsqueeze(D::Minus1)?)?;
        let pos = sinusoid_table(p, self.dim, hidden.dtype(), hidden.device())?;
        let x = (hidden + value)?.broadcast_add(&pos)?;
        self.blocks.forward(&x, mask, ctx)
    }
}

/// Mean squared error over the valid entries of `(B, P)` tensors.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let count = mask.sum_all()?;
    let se = (pred - target)?.sqr()?.mul(mask)?.sum_all()?;
    Ok(se.broadcast_div(&count)?)
}

/// `(L_promptdur, L_dur)`: mean squared log-domain errors.
pub fn duration_losses(
    pred_prompt: &[f64],
    gt_prompt: &[f64],
    pred_target: &[f64],
    gt_target: &[f64],
) -> Result<(f64, f64)> {
    fn mse(name: &str, p: &[f64], g: &[f64]) -> Result<f64> {
        if p.len() != g.len() {
            return Err(invalid!(
                "{name}: {} predictions for {} targets",
                p.len(),
                g.len()
            ));
        }
        if p.is_empty() {
            return Err(invalid!("{name}: empty duration sequence"));
        }
        let dev = Device::Cpu;
        let pt = Tensor::from_slice(p, p.len(), &dev)?;
        let gt = Tensor::from_slice(g, g.len(), &dev)?;
        let ones = Tensor::ones(p.len(), DType::F64, &dev)?;
        Ok(masked_mse(&pt, &gt, &ones)?.to_scalar::<f64>()?)
    }
    Ok((
        mse("prompt durations", pred_prompt, gt_prompt)?,
        mse("target durations", pred_target, gt_target)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_rule() {
        assert_eq!(duration_to_frames(&[0.0, 2.5f64.ln(), -5.0, 1.5f64.ln()]), vec![1, 3, 1, 2]);
        assert_eq!(duration_to_frames(&[1e6]), vec![u32::MAX]);
    }

    #[test]
    fn regulate_repeats_rows() {
        let s = Tensor::new(&[[1.0f64, 1.5], [2.0, 2.5]], &Device::Cpu).unwrap();
        let out = length_regulate(&s, &[2, 3]).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(
            out,
            vec![
                vec![1.0, 1.5],
                vec![1.0, 1.5],
                vec![2.0, 2.5],
                vec![2.0, 2.5],
                vec![2.0, 2.5]
            ]
        );
        assert!(length_regulate(&s, &[1, 0]).is_err());
        assert!(length_regulate(&s, &[1]).is_err());
    }

    #[test]
    fn batched_regulation_pads_with_zeros() {
        let s = Tensor::new(&[[[1.0f64], [2.0]], [[3.0], [0.0]]], &Device::Cpu).unwrap();
        let (out, mask) = length_regulate_batch(&s, &[vec![1, 2], vec![2]]).unwrap();
        assert_eq!(mask.lengths(), &[3, 2]);
        let v = out.squeeze(2).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(v, vec![vec![1.0, 2.0, 2.0], vec![3.0, 3.0, 0.0]]);
    }

    #[test]
    fn log_domain_is_exact() {
        let d = DurationSeq::new(vec![1, 2, 7]).unwrap();
        assert_eq!(d.log_domain(), &[0.0, 2f64.ln(), 7f64.ln()]);
        assert_eq!(d.total_frames(), 10);
        assert!(DurationSeq::new(vec![3, 0]).is_err());
    }

    #[test]
    fn loss_algebra() {
        let g = [0.1, 0.7, -0.3];
        assert_eq!(duration_losses(&g, &g, &g, &g).unwrap(), (0.0, 0.0));
        let shifted: Vec<f64> = g.iter().map(|x| x + 0.5).collect();
        let (a, b) = duration_losses(&shifted, &g, &g, &shifted).unwrap();
        assert!((a - 0.25).abs() < 1e-12 && (b - 0.25).abs() < 1e-12);
        assert!(duration_losses(&g, &g[..2], &g, &g).is_err());
    }
}
