//! Iterative confidence-based decoding of the first channel, greedy decoding
//! of the residual channels, and end-to-end synthesis.

use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::oracle_transcribe;
use crate::duration_model::duration_to_frames;
use crate::error::{invalid, Error, Result};
use crate::nn::Ctx;
use crate::schedules::unmask_count_schedule;
use crate::smd_model::{SmdModel, SmdRow};
use crate::token_grid::CodecGrid;

/// Synthesis refuses to expand beyond this many frames. Attention over the
/// expanded sequence is quadratic in it.
pub const MAX_SYNTH_FRAMES: usize = 8192;

/// Predicted phoneme durations are clamped to this many frames.
pub const MAX_PHONEME_FRAMES: u32 = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based.
    pub iteration: usize,
    /// Positions finalized in this iteration, in order of decreasing confidence.
    pub finalized: Vec<usize>,
    /// Lowest confidence accepted this iteration (NaN if none).
    pub threshold: f64,
    pub remaining: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub iterations: Vec<IterationRecord>,
    pub forward_passes: usize,
    pub predicted_durations: Vec<u32>,
    pub frames: usize,
    pub duration_secs: f64,
    pub first_channel_secs: f64,
    pub residual_secs: f64,
}

impl DecodeTrace {
    pub fn remaining_counts(&self) -> Vec<usize> {
        self.iterations.iter().map(|r| r.remaining).collect()
    }

    pub fn total_secs(&self) -> f64 {
        self.duration_secs + self.first_channel_secs + self.residual_secs
    }

    /// One `key=value` line per iteration, then a summary line.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for r in &self.iterations {
            out.push_str(&format!(
                "iteration={} finalized={} threshold={} remaining={}\n",
                r.iteration,
                r.finalized.len(),
                r.threshold,
                r.remaining
            ));
        }
        out.push_str(&format!(
            "frames={} forward_passes={} duration_secs={} first_channel_secs={} residual_secs={}\n",
            self.frames, self.forward_passes, self.duration_secs, self.first_channel_secs, self.residual_secs
        ));
        out
    }
}

/// Decoder conditioning for one utterance.
pub struct Conditioning {
    pub prompt: CodecGrid,
    /// `(1, T', d)` conditioned text frames.
    pub frames: Tensor,
    pub num_frames: usize,
}

fn row_probs(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let rows = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .into_iter()
        .map(|r| {
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - max).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect())
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the total a hair below u
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn grid_from_columns(columns: &[Vec<u16>], vocab: usize) -> Result<CodecGrid> {
    CodecGrid::from_columns(columns, vocab)
}

/// Starts fully masked; each iteration samples every still-masked position,
/// scores it by the probability of the sampled token and keeps the most
/// confident ones so that the masked count follows the cosine schedule.
pub fn decode_first_channel<R: Rng + ?Sized>(
    model: &SmdModel,
    cond: &Conditioning,
    iterations: usize,
    rng: &mut R,
    trace: &mut DecodeTrace,
) -> Result<Vec<u16>> {
    if iterations == 0 {
        return Err(invalid!("iterations must be >= 1"));
    }
    let len = cond.num_frames;
    let vocab = model.config().codebook_size;
    let ctx = Ctx::eval();
    let mut tokens = vec![0u16; len];
    let mut masked = vec![true; len];
    let mut still = len;
    for i in 1..=iterations {
        let target = grid_from_columns(&[tokens.clone()], vocab)?;
        let row = SmdRow {
            sample: 0,
            prompt: &cond.prompt,
            level: 1,
            target: &target,
            mask: &masked,
        };
        let out = model.smd_forward(&[row], &cond.frames, &ctx)?;
        trace.forward_passes += 1;
        let probs = row_probs(&out.logits)?;
        let mut candidates: Vec<(usize, u16, f64)> = Vec::with_capacity(still);
        for (t, p) in probs.iter().enumerate() {
            if masked[t] {
                let tok = sample_categorical(p, rng);
                candidates.push((t, tok as u16, p[tok]));
            }
        }
        // stable: equal confidences keep position order
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2));
        let remaining = unmask_count_schedule(len, iterations, i);
        let take = still - remaining.min(still);
        let mut finalized = Vec::with_capacity(take);
        let mut threshold = f64::NAN;
        for &(t, tok, conf) in candidates.iter().take(take) {
            tokens[t] = tok;
            masked[t] = false;
            finalized.push(t);
            threshold = conf;
        }
        still -= take;
        trace.iterations.push(IterationRecord {
            iteration: i,
            finalized,
            threshold,
            remaining: still,
        });
    }
    if still != 0 {
        return Err(Error::Internal(format!("{still} positions left masked")));
    }
    Ok(tokens)
}

/// Levels `2..=N` in order, each one forward pass with all lower levels
/// known, taking the most probable token per position.
pub fn decode_residual_channels(
    model: &SmdModel,
    cond: &Conditioning,
    first: &[u16],
    trace: &mut DecodeTrace,
) -> Result<Vec<Vec<u16>>> {
    let n = model.config().num_channels;
    let vocab = model.config().codebook_size;
    let ctx = Ctx::eval();
    if first.len() != cond.num_frames {
        return Err(invalid!("first channel has {} frames, expected {}", first.len(), cond.num_frames));
    }
    let mut columns = vec![first.to_vec()];
    let all_masked = vec![true; first.len()];
    for level in 2..=n {
        let mut cols = columns.clone();
        cols.push(vec![0; first.len()]);
        let target = grid_from_columns(&cols, vocab)?;
        let row = SmdRow {
            sample: 0,
            prompt: &cond.prompt,
            level,
            target: &target,
            mask: &all_masked,
        };
        let out = model.smd_forward(&[row], &cond.frames, &ctx)?;
        trace.forward_passes += 1;
        let logits = out.logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        columns.push(logits.iter().map(|r| argmax(r) as u16).collect());
    }
    Ok(columns.split_off(1))
}

/// Runs the duration path and conditioning for one utterance.
pub fn condition(
    model: &SmdModel,
    target_phonemes: &[u16],
    prompt: &CodecGrid,
    trace: &mut DecodeTrace,
) -> Result<Conditioning> {
    if target_phonemes.is_empty() {
        return Err(invalid!("target text is empty"));
    }
    if prompt.frames() == 0 {
        return Err(invalid!("prompt grid is empty"));
    }
    let ctx = Ctx::eval();
    let prompt_phonemes = oracle_transcribe(prompt);
    let dur = model.duration_path(&[&prompt_phonemes], &[prompt], &[target_phonemes], &ctx)?;
    let log_d = dur
        .target_log_durations
        .to_dtype(DType::F64)?
        .squeeze(0)?
        .to_vec1::<f64>()?;
    let durations: Vec<u32> = duration_to_frames(&log_d)
        .into_iter()
        .map(|d| d.min(MAX_PHONEME_FRAMES))
        .collect();
    let num_frames: usize = durations.iter().map(|&d| d as usize).sum();
    if num_frames > MAX_SYNTH_FRAMES {
        return Err(invalid!(
            "predicted {num_frames} frames exceeds the limit of {MAX_SYNTH_FRAMES}"
        ));
    }
    let (frames, fmask) = model.regulate_text(&dur.target_text_states, &[durations.clone()])?;
    let (pstates, pmask) = model.encode_prompt(&[prompt], &ctx)?;
    let frames = model.cross_attend(&frames, &fmask, &pstates, &pmask)?;
    trace.predicted_durations = durations;
    trace.frames = num_frames;
    Ok(Conditioning {
        prompt: prompt.clone(),
        frames,
        num_frames,
    })
}

/// Text plus prompt to a full codec grid.
pub fn synthesize<R: Rng + ?Sized>(
    model: &SmdModel,
    target_phonemes: &[u16],
    prompt: &CodecGrid,
    iterations: usize,
    rng: &mut R,
) -> Result<(CodecGrid, DecodeTrace)> {
    if iterations == 0 {
        return Err(invalid!("iterations must be >= 1"));
    }
    let mut trace = DecodeTrace::default();
    let t0 = Instant::now();
    let cond = condition(model, target_phonemes, prompt, &mut trace)?;
    let t1 = Instant::now();
    let first = decode_first_channel(model, &cond, iterations, rng, &mut trace)?;
    let t2 = Instant::now();
    let rest = decode_residual_channels(model, &cond, &first, &mut trace)?;
    let t3 = Instant::now();
    trace.duration_secs = (t1 - t0).as_secs_f64();
    trace.first_channel_secs = (t2 - t1).as_secs_f64();
    trace.residual_secs = (t3 - t2).as_secs_f64();
    let mut columns = vec![first];
    columns.extend(rest);
    let vocab = model.config().codebook_size;
    if columns.iter().flatten().any(|&t| t as usize >= vocab) {
        return Err(Error::Internal("mask symbol leaked into the output grid".into()));
    }
    let grid = CodecGrid::from_columns(&columns, vocab)?;
    Ok((grid, trace))
}

/// Decode wall time over generated audio duration.
pub fn measure_rtf(frames: usize, frame_rate: f64, elapsed_secs: f64) -> Result<f64> {
    if frames == 0 {
        return Err(invalid!("cannot compute RTF for zero generated frames"));
    }
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(invalid!("frame rate {frame_rate} must be positive"));
    }
    if !(elapsed_secs >= 0.0 && elapsed_secs.is_finite()) {
        return Err(invalid!("elapsed time {elapsed_secs} must be non-negative"));
    }
    Ok(elapsed_secs * frame_rate / frames as f64)
}
