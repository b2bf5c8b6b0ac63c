//! Codec token grids and the text-agnostic prompt/target split.
//!
//! Channels are indexed from 0 in this module (`column(0)` is the coarsest
//! codebook). Model-facing APIs use 1-based *levels* instead.

use std::ops::Range;

use rand::Rng;

use crate::data_synth::Utterance;
use crate::error::{invalid, Result};

/// A `frames × channels` matrix of codec tokens, row-major.
///
/// Every token is in `[0, vocab)`. A grid may have zero frames (an empty
/// utterance) but always has at least one channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodecGrid {
    frames: usize,
    channels: usize,
    vocab: usize,
    tokens: Vec<u16>,
}

impl CodecGrid {
    pub fn new(frames: usize, channels: usize, vocab: usize, tokens: Vec<u16>) -> Result<Self> {
        if channels == 0 {
            return Err(invalid!("codec grid needs at least one channel"));
        }
        if vocab == 0 || vocab > u16::MAX as usize {
            return Err(invalid!("codebook size {vocab} outside [1, {}]", u16::MAX));
        }
        if tokens.len() != frames * channels {
            return Err(invalid!(
                "codec grid {frames}x{channels} needs {} tokens, got {}",
                frames * channels,
                tokens.len()
            ));
        }
        if let Some((i, &tok)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= vocab)
        {
            return Err(invalid!(
                "token {tok} at frame {}, channel {} is outside codebook of size {vocab}",
                i / channels,
                i % channels
            ));
        }
        Ok(Self {
            frames,
            channels,
            vocab,
            tokens,
        })
    }

    /// Builds a grid from per-channel columns of equal length.
    pub fn from_columns(columns: &[Vec<u16>], vocab: usize) -> Result<Self> {
        let channels = columns.len();
        let frames = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != frames) {
            return Err(invalid!("codec grid columns have unequal lengths"));
        }
        let mut tokens = Vec::with_capacity(frames * channels);
        for t in 0..frames {
            tokens.extend(columns.iter().map(|c| c[t]));
        }
        Self::new(frames, channels, vocab, tokens)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn get(&self, frame: usize, channel: usize) -> u16 {
        self.tokens[frame * self.channels + channel]
    }

    /// All channel tokens for one frame.
    pub fn row(&self, frame: usize) -> &[u16] {
        &self.tokens[frame * self.channels..(frame + 1) * self.channels]
    }

    pub fn column(&self, channel: usize) -> Vec<u16> {
        (0..self.frames).map(|t| self.get(t, channel)).collect()
    }

    pub fn slice_frames(&self, range: Range<usize>) -> CodecGrid {
        assert!(range.start <= range.end && range.end <= self.frames);
        CodecGrid {
            frames: range.len(),
            channels: self.channels,
            vocab: self.vocab,
            tokens: self.tokens[range.start * self.channels..range.end * self.channels].to_vec(),
        }
    }

    /// Appends `other` after `self` along time.
    pub fn concat(&self, other: &CodecGrid) -> Result<CodecGrid> {
        if self.channels != other.channels || self.vocab != other.vocab {
            return Err(invalid!(
                "cannot concatenate {}-channel/V={} grid with {}-channel/V={} grid",
                self.channels,
                self.vocab,
                other.channels,
                other.vocab
            ));
        }
        let mut tokens = self.tokens.clone();
        tokens.extend_from_slice(&other.tokens);
        Ok(CodecGrid {
            frames: self.frames + other.frames,
            channels: self.channels,
            vocab: self.vocab,
            tokens,
        })
    }
}

/// Collapses runs of equal values into `(value, run_length)` pairs.
pub fn run_lengths(values: &[u16]) -> Vec<(u16, u32)> {
    let mut runs: Vec<(u16, u32)> = Vec::new();
    for &v in values {
        match runs.last_mut() {
            Some((last, n)) if *last == v => *n += 1,
            _ => runs.push((v, 1)),
        }
    }
    runs
}

/// Admissible prompt lengths `ceil(T/3) ..= floor(2T/3)`, or `None` if empty.
pub fn prompt_length_bounds(frames: usize) -> Option<(usize, usize)> {
    let lo = frames.div_ceil(3);
    let hi = 2 * frames / 3;
    (lo >= 1 && lo <= hi).then_some((lo, hi))
}

/// Smallest frame count with a non-empty admissible prompt range.
pub const MIN_SPLIT_FRAMES: usize = 2;

/// A half-open frame interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameSpan {
    pub start: usize,
    pub end: usize,
}

impl FrameSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    /// Fraction of `self` covered by `other`.
    pub fn overlap_fraction(&self, other: &FrameSpan) -> f64 {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        if self.is_empty() {
            return 0.0;
        }
        hi.saturating_sub(lo) as f64 / self.len() as f64
    }
}

/// Phoneme-level view of a frame region: the run-length collapse of its
/// first channel. A phoneme cut by a region boundary keeps only its frames
/// inside the region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeRuns {
    pub phonemes: Vec<u16>,
    pub durations: Vec<u32>,
}

impl PhonemeRuns {
    pub fn from_aligned(aligned: &[u16]) -> Self {
        let (phonemes, durations) = run_lengths(aligned).into_iter().unzip();
        Self {
            phonemes,
            durations,
        }
    }

    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }
}

/// Decoder-stage split of one utterance into prompt frames `[0, k)` and
/// target frames `[k, T)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSplit {
    pub k: usize,
    pub prompt_grid: CodecGrid,
    pub target_grid: CodecGrid,
    /// Aligned phoneme id of every target frame.
    pub target_text: Vec<u16>,
    /// Target region at phoneme granularity.
    pub target_runs: PhonemeRuns,
}

impl PromptSplit {
    pub fn prompt_span(&self) -> FrameSpan {
        FrameSpan {
            start: 0,
            end: self.k,
        }
    }
}

/// Draws `k` uniformly from `ceil(T/3) ..= floor(2T/3)` and partitions the
/// utterance.
pub fn split_prompt<R: Rng + ?Sized>(utterance: &Utterance, rng: &mut R) -> Result<PromptSplit> {
    let frames = utterance.frames();
    let (lo, hi) = prompt_length_bounds(frames).ok_or_else(|| {
        invalid!("utterance has {frames} frames; prompt split needs at least {MIN_SPLIT_FRAMES}")
    })?;
    let k = rng.random_range(lo..=hi);
    Ok(split_at(utterance, k))
}

/// Partitions at a fixed `k` (no bounds check beyond `0 < k < T`).
pub fn split_at(utterance: &Utterance, k: usize) -> PromptSplit {
    let frames = utterance.frames();
    assert!(k > 0 && k < frames, "split point {k} outside (0, {frames})");
    let aligned = utterance.aligned_text();
    let target_text = aligned[k..].to_vec();
    let target_runs = PhonemeRuns::from_aligned(&target_text);
    PromptSplit {
        k,
        prompt_grid: utterance.grid.slice_frames(0..k),
        target_grid: utterance.grid.slice_frames(k..frames),
        target_text,
        target_runs,
    }
}

/// Encoder-stage prompt used by the duration path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderPrompt {
    pub span: FrameSpan,
    pub grid: CodecGrid,
    pub runs: PhonemeRuns,
}

/// Samples a contiguous encoder-stage prompt whose span differs from the
/// decoder prompt `[0, decoder_k)`.
///
/// Length is drawn from the same admissible range as the decoder prompt and
/// the start uniformly among valid offsets. If the draw reproduces the
/// decoder span exactly, the span is shifted one frame to the right.
pub fn sample_disjoint_encoder_prompt<R: Rng + ?Sized>(
    utterance: &Utterance,
    decoder_k: usize,
    rng: &mut R,
) -> Result<EncoderPrompt> {
    let frames = utterance.frames();
    let (lo, hi) = prompt_length_bounds(frames).ok_or_else(|| {
        invalid!("utterance has {frames} frames; prompt split needs at least {MIN_SPLIT_FRAMES}")
    })?;
    let len = rng.random_range(lo..=hi);
    let mut start = rng.random_range(0..=frames - len);
    if start == 0 && len == decoder_k {
        // hi <= T - 1 for every T >= 2, so a one-frame shift always fits.
        start = 1;
    }
    let span = FrameSpan {
        start,
        end: start + len,
    };
    let aligned = utterance.aligned_text();
    Ok(EncoderPrompt {
        span,
        grid: utterance.grid.slice_frames(span.range()),
        runs: PhonemeRuns::from_aligned(&aligned[span.range()]),
    })
}
