//! The codec mask decoder and the encoders that condition it.
//!
//! Data flow for one utterance:
//!
//! ```text
//! encoder prompt phonemes ── prompt text enc ─┐
//! encoder prompt grid ── codec emb + pos ─────┴─ duration extractor ─ prompt duration enc ─┐
//! target phonemes ── text enc ─────────────────────────── duration predictor ──────────────┘
//!        └─ length regulate + pos ─ cross-attend(prompt enc(decoder prompt grid)) ─ conditioned frames
//! [decoder prompt codec emb (no pos) | conditioned frames + target codec emb + level emb] ─ conformer ─ head
//! ```

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data_synth::{write_atomic, CorpusSpec};
use crate::duration_model::{
    AttentionBlockConfig, DurationAttentionStack, PromptDurationEncoder,
};
use crate::error::{invalid, Error, Result};
use crate::nn::{
    log_softmax_last, sinusoid_table, ConformerConfig, ConformerLayer, Ctx, Embedding, FftStack,
    FftStackConfig, LayerNorm, Linear, MultiHeadAttention, ParamStore, SeqMask,
};
use crate::token_grid::CodecGrid;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.safetensors";
pub const CONFIG_FILE: &str = "config.json";

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub phoneme_vocab_size: usize,
    pub num_channels: usize,
    pub codebook_size: usize,
    pub prompt_text_encoder: FftStackConfig,
    pub text_encoder: FftStackConfig,
    pub prompt_encoder: FftStackConfig,
    pub duration_extractor: AttentionBlockConfig,
    pub duration_predictor: AttentionBlockConfig,
    pub prompt_duration_encoder: FftStackConfig,
    pub cross_attention_heads: usize,
    pub conformer: ConformerConfig,
    /// Dropout inside the FFT blocks.
    pub encoder_dropout: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(format!("unknown preset {other:?} (expected desk or paper)")),
        }
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset, spec: &CorpusSpec) -> Self {
        match preset {
            Preset::Desk => Self::desk(spec),
            Preset::Paper => Self::paper(spec),
        }
    }

    /// Small preset that trains on one CPU core.
    pub fn desk(spec: &CorpusSpec) -> Self {
        let dim = 128;
        let fft = |layers| FftStackConfig {
            layers,
            heads: 4,
            filter: 256,
            kernel: 3,
        };
        let dur = AttentionBlockConfig {
            hidden: dim,
            heads: 4,
            layers: 2,
            kernel: 3,
        };
        Self {
            dim,
            phoneme_vocab_size: spec.phoneme_vocab_size,
            num_channels: spec.num_channels,
            codebook_size: spec.codebook_size,
            prompt_text_encoder: fft(1),
            text_encoder: fft(2),
            prompt_encoder: fft(1),
            duration_extractor: dur,
            duration_predictor: dur,
            prompt_duration_encoder: fft(1),
            cross_attention_heads: 4,
            conformer: ConformerConfig {
                layers: 2,
                heads: 4,
                linear_units: 256,
                kernel: 5,
                dropout: 0.0,
            },
            encoder_dropout: 0.0,
            alpha: 0.6,
        }
    }

    /// Full-size configuration. The FFT filter width of the text-side
    /// encoders is not listed; 3072 reproduces the listed block sizes.
    pub fn paper(spec: &CorpusSpec) -> Self {
        let dim = 512;
        let fft = |layers| FftStackConfig {
            layers,
            heads: 8,
            filter: 3072,
            kernel: 3,
        };
        let dur = AttentionBlockConfig {
            hidden: dim,
            heads: 8,
            layers: 10,
            kernel: 3,
        };
        Self {
            dim,
            phoneme_vocab_size: spec.phoneme_vocab_size,
            num_channels: 8,
            codebook_size: 1024,
            prompt_text_encoder: fft(2),
            text_encoder: fft(4),
            prompt_encoder: FftStackConfig {
                layers: 2,
                heads: 4,
                filter: 2048,
                kernel: 3,
            },
            duration_extractor: dur,
            duration_predictor: dur,
            prompt_duration_encoder: fft(2),
            cross_attention_heads: 8,
            conformer: ConformerConfig {
                layers: 16,
                heads: 16,
                linear_units: 1024,
                kernel: 5,
                dropout: 0.1,
            },
            encoder_dropout: 0.1,
            alpha: 0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.dim % 2 != 0 {
            return bad(format!("dim {} must be positive and even", self.dim));
        }
        if self.num_channels < 2 {
            return bad(format!("num_channels {} must be >= 2", self.num_channels));
        }
        if self.codebook_size == 0 || self.codebook_size >= u16::MAX as usize {
            return bad(format!("codebook_size {} out of range", self.codebook_size));
        }
        if self.phoneme_vocab_size == 0 {
            return bad("phoneme_vocab_size must be positive".into());
        }
        for (name, f) in [
            ("prompt_text_encoder", &self.prompt_text_encoder),
            ("text_encoder", &self.text_encoder),
            ("prompt_encoder", &self.prompt_encoder),
            ("prompt_duration_encoder", &self.prompt_duration_encoder),
        ] {
            if f.layers == 0 || f.filter == 0 || f.heads == 0 || self.dim % f.heads != 0 {
                return bad(format!("{name}: invalid block shape {f:?} for dim {}", self.dim));
            }
            if f.kernel % 2 == 0 {
                return bad(format!("{name}: kernel {} must be odd", f.kernel));
            }
        }
        for (name, a) in [
            ("duration_extractor", &self.duration_extractor),
            ("duration_predictor", &self.duration_predictor),
        ] {
            a.validate(name)?;
            if a.hidden != self.dim {
                return bad(format!("{name}: hidden {} must equal dim {}", a.hidden, self.dim));
            }
        }
        let c = &self.conformer;
        if c.layers == 0 || c.heads == 0 || self.dim % c.heads != 0 || c.linear_units == 0 {
            return bad(format!("conformer: invalid shape {c:?} for dim {}", self.dim));
        }
        if c.kernel % 2 == 0 {
            return bad(format!("conformer: kernel {} must be odd", c.kernel));
        }
        if self.cross_attention_heads == 0 || self.dim % self.cross_attention_heads != 0 {
            return bad(format!(
                "cross_attention_heads {} must divide dim {}",
                self.cross_attention_heads, self.dim
            ));
        }
        for (name, p) in [
            ("alpha", self.alpha),
            ("encoder_dropout", self.encoder_dropout),
            ("conformer.dropout", c.dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Checks that a corpus can be modeled by this configuration.
    pub fn check_corpus(&self, spec: &CorpusSpec) -> Result<()> {
        if spec.num_channels != self.num_channels
            || spec.codebook_size != self.codebook_size
            || spec.phoneme_vocab_size > self.phoneme_vocab_size
        {
            return Err(Error::Config(format!(
                "corpus (N={}, V={}, phonemes={}) does not fit model (N={}, V={}, phonemes={})",
                spec.num_channels,
                spec.codebook_size,
                spec.phoneme_vocab_size,
                self.num_channels,
                self.codebook_size,
                self.phoneme_vocab_size
            )));
        }
        Ok(())
    }

    /// Analytic parameter count per module, in construction order.
    pub fn param_breakdown(&self) -> Vec<(&'static str, usize)> {
        let d = self.dim;
        let phon = Embedding::param_count(self.phoneme_vocab_size, d);
        vec![
            (
                "prompt_text_encoder",
                phon + FftStack::param_count(d, &self.prompt_text_encoder),
            ),
            ("text_encoder", phon + FftStack::param_count(d, &self.text_encoder)),
            ("prompt_encoder", FftStack::param_count(d, &self.prompt_encoder)),
            (
                "duration_extractor",
                DurationAttentionStack::param_count(&self.duration_extractor),
            ),
            (
                "duration_predictor",
                DurationAttentionStack::param_count(&self.duration_predictor),
            ),
            (
                "prompt_duration_encoder",
                PromptDurationEncoder::param_count(d, &self.prompt_duration_encoder),
            ),
            (
                "cross_attention",
                LayerNorm::param_count(d) + MultiHeadAttention::param_count(d),
            ),
            (
                "conformer",
                self.conformer.layers * ConformerLayer::param_count(d, &self.conformer),
            ),
            (
                "codec_embedding",
                self.num_channels * Embedding::param_count(self.codebook_size + 1, d),
            ),
            ("level_embedding", Embedding::param_count(self.num_channels, d)),
            ("output_head", Linear::param_count(d, self.codebook_size)),
        ]
    }

    pub fn total_params(&self) -> usize {
        self.param_breakdown().iter().map(|(_, n)| n).sum()
    }

    /// Id of the mask symbol, one past the codebook.
    pub fn mask_id(&self) -> u32 {
        self.codebook_size as u32
    }
}

/// Encoder of a phoneme sequence: embedding plus positions, then FFT blocks.
#[derive(Debug, Clone)]
struct PhonemeEncoder {
    embed: Embedding,
    blocks: FftStack,
}

/// One decoder row: a prompt and the target frames at one codec level.
#[derive(Debug, Clone, Copy)]
pub struct SmdRow<'a> {
    /// Index into the batch of conditioned frames.
    pub sample: usize,
    pub prompt: &'a CodecGrid,
    /// 1-based codec level being predicted.
    pub level: usize,
    /// Target tokens; must hold at least `level` channels. Values at masked
    /// positions of channel `level` are ignored.
    pub target: &'a CodecGrid,
    /// Masked target positions at `level`.
    pub mask: &'a [bool],
}

/// Logits for every target frame of every row, rows concatenated in order.
#[derive(Debug, Clone)]
pub struct SmdOutput {
    pub logits: Tensor,
    pub row_offsets: Vec<usize>,
}

impl SmdOutput {
    pub fn row_logits(&self, row: usize) -> Result<Tensor> {
        let start = self.row_offsets[row];
        let len = self.row_offsets[row + 1] - start;
        Ok(self.logits.narrow(0, start, len)?)
    }
}

/// Duration-path results for a batch.
#[derive(Debug, Clone)]
pub struct DurationOutputs {
    /// `(B, P_prompt)` predicted log-durations of the prompt phonemes.
    pub prompt_log_durations: Tensor,
    pub prompt_mask: SeqMask,
    /// `(B, P_target)` predicted log-durations of the target phonemes.
    pub target_log_durations: Tensor,
    pub target_mask: SeqMask,
    /// `(B, P_target, d)` text encoder output.
    pub target_text_states: Tensor,
}

pub struct SmdModel {
    cfg: ModelConfig,
    store: ParamStore,
    prompt_text_encoder: PhonemeEncoder,
    text_encoder: PhonemeEncoder,
    prompt_encoder: FftStack,
    duration_extractor: DurationAttentionStack,
    duration_predictor: DurationAttentionStack,
    prompt_duration_encoder: PromptDurationEncoder,
    cross_norm: LayerNorm,
    cross_attn: MultiHeadAttention,
    conformer: Vec<ConformerLayer>,
    codec_embedding: Vec<Embedding>,
    level_embedding: Embedding,
    output_head: Linear,
}

impl SmdModel {
    pub fn new(cfg: &ModelConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut store = store;
        let s = &mut store;
        let d = cfg.dim;
        let enc = |s: &mut ParamStore, name: &str, f: &FftStackConfig| -> Result<PhonemeEncoder> {
            Ok(PhonemeEncoder {
                embed: Embedding::new(s, &format!("{name}.embed"), cfg.phoneme_vocab_size, d)?,
                blocks: FftStack::new(s, &format!("{name}.blocks"), d, f, cfg.encoder_dropout)?,
            })
        };
        let prompt_text_encoder = enc(s, "prompt_text_encoder", &cfg.prompt_text_encoder)?;
        let text_encoder = enc(s, "text_encoder", &cfg.text_encoder)?;
        let prompt_encoder =
            FftStack::new(s, "prompt_encoder", d, &cfg.prompt_encoder, cfg.encoder_dropout)?;
        let duration_extractor =
            DurationAttentionStack::new(s, "duration_extractor", &cfg.duration_extractor)?;
        let duration_predictor =
            DurationAttentionStack::new(s, "duration_predictor", &cfg.duration_predictor)?;
        let prompt_duration_encoder = PromptDurationEncoder::new(
            s,
            "prompt_duration_encoder",
            d,
            &cfg.prompt_duration_encoder,
            cfg.encoder_dropout,
        )?;
        let cross_norm = LayerNorm::new(s, "cross_attention.norm", d)?;
        let cross_attn =
            MultiHeadAttention::new(s, "cross_attention.attn", d, cfg.cross_attention_heads)?;
        let conformer = (0..cfg.conformer.layers)
            .map(|i| ConformerLayer::new(s, &format!("conformer.{i}"), d, &cfg.conformer))
            .collect::<Result<_>>()?;
        // Channel embeddings are summed, so scale them to keep the sum at unit variance.
        let codec_std = 1.0 / (cfg.num_channels as f64).sqrt();
        let codec_embedding = (0..cfg.num_channels)
            .map(|c| {
                Embedding::with_std(
                    s,
                    &format!("codec_embedding.{c}"),
                    cfg.codebook_size + 1,
                    d,
                    codec_std,
                )
            })
            .collect::<Result<_>>()?;
        let level_embedding = Embedding::new(s, "level_embedding", cfg.num_channels, d)?;
        let output_head = Linear::new(s, "output_head", d, cfg.codebook_size)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            prompt_text_encoder,
            text_encoder,
            prompt_encoder,
            duration_extractor,
            duration_predictor,
            prompt_duration_encoder,
            cross_norm,
            cross_attn,
            conformer,
            codec_embedding,
            level_embedding,
            output_head,
        })
    }

    /// Randomly initialized model; the draws depend only on `rng`.
    pub fn init(cfg: &ModelConfig, dtype: DType, rng: rand_chacha::ChaCha8Rng) -> Result<Self> {
        Self::new(cfg, ParamStore::new(dtype, rng))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    /// Per-module counts of the parameters actually registered.
    pub fn registered_breakdown(&self) -> Vec<(&'static str, usize)> {
        self.cfg
            .param_breakdown()
            .into_iter()
            .map(|(name, _)| (name, self.store.count_prefix(name)))
            .collect()
    }

    fn ids_tensor(&self, ids: Vec<u32>, shape: (usize, usize)) -> Result<Tensor> {
        Ok(Tensor::from_vec(ids, shape, self.device())?)
    }

    fn check_phonemes(&self, seqs: &[&[u16]]) -> Result<()> {
        for (b, seq) in seqs.iter().enumerate() {
            if seq.is_empty() {
                return Err(invalid!("phoneme sequence {b} is empty"));
            }
            if let Some(&p) = seq.iter().find(|&&p| p as usize >= self.cfg.phoneme_vocab_size) {
                return Err(invalid!(
                    "phoneme id {p} in sequence {b} outside vocabulary of {}",
                    self.cfg.phoneme_vocab_size
                ));
            }
        }
        Ok(())
    }

    fn run_phoneme_encoder(
        &self,
        enc: &PhonemeEncoder,
        seqs: &[&[u16]],
        ctx: &Ctx,
    ) -> Result<(Tensor, SeqMask)> {
        self.check_phonemes(seqs)?;
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let mask = SeqMask::from_lengths(&lengths, self.dtype(), self.device())?;
        let p = mask.max_len();
        let mut ids = vec![0u32; seqs.len() * p];
        for (b, seq) in seqs.iter().enumerate() {
            for (t, &ph) in seq.iter().enumerate() {
                ids[b * p + t] = ph as u32;
            }
        }
        let x = enc.embed.forward(&self.ids_tensor(ids, (seqs.len(), p))?)?;
        let pos = sinusoid_table(p, self.cfg.dim, self.dtype(), self.device())?;
        let h = enc.blocks.forward(&x.broadcast_add(&pos)?, &mask, ctx)?;
        Ok((h, mask))
    }

    /// Target-text encoder: one state per phoneme, `(B, P, d)`.
    pub fn encode_text(&self, seqs: &[&[u16]], ctx: &Ctx) -> Result<(Tensor, SeqMask)> {
        self.run_phoneme_encoder(&self.text_encoder, seqs, ctx)
    }

    /// Prompt-text encoder used as the duration extractor's query.
    pub fn encode_prompt_text(&self, seqs: &[&[u16]], ctx: &Ctx) -> Result<(Tensor, SeqMask)> {
        self.run_phoneme_encoder(&self.prompt_text_encoder, seqs, ctx)
    }

    fn check_grid(&self, grid: &CodecGrid, min_channels: usize) -> Result<()> {
        if grid.vocab() != self.cfg.codebook_size {
            return Err(invalid!(
                "grid vocabulary {} differs from model codebook {}",
                grid.vocab(),
                self.cfg.codebook_size
            ));
        }
        if grid.channels() < min_channels || grid.channels() > self.cfg.num_channels {
            return Err(invalid!(
                "grid has {} channels; need between {min_channels} and {}",
                grid.channels(),
                self.cfg.num_channels
            ));
        }
        Ok(())
    }

    /// Sum over channels of the per-channel codec embeddings, `(B, L, d)`
    /// with zeros at padding. No positional information is added.
    pub fn embed_grids(&self, grids: &[&CodecGrid]) -> Result<(Tensor, SeqMask)> {
        for g in grids {
            self.check_grid(g, 1)?;
        }
        let lengths: Vec<usize> = grids.iter().map(|g| g.frames()).collect();
        let mask = SeqMask::from_lengths(&lengths, self.dtype(), self.device())?;
        let l = mask.max_len();
        let b = grids.len();
        let mut sum: Option<Tensor> = None;
        for (c, table) in self.codec_embedding.iter().enumerate() {
            if grids.iter().all(|g| g.channels() <= c) {
                continue;
            }
            let mut ids = vec![Embedding::ABSENT; b * l];
            for (i, g) in grids.iter().enumerate() {
                if c < g.channels() {
                    for t in 0..g.frames() {
                        ids[i * l + t] = g.get(t, c) as u32;
                    }
                }
            }
            let e = table.forward_or_zero(ids, &[b, l])?;
            sum = Some(match sum {
                None => e,
                Some(s) => (s + e)?,
            });
        }
        let sum = match sum {
            Some(s) => s,
            None => Tensor::zeros((b, l, self.cfg.dim), self.dtype(), self.device())?,
        };
        Ok((sum, mask))
    }

    /// Prompt encoder over the channel-summed embeddings, one state per frame.
    pub fn encode_prompt(&self, grids: &[&CodecGrid], ctx: &Ctx) -> Result<(Tensor, SeqMask)> {
        let (x, mask) = self.embed_grids(grids)?;
        Ok((self.prompt_encoder.forward(&x, &mask, ctx)?, mask))
    }

    /// Duration extractor over prompt acoustics. Returns hidden states and
    /// `(B, P)` log-durations, one per prompt phoneme.
    pub fn extract_prompt_durations(
        &self,
        prompt_text_states: &Tensor,
        prompt_text_mask: &SeqMask,
        prompt_grids: &[&CodecGrid],
    ) -> Result<(Tensor, Tensor)> {
        if prompt_grids.iter().any(|g| g.frames() == 0) || prompt_text_mask.lengths().contains(&0)
        {
            return Err(invalid!("duration extractor needs non-empty prompts"));
        }
        let (acoustic, amask) = self.embed_grids(prompt_grids)?;
        let pos = sinusoid_table(amask.max_len(), self.cfg.dim, self.dtype(), self.device())?;
        let memory = amask.apply(&acoustic.broadcast_add(&pos)?)?;
        self.duration_extractor
            .forward(prompt_text_states, prompt_text_mask, &memory, &amask)
    }

    /// Duration predictor over target text, guided by encoded prompt durations.
    pub fn predict_target_durations(
        &self,
        target_text_states: &Tensor,
        target_mask: &SeqMask,
        prompt_duration_states: &Tensor,
        prompt_mask: &SeqMask,
    ) -> Result<Tensor> {
        if target_mask.lengths().contains(&0) || prompt_mask.lengths().contains(&0) {
            return Err(invalid!("duration predictor needs non-empty inputs"));
        }
        Ok(self
            .duration_predictor
            .forward(target_text_states, target_mask, prompt_duration_states, prompt_mask)?
            .1)
    }

    /// Full duration path for a batch.
    pub fn duration_path(
        &self,
        prompt_phonemes: &[&[u16]],
        prompt_grids: &[&CodecGrid],
        target_phonemes: &[&[u16]],
        ctx: &Ctx,
    ) -> Result<DurationOutputs> {
        let (pt_states, pt_mask) = self.encode_prompt_text(prompt_phonemes, ctx)?;
        let (hidden, prompt_log) = self.extract_prompt_durations(&pt_states, &pt_mask, prompt_grids)?;
        let pd_states = self
            .prompt_duration_encoder
            .forward(&hidden, &prompt_log, &pt_mask, ctx)?;
        let (text_states, text_mask) = self.encode_text(target_phonemes, ctx)?;
        let target_log =
            self.predict_target_durations(&text_states, &text_mask, &pd_states, &pt_mask)?;
        Ok(DurationOutputs {
            prompt_log_durations: prompt_log,
            prompt_mask: pt_mask,
            target_log_durations: target_log,
            target_mask: text_mask,
            target_text_states: text_states,
        })
    }

    /// Length-regulated text frames with target positions, `(B, L, d)`.
    pub fn regulate_text(
        &self,
        text_states: &Tensor,
        durations: &[Vec<u32>],
    ) -> Result<(Tensor, SeqMask)> {
        let (frames, mask) = crate::duration_model::length_regulate_batch(text_states, durations)?;
        let pos = sinusoid_table(mask.max_len(), self.cfg.dim, self.dtype(), self.device())?;
        Ok((mask.apply(&frames.broadcast_add(&pos)?)?, mask))
    }

    /// `x + attn(norm(x), prompt)`, also returning `(B, H, Lq, Lk)` weights.
    pub fn cross_attend_with_weights(
        &self,
        text_frames: &Tensor,
        text_mask: &SeqMask,
        prompt_states: &Tensor,
        prompt_mask: &SeqMask,
    ) -> Result<(Tensor, Tensor)> {
        if text_mask.lengths().contains(&0) || prompt_mask.lengths().contains(&0) {
            return Err(invalid!("cross-attention needs non-empty text and prompt"));
        }
        let q = self.cross_norm.forward(text_frames)?;
        let (a, w) = self
            .cross_attn
            .forward_with_weights(&q, prompt_states, prompt_mask)?;
        Ok((text_mask.apply(&(text_frames + a)?)?, w))
    }

    pub fn cross_attend(
        &self,
        text_frames: &Tensor,
        text_mask: &SeqMask,
        prompt_states: &Tensor,
        prompt_mask: &SeqMask,
    ) -> Result<Tensor> {
        Ok(self
            .cross_attend_with_weights(text_frames, text_mask, prompt_states, prompt_mask)?
            .0)
    }

    /// Decoder input rows `[prompt | target | pad]`, `(R, L, d)`. `cond` is
    /// the `(B, Lt, d)` conditioned frames indexed by `SmdRow::sample`.
    pub fn smd_inputs(&self, rows: &[SmdRow<'_>], cond: &Tensor) -> Result<(Tensor, SeqMask)> {
        let (cb, clen, d) = cond.dims3()?;
        let n = self.cfg.num_channels;
        let mask_id = self.cfg.mask_id();
        for (r, row) in rows.iter().enumerate() {
            if row.level == 0 || row.level > n {
                return Err(invalid!("row {r}: level {} outside [1, {n}]", row.level));
            }
            if row.target.channels() < row.level {
                return Err(invalid!(
                    "row {r}: level {} needs lower channels, target has {}",
                    row.level,
                    row.target.channels()
                ));
            }
            self.check_grid(row.target, row.level)?;
            self.check_grid(row.prompt, 1)?;
            if row.prompt.channels() != n {
                return Err(invalid!("row {r}: prompt must carry all {n} channels"));
            }
            if row.mask.len() != row.target.frames() {
                return Err(invalid!(
                    "row {r}: mask length {} for {} target frames",
                    row.mask.len(),
                    row.target.frames()
                ));
            }
            if row.sample >= cb || row.target.frames() > clen || row.target.frames() == 0 {
                return Err(invalid!("row {r}: target does not match conditioned frames"));
            }
        }
        let lengths: Vec<usize> = rows
            .iter()
            .map(|r| r.prompt.frames() + r.target.frames())
            .collect();
        let smask = SeqMask::from_lengths(&lengths, self.dtype(), self.device())?;
        let l = smask.max_len();
        let nr = rows.len();

        let mut x: Option<Tensor> = None;
        let mut add = |t: Tensor| -> Result<()> {
            x = Some(match x.take() {
                None => t,
                Some(s) => (s + t)?,
            });
            Ok(())
        };
        for (c, table) in self.codec_embedding.iter().enumerate() {
            let mut ids = vec![Embedding::ABSENT; nr * l];
            for (r, row) in rows.iter().enumerate() {
                let k = row.prompt.frames();
                for t in 0..k {
                    ids[r * l + t] = row.prompt.get(t, c) as u32;
                }
                let level_c = c + 1;
                if level_c <= row.level {
                    for t in 0..row.target.frames() {
                        let tok = if level_c == row.level && row.mask[t] {
                            mask_id
                        } else {
                            row.target.get(t, c) as u32
                        };
                        ids[r * l + k + t] = tok;
                    }
                }
            }
            add(table.forward_or_zero(ids, &[nr, l])?)?;
        }
        // Conditioned frames and level embeddings at target positions only;
        // pool row 0 is zero and backs prompt and padding positions.
        let pool = Tensor::cat(
            &[
                &Tensor::zeros((1, d), self.dtype(), self.device())?,
                &cond.reshape((cb * clen, d))?,
            ],
            0,
        )?;
        let mut cidx = vec![0u32; nr * l];
        let mut lidx = vec![Embedding::ABSENT; nr * l];
        for (r, row) in rows.iter().enumerate() {
            let k = row.prompt.frames();
            for t in 0..row.target.frames() {
                cidx[r * l + k + t] = (1 + row.sample * clen + t) as u32;
                lidx[r * l + k + t] = (row.level - 1) as u32;
            }
        }
        let cidx = Tensor::from_vec(cidx, nr * l, self.device())?;
        add(pool.index_select(&cidx, 0)?.reshape((nr, l, d))?)?;
        add(self.level_embedding.forward_or_zero(lidx, &[nr, l])?)?;
        Ok((x.expect("at least one codec channel"), smask))
    }

    /// Logits over the codebook at every target frame of every row.
    pub fn smd_forward(&self, rows: &[SmdRow<'_>], cond: &Tensor, ctx: &Ctx) -> Result<SmdOutput> {
        let (mut h, smask) = self.smd_inputs(rows, cond)?;
        for layer in &self.conformer {
            h = layer.forward(&h, &smask, ctx)?;
        }
        let (nr, l, d) = h.dims3()?;
        let mut idx = Vec::new();
        let mut row_offsets = vec![0];
        for (r, row) in rows.iter().enumerate() {
            let k = row.prompt.frames();
            idx.extend((0..row.target.frames()).map(|t| (r * l + k + t) as u32));
            row_offsets.push(idx.len());
        }
        let n = idx.len();
        let idx = Tensor::from_vec(idx, n, self.device())?;
        let target_states = h.reshape((nr * l, d))?.index_select(&idx, 0)?;
        Ok(SmdOutput {
            logits: self.output_head.forward(&target_states)?,
            row_offsets,
        })
    }

    /// Writes parameters and configuration to `dir`.
    pub fn save(&self, dir: &Path, step: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors: HashMap<String, Tensor> = self
            .store
            .vars()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        save_tensors(&tensors, &dir.join(PARAMS_FILE))?;
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step,
            dtype: dtype_name(self.dtype()).to_string(),
            model: self.cfg.clone(),
        };
        write_atomic(&dir.join(CONFIG_FILE), serde_json::to_string_pretty(&meta)?.as_bytes())
    }

    /// Loads a checkpoint written by [`SmdModel::save`]; returns the step.
    pub fn load(dir: &Path) -> Result<(Self, usize)> {
        let meta = CheckpointMeta::read(dir)?;
        let dtype = match meta.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::format(dir.join(CONFIG_FILE), format!("dtype {other}"))),
        };
        let model = Self::new(&meta.model, ParamStore::zeroed(dtype))?;
        let path = dir.join(PARAMS_FILE);
        let tensors = load_tensors(&path)?;
        model.store.assign(&tensors, &path)?;
        Ok((model, meta.step))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub step: usize,
    pub dtype: String,
    pub model: ModelConfig,
}

impl CheckpointMeta {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::format(
                &path,
                format!(
                    "checkpoint format version {} (this build reads {CHECKPOINT_FORMAT_VERSION})",
                    meta.format_version
                ),
            ));
        }
        Ok(meta)
    }
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

pub(crate) fn save_tensors(tensors: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    candle_core::safetensors::save(tensors, &tmp)
        .map_err(|e| Error::format(&tmp, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
        ));
    }
    candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::format(path, e.to_string()))
}

/// Mean cross-entropy over masked rows of `(M, V)` logits. Returns a zero
/// scalar when nothing is masked.
pub fn smd_loss(logits: &Tensor, targets: &[u32], mask: &[bool]) -> Result<Tensor> {
    let (m, v) = logits.dims2()?;
    if targets.len() != m || mask.len() != m {
        return Err(invalid!(
            "logits have {m} rows; got {} targets and {} mask entries",
            targets.len(),
            mask.len()
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(invalid!("target id {t} outside vocabulary of {v}"));
    }
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    let w: Vec<f64> = mask
        .iter()
        .map(|&b| if b { 1.0 / count as f64 } else { 0.0 })
        .collect();
    let w = Tensor::from_vec(w, m, logits.device())?.to_dtype(logits.dtype())?;
    let t = Tensor::from_vec(targets.to_vec(), (m, 1), logits.device())?;
    let picked = log_softmax_last(logits)?.gather(&t, 1)?.squeeze(1)?;
    Ok(picked.mul(&w)?.sum_all()?.neg()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_count_matches_construction() {
        let spec = CorpusSpec::default();
        let cfg = ModelConfig::desk(&spec);
        let model = SmdModel::init(&cfg, DType::F32, rand::SeedableRng::seed_from_u64(3)).unwrap();
        assert_eq!(model.store().num_parameters(), cfg.total_params());
        for ((name, want), (_, got)) in cfg.param_breakdown().iter().zip(model.registered_breakdown()) {
            assert_eq!(*want, got, "{name}");
        }
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Tensor::zeros((5, 16), DType::F64, &Device::Cpu).unwrap();
        let loss = smd_loss(&logits, &[0, 1, 2, 3, 4], &[true, false, true, true, false])
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!((loss - 16f64.ln()).abs() < 1e-12);
        let none = smd_loss(&logits, &[0; 5], &[false; 5]).unwrap();
        assert_eq!(none.to_scalar::<f64>().unwrap(), 0.0);
    }
}
