//! Deterministic synthetic corpus with an invertible "codec".
//!
//! Channel 1 of every frame carries the phoneme id of the frame it belongs
//! to; channels `j >= 2` carry a speaker-dependent residual
//! `prf([c1, speaker, j]) mod V`. Phoneme durations are likewise drawn from
//! the PRF, so the whole corpus is a pure function of the spec and the
//! text/speaker list.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::duration_model::DurationSeq;
use crate::error::{invalid, Error, Result};
use crate::kv::{self, KvFile};
use crate::rng;
use crate::token_grid::{run_lengths, CodecGrid};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Keyed 64-bit pseudo-random function over an ordered list of integers.
///
/// Length-prefixed and chained through [`mix64`], so `[1, 2]` and `[2, 1]`
/// hash differently and results are identical on every platform.
pub fn prf(parts: &[u64], salt: u64) -> u64 {
    let mut h = mix64(salt ^ (parts.len() as u64).wrapping_mul(GOLDEN));
    for &p in parts {
        h = mix64(h.wrapping_add(GOLDEN) ^ p);
    }
    h
}

/// Speaker id written into records whose speaker is not known (model output).
pub const UNKNOWN_SPEAKER: u16 = u16::MAX;

/// Parameters of the synthetic generative process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub phoneme_vocab_size: usize,
    pub num_speakers: usize,
    /// Codec channels `N`.
    pub num_channels: usize,
    /// Codebook size `V` per channel.
    pub codebook_size: usize,
    /// Longest phoneme duration in frames.
    pub max_duration: u32,
    /// Nominal frames per second; only used for real-time-factor arithmetic.
    pub frame_rate: f64,
    pub prf_salt: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            phoneme_vocab_size: 40,
            num_speakers: 8,
            num_channels: 4,
            codebook_size: 64,
            max_duration: 4,
            frame_rate: 75.0,
            prf_salt: 0x5EED_C0DE_C0DE_C0DE,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.phoneme_vocab_size == 0 {
            return Err(invalid!("phoneme_vocab_size must be positive"));
        }
        if self.codebook_size < self.phoneme_vocab_size {
            return Err(invalid!(
                "codebook_size V={} must be >= phoneme_vocab_size={} so channel 1 can encode every phoneme",
                self.codebook_size,
                self.phoneme_vocab_size
            ));
        }
        // The mask symbol takes id V, so V itself must fit in u16.
        if self.codebook_size >= u16::MAX as usize {
            return Err(invalid!("codebook_size V={} too large", self.codebook_size));
        }
        if self.num_channels < 2 || self.num_channels > u8::MAX as usize {
            return Err(invalid!(
                "num_channels N={} must be in [2, 255]: a first channel and at least one residual channel",
                self.num_channels
            ));
        }
        if self.num_speakers == 0 || self.num_speakers >= UNKNOWN_SPEAKER as usize {
            return Err(invalid!("num_speakers={} out of range", self.num_speakers));
        }
        if self.max_duration == 0 || self.max_duration > u16::MAX as u32 {
            return Err(invalid!("max_duration D={} must be in [1, 65535]", self.max_duration));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(invalid!("frame_rate must be positive, got {}", self.frame_rate));
        }
        Ok(())
    }

    /// Frame count of phoneme `p` for `speaker`, in `[1, D]`.
    pub fn duration_of(&self, phoneme: u16, speaker: u16) -> u32 {
        1 + (prf(&[phoneme as u64, speaker as u64, 0], self.prf_salt) % self.max_duration as u64)
            as u32
    }

    /// Token of residual level `level` (1-based, `>= 2`) at a frame whose
    /// channel-1 token is `c1`.
    pub fn residual_token(&self, c1: u16, speaker: u16, level: usize) -> u16 {
        (prf(&[c1 as u64, speaker as u64, level as u64], self.prf_salt)
            % self.codebook_size as u64) as u16
    }

    pub fn kv_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("phoneme_vocab_size", self.phoneme_vocab_size.to_string()),
            ("num_speakers", self.num_speakers.to_string()),
            ("num_channels", self.num_channels.to_string()),
            ("codebook_size", self.codebook_size.to_string()),
            ("max_duration", self.max_duration.to_string()),
            ("frame_rate", self.frame_rate.to_string()),
            ("prf_salt", self.prf_salt.to_string()),
        ]
    }

    /// Consumes spec keys from `kv`; missing keys keep their defaults.
    pub fn from_kv(kv: &mut KvFile) -> Result<Self> {
        let d = Self::default();
        let spec = Self {
            phoneme_vocab_size: kv.take("phoneme_vocab_size")?.unwrap_or(d.phoneme_vocab_size),
            num_speakers: kv.take("num_speakers")?.unwrap_or(d.num_speakers),
            num_channels: kv.take("num_channels")?.unwrap_or(d.num_channels),
            codebook_size: kv.take("codebook_size")?.unwrap_or(d.codebook_size),
            max_duration: kv.take("max_duration")?.unwrap_or(d.max_duration),
            frame_rate: kv.take("frame_rate")?.unwrap_or(d.frame_rate),
            prf_salt: kv.take("prf_salt")?.unwrap_or(d.prf_salt),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// How many utterances to draw and how long they are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusPlan {
    pub num_utterances: usize,
    pub min_phonemes: usize,
    pub max_phonemes: usize,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        Self {
            num_utterances: 2000,
            min_phonemes: 8,
            max_phonemes: 20,
        }
    }
}

impl CorpusPlan {
    pub fn validate(&self) -> Result<()> {
        if self.min_phonemes == 0 || self.min_phonemes > self.max_phonemes {
            return Err(invalid!(
                "phoneme length range [{}, {}] is empty or starts at 0",
                self.min_phonemes,
                self.max_phonemes
            ));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KvFile) -> Result<Self> {
        let d = Self::default();
        let plan = Self {
            num_utterances: kv.take("num_utterances")?.unwrap_or(d.num_utterances),
            min_phonemes: kv.take("min_phonemes")?.unwrap_or(d.min_phonemes),
            max_phonemes: kv.take("max_phonemes")?.unwrap_or(d.max_phonemes),
        };
        plan.validate()?;
        Ok(plan)
    }
}

/// Reads a spec file holding [`CorpusSpec`] and optional [`CorpusPlan`] keys.
pub fn read_spec_file(path: &Path) -> Result<(CorpusSpec, CorpusPlan)> {
    let mut kv = KvFile::read(path)?;
    let with_path = |e: Error| match e {
        Error::Config(msg) | Error::InvalidInput(msg) => {
            Error::Config(format!("{}: {msg}", path.display()))
        }
        other => other,
    };
    let spec = CorpusSpec::from_kv(&mut kv).map_err(with_path)?;
    let plan = CorpusPlan::from_kv(&mut kv).map_err(with_path)?;
    kv.finish().map_err(with_path)?;
    Ok((spec, plan))
}

/// One rendered utterance: text, speaker, codec grid and alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub phonemes: Vec<u16>,
    pub speaker: u16,
    pub grid: CodecGrid,
    pub durations: DurationSeq,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.grid.frames()
    }

    /// Phoneme id of every frame (the length-regulated text).
    pub fn aligned_text(&self) -> Vec<u16> {
        let mut out = Vec::with_capacity(self.frames());
        for (&p, &d) in self.phonemes.iter().zip(self.durations.raw()) {
            out.extend(std::iter::repeat_n(p, d as usize));
        }
        out
    }
}

pub fn render_utterance(phonemes: &[u16], speaker: u16, spec: &CorpusSpec) -> Result<Utterance> {
    if let Some(&p) = phonemes
        .iter()
        .find(|&&p| p as usize >= spec.phoneme_vocab_size)
    {
        return Err(invalid!(
            "phoneme id {p} outside vocabulary of size {}",
            spec.phoneme_vocab_size
        ));
    }
    if speaker as usize >= spec.num_speakers {
        return Err(invalid!(
            "speaker id {speaker} outside [0, {})",
            spec.num_speakers
        ));
    }
    let durations: Vec<u32> = phonemes
        .iter()
        .map(|&p| spec.duration_of(p, speaker))
        .collect();
    let n = spec.num_channels;
    let frames: usize = durations.iter().map(|&d| d as usize).sum();
    let mut tokens = Vec::with_capacity(frames * n);
    for (&p, &d) in phonemes.iter().zip(&durations) {
        let mut row = Vec::with_capacity(n);
        row.push(p);
        for level in 2..=n {
            row.push(spec.residual_token(p, speaker, level));
        }
        for _ in 0..d {
            tokens.extend_from_slice(&row);
        }
    }
    Ok(Utterance {
        phonemes: phonemes.to_vec(),
        speaker,
        grid: CodecGrid::new(frames, n, spec.codebook_size, tokens)?,
        durations: DurationSeq::new(durations)?,
    })
}

/// Reads channel 1 and collapses runs of equal tokens.
pub fn oracle_transcribe(grid: &CodecGrid) -> Vec<u16> {
    run_lengths(&grid.column(0))
        .into_iter()
        .map(|(p, _)| p)
        .collect()
}

/// `(matching cells, total cells)` over every frame and residual channel.
pub fn speaker_matches(grid: &CodecGrid, speaker: u16, spec: &CorpusSpec) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for t in 0..grid.frames() {
        let row = grid.row(t);
        for (col, &tok) in row.iter().enumerate().skip(1) {
            total += 1;
            if tok == spec.residual_token(row[0], speaker, col + 1) {
                hits += 1;
            }
        }
    }
    (hits, total)
}

/// Fraction of residual cells following `speaker`'s rule; 0 for a grid with
/// no residual cells.
pub fn speaker_consistency(grid: &CodecGrid, speaker: u16, spec: &CorpusSpec) -> f64 {
    let (hits, total) = speaker_matches(grid, speaker, spec);
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Random phoneme text with no two equal adjacent phonemes.
pub fn random_text<R: Rng + ?Sized>(len: usize, vocab: usize, rng: &mut R) -> Vec<u16> {
    let mut out: Vec<u16> = Vec::with_capacity(len);
    for _ in 0..len {
        let p = match out.last() {
            None => rng.random_range(0..vocab),
            Some(&prev) if vocab > 1 => {
                // Draw from vocab - 1 slots and skip over the previous id.
                let p = rng.random_range(0..vocab - 1);
                if p >= prev as usize {
                    p + 1
                } else {
                    p
                }
            }
            Some(_) => 0,
        };
        out.push(p as u16);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Renders the given `(text, speaker)` list.
    pub fn render(spec: &CorpusSpec, items: &[(Vec<u16>, u16)]) -> Result<Self> {
        spec.validate()?;
        let utterances = items
            .iter()
            .map(|(text, speaker)| {
                if text.windows(2).any(|w| w[0] == w[1]) {
                    return Err(invalid!("text has adjacent duplicate phonemes: {text:?}"));
                }
                render_utterance(text, *speaker, spec)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            utterances,
        })
    }

    /// Draws texts and speakers from the `CORPUS` stream of `seed`.
    pub fn generate(spec: &CorpusSpec, plan: &CorpusPlan, seed: u64) -> Result<Self> {
        spec.validate()?;
        plan.validate()?;
        let mut rng = rng::stream(seed, rng::Stream::Corpus);
        let items: Vec<(Vec<u16>, u16)> = (0..plan.num_utterances)
            .map(|_| {
                let len = rng.random_range(plan.min_phonemes..=plan.max_phonemes);
                let text = random_text(len, spec.phoneme_vocab_size, &mut rng);
                let speaker = rng.random_range(0..spec.num_speakers) as u16;
                (text, speaker)
            })
            .collect();
        Self::render(spec, &items)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Splits off the last `n` utterances as a held-out set.
    pub fn split_heldout(mut self, n: usize) -> (Corpus, Corpus) {
        let cut = self.utterances.len().saturating_sub(n);
        let held = self.utterances.split_off(cut);
        let spec = self.spec.clone();
        (
            self,
            Corpus {
                spec,
                utterances: held,
            },
        )
    }

    pub fn total_frames(&self) -> usize {
        self.utterances.iter().map(Utterance::frames).sum()
    }

    /// SHA-256 over the spec file and every record, in order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(kv::render(&self.spec.kv_pairs()).as_bytes());
        for u in &self.utterances {
            h.update(encode_record(u));
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let spec_path = dir.join(SPEC_FILE);
        write_atomic(&spec_path, kv::render(&self.spec.kv_pairs()).as_bytes())?;
        for (i, u) in self.utterances.iter().enumerate() {
            write_atomic(&record_path(dir, i), &encode_record(u))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_path = dir.join(SPEC_FILE);
        if !spec_path.exists() {
            return Err(Error::io(
                &spec_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "corpus spec file not found"),
            ));
        }
        let (spec, _) = read_spec_file(&spec_path)?;
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == RECORD_EXT))
            .collect();
        paths.sort();
        let mut utterances = Vec::with_capacity(paths.len());
        for path in paths {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let u = decode_record(&bytes).map_err(|msg| Error::format(&path, msg))?;
            if u.grid.channels() != spec.num_channels || u.grid.vocab() != spec.codebook_size {
                return Err(Error::format(
                    &path,
                    format!(
                        "record has N={} V={}, corpus spec says N={} V={}",
                        u.grid.channels(),
                        u.grid.vocab(),
                        spec.num_channels,
                        spec.codebook_size
                    ),
                ));
            }
            utterances.push(u);
        }
        Ok(Self { spec, utterances })
    }
}

pub const SPEC_FILE: &str = "corpus.spec";
pub const RECORD_EXT: &str = "rec";

fn record_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("utt-{index:06}.{RECORD_EXT}"))
}

/// Writes via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Little-endian record: `T:u32 N:u8 V:u16`, row-major `u16` tokens,
/// `u16` durations, `u16` phoneme ids, `u16` speaker.
pub fn encode_record(u: &Utterance) -> Vec<u8> {
    let g = &u.grid;
    let p = u.phonemes.len();
    let mut out = Vec::with_capacity(7 + 2 * g.tokens().len() + 4 * p + 2);
    out.extend_from_slice(&(g.frames() as u32).to_le_bytes());
    out.push(g.channels() as u8);
    out.extend_from_slice(&(g.vocab() as u16).to_le_bytes());
    for &t in g.tokens() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    for &d in u.durations.raw() {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    for &ph in &u.phonemes {
        out.extend_from_slice(&ph.to_le_bytes());
    }
    out.extend_from_slice(&u.speaker.to_le_bytes());
    out
}

pub fn decode_record(bytes: &[u8]) -> std::result::Result<Utterance, String> {
    if bytes.len() < 9 {
        return Err(format!("record too short ({} bytes)", bytes.len()));
    }
    let frames = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let channels = bytes[4] as usize;
    let vocab = u16::from_le_bytes(bytes[5..7].try_into().unwrap()) as usize;
    let body = &bytes[7..];
    let grid_bytes = 2 * frames * channels;
    if body.len() < grid_bytes + 2 || (body.len() - grid_bytes - 2) % 4 != 0 {
        return Err(format!(
            "record length {} inconsistent with T={frames} N={channels}",
            bytes.len()
        ));
    }
    let words: Vec<u16> = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let cells = frames * channels;
    let p = (words.len() - cells - 1) / 2;
    let tokens = words[..cells].to_vec();
    let durations: Vec<u32> = words[cells..cells + p].iter().map(|&d| d as u32).collect();
    let phonemes = words[cells + p..cells + 2 * p].to_vec();
    let speaker = words[cells + 2 * p];
    let grid = CodecGrid::new(frames, channels, vocab, tokens).map_err(|e| e.to_string())?;
    let total: usize = durations.iter().map(|&d| d as usize).sum();
    if total != frames {
        return Err(format!("durations sum to {total}, grid has {frames} frames"));
    }
    let durations = DurationSeq::new(durations).map_err(|e| e.to_string())?;
    Ok(Utterance {
        phonemes,
        speaker,
        grid,
        durations,
    })
}
