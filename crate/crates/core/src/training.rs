//! Composite-loss training: first-channel and sampled residual-channel
//! masked prediction plus the two duration regressions, summed unweighted.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{eligible_utterances, sample_indices, TrainBatch};
use crate::data_synth::{write_atomic, Corpus};
use crate::duration_model::masked_mse;
use crate::error::{invalid, Error, Result};
use crate::kv::{render, KvFile};
use crate::nn::Ctx;
use crate::optim::{clip_grad_norm, AdamW, AdamWConfig};
use crate::rng::{stream, substream, Stream};
use crate::schedules::{p_rank_sample, plan_first_channel, plan_residual, AlphaSchedule, MaskMode, MaskPlan, RankWeights};
use crate::smd_model::{smd_loss, ModelConfig, SmdModel, SmdRow};
use crate::token_grid::CodecGrid;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const PROGRESS_LOG: &str = "progress.log";
pub const TRAIN_CONFIG_FILE: &str = "train.cfg";

/// How many times a mask with no masked position is redrawn.
const MASK_REDRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Upper bound on prompt + target frames per batch.
    pub batch_frames: usize,
    pub adam: AdamWConfig,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub alpha: AlphaSchedule,
    /// `None` means the linear default for the model's channel count.
    pub p_rank_weights: Option<Vec<f64>>,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    pub grad_clip: f64,
    /// Utterances at the end of the corpus kept out of training.
    pub heldout: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_frames: 512,
            adam: AdamWConfig::default(),
            peak_lr: 1e-3,
            warmup_steps: 200,
            total_steps: 2000,
            alpha: AlphaSchedule::Constant(0.6),
            p_rank_weights: None,
            seed: 0,
            checkpoint_every: 1000,
            grad_clip: 1.0,
            heldout: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 {
            return bad("total_steps must be positive".into());
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if self.batch_frames == 0 {
            return bad("batch_frames must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        let a = &self.adam;
        for (k, b) in [("beta1", a.beta1), ("beta2", a.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{k} {b} outside [0, 1)"));
            }
        }
        if !(a.eps > 0.0) || a.weight_decay < 0.0 {
            return bad("eps must be positive and weight_decay non-negative".into());
        }
        self.alpha.validate()
    }

    pub fn rank_weights(&self, num_channels: usize) -> Result<RankWeights> {
        match &self.p_rank_weights {
            None => RankWeights::linear(num_channels),
            Some(w) => {
                let r = RankWeights::new(w)?;
                if r.num_levels() != num_channels - 1 {
                    return Err(Error::Config(format!(
                        "p_rank_weights has {} entries; {num_channels} channels need {}",
                        r.num_levels(),
                        num_channels - 1
                    )));
                }
                Ok(r)
            }
        }
    }

    /// Applies `key=value` overrides. Unknown keys are an error.
    pub fn apply_kv(&mut self, kv: &mut KvFile) -> Result<()> {
        macro_rules! take {
            ($key:literal, $field:expr) => {
                if let Some(v) = kv.take($key)? {
                    $field = v;
                }
            };
        }
        take!("batch_frames", self.batch_frames);
        take!("beta1", self.adam.beta1);
        take!("beta2", self.adam.beta2);
        take!("eps", self.adam.eps);
        take!("weight_decay", self.adam.weight_decay);
        take!("peak_lr", self.peak_lr);
        take!("warmup_steps", self.warmup_steps);
        take!("total_steps", self.total_steps);
        take!("seed", self.seed);
        take!("checkpoint_every", self.checkpoint_every);
        take!("grad_clip", self.grad_clip);
        take!("heldout", self.heldout);
        let alpha: Option<f64> = kv.take("alpha")?;
        let alpha_final: Option<f64> = kv.take("alpha_final")?;
        match kv.take_raw("alpha_schedule").as_deref() {
            None | Some("constant") => {
                if let Some(a) = alpha {
                    self.alpha = AlphaSchedule::Constant(a);
                }
                if alpha_final.is_some() {
                    return Err(Error::Config(
                        "alpha_final requires alpha_schedule=linear".into(),
                    ));
                }
            }
            Some("linear") => {
                let start = alpha.unwrap_or(self.alpha.at(0, 1));
                let end = alpha_final.ok_or_else(|| {
                    Error::Config("alpha_schedule=linear requires alpha_final".into())
                })?;
                self.alpha = AlphaSchedule::Linear { start, end };
            }
            Some(other) => {
                return Err(Error::Config(format!(
                    "key \"alpha_schedule\": expected constant or linear, got {other:?}"
                )))
            }
        }
        if let Some(w) = kv.take_raw("p_rank_weights") {
            if w == "linear" {
                self.p_rank_weights = None;
            } else {
                let parsed = w
                    .split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| {
                        Error::Config(format!("key \"p_rank_weights\": cannot parse {w:?}: {e}"))
                    })?;
                self.p_rank_weights = Some(parsed);
            }
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let mut cfg = Self::default();
        cfg.apply_kv(&mut kv)?;
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv_text(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("batch_frames", self.batch_frames.to_string()),
            ("beta1", self.adam.beta1.to_string()),
            ("beta2", self.adam.beta2.to_string()),
            ("eps", self.adam.eps.to_string()),
            ("weight_decay", self.adam.weight_decay.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("heldout", self.heldout.to_string()),
        ];
        match self.alpha {
            AlphaSchedule::Constant(a) => {
                pairs.push(("alpha_schedule", "constant".into()));
                pairs.push(("alpha", a.to_string()));
            }
            AlphaSchedule::Linear { start, end } => {
                pairs.push(("alpha_schedule", "linear".into()));
                pairs.push(("alpha", start.to_string()));
                pairs.push(("alpha_final", end.to_string()));
            }
        }
        let w = match &self.p_rank_weights {
            None => "linear".to_string(),
            Some(w) => w.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        };
        pairs.push(("p_rank_weights", w));
        render(&pairs)
    }
}

/// Linear warmup from 0 to the peak, then linear decay to 0 at the last step.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else if step >= cfg.total_steps {
        0.0
    } else {
        cfg.peak_lr * (cfg.total_steps - step) as f64
            / (cfg.total_steps - cfg.warmup_steps) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub step: usize,
    pub lr: f64,
    pub l_smd_1: f64,
    pub l_smd_j: f64,
    /// Residual level trained this step.
    pub level: usize,
    pub l_promptdur: f64,
    pub l_dur: f64,
    /// `l_smd_1 + l_smd_j + l_promptdur + l_dur`.
    pub total: f64,
    pub mode: MaskMode,
    /// First-channel mask ratio (1 in full mode).
    pub mask_ratio: f64,
    pub residual_ratio: f64,
    pub grad_norm: f64,
    pub batch_items: usize,
    pub target_frames: usize,
    pub skipped: bool,
}

impl TrainStepReport {
    pub fn log_line(&self) -> String {
        format!(
            "step={} lr={:e} l_smd_1={} l_smd_j={} level={} l_promptdur={} l_dur={} total={} mode={} p={} grad_norm={}",
            self.step,
            self.lr,
            self.l_smd_1,
            self.l_smd_j,
            self.level,
            self.l_promptdur,
            self.l_dur,
            self.total,
            self.mode,
            self.mask_ratio,
            self.grad_norm
        )
    }
}

/// Redraws until at least one position is masked.
fn nonempty<R: Rng + ?Sized>(mut draw: impl FnMut(&mut R) -> MaskPlan, rng: &mut R) -> Result<MaskPlan> {
    for _ in 0..MASK_REDRAWS {
        let plan = draw(rng);
        if plan.masked_count() > 0 {
            return Ok(plan);
        }
    }
    Err(Error::Internal(format!(
        "no masked position after {MASK_REDRAWS} draws"
    )))
}

/// Losses of one batch, as graph tensors.
pub struct BatchLosses {
    pub l_smd_1: Tensor,
    pub l_smd_j: Tensor,
    pub l_promptdur: Tensor,
    pub l_dur: Tensor,
    pub first: MaskPlan,
    pub residual: MaskPlan,
}

impl BatchLosses {
    pub fn sum(&self) -> Result<Tensor> {
        Ok((((&self.l_smd_1 + &self.l_smd_j)? + &self.l_promptdur)? + &self.l_dur)?)
    }
}

fn splits(mask: &[bool], lengths: &[usize]) -> Vec<Vec<bool>> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut at = 0;
    for &n in lengths {
        out.push(mask[at..at + n].to_vec());
        at += n;
    }
    out
}

fn log_targets(model: &SmdModel, seqs: &[&[u32]], max_len: usize) -> Result<Tensor> {
    let mut v = vec![0f64; seqs.len() * max_len];
    for (b, s) in seqs.iter().enumerate() {
        for (i, &d) in s.iter().enumerate() {
            v[b * max_len + i] = (d as f64).ln();
        }
    }
    Ok(Tensor::from_vec(v, (seqs.len(), max_len), model.store().device())?.to_dtype(model.dtype())?)
}

/// Forward pass and losses for one batch with the masks already drawn.
pub fn batch_losses_with_masks(
    model: &SmdModel,
    batch: &TrainBatch,
    first: MaskPlan,
    residual: MaskPlan,
    ctx: &Ctx,
) -> Result<BatchLosses> {
    let items = &batch.items;
    let prompt_phonemes: Vec<&[u16]> = items.iter().map(|it| &it.encoder_prompt.runs.phonemes[..]).collect();
    let encoder_grids: Vec<&CodecGrid> = items.iter().map(|it| &it.encoder_prompt.grid).collect();
    let target_phonemes: Vec<&[u16]> = items.iter().map(|it| &it.split.target_runs.phonemes[..]).collect();
    let dur = model.duration_path(&prompt_phonemes, &encoder_grids, &target_phonemes, ctx)?;

    let prompt_gt: Vec<&[u32]> = items.iter().map(|it| &it.encoder_prompt.runs.durations[..]).collect();
    let target_gt: Vec<&[u32]> = items.iter().map(|it| &it.split.target_runs.durations[..]).collect();
    let pgt = log_targets(model, &prompt_gt, dur.prompt_mask.max_len())?;
    let tgt = log_targets(model, &target_gt, dur.target_mask.max_len())?;
    let l_promptdur = masked_mse(&dur.prompt_log_durations, &pgt, &dur.prompt_mask.flat()?)?;
    let l_dur = masked_mse(&dur.target_log_durations, &tgt, &dur.target_mask.flat()?)?;

    let durations: Vec<Vec<u32>> = target_gt.iter().map(|d| d.to_vec()).collect();
    let (frames, fmask) = model.regulate_text(&dur.target_text_states, &durations)?;
    let prompt_grids: Vec<&CodecGrid> = items.iter().map(|it| &it.split.prompt_grid).collect();
    let (pstates, pmask) = model.encode_prompt(&prompt_grids, ctx)?;
    let cond = model.cross_attend(&frames, &fmask, &pstates, &pmask)?;

    let lengths: Vec<usize> = items.iter().map(|it| it.target_frames()).collect();
    let m1 = splits(&first.mask, &lengths);
    let mj = splits(&residual.mask, &lengths);
    let mut rows = Vec::with_capacity(2 * items.len());
    for (level, masks) in [(1, &m1), (residual.level, &mj)] {
        for (b, it) in items.iter().enumerate() {
            rows.push(SmdRow {
                sample: b,
                prompt: &it.split.prompt_grid,
                level,
                target: &it.split.target_grid,
                mask: &masks[b],
            });
        }
    }
    let out = model.smd_forward(&rows, &cond, ctx)?;
    let split_at = out.row_offsets[items.len()];
    let total_rows = *out.row_offsets.last().unwrap();
    let mut targets = Vec::with_capacity(total_rows);
    for row in &rows {
        targets.extend(row.target.column(row.level - 1).into_iter().map(u32::from));
    }
    let m1_flat: Vec<bool> = m1.concat();
    let mj_flat: Vec<bool> = mj.concat();
    let l_smd_1 = smd_loss(&out.logits.narrow(0, 0, split_at)?, &targets[..split_at], &m1_flat)?;
    let l_smd_j = smd_loss(
        &out.logits.narrow(0, split_at, total_rows - split_at)?,
        &targets[split_at..],
        &mj_flat,
    )?;
    Ok(BatchLosses {
        l_smd_1,
        l_smd_j,
        l_promptdur,
        l_dur,
        first,
        residual,
    })
}

/// Draws the step's masks and residual level, then computes the losses.
pub fn batch_losses<R: Rng + ?Sized>(
    model: &SmdModel,
    batch: &TrainBatch,
    alpha: f64,
    weights: &RankWeights,
    rng: &mut R,
    ctx: &Ctx,
) -> Result<BatchLosses> {
    let m = batch.target_frames();
    let first = nonempty(|r: &mut R| plan_first_channel(m, alpha, r), rng)?;
    let level = p_rank_sample(weights, rng);
    let residual = nonempty(|r: &mut R| plan_residual(level, m, r), rng)?;
    batch_losses_with_masks(model, batch, first, residual, ctx)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// One optimizer update on the summed loss.
pub fn train_step<R: Rng + ?Sized>(
    model: &SmdModel,
    opt: &mut AdamW,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<TrainStepReport> {
    let lr = lr_at(step, cfg);
    let alpha = cfg.alpha.at(step, cfg.total_steps);
    if batch.is_empty() || batch.target_frames() == 0 {
        return Ok(TrainStepReport {
            step,
            lr,
            l_smd_1: 0.0,
            l_smd_j: 0.0,
            level: 0,
            l_promptdur: 0.0,
            l_dur: 0.0,
            total: 0.0,
            mode: MaskMode::Partial,
            mask_ratio: 0.0,
            residual_ratio: 0.0,
            grad_norm: 0.0,
            batch_items: batch.len(),
            target_frames: 0,
            skipped: true,
        });
    }
    let weights = cfg.rank_weights(model.config().num_channels)?;
    let ctx = Ctx::train(ChaCha8Rng::seed_from_u64(rng.random()));
    let losses = batch_losses(model, batch, alpha, &weights, rng, &ctx)?;
    let mut grads = losses.sum()?.backward()?;
    let grad_norm = clip_grad_norm(model.store(), &mut grads, cfg.grad_clip)?;
    opt.step(model.store(), &grads, lr)?;
    let l_smd_1 = scalar(&losses.l_smd_1)?;
    let l_smd_j = scalar(&losses.l_smd_j)?;
    let l_promptdur = scalar(&losses.l_promptdur)?;
    let l_dur = scalar(&losses.l_dur)?;
    Ok(TrainStepReport {
        step,
        lr,
        l_smd_1,
        l_smd_j,
        level: losses.residual.level,
        l_promptdur,
        l_dur,
        total: l_smd_1 + l_smd_j + l_promptdur + l_dur,
        mode: losses.first.mode,
        mask_ratio: losses.first.ratio,
        residual_ratio: losses.residual.ratio,
        grad_norm,
        batch_items: batch.len(),
        target_frames: batch.target_frames(),
        skipped: false,
    })
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join(CHECKPOINT_DIR)
    }

    pub fn log(&self) -> PathBuf {
        self.root.join(PROGRESS_LOG)
    }
}

pub struct TrainOutcome {
    pub model: SmdModel,
    pub reports: Vec<TrainStepReport>,
    pub start_step: usize,
}

/// Trains from scratch, or from the run directory's checkpoint when
/// `resume` is set. Step `s` always draws from the same random substream,
/// so a resumed run continues exactly as the uninterrupted one would.
pub fn run_training(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out: Option<&RunDir>,
    resume: bool,
    mut on_step: impl FnMut(&TrainStepReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    model_cfg.check_corpus(&corpus.spec)?;
    if corpus.is_empty() {
        return Err(invalid!("training corpus is empty"));
    }
    let train = if cfg.heldout > 0 && cfg.heldout < corpus.len() {
        Corpus {
            spec: corpus.spec.clone(),
            utterances: corpus.utterances[..corpus.len() - cfg.heldout].to_vec(),
        }
    } else {
        corpus.clone()
    };
    let eligible = eligible_utterances(&train);

    let (model, mut opt, start) = match (resume, out) {
        (true, Some(dir)) => {
            let ckpt = dir.checkpoint();
            let (model, step) = SmdModel::load(&ckpt)?;
            if model.config() != model_cfg {
                return Err(Error::Config(format!(
                    "checkpoint at {} was trained with a different model config",
                    ckpt.display()
                )));
            }
            let opt = AdamW::load(cfg.adam, &ckpt)?;
            (model, opt, step)
        }
        (true, None) => return Err(invalid!("resume requested without a run directory")),
        (false, _) => (
            SmdModel::init(model_cfg, DType::F32, stream(cfg.seed, Stream::Init))?,
            AdamW::new(cfg.adam),
            0,
        ),
    };

    let mut log = match out {
        Some(dir) => {
            std::fs::create_dir_all(&dir.root).map_err(|e| Error::io(&dir.root, e))?;
            let path = dir.log();
            let kept = if resume { kept_log_lines(&path, start)? } else { String::new() };
            std::fs::write(&path, kept).map_err(|e| Error::io(&path, e))?;
            Some((
                std::fs::OpenOptions::new()
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };

    let mut reports = Vec::new();
    for step in start..cfg.total_steps {
        let mut rng = substream(cfg.seed, Stream::Train, step as u64);
        let indices = sample_indices(&train, &eligible, cfg.batch_frames, &mut rng)?;
        let batch = TrainBatch::build(&train, &indices, &mut rng)?;
        let report = train_step(&model, &mut opt, &batch, cfg, step, &mut rng)?;
        if !report.total.is_finite() {
            return Err(Error::Internal(format!("non-finite loss at step {step}")));
        }
        if let Some((file, path)) = log.as_mut() {
            writeln!(file, "{}", report.log_line()).map_err(|e| Error::io(&*path, e))?;
        }
        on_step(&report);
        reports.push(report);
        let done = step + 1;
        if let Some(dir) = out {
            if done == cfg.total_steps || (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) {
                save_training_state(dir, &model, &opt, cfg, done)?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        reports,
        start_step: start,
    })
}

fn kept_log_lines(path: &Path, before_step: usize) -> Result<String> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(String::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = String::new();
    for line in text.lines() {
        let step = line
            .strip_prefix("step=")
            .and_then(|r| r.split_whitespace().next())
            .and_then(|s| s.parse::<usize>().ok());
        if matches!(step, Some(s) if s < before_step) {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn save_training_state(
    dir: &RunDir,
    model: &SmdModel,
    opt: &AdamW,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    let ckpt = dir.checkpoint();
    model.save(&ckpt, step)?;
    opt.save(&ckpt)?;
    write_atomic(&ckpt.join(TRAIN_CONFIG_FILE), cfg.to_kv_text().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_shape() {
        let cfg = TrainConfig {
            peak_lr: 5e-4,
            warmup_steps: 500,
            total_steps: 1500,
            ..Default::default()
        };
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(500, &cfg), 5e-4);
        assert_eq!(lr_at(250, &cfg), 2.5e-4);
        assert_eq!(lr_at(1000, &cfg), 2.5e-4);
        assert_eq!(lr_at(1500, &cfg), 0.0);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = TrainConfig {
            alpha: AlphaSchedule::Linear { start: 0.9, end: 0.6 },
            p_rank_weights: Some(vec![3.0, 2.0, 1.0]),
            seed: 17,
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
    }

    #[test]
    fn config_errors_name_the_key() {
        let err = TrainConfig::from_kv_text("peak_lr=fast\n").unwrap_err().to_string();
        assert!(err.contains("peak_lr"), "{err}");
        let err = TrainConfig::from_kv_text("wamrup=3\n").unwrap_err().to_string();
        assert!(err.contains("wamrup"), "{err}");
        let err = TrainConfig::from_kv_text("warmup_steps=10\ntotal_steps=5\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("warmup_steps"), "{err}");
    }
}
