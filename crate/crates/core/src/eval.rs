//! Oracle-based metrics, the iteration-count ablation and parameter audits.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data_synth::{oracle_transcribe, speaker_matches, CorpusSpec, Utterance};
use crate::error::{invalid, Result};
use crate::inference::{measure_rtf, synthesize, DecodeTrace};
use crate::rng::{substream, Stream};
use crate::smd_model::{ModelConfig, SmdModel};
use crate::token_grid::{split_prompt, CodecGrid};

/// Edit distance with unit insert, delete and substitute costs.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Phoneme error rate: edit distance over reference length.
pub fn per_proxy(hypothesis: &[u16], reference: &[u16]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid!("reference phoneme sequence is empty"));
    }
    Ok(levenshtein(hypothesis, reference) as f64 / reference.len() as f64)
}

/// One evaluation case: a prompt cut from an utterance and the text of the
/// rest of it.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub speaker: u16,
    pub prompt: CodecGrid,
    pub text: Vec<u16>,
}

/// Cases from held-out utterances, splits drawn from the evaluation stream.
pub fn eval_cases(utterances: &[Utterance], seed: u64) -> Result<Vec<EvalCase>> {
    utterances
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut rng = substream(seed, Stream::Eval, i as u64);
            let split = split_prompt(u, &mut rng)?;
            Ok(EvalCase {
                speaker: u.speaker,
                prompt: split.prompt_grid,
                text: split.target_runs.phonemes,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub per: f64,
    pub speaker_hits: usize,
    pub speaker_cells: usize,
    pub frames: usize,
    pub forward_passes: usize,
    pub grid: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub iterations: usize,
    pub cases: usize,
    /// Mean per-case phoneme error rate.
    pub per: f64,
    /// Matching residual cells over all residual cells.
    pub speaker_consistency: f64,
    pub frames: usize,
    pub forward_passes: usize,
    pub decode_secs: f64,
}

impl EvalSummary {
    pub fn to_record(&self) -> String {
        format!(
            "iterations={} cases={} per={} speaker_consistency={} frames={} forward_passes={} decode_secs={}\n",
            self.iterations,
            self.cases,
            self.per,
            self.speaker_consistency,
            self.frames,
            self.forward_passes,
            self.decode_secs
        )
    }
}

/// Synthesizes every case and scores it with the oracles. Decoding draws
/// from `substream(seed, Decode, case)`.
pub fn evaluate(
    model: &SmdModel,
    spec: &CorpusSpec,
    cases: &[EvalCase],
    iterations: usize,
    seed: u64,
) -> Result<(EvalSummary, Vec<CaseResult>)> {
    if cases.is_empty() {
        return Err(invalid!("no evaluation cases"));
    }
    let mut results = Vec::with_capacity(cases.len());
    let start = Instant::now();
    for (i, case) in cases.iter().enumerate() {
        let mut rng = substream(seed, Stream::Decode, i as u64);
        let (grid, trace): (CodecGrid, DecodeTrace) =
            synthesize(model, &case.text, &case.prompt, iterations, &mut rng)?;
        let (hits, cells) = speaker_matches(&grid, case.speaker, spec);
        results.push(CaseResult {
            per: per_proxy(&oracle_transcribe(&grid), &case.text)?,
            speaker_hits: hits,
            speaker_cells: cells,
            frames: grid.frames(),
            forward_passes: trace.forward_passes,
            grid: grid.tokens().to_vec(),
        });
    }
    let decode_secs = start.elapsed().as_secs_f64();
    let hits: usize = results.iter().map(|r| r.speaker_hits).sum();
    let cells: usize = results.iter().map(|r| r.speaker_cells).sum();
    let summary = EvalSummary {
        iterations,
        cases: cases.len(),
        per: results.iter().map(|r| r.per).sum::<f64>() / cases.len() as f64,
        speaker_consistency: if cells == 0 { 0.0 } else { hits as f64 / cells as f64 },
        frames: results.iter().map(|r| r.frames).sum(),
        forward_passes: results.iter().map(|r| r.forward_passes).sum(),
        decode_secs,
    };
    Ok((summary, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub iterations: usize,
    /// Median over repeats of the slice's real-time factor.
    pub rtf: f64,
    pub per: f64,
    pub speaker_consistency: f64,
    /// Median over repeats of the mean wall time per case.
    pub decode_secs_per_case: f64,
    /// Forward passes per case (constant across cases).
    pub forward_passes: usize,
}

impl AblationRow {
    pub fn to_record(&self) -> String {
        format!(
            "iterations={} rtf={} per={} speaker_consistency={} decode_secs_per_case={} forward_passes={}\n",
            self.iterations,
            self.rtf,
            self.per,
            self.speaker_consistency,
            self.decode_secs_per_case,
            self.forward_passes
        )
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Evaluates the slice once per iteration count, `repeats` times each for
/// timing. Non-timing columns come from the first repeat; every repeat
/// decodes identically because the random streams restart.
pub fn run_ablation(
    model: &SmdModel,
    spec: &CorpusSpec,
    cases: &[EvalCase],
    iteration_list: &[usize],
    seed: u64,
    repeats: usize,
) -> Result<Vec<AblationRow>> {
    if repeats == 0 {
        return Err(invalid!("repeats must be >= 1"));
    }
    let mut rows = Vec::with_capacity(iteration_list.len());
    for &iters in iteration_list {
        let mut rtfs = Vec::with_capacity(repeats);
        let mut times = Vec::with_capacity(repeats);
        let mut first: Option<EvalSummary> = None;
        for _ in 0..repeats {
            let (summary, results) = evaluate(model, spec, cases, iters, seed)?;
            let passes = results[0].forward_passes;
            if results.iter().any(|r| r.forward_passes != passes) {
                return Err(crate::Error::Internal("forward pass count varies across cases".into()));
            }
            rtfs.push(measure_rtf(summary.frames, spec.frame_rate, summary.decode_secs)?);
            times.push(summary.decode_secs / cases.len() as f64);
            first.get_or_insert(summary);
        }
        let s = first.expect("repeats >= 1");
        rows.push(AblationRow {
            iterations: iters,
            rtf: median(rtfs),
            per: s.per,
            speaker_consistency: s.speaker_consistency,
            decode_secs_per_case: median(times),
            forward_passes: s.forward_passes / cases.len(),
        });
    }
    Ok(rows)
}

/// Aligned columns, one row per iteration count.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:>10} {:>10} {:>8} {:>8} {:>14} {:>8}\n",
        "iterations", "rtf", "per", "spk", "secs/case", "passes"
    );
    for r in rows {
        out.push_str(&format!(
            "{:>10} {:>10.4} {:>8.4} {:>8.4} {:>14.5} {:>8}\n",
            r.iterations, r.rtf, r.per, r.speaker_consistency, r.decode_secs_per_case, r.forward_passes
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamAudit {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamAudit {
    pub fn module(&self, name: &str) -> Option<usize> {
        self.modules.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (name, n) in &self.modules {
            out.push_str(&format!("{name:<26} {n:>12} {:>10.3}M\n", *n as f64 / 1e6));
        }
        out.push_str(&format!(
            "{:<26} {:>12} {:>10.3}M\n",
            "total",
            self.total,
            self.total as f64 / 1e6
        ));
        out
    }
}

/// Exact per-module parameter counts of a configuration.
pub fn audit_parameters(cfg: &ModelConfig) -> Result<ParamAudit> {
    cfg.validate()?;
    let modules: Vec<(String, usize)> = cfg
        .param_breakdown()
        .into_iter()
        .map(|(n, c)| (n.to_string(), c))
        .collect();
    let total = modules.iter().map(|(_, c)| c).sum();
    Ok(ParamAudit { modules, total })
}

/// Counts from an actually constructed (zero-filled) model.
pub fn audit_constructed(cfg: &ModelConfig) -> Result<ParamAudit> {
    let model = SmdModel::new(cfg, crate::nn::ParamStore::zeroed(candle_core::DType::F32))?;
    let modules: Vec<(String, usize)> = model
        .registered_breakdown()
        .into_iter()
        .map(|(n, c)| (n.to_string(), c))
        .collect();
    Ok(ParamAudit {
        total: model.store().num_parameters(),
        modules,
    })
}
