//! Acceptance suite: every criterion prints one PASS/FAIL line, then the
//! test fails if any criterion failed.
//!
//! Lines are written straight to stderr so they show without
//! `--nocapture`.

mod common;

use std::io::Write;
use std::time::Instant;

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use smd::data_synth::{random_text, render_utterance, Corpus, CorpusPlan, CorpusSpec};
use smd::eval::{audit_constructed, audit_parameters, eval_cases, evaluate, format_ablation_table, run_ablation};
use smd::inference::{decode_first_channel, measure_rtf, synthesize, Conditioning, DecodeTrace};
use smd::nn::Ctx;
use smd::schedules::{choose_first_channel_mode, p_rank_sample, sample_mask_ratio, MaskMode, RankWeights};
use smd::smd_model::{smd_loss, ModelConfig, SmdModel, SmdRow};
use smd::token_grid::split_prompt;
use smd::training::{run_training, TrainConfig, TrainStepReport};

use common::Which;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(out: &mut Vec<Outcome>, id: usize, name: &'static str, pass: bool, detail: String) {
    let line = format!("{} {id:>2} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    out.push(Outcome {
        id,
        name,
        pass,
        detail,
    });
}

fn schedule_exactness(out: &mut Vec<Outcome>) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1_000_000;
    let mean = (0..n).map(|_| sample_mask_ratio(&mut rng)).sum::<f64>() / n as f64;
    let secs = t.elapsed().as_secs_f64();
    let pass = (0.634..=0.639).contains(&mean) && secs < 10.0;
    report(
        out,
        1,
        "schedule exactness",
        pass,
        format!("mean ratio {mean:.5} over {n} draws (target [0.634, 0.639], 2/pi = {:.5}), {secs:.2}s", 2.0 / std::f64::consts::PI),
    );
}

fn split_bounds(out: &mut Vec<Outcome>) {
    let spec = CorpusSpec {
        max_duration: 1,
        ..CorpusSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let utterances: Vec<_> = (3..=500)
        .map(|t| render_utterance(&random_text(t, spec.phoneme_vocab_size, &mut rng), 0, &spec).unwrap())
        .collect();
    let n = 100_000;
    let mut violations = 0;
    for _ in 0..n {
        let u = &utterances[rand::Rng::random_range(&mut rng, 0..utterances.len())];
        let t = u.frames();
        let s = split_prompt(u, &mut rng).unwrap();
        if !(t.div_ceil(3) <= s.k && s.k <= 2 * t / 3) {
            violations += 1;
        }
    }
    report(
        out,
        2,
        "prompt split bounds",
        violations == 0,
        format!("{violations} violations in {n} splits over T in [3, 500]"),
    );
}

fn rank_fidelity(out: &mut Vec<Outcome>) {
    let w = RankWeights::linear(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let hits = (0..n).filter(|_| p_rank_sample(&w, &mut rng) == 2).count();
    let f = hits as f64 / n as f64;
    report(
        out,
        3,
        "residual level weighting",
        (f - 0.25).abs() <= 0.01,
        format!("level-2 frequency {f:.4} at N=8 (target 0.25 +/- 0.01)"),
    );
}

fn mixture_fidelity(out: &mut Vec<Outcome>) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let full = (0..n)
        .filter(|_| choose_first_channel_mode(0.6, &mut rng) == MaskMode::Full)
        .count();
    let f = full as f64 / n as f64;
    report(
        out,
        4,
        "mask mode mixture",
        (f - 0.4).abs() <= 0.01,
        format!("full-mask frequency {f:.4} at alpha 0.6 (target 0.4 +/- 0.01)"),
    );
}

fn loss_additivity(out: &mut Vec<Outcome>, reports: &[TrainStepReport]) {
    let bad = reports
        .iter()
        .filter(|r| r.total.to_bits() != (r.l_smd_1 + r.l_smd_j + r.l_promptdur + r.l_dur).to_bits())
        .count();
    report(
        out,
        5,
        "loss additivity",
        bad == 0 && !reports.is_empty(),
        format!("{bad} of {} training steps differ from the component sum", reports.len()),
    );
}

fn gradient_correctness(out: &mut Vec<Outcome>) {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    let mut enough = true;
    for which in [Which::Dur, Which::PromptDur, Which::Smd] {
        let (checked, err) = common::gradient_check(which);
        enough &= checked > 20;
        worst = worst.max(err);
        parts.push(format!("{which:?} {err:.1e} over {checked}"));
    }
    report(
        out,
        6,
        "gradient correctness",
        enough && worst < 1e-4,
        format!("f64, dim 8, max relative error {worst:.2e} (limit 1e-4): {}", parts.join(", ")),
    );
}

/// Gradient of the decoder loss with respect to the logits of a real
/// forward pass is exactly zero at unmasked positions.
fn masked_only_gradients(out: &mut Vec<Outcome>) {
    let fx = common::Fixture::new();
    let batch = &fx.batch;
    let (dim, ctx) = (fx.model.config().dim, Ctx::eval());
    let lengths: Vec<usize> = batch.items.iter().map(|it| it.target_frames()).collect();
    let total: usize = lengths.iter().sum();
    let cond = Tensor::zeros((batch.len(), *lengths.iter().max().unwrap(), dim), DType::F64, fx.model.store().device()).unwrap();
    let mut at = 0;
    let masks: Vec<Vec<bool>> = lengths
        .iter()
        .map(|&n| {
            let m = fx.first.mask[at..at + n].to_vec();
            at += n;
            m
        })
        .collect();
    let rows: Vec<SmdRow> = batch
        .items
        .iter()
        .enumerate()
        .map(|(b, it)| SmdRow {
            sample: b,
            prompt: &it.split.prompt_grid,
            level: 1,
            target: &it.split.target_grid,
            mask: &masks[b],
        })
        .collect();
    let logits = fx.model.smd_forward(&rows, &cond, &ctx).unwrap().logits;
    let leaf = Var::from_tensor(&logits.detach()).unwrap();
    let targets: Vec<u32> = rows.iter().flat_map(|r| r.target.column(0)).map(u32::from).collect();
    let flat: Vec<bool> = masks.concat();
    let loss = smd_loss(leaf.as_tensor(), &targets, &flat).unwrap();
    let g: Vec<Vec<f64>> = loss.backward().unwrap().get(leaf.as_tensor()).unwrap().to_vec2().unwrap();
    let nonzero_unmasked = g
        .iter()
        .zip(&flat)
        .filter(|(row, &m)| !m && row.iter().any(|&x| x != 0.0))
        .count();
    let masked_with_grad = g.iter().zip(&flat).filter(|(row, &m)| m && row.iter().any(|&x| x != 0.0)).count();
    let masked = flat.iter().filter(|&&m| m).count();
    report(
        out,
        7,
        "masked-only gradients",
        nonzero_unmasked == 0 && masked_with_grad == masked,
        format!(
            "{nonzero_unmasked} of {} unmasked positions have a nonzero gradient; {masked_with_grad} of {masked} masked do",
            total - masked
        ),
    );
}

struct Trained {
    corpus: Corpus,
    model: SmdModel,
    reports: Vec<TrainStepReport>,
    secs: f64,
    steps: usize,
}

fn train_desk() -> Trained {
    let spec = CorpusSpec::default();
    let corpus = Corpus::generate(&spec, &CorpusPlan::default(), 0).unwrap();
    let cfg = TrainConfig::default();
    let t = Instant::now();
    let outcome = run_training(&corpus, &ModelConfig::desk(&spec), &cfg, None, false, |r| {
        if r.step % 250 == 0 {
            let _ = writeln!(std::io::stderr(), "  train {}", r.log_line());
        }
    })
    .unwrap();
    Trained {
        corpus,
        model: outcome.model,
        reports: outcome.reports,
        secs: t.elapsed().as_secs_f64(),
        steps: cfg.total_steps,
    }
}

fn heldout_cases(t: &Trained, n: usize) -> Vec<smd::eval::EvalCase> {
    let held = TrainConfig::default().heldout;
    let utts = &t.corpus.utterances[t.corpus.len() - held..];
    eval_cases(&utts[..n], 7).unwrap()
}

fn end_to_end(out: &mut Vec<Outcome>, t: &Trained) {
    let cases = heldout_cases(t, 50);
    let (s, _) = evaluate(&t.model, &t.corpus.spec, &cases, 8, 7).unwrap();
    let pass = s.per <= 0.10 && s.speaker_consistency >= 0.90 && t.steps <= 20_000 && t.secs <= 1800.0;
    report(
        out,
        8,
        "end-to-end learning",
        pass,
        format!(
            "PER {:.4} (<= 0.10), speaker consistency {:.4} (>= 0.90) on {} held-out cases at I=8; {} params, {} steps in {:.0}s",
            s.per,
            s.speaker_consistency,
            s.cases,
            t.model.store().num_parameters(),
            t.steps,
            t.secs
        ),
    );
}

fn iteration_trend(out: &mut Vec<Outcome>, t: &Trained) {
    let cases = heldout_cases(t, 20);
    let iters = [1, 4, 8, 16, 24];
    let rows = run_ablation(&t.model, &t.corpus.spec, &cases, &iters, 7, 5).unwrap();
    let n = t.model.config().num_channels;
    let _ = std::io::stderr().write_all(format_ablation_table(&rows).as_bytes());
    let timing_ok = rows
        .windows(2)
        .all(|w| w[1].decode_secs_per_case >= 0.95 * w[0].decode_secs_per_case);
    let passes_ok = rows.iter().all(|r| r.forward_passes == r.iterations + n - 1);
    let per = |i: usize| rows.iter().find(|r| r.iterations == i).unwrap().per;
    let gap_ok = per(1) >= per(8) + 0.05;
    report(
        out,
        9,
        "iteration trend",
        timing_ok && passes_ok && gap_ok,
        format!(
            "decode time non-decreasing: {timing_ok}; passes = I + N - 1: {passes_ok}; PER(1) {:.4} >= PER(8) {:.4} + 0.05: {gap_ok}",
            per(1),
            per(8)
        ),
    );
}

fn parameter_audit(out: &mut Vec<Outcome>) {
    let spec = CorpusSpec::default();
    let paper = audit_parameters(&ModelConfig::paper(&spec)).unwrap();
    let conformer = paper.module("conformer").unwrap() as f64;
    let total = paper.total as f64;
    let desk_cfg = ModelConfig::desk(&spec);
    let desk = audit_parameters(&desk_cfg).unwrap();
    let built = audit_constructed(&desk_cfg).unwrap();
    let within = |x: f64, target: f64| (x - target).abs() <= 0.15 * target;
    let pass = within(conformer, 67.2e6) && within(total, 207e6) && desk.total < 5_000_000 && built == desk;
    report(
        out,
        10,
        "parameter audit",
        pass,
        format!(
            "large conformer {:.3}M (67.2M +/- 15%), large total {:.3}M (207M +/- 15%), desk {:.3}M (< 5M), desk analytic = constructed: {}",
            conformer / 1e6,
            total / 1e6,
            desk.total as f64 / 1e6,
            built == desk
        ),
    );
}

fn decode_schedule(out: &mut Vec<Outcome>, model: &SmdModel, corpus: &Corpus) {
    let dim = model.config().dim;
    let cond = Conditioning {
        prompt: corpus.utterances[0].grid.clone(),
        frames: Tensor::zeros((1, 100, dim), model.dtype(), model.store().device()).unwrap(),
        num_frames: 100,
    };
    let mut trace = DecodeTrace::default();
    decode_first_channel(model, &cond, 8, &mut ChaCha8Rng::seed_from_u64(0), &mut trace).unwrap();
    let got = trace.remaining_counts();
    let expected = vec![98, 92, 83, 70, 55, 38, 19, 0];
    report(
        out,
        11,
        "decode schedule",
        got == expected,
        format!("remaining masked after each of 8 iterations from 100: {got:?}"),
    );
}

fn rtf_arithmetic(out: &mut Vec<Outcome>) {
    let r = measure_rtf(750, 75.0, 0.9).unwrap();
    report(out, 12, "RTF arithmetic", r == 0.09, format!("750 frames at 75 fps in 0.9 s gives {r}"));
}

fn digest(bytes: impl IntoIterator<Item = u8>) -> String {
    let mut h = Sha256::new();
    h.update(bytes.into_iter().collect::<Vec<u8>>());
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn params_digest(model: &SmdModel) -> String {
    let mut bytes = Vec::new();
    for (name, v) in model.store().vars() {
        bytes.extend_from_slice(name.as_bytes());
        let vals: Vec<f32> = v.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        vals.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes()));
    }
    digest(bytes)
}

fn reproducibility(out: &mut Vec<Outcome>, t: &Trained) {
    let spec = CorpusSpec::default();
    let plan = CorpusPlan::default();
    let a = Corpus::generate(&spec, &plan, 0).unwrap().checksum();
    let b = Corpus::generate(&spec, &plan, 0).unwrap().checksum();
    let other = Corpus::generate(&spec, &plan, 1).unwrap().checksum();
    let corpora = a == b && a == t.corpus.checksum() && other != a;

    let short = TrainConfig {
        total_steps: 10,
        warmup_steps: 2,
        ..TrainConfig::default()
    };
    let run = || run_training(&t.corpus, &ModelConfig::desk(&spec), &short, None, false, |_| {}).unwrap();
    let (r1, r2) = (run(), run());
    let (p1, p2) = (params_digest(&r1.model), params_digest(&r2.model));
    let trajectories = r1.reports == r2.reports && p1 == p2;

    let case = &heldout_cases(t, 1)[0];
    let synth = || {
        let (g, _) = synthesize(&t.model, &case.text, &case.prompt, 8, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        digest(g.tokens().iter().flat_map(|x| x.to_le_bytes()))
    };
    let (s1, s2) = (synth(), synth());
    let outputs = s1 == s2;
    report(
        out,
        13,
        "reproducibility",
        corpora && trajectories && outputs,
        format!(
            "corpus {}: {corpora}; 10-step training params {p1} vs {p2}: {trajectories}; synthesis {s1} vs {s2}: {outputs}",
            &a[..16]
        ),
    );
}

#[test]
fn acceptance() {
    let mut out = Vec::new();
    schedule_exactness(&mut out);
    split_bounds(&mut out);
    rank_fidelity(&mut out);
    mixture_fidelity(&mut out);
    gradient_correctness(&mut out);
    masked_only_gradients(&mut out);
    parameter_audit(&mut out);
    rtf_arithmetic(&mut out);

    let trained = train_desk();
    loss_additivity(&mut out, &trained.reports);
    end_to_end(&mut out, &trained);
    iteration_trend(&mut out, &trained);
    decode_schedule(&mut out, &trained.model, &trained.corpus);
    reproducibility(&mut out, &trained);

    out.sort_by_key(|o| o.id);
    let mut summary = String::from("\nacceptance summary\n");
    for o in &out {
        summary.push_str(&format!("{} {:>2} {}\n", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name));
    }
    let _ = std::io::stderr().write_all(summary.as_bytes());
    let failed: Vec<String> = out
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} {}: {}", o.id, o.name, o.detail))
        .collect();
    assert_eq!(out.len(), 13);
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
