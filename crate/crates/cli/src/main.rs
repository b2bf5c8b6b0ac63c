//! `smd`: batch driver for corpus synthesis, training, synthesis,
//! evaluation, the iteration ablation and parameter audits.
//!
//! Exit codes: 0 success, 2 invalid input or config, 3 I/O, 4 internal error.

mod files;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smd::data_synth::{read_spec_file, Corpus, CorpusPlan, CorpusSpec};
use smd::eval::{audit_parameters, eval_cases, evaluate, format_ablation_table, run_ablation};
use smd::inference::synthesize;
use smd::kv::KvFile;
use smd::rng::{substream, Stream};
use smd::smd_model::{ModelConfig, Preset, SmdModel, CONFIG_FILE};
use smd::training::{run_training, RunDir, TrainConfig, CHECKPOINT_DIR, TRAIN_CONFIG_FILE};

use files::{parse_grid, parse_phonemes, read_text, render_grid, DirLock};
use manifest::{RunManifest, Source};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
            CliError::Internal(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<smd::Error> for CliError {
    fn from(e: smd::Error) -> Self {
        use smd::Error as E;
        match e {
            E::InvalidInput(_) | E::Config(_) | E::Format { .. } | E::Json(_) => {
                CliError::Validation(e.to_string())
            }
            E::Io { .. } => CliError::Io(e.to_string()),
            E::Internal(_) | E::Tensor(_) => CliError::Internal(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "smd", version, about = "Masked parallel codec-token TTS on a synthetic codec")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Seed for every random stream of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config file: the corpus spec for synth-data, the training config for
    /// train, an optional corpus spec for count-params.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model size preset.
    #[arg(long, global = true, value_parser = ["desk", "paper"])]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    SynthData,
    /// Train a model on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Overrides total_steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Synthesize a codec grid from a prompt grid and phoneme text.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Prompt grid: one frame per line, one token per channel.
        #[arg(long)]
        prompt: PathBuf,
        /// Whitespace-separated phoneme ids.
        #[arg(long)]
        text: PathBuf,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
        iterations: u64,
    },
    /// Score synthesis on the held-out part of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
        iterations: u64,
        /// Number of held-out utterances to evaluate.
        #[arg(long, default_value_t = 50)]
        cases: usize,
    },
    /// Evaluate once per iteration count.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,4,8,16,24")]
        iterations: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        /// Timing repeats per iteration count.
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Print per-module parameter counts of a preset.
    CountParams,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let c = cli.common;
    match cli.command {
        Command::SynthData => cmd_synth_data(&c),
        Command::Train { corpus, steps, resume } => cmd_train(&c, &corpus, steps, resume),
        Command::Synthesize {
            checkpoint,
            prompt,
            text,
            iterations,
        } => cmd_synthesize(&c, &checkpoint, &prompt, &text, iterations as usize),
        Command::Eval {
            checkpoint,
            corpus,
            iterations,
            cases,
        } => cmd_eval(&c, &checkpoint, &corpus, iterations as usize, cases),
        Command::Ablate {
            checkpoint,
            corpus,
            iterations,
            cases,
            repeats,
        } => cmd_ablate(&c, &checkpoint, &corpus, &iterations, cases, repeats),
        Command::CountParams => cmd_count_params(&c),
    }
}

fn require_out(c: &Common) -> CliResult<&Path> {
    c.out
        .as_deref()
        .ok_or_else(|| CliError::Validation("--out is required".into()))
}

fn seed_of(c: &Common, m: &mut RunManifest) -> u64 {
    let (seed, src) = match c.seed {
        Some(s) => (s, Source::Flag),
        None => (0, Source::Default),
    };
    m.seed = seed;
    m.set("seed", seed, src);
    seed
}

fn preset_of(c: &Common, m: &mut RunManifest) -> CliResult<Preset> {
    let (name, src) = match &c.preset {
        Some(p) => (p.as_str(), Source::Flag),
        None => ("desk", Source::Default),
    };
    m.set("preset", name, src);
    name.parse::<Preset>().map_err(CliError::Validation)
}

/// Keys a config file sets, for the manifest's resolution record.
fn config_keys(path: Option<&Path>) -> CliResult<Vec<String>> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => Ok(KvFile::read(p)?.keys()),
    }
}

fn record_kv(m: &mut RunManifest, text: &str, from_config: &[String]) -> CliResult<()> {
    let mut kv = KvFile::parse(text)?;
    for key in kv.keys() {
        let value = kv.take_raw(&key).unwrap_or_default();
        let src = if from_config.contains(&key) { Source::Config } else { Source::Default };
        m.set(&key, value, src);
    }
    Ok(())
}

fn load_corpus(dir: &Path) -> CliResult<Corpus> {
    Ok(Corpus::load(dir)?)
}

/// Accepts a training run directory or the checkpoint directory inside it.
fn checkpoint_dir(path: &Path) -> PathBuf {
    let nested = path.join(CHECKPOINT_DIR);
    if !path.join(CONFIG_FILE).exists() && nested.join(CONFIG_FILE).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

fn cmd_synth_data(c: &Common) -> CliResult<()> {
    let out = require_out(c)?;
    let _lock = DirLock::acquire(out)?;
    let mut m = RunManifest::start("synth-data", 0);
    let seed = seed_of(c, &mut m);
    let (spec, plan) = match &c.config {
        Some(p) => {
            m.input("spec", p);
            read_spec_file(p)?
        }
        None => (CorpusSpec::default(), CorpusPlan::default()),
    };
    let keys = config_keys(c.config.as_deref())?;
    let mut pairs = spec.kv_pairs();
    pairs.extend([
        ("num_utterances", plan.num_utterances.to_string()),
        ("min_phonemes", plan.min_phonemes.to_string()),
        ("max_phonemes", plan.max_phonemes.to_string()),
    ]);
    record_kv(&mut m, &smd::kv::render(&pairs), &keys)?;
    let corpus = Corpus::generate(&spec, &plan, seed)?;
    corpus.save(out)?;
    let checksum = corpus.checksum();
    m.output("corpus", out);
    m.result("checksum", &checksum);
    m.result("utterances", corpus.len());
    m.result("frames", corpus.total_frames());
    m.finish(out)?;
    println!("corpus {} utterances={} checksum={checksum}", out.display(), corpus.len());
    Ok(())
}

fn cmd_train(c: &Common, corpus_dir: &Path, steps: Option<usize>, resume: bool) -> CliResult<()> {
    let out = require_out(c)?;
    let _lock = DirLock::acquire(out)?;
    let mut m = RunManifest::start("train", 0);
    m.input("corpus", corpus_dir);
    let corpus = load_corpus(corpus_dir)?;
    let preset = preset_of(c, &mut m)?;

    let mut cfg = TrainConfig::default();
    let keys = config_keys(c.config.as_deref())?;
    if let Some(p) = &c.config {
        m.input("config", p);
        let mut kv = KvFile::read(p)?;
        cfg.apply_kv(&mut kv)?;
        kv.finish()?;
    }
    let mut flagged = Vec::new();
    if let Some(s) = c.seed {
        cfg.seed = s;
        flagged.push("seed");
    }
    if let Some(s) = steps {
        cfg.total_steps = s;
        flagged.push("total_steps");
    }
    cfg.validate()?;
    record_kv(&mut m, &cfg.to_kv_text(), &keys)?;
    for key in flagged {
        m.resolution.insert(key.into(), Source::Flag);
    }
    m.seed = cfg.seed;
    m.set("resume", resume, if resume { Source::Flag } else { Source::Default });

    let model_cfg = ModelConfig::preset(preset, &corpus.spec);
    model_cfg.validate()?;
    let run_dir = RunDir {
        root: out.to_path_buf(),
    };
    let mut first: Option<f64> = None;
    let mut last: Option<f64> = None;
    let outcome = run_training(&corpus, &model_cfg, &cfg, Some(&run_dir), resume, |r| {
        first.get_or_insert(r.total);
        last = Some(r.total);
        if r.step % 100 == 0 || r.step + 1 == cfg.total_steps {
            eprintln!("{}", r.log_line().trim_end());
        }
    })?;
    m.output("checkpoint", &run_dir.checkpoint());
    m.output("progress_log", &run_dir.log());
    m.result("start_step", outcome.start_step);
    m.result("steps", cfg.total_steps);
    m.result("parameters", outcome.model.store().num_parameters());
    if let (Some(a), Some(b)) = (first, last) {
        m.result("first_total_loss", a);
        m.result("last_total_loss", b);
    }
    m.finish(out)?;
    println!("checkpoint {}", run_dir.checkpoint().display());
    Ok(())
}

fn cmd_synthesize(
    c: &Common,
    checkpoint: &Path,
    prompt_path: &Path,
    text_path: &Path,
    iterations: usize,
) -> CliResult<()> {
    let out = require_out(c)?;
    let _lock = DirLock::acquire(out)?;
    let mut m = RunManifest::start("synthesize", 0);
    let seed = seed_of(c, &mut m);
    let ckpt = checkpoint_dir(checkpoint);
    m.input("checkpoint", &ckpt);
    m.input("prompt", prompt_path);
    m.input("text", text_path);
    m.set("iterations", iterations, Source::Flag);
    let (model, step) = SmdModel::load(&ckpt)?;
    let cfg = model.config().clone();
    let prompt = parse_grid(&read_text(prompt_path)?, cfg.num_channels, cfg.codebook_size, prompt_path)?;
    let text = parse_phonemes(&read_text(text_path)?, cfg.phoneme_vocab_size, text_path)?;
    let mut rng = substream(seed, Stream::Decode, 0);
    let (grid, trace) = synthesize(&model, &text, &prompt, iterations, &mut rng)?;
    let grid_path = out.join("grid.txt");
    let trace_path = out.join("trace.txt");
    smd::data_synth::write_atomic(&grid_path, render_grid(&grid).as_bytes())?;
    smd::data_synth::write_atomic(&trace_path, trace.to_records().as_bytes())?;
    m.output("grid", &grid_path);
    m.output("trace", &trace_path);
    m.result("checkpoint_step", step);
    m.result("frames", grid.frames());
    m.result("forward_passes", trace.forward_passes);
    m.finish(out)?;
    println!("grid {} frames={}", grid_path.display(), grid.frames());
    Ok(())
}

/// Held-out utterances are the last `heldout` of the corpus, with `heldout`
/// taken from the checkpoint's training config when present.
fn heldout_cases(
    corpus: &Corpus,
    ckpt: &Path,
    cases: usize,
    seed: u64,
    m: &mut RunManifest,
) -> CliResult<Vec<smd::eval::EvalCase>> {
    let cfg_path = ckpt.join(TRAIN_CONFIG_FILE);
    let (heldout, src) = if cfg_path.exists() {
        (TrainConfig::from_kv_text(&read_text(&cfg_path)?)?.heldout, Source::Checkpoint)
    } else {
        (TrainConfig::default().heldout, Source::Default)
    };
    m.set("heldout", heldout, src);
    m.set("cases", cases, Source::Flag);
    if heldout == 0 || heldout > corpus.len() {
        return Err(CliError::Validation(format!(
            "held-out count {heldout} does not fit a corpus of {}",
            corpus.len()
        )));
    }
    let held = &corpus.utterances[corpus.len() - heldout..];
    let n = cases.min(held.len());
    if n == 0 {
        return Err(CliError::Validation("no evaluation cases requested".into()));
    }
    Ok(eval_cases(&held[..n], seed)?)
}

fn load_for_eval(ckpt: &Path, corpus: &Corpus) -> CliResult<SmdModel> {
    let (model, _) = SmdModel::load(ckpt)?;
    model.config().check_corpus(&corpus.spec)?;
    Ok(model)
}

fn cmd_eval(c: &Common, checkpoint: &Path, corpus_dir: &Path, iterations: usize, cases: usize) -> CliResult<()> {
    let out = require_out(c)?;
    let _lock = DirLock::acquire(out)?;
    let mut m = RunManifest::start("eval", 0);
    let seed = seed_of(c, &mut m);
    let ckpt = checkpoint_dir(checkpoint);
    m.input("checkpoint", &ckpt);
    m.input("corpus", corpus_dir);
    m.set("iterations", iterations, Source::Flag);
    let corpus = load_corpus(corpus_dir)?;
    let model = load_for_eval(&ckpt, &corpus)?;
    let cases = heldout_cases(&corpus, &ckpt, cases, seed, &mut m)?;
    let (summary, results) = evaluate(&model, &corpus.spec, &cases, iterations, seed)?;
    let mut text = summary.to_record();
    for (i, r) in results.iter().enumerate() {
        text.push_str(&format!(
            "case={i} per={} speaker_hits={} speaker_cells={} frames={}\n",
            r.per, r.speaker_hits, r.speaker_cells, r.frames
        ));
    }
    let path = out.join("eval.txt");
    smd::data_synth::write_atomic(&path, text.as_bytes())?;
    m.output("eval", &path);
    m.result("per", summary.per);
    m.result("speaker_consistency", summary.speaker_consistency);
    m.finish(out)?;
    print!("{}", summary.to_record());
    Ok(())
}

fn cmd_ablate(
    c: &Common,
    checkpoint: &Path,
    corpus_dir: &Path,
    iterations: &[usize],
    cases: usize,
    repeats: usize,
) -> CliResult<()> {
    let out = require_out(c)?;
    if iterations.contains(&0) {
        return Err(CliError::Validation("iteration counts must be >= 1".into()));
    }
    let _lock = DirLock::acquire(out)?;
    let mut m = RunManifest::start("ablate", 0);
    let seed = seed_of(c, &mut m);
    let ckpt = checkpoint_dir(checkpoint);
    m.input("checkpoint", &ckpt);
    m.input("corpus", corpus_dir);
    let list: Vec<String> = iterations.iter().map(|i| i.to_string()).collect();
    m.set("iterations", list.join(","), Source::Flag);
    m.set("repeats", repeats, Source::Flag);
    let corpus = load_corpus(corpus_dir)?;
    let model = load_for_eval(&ckpt, &corpus)?;
    let cases = heldout_cases(&corpus, &ckpt, cases, seed, &mut m)?;
    let rows = run_ablation(&model, &corpus.spec, &cases, iterations, seed, repeats)?;
    let records: String = rows.iter().map(|r| r.to_record()).collect();
    let table = format_ablation_table(&rows);
    let rec_path = out.join("ablation.txt");
    let table_path = out.join("ablation_table.txt");
    smd::data_synth::write_atomic(&rec_path, records.as_bytes())?;
    smd::data_synth::write_atomic(&table_path, table.as_bytes())?;
    m.output("records", &rec_path);
    m.output("table", &table_path);
    m.finish(out)?;
    print!("{table}");
    Ok(())
}

fn cmd_count_params(c: &Common) -> CliResult<()> {
    let mut m = RunManifest::start("count-params", 0);
    let preset = preset_of(c, &mut m)?;
    let spec = match &c.config {
        Some(p) => {
            m.input("spec", p);
            read_spec_file(p)?.0
        }
        None => CorpusSpec::default(),
    };
    let audit = audit_parameters(&ModelConfig::preset(preset, &spec))?;
    let table = audit.to_table();
    print!("{table}");
    if let Some(out) = &c.out {
        let _lock = DirLock::acquire(out)?;
        let path = out.join("params.txt");
        smd::data_synth::write_atomic(&path, table.as_bytes())?;
        m.output("params", &path);
        m.result("total", audit.total);
        m.finish(out)?;
    }
    Ok(())
}
