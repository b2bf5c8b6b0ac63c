use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const SMALL_SPEC: &str = "\
# small corpus for command-line tests
num_utterances = 40
min_phonemes = 4
max_phonemes = 8
";

const SMALL_TRAIN: &str = "\
batch_frames = 400
warmup_steps = 5
checkpoint_every = 10
heldout = 6
";

fn smd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smd")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn result(m: &Value, key: &str) -> f64 {
    m["results"][key].as_str().unwrap().parse().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn synth_corpus(root: &Path, name: &str, seed: &str) -> (PathBuf, Output) {
    let spec = write(root, "small.spec", SMALL_SPEC);
    let out = root.join(name);
    let o = smd(&["synth-data", "--seed", seed, "--config", p(&spec), "--out", p(&out)]);
    (out, o)
}

/// A corpus and a 30-step run, built once for the tests that need them.
struct Trained {
    _tmp: TempDir,
    corpus: PathBuf,
    run: PathBuf,
    untrained: PathBuf,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let (corpus, o) = synth_corpus(tmp.path(), "corpus", "3");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let cfg = write(tmp.path(), "train.cfg", SMALL_TRAIN);
        let run = tmp.path().join("run");
        let o = smd(&["train", "--corpus", p(&corpus), "--config", p(&cfg), "--steps", "30", "--out", p(&run)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let untrained = tmp.path().join("untrained");
        let brief = write(tmp.path(), "brief.cfg", &SMALL_TRAIN.replace("warmup_steps = 5", "warmup_steps = 1"));
        let o = smd(&["train", "--corpus", p(&corpus), "--config", p(&brief), "--steps", "2", "--out", p(&untrained)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        Trained {
            _tmp: tmp,
            corpus,
            run,
            untrained,
        }
    })
}

/// Prompt and text files taken from the first corpus utterance.
fn prompt_and_text(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = smd::data_synth::Corpus::load(&trained().corpus).unwrap();
    let u = &corpus.utterances[0];
    let mut grid = String::new();
    for t in 0..u.frames().min(6) {
        let row: Vec<String> = (0..u.grid.channels()).map(|c| u.grid.get(t, c).to_string()).collect();
        grid.push_str(&row.join(" "));
        grid.push('\n');
    }
    let text: Vec<String> = u.phonemes.iter().map(|x| x.to_string()).collect();
    (write(dir, "prompt.txt", &grid), write(dir, "text.txt", &text.join(" ")))
}

#[test]
fn synth_data_round_trips_with_a_stable_checksum() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, oa) = synth_corpus(tmp.path(), "a", "11");
    let (b, ob) = synth_corpus(tmp.path(), "b", "11");
    let (c, oc) = synth_corpus(tmp.path(), "c", "12");
    for o in [&oa, &ob, &oc] {
        assert_eq!(code(o), 0, "{}", stderr(o));
    }
    let sum = |d: &Path| manifest(d)["results"]["checksum"].as_str().unwrap().to_string();
    assert_eq!(sum(&a), sum(&b));
    assert_ne!(sum(&a), sum(&c));
    let loaded = smd::data_synth::Corpus::load(&a).unwrap();
    assert_eq!(loaded.len(), 40);
    assert_eq!(loaded.checksum(), sum(&a));
    let m = manifest(&a);
    assert_eq!(m["seed"], 11);
    assert_eq!(m["resolution"]["num_utterances"], "config");
    assert_eq!(m["resolution"]["num_channels"], "default");
    assert_eq!(m["resolution"]["seed"], "flag");
}

#[test]
fn codebook_smaller_than_vocabulary_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "bad.spec", "phoneme_vocab_size = 40\ncodebook_size = 20\n");
    let o = smd(&["synth-data", "--config", p(&spec), "--out", p(&tmp.path().join("c"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("phoneme_vocab_size"), "{}", stderr(&o));
}

#[test]
fn malformed_spec_names_the_line() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "bad.spec", "num_speakers = 4\nthis is not a pair\n");
    let o = smd(&["synth-data", "--config", p(&spec), "--out", p(&tmp.path().join("c"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn unknown_spec_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = write(tmp.path(), "bad.spec", "num_speakerz = 4\n");
    let o = smd(&["synth-data", "--config", p(&spec), "--out", p(&tmp.path().join("c"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("num_speakerz"), "{}", stderr(&o));
}

#[test]
fn training_lowers_the_loss_and_records_a_manifest() {
    let t = trained();
    let m = manifest(&t.run);
    let first = result(&m, "first_total_loss");
    let last = result(&m, "last_total_loss");
    assert!(last < first, "loss {first} -> {last}");
    assert_eq!(m["command"], "train");
    assert_eq!(m["resolution"]["total_steps"], "flag");
    assert_eq!(m["resolution"]["batch_frames"], "config");
    assert_eq!(m["resolution"]["peak_lr"], "default");
    assert!(t.run.join("checkpoint").is_dir());
    let log = fs::read_to_string(t.run.join("progress.log")).unwrap();
    assert_eq!(log.lines().count(), 30);
}

#[test]
fn missing_corpus_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = smd(&[
        "train",
        "--corpus",
        p(&tmp.path().join("nowhere")),
        "--out",
        p(&tmp.path().join("run")),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn synthesis_defaults_to_eight_iterations_and_is_seeded() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let (prompt, text) = prompt_and_text(tmp.path());
    let run = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        let o = smd(&[
            "synthesize",
            "--checkpoint",
            p(&t.run),
            "--prompt",
            p(&prompt),
            "--text",
            p(&text),
            "--seed",
            seed,
            "--out",
            p(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let a = run("a", "5");
    let b = run("b", "5");
    assert_eq!(
        fs::read_to_string(a.join("grid.txt")).unwrap(),
        fs::read_to_string(b.join("grid.txt")).unwrap()
    );
    let m = manifest(&a);
    assert_eq!(m["config"]["iterations"], "8");
    let n = smd::data_synth::CorpusSpec::default().num_channels as u64;
    assert_eq!(result(&m, "forward_passes") as u64, 8 + n - 1);
    let trace = fs::read_to_string(a.join("trace.txt")).unwrap();
    assert!(!trace.is_empty());
}

#[test]
fn zero_iterations_is_a_usage_error() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let (prompt, text) = prompt_and_text(tmp.path());
    let o = smd(&[
        "synthesize",
        "--checkpoint",
        p(&t.run),
        "--prompt",
        p(&prompt),
        "--text",
        p(&text),
        "--iterations",
        "0",
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn out_of_vocabulary_text_is_rejected() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let (prompt, _) = prompt_and_text(tmp.path());
    let text = write(tmp.path(), "bad.txt", "1 2 9999");
    let o = smd(&[
        "synthesize",
        "--checkpoint",
        p(&t.run),
        "--prompt",
        p(&prompt),
        "--text",
        p(&text),
        "--out",
        p(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("9999"), "{}", stderr(&o));
}

#[test]
fn ablation_writes_one_row_per_iteration_count() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("abl");
    let o = smd(&[
        "ablate",
        "--checkpoint",
        p(&t.run),
        "--corpus",
        p(&t.corpus),
        "--cases",
        "2",
        "--repeats",
        "1",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let records = fs::read_to_string(out.join("ablation.txt")).unwrap();
    let iters: Vec<&str> = records
        .lines()
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(
        iters,
        ["iterations=1", "iterations=4", "iterations=8", "iterations=16", "iterations=24"]
    );
}

#[test]
fn untrained_model_scores_near_chance() {
    let t = trained();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("eval");
    let o = smd(&[
        "eval",
        "--checkpoint",
        p(&t.untrained),
        "--corpus",
        p(&t.corpus),
        "--cases",
        "6",
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    let per = result(&m, "per");
    assert!(per > 0.5, "untrained PER {per}");
    assert_eq!(m["resolution"]["heldout"], "checkpoint");
    assert!(out.join("eval.txt").exists());
}

#[test]
fn count_params_lists_the_large_preset() {
    let o = smd(&["count-params", "--preset", "paper"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8(o.stdout).unwrap();
    for module in ["conformer", "total"] {
        assert!(table.lines().any(|l| l.starts_with(module)), "{table}");
    }
    assert!(table.lines().count() > 4);
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".smd.lock"), "").unwrap();
    let spec = write(tmp.path(), "small.spec", SMALL_SPEC);
    let o = smd(&["synth-data", "--config", p(&spec), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("lock"), "{}", stderr(&o));
    assert!(!out.join("manifest.json").exists());
}
