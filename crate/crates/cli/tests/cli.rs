use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use synthvox::audio::encode_wav;
use synthvox::dataset::{self, Label, MfccDataset, MfccRow};
use synthvox::synthetic::GaussianSpeaker;

fn synthvox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthvox"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tone(path: &Path, seconds: f64, rate: u32) {
    let n = (seconds * rate as f64) as usize;
    let samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            0.4 * (2.0 * PI * 220.0 * t).sin() + 0.2 * (2.0 * PI * 1330.0 * t).sin()
        })
        .collect();
    fs::write(path, encode_wav(&samples, 1, rate)).unwrap();
}

#[test]
fn extract_counts_frames_and_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let wav = tmp.path().join("clip.wav");
    tone(&wav, 24.0, 16_000);
    let (a, b) = (tmp.path().join("a.csv"), tmp.path().join("b.csv"));
    for out in [&a, &b] {
        let o = synthvox(&["extract", "--in", p(&wav), "--out", p(out), "--label", "0"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 1 + (24 * 16_000 - 400) / 160);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let (rows, rejected) = dataset::parse_and_filter(&text);
    assert_eq!(rejected, 0);
    assert!(rows.iter().all(|r| r.label == Label::Other));
}

#[test]
fn extract_resamples_to_pipeline_rate() {
    let tmp = tempfile::tempdir().unwrap();
    let wav = tmp.path().join("clip.wav");
    tone(&wav, 2.0, 44_100);
    let out = tmp.path().join("rows.csv");
    let o = synthvox(&["extract", "--in", p(&wav), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = fs::read_to_string(&out).unwrap().lines().count();
    assert_eq!(lines, 1 + (2 * 16_000 - 400) / 160);
}

#[test]
fn extract_trims_silent_edges() {
    let tmp = tempfile::tempdir().unwrap();
    let wav = tmp.path().join("padded.wav");
    let mut samples = vec![0.0; 16_000];
    samples.extend((0..16_000).map(|i| 0.5 * (2.0 * PI * 440.0 * i as f64 / 16_000.0).sin()));
    samples.extend(vec![0.0; 8_000]);
    fs::write(&wav, encode_wav(&samples, 1, 16_000)).unwrap();
    let (full, trimmed) = (tmp.path().join("full.csv"), tmp.path().join("trimmed.csv"));
    let o = synthvox(&["extract", "--in", p(&wav), "--out", p(&full)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = synthvox(&["extract", "--in", p(&wav), "--out", p(&trimmed), "--trim", "0.01"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&full).unwrap().lines().count(), 1 + (40_000 - 400) / 160);
    let kept = fs::read_to_string(&trimmed).unwrap().lines().count();
    assert!((96..=98).contains(&kept), "{kept} rows");
}

#[test]
fn extract_without_inputs_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = synthvox(&["extract", "--out", p(&tmp.path().join("x.csv"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn extract_reports_each_bad_file() {
    let tmp = tempfile::tempdir().unwrap();
    let good = tmp.path().join("good.wav");
    tone(&good, 1.0, 16_000);
    let bad = tmp.path().join("bad.wav");
    fs::write(&bad, b"not audio at all").unwrap();
    let out = tmp.path().join("rows.csv");
    let o = synthvox(&["extract", "--in", p(&bad), p(&good), "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bad.wav"));
    assert!(!stderr(&o).lines().any(|l| l.starts_with("error:") && l.contains("good.wav")));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 1 + (16_000 - 400) / 160);
}

fn repeated_line_corpus(path: &Path, copies: usize) -> String {
    let row = MfccRow::new(std::array::from_fn(|i| (i as f64 - 12.5) * 0.73), Label::Speaker);
    let line = dataset::serialize_row(&row).unwrap();
    fs::write(path, line.repeat(copies)).unwrap();
    line
}

const LSTM_CONFIG: &str = "schema_version = 1\nseed = 11\n\n[lstm]\nunits = 64\nlayers = 1\nepochs = 60\nseq_len = 64\n\
lr = 0.01\nmin_lr = 0.0001\nbatch_size = 4\ndropout = 0.0\nclip_norm = 5.0\n";

#[test]
fn train_gen_is_deterministic_and_generate_fills_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.csv");
    let line = repeated_line_corpus(&corpus, 60);
    let config = tmp.path().join("gen.toml");
    fs::write(&config, LSTM_CONFIG).unwrap();
    let (a, b) = (tmp.path().join("a.ckpt"), tmp.path().join("b.ckpt"));
    for out in [&a, &b] {
        let o = synthvox(&["train-gen", "--model", "lstm", "--corpus", p(&corpus), "--config", p(&config), "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let curve = fs::read_to_string(tmp.path().join("a.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 61);

    let rows = tmp.path().join("rows.csv");
    let o = synthvox(&["generate", "--ckpt", p(&a), "--rows", "40", "--out", p(&rows), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&rows).unwrap();
    let (parsed, rejected) = dataset::parse_and_filter(&text);
    assert_eq!((parsed.len(), rejected), (40, 0));
    assert!(parsed.iter().all(|r| r.label == Label::Speaker));
    assert!(text.lines().all(|l| format!("{l}\n") == line));
    let stats = fs::read_to_string(tmp.path().join("rows.stats.txt")).unwrap();
    let rate: f64 = stats.trim().rsplit('=').next().unwrap().parse().unwrap();
    assert!(rate < 0.05, "{stats}");

    let empty = tmp.path().join("none.csv");
    let o = synthvox(&["generate", "--ckpt", p(&a), "--rows", "0", "--out", p(&empty)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&empty).unwrap(), "");
}

#[test]
fn train_gen_names_missing_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.csv");
    repeated_line_corpus(&corpus, 5);
    let config = tmp.path().join("gen.toml");
    fs::write(&config, LSTM_CONFIG).unwrap();
    let out = tmp.path().join("m.ckpt");
    let o = synthvox(&["train-gen", "--model", "gpt", "--corpus", p(&corpus), "--config", p(&config), "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing key `gpt`"), "{}", stderr(&o));
    fs::write(&config, LSTM_CONFIG.replace("seq_len = 64\n", "")).unwrap();
    let o = synthvox(&["train-gen", "--model", "lstm", "--corpus", p(&corpus), "--config", p(&config), "--out", p(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("seq_len"), "{}", stderr(&o));
}

#[test]
fn train_gen_rejects_out_of_vocabulary_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus.csv");
    fs::write(&corpus, "1.00000,2.0000x,1\n".repeat(20)).unwrap();
    let config = tmp.path().join("gen.toml");
    fs::write(&config, LSTM_CONFIG).unwrap();
    let o = synthvox(&["train-gen", "--model", "lstm", "--corpus", p(&corpus), "--config", p(&config), "--out", p(&tmp.path().join("m.ckpt"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("position 14"), "{}", stderr(&o));
}

struct MatrixFixture {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
}

fn matrix_fixture(extra: &str) -> MatrixFixture {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    let speaker = GaussianSpeaker::random(1, 9.0, 0.0, 21);
    speaker.sample(300, Label::Speaker, 1).write_csv(dir.join("pos.csv")).unwrap();
    let mut negatives = MfccDataset::new();
    for s in 0..3 {
        negatives.extend(&GaussianSpeaker::random(2, 9.0, 0.3, 100 + s).sample(700, Label::Other, s));
    }
    negatives.write_csv(dir.join("neg.csv")).unwrap();
    let config = format!(
        "schema_version = 1\nmaster_seed = 9\noutput_dir = \"runs\"\nnegative = [\"neg.csv\"]\nnegative_rows = 1000\n\
         reps = 2\nworkers = 2\n{extra}\n[classifier]\npatience = 5\n\n[[subjects]]\nid = \"alice\"\npositive = [\"pos.csv\"]\n"
    );
    fs::write(dir.join("matrix.toml"), config).unwrap();
    MatrixFixture { _tmp: tmp, dir }
}

#[test]
fn baseline_only_matrix_trains_no_generator() {
    let f = matrix_fixture("sizes = [0]\nbaselines = [\"gnb\"]");
    let o = synthvox(&["run-matrix", "--config", p(&f.dir.join("matrix.toml"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let runs = f.dir.join("runs");
    assert!(!runs.join("cache").exists());
    let results = fs::read_to_string(runs.join("alice/results.csv")).unwrap();
    let arms: Vec<&str> = results.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(arms, ["baseline", "baseline", "gnb"]);
    let md = fs::read_to_string(runs.join("report.md")).unwrap();
    let matrix_rows = md.lines().filter(|l| l.starts_with("| - | 0 |")).count();
    assert_eq!(matrix_rows, 1, "{md}");
    assert!(runs.join("alice/baseline/0/rep1/model.ckpt").is_file());
}

#[test]
fn failed_cells_are_recorded_and_others_continue() {
    let f = matrix_fixture(
        "sizes = [0, 20]\ngenerators = [\"lstm\"]\nbaselines = []\ncorpus_rows = 1\n\n[lstm]\nunits = 64\nlayers = 1\n\
         epochs = 1\nseq_len = 1000\nlr = 0.01\nmin_lr = 0.01\nbatch_size = 1\ndropout = 0.0\nclip_norm = 5.0\n",
    );
    let o = synthvox(&["run-matrix", "--config", p(&f.dir.join("matrix.toml"))]);
    assert!(!o.status.success());
    let runs = f.dir.join("runs");
    let results = fs::read_to_string(runs.join("alice/results.csv")).unwrap();
    let status: Vec<(&str, &str)> = results
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[1], f[4])
        })
        .collect();
    assert_eq!(status, [("baseline", "ok"), ("baseline", "ok"), ("lstm", "failed"), ("lstm", "failed")]);
    assert!(fs::read_to_string(runs.join("alice/lstm/20/rep0/error.txt")).unwrap().contains("too short"));
    let md = fs::read_to_string(runs.join("report.md")).unwrap();
    assert!(md.contains("| LSTM | 20 | - | - | - | - | 0/2 | failed |"), "{md}");
}

#[test]
fn report_renders_both_formats_and_rejects_empty_dirs() {
    let f = matrix_fixture("sizes = [0]\nbaselines = [\"logreg\", \"rforest\"]");
    let o = synthvox(&["run-matrix", "--config", p(&f.dir.join("matrix.toml"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let runs = f.dir.join("runs");
    let md = synthvox(&["report", "--runs", p(&runs), "--format", "md"]);
    assert!(md.status.success());
    assert_eq!(String::from_utf8(md.stdout).unwrap(), fs::read_to_string(runs.join("report.md")).unwrap());
    let out = f.dir.join("r.csv");
    let csv = synthvox(&["report", "--runs", p(&runs), "--format", "csv", "--out", p(&out)]);
    assert!(csv.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap(), fs::read_to_string(runs.join("report.csv")).unwrap());

    let empty = f.dir.join("empty");
    fs::create_dir(&empty).unwrap();
    let o = synthvox(&["report", "--runs", p(&empty)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no results.csv"));
}
