//! The per-subject run matrix.
//!
//! A run trains each generator once per subject on the subject's training
//! positives, samples synthetic rows, pretrains the classifier on them,
//! transfers the weights to the real task and evaluates on the validation
//! partition. The size-0 cell is the no-transfer baseline and is shared by
//! every generator. Synthetic rows are drawn once per generator at the
//! largest size and every smaller size takes a prefix; repetitions vary the
//! classifier seeds only. Output layout under `output_dir`:
//!
//! ```text
//! cache/<sha256>/generator.ckpt, loss.csv
//! <subject>/results.csv
//! <subject>/baseline/0/rep<k>/model.ckpt, train_record.csv, metrics.csv
//! <subject>/<generator>/generator.ckpt, loss.csv, generation.txt
//! <subject>/<generator>/<size>/rep<k>/pretrain.ckpt, model.ckpt, synthetic.csv, train_record.csv, metrics.csv
//! <subject>/classical/<kind>/metrics.csv
//! report.md, report.csv
//! ```
//!
//! A failed cell leaves `error.txt` in its directory instead of metrics.

mod generate;
pub mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use generate::{
    generate_rows, GenerationStats, Generator, GeneratorKind, BLOCK_CHARS, MAX_REJECTION, QUALITY_WINDOW,
};
use report::{CellRow, CellStatus};

use crate::audio::{self, AudioError, STEP_SECS, WINDOW_SECS};
use crate::baselines::{self, BaselineError, BaselineKind};
use crate::classifier::{self, ClassifierError, Init, TrainOptions};
use crate::dataset::{self, DatasetError, Label, MfccDataset, MfccRow, Provenance};
use crate::gpt::{self, GptConfig, GptError};
use crate::lstm::{self, LstmConfig, LstmError};
use crate::mfcc::{self, MfccError, MfccExtractor};
use crate::nn::{Checkpoint, CheckpointError};
use crate::seed::derive_seed;
use crate::PIPELINE_RATE;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SIZES: [usize; 5] = [0, 2500, 5000, 7500, 10000];
pub const DEFAULT_NEGATIVE_ROWS: usize = 10_000;

pub const ENV_OUTPUT_DIR: &str = "SYNTHVOX_OUTPUT_DIR";
/// Platform path-list syntax, as in `PATH`.
pub const ENV_NEGATIVE: &str = "SYNTHVOX_NEGATIVE";
pub const ENV_WORKERS: &str = "SYNTHVOX_WORKERS";

#[derive(Error, Debug)]
pub enum ExperimentError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Mfcc(#[from] MfccError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Lstm(#[from] LstmError),
    #[error(transparent)]
    Gpt(#[from] GptError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    Config(String),
    /// The generator for this cell's arm could not be trained or sampled.
    #[error("no synthetic data: {0}")]
    NoSynthetic(String),
    #[error("generation quality error: {rate:.4} of lines rejected over the last {QUALITY_WINDOW} blocks ({blocks} blocks drawn)")]
    GenerationQuality { blocks: usize, rate: f64 },
    #[error("{path:?}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("failed to access {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no results.csv found under {0:?}")]
    EmptyRuns(PathBuf),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

pub(crate) fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Front-end settings applied to audio inputs; CSV inputs bypass them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractOptions {
    /// Clips are resampled to this rate before framing.
    pub sample_rate: u32,
    /// Leading and trailing samples quieter than this are dropped; `None` keeps them.
    pub trim_threshold: Option<f64>,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        Self {
            sample_rate: PIPELINE_RATE,
            trim_threshold: None,
        }
    }
}

impl ExtractOptions {
    /// The analysis window must fit the FFT size at `sample_rate`.
    pub fn validate(&self) -> Result<()> {
        let (window, step) = audio::window_geometry(self.sample_rate, WINDOW_SECS, STEP_SECS);
        if window == 0 || step == 0 || window > mfcc::DEFAULT_NFFT {
            return Err(ExperimentError::Config(format!(
                "sample_rate {} gives a {window}-sample window; it must span 1..={} samples",
                self.sample_rate,
                mfcc::DEFAULT_NFFT
            )));
        }
        if let Some(t) = self.trim_threshold {
            if !(t.is_finite() && t >= 0.0) {
                return Err(ExperimentError::Config(format!("trim_threshold must be finite and >= 0, got {t}")));
            }
        }
        Ok(())
    }
}

/// MFCC rows for every analysis window of a clip after optional trimming and resampling.
pub fn extract_clip(clip: &audio::AudioClip, label: Label, opts: &ExtractOptions) -> Result<MfccDataset> {
    opts.validate()?;
    let trimmed;
    let clip = match opts.trim_threshold {
        Some(t) => {
            trimmed = audio::trim_silence(clip, t)?;
            &trimmed
        }
        None => clip,
    };
    let clip = audio::resample(clip, opts.sample_rate)?;
    let extractor = MfccExtractor::standard(opts.sample_rate)?;
    let provenance = match label {
        Label::Speaker => Provenance::RealPositive,
        Label::Other => Provenance::RealNegative,
    };
    let mut ds = MfccDataset::new();
    for frame in audio::frame_signal(&clip, WINDOW_SECS, STEP_SECS)? {
        let coefficients = extractor.extract(&frame)?;
        ds.push(MfccRow { coefficients, label }, provenance);
    }
    Ok(ds)
}

/// Rows from a serialized `.csv` file or from audio, all carrying `label`.
/// Malformed CSV lines are an error.
pub fn extract_rows(path: &Path, label: Label, opts: &ExtractOptions) -> Result<MfccDataset> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let provenance = match label {
        Label::Speaker => Provenance::RealPositive,
        Label::Other => Provenance::RealNegative,
    };
    if is_csv {
        let (mut ds, rejected) = MfccDataset::read_csv(path, provenance)?;
        if rejected > 0 {
            return Err(ExperimentError::Input {
                path: path.to_path_buf(),
                message: format!("{rejected} malformed lines"),
            });
        }
        ds.relabel(label);
        Ok(ds)
    } else {
        let clip = audio::read_audio(path)?;
        extract_clip(&clip, label, opts).map_err(|e| ExperimentError::Input {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Concatenation of [`extract_rows`] over `paths`, in order.
pub fn load_rows(paths: &[PathBuf], label: Label, opts: &ExtractOptions) -> Result<MfccDataset> {
    let mut ds = MfccDataset::new();
    for path in paths {
        ds.extend(&extract_rows(path, label, opts)?);
    }
    Ok(ds)
}

/// Hyperparameters for both generator families.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneratorSettings {
    pub lstm: LstmConfig,
    pub gpt: GptConfig,
}

#[derive(Debug, Clone)]
pub struct TrainedGenerator {
    pub generator: Generator,
    /// Mean training cross-entropy per epoch, nats per character.
    pub history: Vec<f64>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_loss: f64,
}

pub fn train_generator(
    kind: GeneratorKind,
    corpus: &str,
    settings: &GeneratorSettings,
    seed: u64,
) -> Result<TrainedGenerator> {
    Ok(match kind {
        GeneratorKind::Lstm => {
            let t = lstm::train_char_lstm(corpus, &settings.lstm, seed)?;
            TrainedGenerator {
                generator: Generator::Lstm(t.model),
                history: t.history,
                best_epoch: t.best_epoch,
                best_loss: t.best_loss,
            }
        }
        GeneratorKind::Gpt => {
            let t = gpt::train_transformer(corpus, &settings.gpt, seed)?;
            TrainedGenerator {
                generator: Generator::Gpt(t.model),
                history: t.history,
                best_epoch: t.best_epoch,
                best_loss: t.best_loss,
            }
        }
    })
}

pub fn loss_curve_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, loss) in history.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, loss));
    }
    out
}

pub fn parse_loss_curve(text: &str) -> Option<Vec<f64>> {
    let mut lines = text.lines();
    if lines.next()? != "epoch,loss" {
        return None;
    }
    lines
        .map(|l| l.split_once(',').and_then(|(_, v)| v.parse().ok()))
        .collect()
}

/// Content address of a generator training run.
pub fn generator_cache_key(kind: GeneratorKind, corpus: &str, settings: &GeneratorSettings, seed: u64) -> String {
    let params = match kind {
        GeneratorKind::Lstm => toml::to_string(&settings.lstm),
        GeneratorKind::Gpt => toml::to_string(&settings.gpt),
    }
    .expect("generator configs serialize");
    let mut h = Sha256::new();
    h.update(b"generator-v1\0");
    h.update(kind.name().as_bytes());
    h.update(b"\0");
    h.update(params.as_bytes());
    h.update(seed.to_le_bytes());
    h.update(Sha256::digest(corpus.as_bytes()));
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Trains through the cache at `cache_root`. Returns the generator, its loss
/// curve, and whether the entry already existed.
pub fn cached_generator(
    cache_root: &Path,
    kind: GeneratorKind,
    corpus: &str,
    settings: &GeneratorSettings,
    seed: u64,
) -> Result<(Generator, Vec<f64>, bool)> {
    let dir = cache_root.join(generator_cache_key(kind, corpus, settings, seed));
    let ckpt_path = dir.join("generator.ckpt");
    let loss_path = dir.join("loss.csv");
    if ckpt_path.is_file() && loss_path.is_file() {
        let history = parse_loss_curve(&read_file(&loss_path)?).ok_or_else(|| ExperimentError::Input {
            path: loss_path.clone(),
            message: "unreadable loss curve".into(),
        })?;
        let generator = Generator::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?;
        if generator.kind() == kind {
            return Ok((generator, history, true));
        }
    }
    let trained = train_generator(kind, corpus, settings, seed)?;
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    trained.generator.to_checkpoint().save(&ckpt_path)?;
    write_file(&loss_path, loss_curve_csv(&trained.history))?;
    Ok((trained.generator, trained.history, false))
}

/// Config read by `train-gen`. Only the table for the requested model is needed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainGenConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub lstm: Option<LstmConfig>,
    pub gpt: Option<GptConfig>,
}

impl TrainGenConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        check_schema(cfg.schema_version)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_file(path)?)
    }

    /// Settings for `kind`; the other family keeps its defaults.
    pub fn settings_for(&self, kind: GeneratorKind) -> Result<GeneratorSettings> {
        let missing = || ExperimentError::Config(format!("missing key `{}`", kind.name()));
        let mut settings = GeneratorSettings::default();
        match kind {
            GeneratorKind::Lstm => settings.lstm = self.lstm.clone().ok_or_else(missing)?,
            GeneratorKind::Gpt => settings.gpt = self.gpt.clone().ok_or_else(missing)?,
        }
        Ok(settings)
    }
}

fn check_schema(version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(ExperimentError::Config(format!(
            "schema_version {version} is not supported (expected {SCHEMA_VERSION})"
        )));
    }
    Ok(())
}

/// Classifier optimizer settings. Shuffle seeds are derived per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSettings {
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub max_epochs: Option<usize>,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        let d = TrainOptions::default();
        Self {
            batch_size: d.batch_size,
            lr: d.lr,
            patience: d.patience,
            max_epochs: d.max_epochs,
        }
    }
}

impl ClassifierSettings {
    pub fn options(&self, shuffle_seed: u64) -> TrainOptions {
        TrainOptions {
            batch_size: self.batch_size,
            lr: self.lr,
            patience: self.patience,
            max_epochs: self.max_epochs,
            shuffle_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectConfig {
    /// Directory name under the output root.
    pub id: String,
    /// Audio or serialized CSV files of the target speaker.
    pub positive: Vec<PathBuf>,
}

fn default_sizes() -> Vec<usize> {
    DEFAULT_SIZES.to_vec()
}
fn default_generators() -> Vec<GeneratorKind> {
    vec![GeneratorKind::Lstm, GeneratorKind::Gpt]
}
fn default_reps() -> usize {
    1
}
fn default_val_fraction() -> f64 {
    dataset::DEFAULT_VAL_FRACTION
}
fn default_negative_rows() -> usize {
    DEFAULT_NEGATIVE_ROWS
}
fn default_temperature() -> f64 {
    1.0
}
fn default_baselines() -> Vec<BaselineKind> {
    BaselineKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Files pooled into the negative source corpus.
    pub negative: Vec<PathBuf>,
    pub subjects: Vec<SubjectConfig>,
    /// Synthetic set sizes; 0 is the baseline.
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_generators")]
    pub generators: Vec<GeneratorKind>,
    /// Independent repetitions of every classifier cell.
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Rows assembled from the negative source per subject.
    #[serde(default = "default_negative_rows")]
    pub negative_rows: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Caps the training positives fed to the generators.
    #[serde(default)]
    pub corpus_rows: Option<usize>,
    #[serde(default = "default_baselines")]
    pub baselines: Vec<BaselineKind>,
    /// Work-pool width; defaults to the available parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub lstm: LstmConfig,
    #[serde(default)]
    pub gpt: GptConfig,
    #[serde(default)]
    pub classifier: ClassifierSettings,
    #[serde(default)]
    pub extract: ExtractOptions,
}

impl ExperimentConfig {
    /// Parses, applies environment overrides, resolves relative paths
    /// against `base_dir` and validates.
    pub fn from_toml(text: &str, base_dir: &Path, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        check_schema(cfg.schema_version)?;
        cfg.apply_env(env)?;
        cfg.resolve_paths(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&read_file(path)?, base, |k| std::env::var(k).ok())
    }

    fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(dir) = env(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Some(list) = env(ENV_NEGATIVE) {
            self.negative = std::env::split_paths(&list).collect();
        }
        if let Some(w) = env(ENV_WORKERS) {
            let n = w
                .parse()
                .map_err(|_| ExperimentError::Config(format!("{ENV_WORKERS} must be a positive integer, got {w:?}")))?;
            self.workers = Some(n);
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        self.negative.iter_mut().for_each(fix);
        for s in &mut self.subjects {
            s.positive.iter_mut().for_each(fix);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.subjects.is_empty() {
            return bad("at least one subject is required".into());
        }
        let mut ids = BTreeSet::new();
        for s in &self.subjects {
            let safe = !s.id.is_empty()
                && s.id != "cache"
                && s.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !safe {
                return bad(format!("subject id {:?} must be non-empty ASCII letters, digits, '_' or '-' and not \"cache\"", s.id));
            }
            if !ids.insert(&s.id) {
                return bad(format!("duplicate subject id {:?}", s.id));
            }
            if s.positive.is_empty() {
                return bad(format!("subject {:?} lists no positive files", s.id));
            }
        }
        if self.negative.is_empty() {
            return bad("at least one negative file is required".into());
        }
        let all_paths = self.negative.iter().chain(self.subjects.iter().flat_map(|s| &s.positive));
        for p in all_paths {
            if !p.is_file() {
                return bad(format!("input file {p:?} does not exist"));
            }
        }
        if self.sizes.is_empty() {
            return bad("sizes must not be empty".into());
        }
        if self.sizes.iter().collect::<BTreeSet<_>>().len() != self.sizes.len() {
            return bad("sizes must be distinct".into());
        }
        if self.generators.iter().collect::<BTreeSet<_>>().len() != self.generators.len() {
            return bad("generators must be distinct".into());
        }
        if self.baselines.iter().collect::<BTreeSet<_>>().len() != self.baselines.len() {
            return bad("baselines must be distinct".into());
        }
        if self.reps == 0 {
            return bad("reps must be positive".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.negative_rows == 0 {
            return bad("negative_rows must be positive".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.corpus_rows == Some(0) {
            return bad("corpus_rows must be positive".into());
        }
        self.extract.validate()?;
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        if self.needs_generators() {
            for kind in &self.generators {
                match kind {
                    GeneratorKind::Lstm => self.lstm.validate()?,
                    GeneratorKind::Gpt => self.gpt.validate()?,
                }
            }
        }
        self.classifier.options(0).validate()?;
        Ok(())
    }

    pub fn needs_generators(&self) -> bool {
        self.sizes.iter().any(|&s| s > 0)
    }

    pub fn settings(&self) -> GeneratorSettings {
        GeneratorSettings {
            lstm: self.lstm.clone(),
            gpt: self.gpt.clone(),
        }
    }

    fn transfer_sizes(&self) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.sizes.iter().copied().filter(|&s| s > 0).collect();
        sizes.sort_unstable();
        sizes
    }
}

/// Per-rep seeds shared by the baseline and every transfer cell of that rep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RepSeeds {
    pub init: u64,
    pub shuffle: u64,
}

impl RepSeeds {
    pub fn new(master: u64, subject: &str, rep: usize) -> Self {
        let r = rep.to_string();
        Self {
            init: derive_seed(master, &["finetune-init", subject, &r]),
            shuffle: derive_seed(master, &["finetune-shuffle", subject, &r]),
        }
    }
}

pub fn split_seed(master: u64, subject: &str) -> u64 {
    derive_seed(master, &["split", subject])
}

/// Real data for one subject, before splitting.
#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: String,
    pub positives: MfccDataset,
    pub negatives: MfccDataset,
}

impl SubjectData {
    /// Positives followed by negatives.
    pub fn real(&self) -> MfccDataset {
        let mut ds = self.positives.clone();
        ds.extend(&self.negatives);
        ds
    }
}

/// Training-partition positives as generator text, capped at `corpus_rows`.
pub fn generator_corpus(real: &MfccDataset, split_seed: u64, val_fraction: f64, corpus_rows: Option<usize>) -> Result<String> {
    let (train, _) = dataset::split(real, val_fraction, split_seed)?;
    let rows: Vec<MfccRow> = train
        .rows()
        .iter()
        .filter(|r| r.label == Label::Speaker)
        .take(corpus_rows.unwrap_or(usize::MAX))
        .copied()
        .collect();
    Ok(MfccDataset::from_rows(rows, Provenance::RealPositive).to_text()?)
}

fn training_negatives(real: &MfccDataset, split_seed: u64, val_fraction: f64) -> Result<MfccDataset> {
    let (train, _) = dataset::split(real, val_fraction, split_seed)?;
    let idx: Vec<usize> = (0..train.len()).filter(|&i| train.rows()[i].label == Label::Other).collect();
    Ok(train.subset(&idx))
}

#[derive(Debug, Clone)]
pub struct MatrixOutcome {
    pub rows: Vec<CellRow>,
    pub report_md: PathBuf,
    pub report_csv: PathBuf,
}

impl MatrixOutcome {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != CellStatus::Ok).count()
    }
}

/// Shared read-only inputs of one subject's cells.
struct SubjectCtx<'a> {
    cfg: &'a ExperimentConfig,
    id: &'a str,
    dir: PathBuf,
    real: MfccDataset,
    split_seed: u64,
    pretrain_negatives: MfccDataset,
}

enum Job {
    Baseline(usize),
    Transfer(GeneratorKind, usize, usize),
    Classical(BaselineKind),
}

/// Runs every configured subject and renders the report over the whole output directory.
pub fn run_matrix(cfg: &ExperimentConfig) -> Result<MatrixOutcome> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| ExperimentError::Config(format!("cannot build worker pool: {e}")))?;
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let negative_source = load_rows(&cfg.negative, Label::Other, &cfg.extract)?;
    let mut rows = Vec::new();
    for subject in &cfg.subjects {
        let positives = load_rows(&subject.positive, Label::Speaker, &cfg.extract)?;
        let neg_seed = derive_seed(cfg.master_seed, &["negatives", &subject.id]);
        let negatives = dataset::assemble_negative_corpus(&negative_source, cfg.negative_rows, neg_seed)?;
        let data = SubjectData {
            id: subject.id.clone(),
            positives,
            negatives,
        };
        rows.extend(pool.install(|| run_subject(cfg, &data))?);
    }
    let runs = report::load_runs(&cfg.output_dir)?;
    let report_md = cfg.output_dir.join("report.md");
    let report_csv = cfg.output_dir.join("report.csv");
    write_file(&report_md, report::render_markdown(&runs))?;
    write_file(&report_csv, report::render_csv(&runs))?;
    Ok(MatrixOutcome {
        rows,
        report_md,
        report_csv,
    })
}

/// One subject's matrix; runs on the current rayon pool. Writes `results.csv`.
pub fn run_subject(cfg: &ExperimentConfig, data: &SubjectData) -> Result<Vec<CellRow>> {
    let dir = cfg.output_dir.join(&data.id);
    let real = data.real();
    real.require_both_classes()?;
    let split_seed = split_seed(cfg.master_seed, &data.id);
    let pretrain_negatives = training_negatives(&real, split_seed, cfg.val_fraction)?;
    let sizes = cfg.transfer_sizes();
    let mut pools: Vec<(GeneratorKind, std::result::Result<MfccDataset, String>)> = Vec::new();
    if let Some(&largest) = sizes.last() {
        let corpus = generator_corpus(&real, split_seed, cfg.val_fraction, cfg.corpus_rows)?;
        let settings = cfg.settings();
        let cache = cfg.output_dir.join("cache");
        pools = cfg
            .generators
            .par_iter()
            .map(|&kind| {
                let pool = synthetic_pool(cfg, &data.id, &dir, &cache, kind, &corpus, &settings, largest);
                (kind, pool.map_err(|e| e.to_string()))
            })
            .collect();
    }
    let ctx = SubjectCtx {
        cfg,
        id: &data.id,
        dir,
        real,
        split_seed,
        pretrain_negatives,
    };
    let mut jobs: Vec<Job> = (0..cfg.reps).map(Job::Baseline).collect();
    for &kind in if sizes.is_empty() { &[][..] } else { &cfg.generators[..] } {
        for &size in &sizes {
            jobs.extend((0..cfg.reps).map(|k| Job::Transfer(kind, size, k)));
        }
    }
    jobs.extend(cfg.baselines.iter().map(|&k| Job::Classical(k)));
    let rows: Vec<CellRow> = jobs
        .par_iter()
        .map(|job| match *job {
            Job::Baseline(rep) => baseline_cell(&ctx, rep),
            Job::Transfer(kind, size, rep) => {
                let pool = &pools.iter().find(|(k, _)| *k == kind).expect("every generator has a pool").1;
                transfer_cell(&ctx, kind, pool, size, rep)
            }
            Job::Classical(kind) => classical_cell(&ctx, kind),
        })
        .collect();
    write_file(&ctx.dir.join("results.csv"), report::results_csv(&rows))?;
    Ok(rows)
}

/// Trains (or loads) one generator and draws `rows` synthetic rows from it.
/// Every transfer cell of this generator uses a prefix of the draw.
#[allow(clippy::too_many_arguments)]
fn synthetic_pool(
    cfg: &ExperimentConfig,
    subject: &str,
    dir: &Path,
    cache: &Path,
    kind: GeneratorKind,
    corpus: &str,
    settings: &GeneratorSettings,
    rows: usize,
) -> Result<MfccDataset> {
    let seed = derive_seed(cfg.master_seed, &["generator", subject, kind.name()]);
    let (generator, history, hit) = cached_generator(cache, kind, corpus, settings, seed)?;
    log::info!("{subject} {kind}: generator {}", if hit { "loaded from cache" } else { "trained" });
    let gdir = dir.join(kind.name());
    write_file(&gdir.join("generator.ckpt"), generator.to_checkpoint().to_bytes())?;
    write_file(&gdir.join("loss.csv"), loss_curve_csv(&history))?;
    let sample_seed = derive_seed(cfg.master_seed, &["generate", subject, kind.name()]);
    let (pool, stats) = generate_rows(&generator, rows, cfg.temperature, sample_seed)?;
    write_file(&gdir.join("generation.txt"), format!("{}\n", stats.summary()))?;
    log::info!("{subject} {kind}: {}", stats.summary());
    Ok(pool)
}

fn rep_dir(base: &Path, rep: usize) -> PathBuf {
    base.join(format!("rep{rep}"))
}

/// Records a cell outcome, writing `error.txt` on failure.
fn finish(dir: &Path, row: Result<CellRow>, template: CellRow) -> CellRow {
    match row {
        Ok(r) => r,
        Err(e) => {
            let message = e.to_string();
            log::warn!("{} {} size {} rep {} failed: {message}", template.subject, template.arm, template.size, template.rep);
            let _ = write_file(&dir.join("error.txt"), format!("{message}\n"));
            CellRow {
                status: CellStatus::Failed,
                message,
                ..template
            }
        }
    }
}

fn write_finetune(dir: &Path, out: &classifier::FinetuneOutcome) -> Result<()> {
    write_file(&dir.join("model.ckpt"), out.model.to_checkpoint().to_bytes())?;
    write_file(&dir.join("train_record.csv"), out.record.to_csv())?;
    write_file(
        &dir.join("metrics.csv"),
        format!("{}\n{}\n", classifier::MetricsReport::csv_header(), out.metrics.csv_row()),
    )
}

fn baseline_cell(ctx: &SubjectCtx, rep: usize) -> CellRow {
    let dir = rep_dir(&ctx.dir.join("baseline").join("0"), rep);
    let template = CellRow::pending(ctx.id, report::BASELINE_ARM, 0, rep);
    let run = || -> Result<CellRow> {
        let seeds = RepSeeds::new(ctx.cfg.master_seed, ctx.id, rep);
        let opts = ctx.cfg.classifier.options(seeds.shuffle);
        let out = classifier::finetune(&Init::Fresh(seeds.init), &ctx.real, ctx.split_seed, ctx.cfg.val_fraction, &opts)?;
        write_finetune(&dir, &out)?;
        Ok(CellRow::completed(template.clone(), &out.metrics, Some(&out.record)))
    };
    finish(&dir, run(), template.clone())
}

/// Pretrains on the first `size` synthetic rows, then fine-tunes on the real data.
fn transfer_cell(
    ctx: &SubjectCtx,
    kind: GeneratorKind,
    pool: &std::result::Result<MfccDataset, String>,
    size: usize,
    rep: usize,
) -> CellRow {
    let dir = rep_dir(&ctx.dir.join(kind.name()).join(size.to_string()), rep);
    let template = CellRow::pending(ctx.id, kind.name(), size, rep);
    let run = || -> Result<CellRow> {
        let pool = pool
            .as_ref()
            .map_err(|m| ExperimentError::NoSynthetic(m.clone()))?;
        let synth = pool.subset(&(0..size).collect::<Vec<_>>());
        write_file(&dir.join("synthetic.csv"), synth.to_text()?)?;
        let (s, r) = (size.to_string(), rep.to_string());
        let stage = |name: &str| derive_seed(ctx.cfg.master_seed, &[name, ctx.id, kind.name(), &s, &r]);
        let pretrained = classifier::pretrain_on_synthetic(
            &synth,
            &ctx.pretrain_negatives,
            stage("pretrain-split"),
            stage("pretrain-init"),
            &ctx.cfg.classifier.options(stage("pretrain-shuffle")),
        )?;
        write_file(&dir.join("pretrain.ckpt"), pretrained.to_bytes())?;
        let seeds = RepSeeds::new(ctx.cfg.master_seed, ctx.id, rep);
        let opts = ctx.cfg.classifier.options(seeds.shuffle);
        let out = classifier::finetune(&Init::Checkpoint(pretrained), &ctx.real, ctx.split_seed, ctx.cfg.val_fraction, &opts)?;
        write_finetune(&dir, &out)?;
        Ok(CellRow::completed(template.clone(), &out.metrics, Some(&out.record)))
    };
    finish(&dir, run(), template.clone())
}

fn classical_cell(ctx: &SubjectCtx, kind: BaselineKind) -> CellRow {
    let dir = ctx.dir.join("classical").join(kind.name());
    let template = CellRow::pending(ctx.id, kind.name(), 0, 0);
    let run = || -> Result<CellRow> {
        let (train, val) = dataset::split(&ctx.real, ctx.cfg.val_fraction, ctx.split_seed)?;
        let weights = dataset::compute_class_weights(&train)?;
        let seed = derive_seed(ctx.cfg.master_seed, &["classical", ctx.id, kind.name()]);
        let model = baselines::fit_baseline(kind, &train, &weights, seed)?;
        let metrics = model.evaluate(&val)?;
        write_file(
            &dir.join("metrics.csv"),
            format!("{}\n{}\n", classifier::MetricsReport::csv_header(), metrics.csv_row()),
        )?;
        Ok(CellRow::completed(template.clone(), &metrics, None))
    };
    finish(&dir, run(), template.clone())
}
