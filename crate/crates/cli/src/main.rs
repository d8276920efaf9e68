//! `synthvox`: feature extraction, generator training and sampling, and the
//! per-subject experiment matrix.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use synthvox::audio;
use synthvox::dataset::{Label, MfccDataset};
use synthvox::experiment::{self, report, ExperimentConfig, Generator, GeneratorKind, TrainGenConfig};
use synthvox::lstm;
use synthvox::nn::Checkpoint;

#[derive(Parser)]
#[command(name = "synthvox", version, about = "Speaker recognition with synthetic MFCC pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Lstm,
    Gpt,
}

impl From<ModelArg> for GeneratorKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Lstm => GeneratorKind::Lstm,
            ModelArg::Gpt => GeneratorKind::Gpt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Md,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Extract one serialized MFCC row per analysis window of each clip.
    Extract {
        #[arg(long = "in", required = true, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// 1 for the target speaker, 0 for anyone else.
        #[arg(long, default_value = "1", value_parser = ["0", "1"])]
        label: String,
        /// Clips are resampled to this rate before framing.
        #[arg(long, default_value_t = synthvox::PIPELINE_RATE)]
        sample_rate: u32,
        /// Drop leading and trailing samples quieter than this amplitude.
        #[arg(long)]
        trim: Option<f64>,
    },
    /// Train a character generator on serialized rows.
    TrainGen {
        #[arg(long)]
        model: ModelArg,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve destination; defaults to `<out>` with extension `loss.csv`.
        #[arg(long)]
        loss: Option<PathBuf>,
        /// Also train the full LSTM units × layers grid and write its table next to `<out>`.
        #[arg(long)]
        grid: bool,
    },
    /// Sample rows from a trained generator until `rows` valid rows exist.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rows: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every configured subject × generator × size cell and render the report.
    RunMatrix {
        #[arg(long)]
        config: PathBuf,
    },
    /// Render the report for a completed run directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, value_enum, default_value = "md")]
        format: Format,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` means the command finished but some unit of work failed.
fn run(command: Command) -> Result<bool> {
    match command {
        Command::Extract {
            inputs,
            out,
            label,
            sample_rate,
            trim,
        } => {
            let opts = experiment::ExtractOptions {
                sample_rate,
                trim_threshold: trim,
            };
            extract(&inputs, &out, &label, &opts)
        }
        Command::TrainGen {
            model,
            corpus,
            config,
            out,
            loss,
            grid,
        } => train_gen(model.into(), &corpus, &config, &out, loss, grid).map(|_| true),
        Command::Generate {
            ckpt,
            rows,
            out,
            temperature,
            seed,
        } => generate(&ckpt, rows, &out, temperature, seed).map(|_| true),
        Command::RunMatrix { config } => run_matrix(&config),
        Command::Report { runs, format, out } => render_report(&runs, format, out.as_deref()).map(|_| true),
    }
}

fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

fn extract(inputs: &[PathBuf], out: &Path, label: &str, opts: &experiment::ExtractOptions) -> Result<bool> {
    let label = Label::from_digit(label).expect("clap restricts the label to 0 or 1");
    opts.validate()?;
    let mut rows = MfccDataset::new();
    let mut failed = 0;
    for path in inputs {
        let clip = audio::read_audio(path).map_err(anyhow::Error::from);
        match clip.and_then(|c| experiment::extract_clip(&c, label, opts).map_err(Into::into)) {
            Ok(ds) => {
                log::info!("{}: {} rows", path.display(), ds.len());
                rows.extend(&ds);
            }
            Err(e) => {
                eprintln!("error: {}: {e:#}", path.display());
                failed += 1;
            }
        }
    }
    rows.write_csv(out)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(failed == 0)
}

fn train_gen(
    kind: GeneratorKind,
    corpus: &Path,
    config: &Path,
    out: &Path,
    loss: Option<PathBuf>,
    grid: bool,
) -> Result<()> {
    let cfg = TrainGenConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let settings = cfg.settings_for(kind)?;
    let text = std::fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let trained = experiment::train_generator(kind, &text, &settings, cfg.seed)?;
    trained.generator.to_checkpoint().save(out)?;
    let loss = loss.unwrap_or_else(|| sibling(out, "loss.csv"));
    std::fs::write(&loss, experiment::loss_curve_csv(&trained.history))
        .with_context(|| format!("writing {}", loss.display()))?;
    println!(
        "{}: best loss {:.4} nats/char at epoch {} -> {}",
        kind.display_name(),
        trained.best_loss,
        trained.best_epoch,
        out.display()
    );
    if grid {
        if kind != GeneratorKind::Lstm {
            bail!("--grid applies to the lstm model only");
        }
        let layers: Vec<usize> = (1..=lstm::MAX_LAYERS).collect();
        let rows = lstm::benchmark_grid(&text, &lstm::ALLOWED_UNITS, &layers, &settings.lstm, cfg.seed)?;
        for (ext, body) in [("grid.csv", lstm::grid_csv(&rows)), ("grid.md", lstm::grid_markdown(&rows))] {
            let path = sibling(out, ext);
            std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        }
        print!("{}", lstm::grid_markdown(&rows));
    }
    Ok(())
}

fn generate(ckpt: &Path, rows: usize, out: &Path, temperature: f64, seed: u64) -> Result<()> {
    let checkpoint = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let generator = Generator::from_checkpoint(&checkpoint)?;
    let (ds, stats) = experiment::generate_rows(&generator, rows, temperature, seed)?;
    ds.write_csv(out)?;
    let stats_path = sibling(out, "stats.txt");
    std::fs::write(&stats_path, format!("{}\n", stats.summary()))
        .with_context(|| format!("writing {}", stats_path.display()))?;
    println!("{}", stats.summary());
    Ok(())
}

fn run_matrix(config: &Path) -> Result<bool> {
    let cfg = ExperimentConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    let outcome = experiment::run_matrix(&cfg)?;
    let failures = outcome.failures();
    println!(
        "{} cells, {} failed; report at {} and {}",
        outcome.rows.len(),
        failures,
        outcome.report_md.display(),
        outcome.report_csv.display()
    );
    Ok(failures == 0)
}

fn render_report(runs: &Path, format: Format, out: Option<&Path>) -> Result<()> {
    let rows = report::load_runs(runs)?;
    let body = match format {
        Format::Md => report::render_markdown(&rows),
        Format::Csv => report::render_csv(&rows),
    };
    match out {
        Some(path) => std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{body}"),
    }
    Ok(())
}
