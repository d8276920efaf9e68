//! Sampling synthetic rows from a trained character generator.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ExperimentError, Result};
use crate::dataset::{self, Label, MfccDataset, Provenance};
use crate::gpt::{self, TransformerLm};
use crate::lstm::{self, LstmStack};
use crate::nn::Checkpoint;
use crate::seed;

/// Characters drawn per sampling call.
pub const BLOCK_CHARS: usize = 1000;
/// Consecutive blocks inspected by the quality check.
pub const QUALITY_WINDOW: usize = 50;
/// Rejection rate over the window above which generation is abandoned.
pub const MAX_REJECTION: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorKind {
    Lstm,
    Gpt,
}

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Lstm => "lstm",
            GeneratorKind::Gpt => "gpt",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            GeneratorKind::Lstm => "LSTM",
            GeneratorKind::Gpt => "GPT",
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GeneratorKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(GeneratorKind::Lstm),
            "gpt" => Ok(GeneratorKind::Gpt),
            other => Err(ExperimentError::Config(format!("unknown generator {other:?} (expected lstm or gpt)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Generator {
    Lstm(LstmStack),
    Gpt(TransformerLm),
}

impl Generator {
    pub fn kind(&self) -> GeneratorKind {
        match self {
            Generator::Lstm(_) => GeneratorKind::Lstm,
            Generator::Gpt(_) => GeneratorKind::Gpt,
        }
    }

    pub fn sample_chars(&self, n: usize, temperature: f64, seed: u64) -> Result<String> {
        Ok(match self {
            Generator::Lstm(m) => lstm::sample_chars(m, n, temperature, seed)?,
            Generator::Gpt(m) => gpt::sample_chars(m, n, temperature, seed)?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Generator::Lstm(m) => m.to_checkpoint(),
            Generator::Gpt(m) => m.to_checkpoint(),
        }
    }

    /// Dispatches on the checkpoint's kind tag.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        match c.kind() {
            Some("lstm") => Ok(Generator::Lstm(LstmStack::from_checkpoint(c)?)),
            Some("gpt") => Ok(Generator::Gpt(TransformerLm::from_checkpoint(c)?)),
            other => Err(ExperimentError::Config(format!(
                "checkpoint holds {} rather than a generator",
                other.unwrap_or("no model kind")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GenerationStats {
    pub rows: usize,
    pub blocks: usize,
    pub accepted_lines: usize,
    pub rejected_lines: usize,
}

impl GenerationStats {
    pub fn rejection_rate(&self) -> f64 {
        let total = self.accepted_lines + self.rejected_lines;
        if total == 0 {
            0.0
        } else {
            self.rejected_lines as f64 / total as f64
        }
    }

    pub fn summary(&self) -> String {
        format!(
            "rows={} blocks={} accepted_lines={} rejected_lines={} rejection_rate={:.6}",
            self.rows,
            self.blocks,
            self.accepted_lines,
            self.rejected_lines,
            self.rejection_rate()
        )
    }
}

/// Draws blocks until `n_rows` valid rows exist. Rows are relabeled as the
/// target speaker. Block `k` is sampled with a seed derived from `seed` and `k`.
pub fn generate_rows(
    generator: &Generator,
    n_rows: usize,
    temperature: f64,
    seed: u64,
) -> Result<(MfccDataset, GenerationStats)> {
    let mut rows = Vec::with_capacity(n_rows);
    let mut stats = GenerationStats::default();
    let mut window: std::collections::VecDeque<(usize, usize)> = Default::default();
    while rows.len() < n_rows {
        let block_seed = seed::derive_seed(seed, &["block", &stats.blocks.to_string()]);
        let raw = generator.sample_chars(BLOCK_CHARS, temperature, block_seed)?;
        let (parsed, rejected) = dataset::parse_and_filter(dataset::sample_block_lines(&raw));
        stats.blocks += 1;
        stats.accepted_lines += parsed.len();
        stats.rejected_lines += rejected;
        window.push_back((parsed.len(), rejected));
        if window.len() > QUALITY_WINDOW {
            window.pop_front();
        }
        if window.len() == QUALITY_WINDOW {
            let (acc, rej) = window.iter().fold((0, 0), |(a, r), &(x, y)| (a + x, r + y));
            let rate = if acc + rej == 0 { 1.0 } else { rej as f64 / (acc + rej) as f64 };
            if rate > MAX_REJECTION {
                return Err(ExperimentError::GenerationQuality {
                    blocks: stats.blocks,
                    rate,
                });
            }
        }
        let need = n_rows - rows.len();
        rows.extend(parsed.into_iter().take(need));
    }
    stats.rows = rows.len();
    let mut ds = MfccDataset::from_rows(rows, Provenance::Synthetic);
    ds.relabel(Label::Speaker);
    Ok((ds, stats))
}
