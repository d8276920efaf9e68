//! MFCC rows, their text serialization, and dataset assembly.
//!
//! A serialized row is 26 fixed-point coefficients with exactly five decimals,
//! then the label digit, comma separated and newline terminated:
//!
//! ```text
//! -12.03125,3.50000,...,0.41992,1
//! ```
//!
//! The same text doubles as the training corpus for the character generators.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use thiserror::Error;

use crate::mfcc::MfccVector;
use crate::seed;
use crate::N_COEFFS;

/// Contiguous run length used when assembling the negative corpus.
pub const BLOCK_LEN: usize = 1000;

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("coefficient {coeff} of row {row} is not finite")]
    NonFinite { row: usize, coeff: usize },
    #[error("need {required} source rows but only {available} are available")]
    InsufficientRows { required: usize, available: usize },
    #[error("row {row} has label {found}, expected {expected}")]
    WrongLabel {
        row: usize,
        found: Label,
        expected: Label,
    },
    #[error("dataset has no rows of class {0}")]
    MissingClass(Label),
    #[error("dataset is empty")]
    Empty,
    #[error("validation fraction must lie strictly between 0 and 1, got {0}")]
    BadFraction(f64),
    #[error("split leaves class {label} empty in the {side} partition")]
    EmptyPartition { label: Label, side: &'static str },
    #[error("failed to access {path:?}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// Anyone but the target speaker.
    Other,
    /// The target speaker.
    Speaker,
}

impl Label {
    pub fn digit(self) -> char {
        match self {
            Label::Other => '0',
            Label::Speaker => '1',
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Label::Other => 0.0,
            Label::Speaker => 1.0,
        }
    }

    pub fn from_digit(s: &str) -> Option<Label> {
        match s {
            "0" => Some(Label::Other),
            "1" => Some(Label::Speaker),
            _ => None,
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.digit())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    RealPositive,
    RealNegative,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfccRow {
    pub coefficients: MfccVector,
    pub label: Label,
}

impl MfccRow {
    pub fn new(coefficients: [f64; N_COEFFS], label: Label) -> Self {
        Self {
            coefficients: MfccVector(coefficients),
            label,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MfccDataset {
    rows: Vec<MfccRow>,
    provenance: Vec<Provenance>,
}

impl MfccDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_rows(rows: Vec<MfccRow>, provenance: Provenance) -> Self {
        let provenance = vec![provenance; rows.len()];
        Self { rows, provenance }
    }

    pub fn push(&mut self, row: MfccRow, provenance: Provenance) {
        self.rows.push(row);
        self.provenance.push(provenance);
    }

    pub fn extend(&mut self, other: &MfccDataset) {
        self.rows.extend_from_slice(&other.rows);
        self.provenance.extend_from_slice(&other.provenance);
    }

    pub fn rows(&self) -> &[MfccRow] {
        &self.rows
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.rows.iter().filter(|r| r.label == label).count()
    }

    pub fn subset(&self, indices: &[usize]) -> MfccDataset {
        MfccDataset {
            rows: indices.iter().map(|&i| self.rows[i]).collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
        }
    }

    pub fn relabel(&mut self, label: Label) {
        for r in &mut self.rows {
            r.label = label;
        }
    }

    /// `[n_rows x 26]` feature matrix.
    pub fn features(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows.len(), N_COEFFS), |(i, j)| {
            self.rows[i].coefficients.0[j]
        })
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.label.as_f64()).collect()
    }

    pub fn require_both_classes(&self) -> Result<()> {
        for label in [Label::Speaker, Label::Other] {
            if self.count(label) == 0 {
                return Err(DatasetError::MissingClass(label));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::with_capacity(self.rows.len() * 240);
        for (i, row) in self.rows.iter().enumerate() {
            write_row(&mut out, row).map_err(|coeff| DatasetError::NonFinite { row: i, coeff })?;
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()?).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads a serialized dataset; malformed lines are dropped and counted.
    pub fn read_csv(path: impl AsRef<Path>, provenance: Provenance) -> Result<(Self, usize)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let (rows, rejected) = parse_and_filter(&text);
        Ok((Self::from_rows(rows, provenance), rejected))
    }
}

fn write_row(out: &mut String, row: &MfccRow) -> std::result::Result<(), usize> {
    for (j, c) in row.coefficients.0.iter().enumerate() {
        if !c.is_finite() {
            return Err(j);
        }
        write!(out, "{c:.5},").expect("writing to a String cannot fail");
    }
    out.push(row.label.digit());
    out.push('\n');
    Ok(())
}

/// One serialized line, newline included.
pub fn serialize_row(row: &MfccRow) -> Result<String> {
    let mut out = String::with_capacity(240);
    write_row(&mut out, row).map_err(|coeff| DatasetError::NonFinite { row: 0, coeff })?;
    Ok(out)
}

/// `-?digits(.digits)?`
fn is_plain_decimal(field: &str) -> bool {
    let body = field.strip_prefix('-').unwrap_or(field);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    !int.is_empty()
        && int.bytes().all(|b| b.is_ascii_digit())
        && frac.is_none_or(|f| !f.is_empty() && f.bytes().all(|b| b.is_ascii_digit()))
}

pub fn parse_line(line: &str) -> Option<MfccRow> {
    let mut coeffs = [0.0; N_COEFFS];
    let mut fields = line.split(',');
    for c in coeffs.iter_mut() {
        let field = fields.next()?;
        if !is_plain_decimal(field) {
            return None;
        }
        *c = field.parse::<f64>().ok().filter(|v| v.is_finite())?;
    }
    let label = Label::from_digit(fields.next()?)?;
    if fields.next().is_some() {
        return None;
    }
    Some(MfccRow::new(coeffs, label))
}

/// Keeps every well-formed line and counts the rest.
///
/// The empty piece after a final newline is not a line; any other empty
/// line counts as rejected.
pub fn parse_and_filter(text: &str) -> (Vec<MfccRow>, usize) {
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return (Vec::new(), 0);
    }
    let mut rows = Vec::new();
    let mut rejected = 0;
    for line in body.split('\n') {
        match parse_line(line) {
            Some(row) => rows.push(row),
            None => rejected += 1,
        }
    }
    (rows, rejected)
}

/// Drops the partial line after the last newline of a generated block.
pub fn sample_block_lines(raw: &str) -> &str {
    match raw.rfind('\n') {
        Some(i) => &raw[..=i],
        None => "",
    }
}

/// Negative corpus of `target` rows: half as non-overlapping contiguous
/// runs of [`BLOCK_LEN`] rows at random offsets, the rest sampled uniformly
/// without replacement from what remains.
///
/// Blocks are emitted in source order, followed by the sampled rows in
/// source order.
pub fn assemble_negative_corpus(source: &MfccDataset, target: usize, seed: u64) -> Result<MfccDataset> {
    if source.len() < target {
        return Err(DatasetError::InsufficientRows {
            required: target,
            available: source.len(),
        });
    }
    if let Some(row) = source.rows.iter().position(|r| r.label != Label::Other) {
        return Err(DatasetError::WrongLabel {
            row,
            found: source.rows[row].label,
            expected: Label::Other,
        });
    }
    let mut rng = seed::rng(seed);
    let offsets = pick_block_offsets(&mut rng, source.len(), target / 2 / BLOCK_LEN);

    let mut taken = vec![false; source.len()];
    let mut chosen = Vec::with_capacity(target);
    for &off in &offsets {
        for i in off..off + BLOCK_LEN {
            taken[i] = true;
            chosen.push(i);
        }
    }
    let remainder: Vec<usize> = (0..source.len()).filter(|&i| !taken[i]).collect();
    let n_random = target - chosen.len();
    let mut sampled: Vec<usize> = index::sample(&mut rng, remainder.len(), n_random)
        .into_iter()
        .map(|k| remainder[k])
        .collect();
    sampled.sort_unstable();
    chosen.extend(sampled);

    let mut out = source.subset(&chosen);
    out.provenance.fill(Provenance::RealNegative);
    Ok(out)
}

/// Start offsets of the contiguous blocks chosen by [`assemble_negative_corpus`].
pub fn block_offsets(n_source: usize, target: usize, seed: u64) -> Vec<usize> {
    pick_block_offsets(&mut seed::rng(seed), n_source, target / 2 / BLOCK_LEN)
}

fn pick_block_offsets(rng: &mut seed::Rng, n_source: usize, n_blocks: usize) -> Vec<usize> {
    let free = n_source - n_blocks * BLOCK_LEN;
    // Sorted distinct picks from [0, free + n_blocks) map one-to-one onto
    // non-overlapping block placements.
    let mut picks = index::sample(rng, free + n_blocks, n_blocks).into_vec();
    picks.sort_unstable();
    picks
        .iter()
        .enumerate()
        .map(|(j, &c)| c - j + j * BLOCK_LEN)
        .collect()
}

/// Per-class loss multipliers `N / (2 * N_c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub w_pos: f64,
    pub w_neg: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        w_pos: 1.0,
        w_neg: 1.0,
    };

    pub fn for_label(&self, label: Label) -> f64 {
        match label {
            Label::Speaker => self.w_pos,
            Label::Other => self.w_neg,
        }
    }

    /// Weight for a 0/1 target value.
    pub fn for_target(&self, y: f64) -> f64 {
        if y >= 0.5 {
            self.w_pos
        } else {
            self.w_neg
        }
    }

    pub fn from_counts(n_pos: usize, n_neg: usize) -> Result<Self> {
        if n_pos == 0 {
            return Err(DatasetError::MissingClass(Label::Speaker));
        }
        if n_neg == 0 {
            return Err(DatasetError::MissingClass(Label::Other));
        }
        let n = (n_pos + n_neg) as f64;
        Ok(Self {
            w_pos: n / (2.0 * n_pos as f64),
            w_neg: n / (2.0 * n_neg as f64),
        })
    }
}

pub fn compute_class_weights(ds: &MfccDataset) -> Result<ClassWeights> {
    ClassWeights::from_counts(ds.count(Label::Speaker), ds.count(Label::Other))
}

pub const DEFAULT_VAL_FRACTION: f64 = 0.3;

/// Stratified, seeded train/validation split. Each class contributes
/// `round(n_c * val_fraction)` rows to validation; both parts keep source order.
pub fn split(ds: &MfccDataset, val_fraction: f64, seed: u64) -> Result<(MfccDataset, MfccDataset)> {
    let (train, val) = split_indices(ds, val_fraction, seed)?;
    Ok((ds.subset(&train), ds.subset(&val)))
}

pub fn split_indices(ds: &MfccDataset, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DatasetError::BadFraction(val_fraction));
    }
    let mut rng = seed::rng(seed);
    let mut val = BTreeSet::new();
    for label in [Label::Other, Label::Speaker] {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.rows[i].label == label).collect();
        let n_val = (members.len() as f64 * val_fraction).round() as usize;
        if n_val == 0 {
            return Err(DatasetError::EmptyPartition { label, side: "validation" });
        }
        if n_val == members.len() {
            return Err(DatasetError::EmptyPartition { label, side: "training" });
        }
        members.shuffle(&mut rng);
        val.extend(members.into_iter().take(n_val));
    }
    let train = (0..ds.len()).filter(|i| !val.contains(i)).collect();
    Ok((train, val.into_iter().collect()))
}
