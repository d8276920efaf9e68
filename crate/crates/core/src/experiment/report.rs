//! Result rows and the rendered report.
//!
//! Each subject directory holds a `results.csv` with one row per cell and
//! repetition, written with round-trip float precision. Reports are pure
//! functions of those rows. Markdown shows accuracy to two decimals and the
//! other scores to three; the CSV report carries the same values unrounded.
//! Comparisons (best, ties, below baseline) use the displayed accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{read_file, ExperimentError, Result};
use crate::baselines::BaselineKind;
use crate::classifier::{Confusion, MetricsReport, TrainRecord};

pub const BASELINE_ARM: &str = "baseline";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    /// Percent.
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

impl Scores {
    fn mean(items: &[Scores]) -> Option<Scores> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        let sum = |f: fn(&Scores) -> f64| items.iter().map(f).sum::<f64>() / n;
        Some(Scores {
            accuracy: sum(|s| s.accuracy),
            f1: sum(|s| s.f1),
            precision: sum(|s| s.precision),
            recall: sum(|s| s.recall),
        })
    }
}

/// One classifier run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub subject: String,
    /// `baseline`, a generator name, or a classical model name.
    pub arm: String,
    pub size: usize,
    pub rep: usize,
    pub status: CellStatus,
    pub scores: Option<Scores>,
    pub confusion: Option<Confusion>,
    pub best_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub message: String,
}

impl CellRow {
    pub fn pending(subject: &str, arm: &str, size: usize, rep: usize) -> Self {
        Self {
            subject: subject.to_string(),
            arm: arm.to_string(),
            size,
            rep,
            status: CellStatus::Failed,
            scores: None,
            confusion: None,
            best_epoch: None,
            epochs: None,
            message: "not run".into(),
        }
    }

    pub fn completed(template: CellRow, metrics: &MetricsReport, record: Option<&TrainRecord>) -> Self {
        Self {
            status: CellStatus::Ok,
            scores: Some(Scores {
                accuracy: metrics.accuracy,
                f1: metrics.f1,
                precision: metrics.precision,
                recall: metrics.recall,
            }),
            confusion: Some(metrics.confusion),
            best_epoch: record.map(|r| r.best_epoch),
            epochs: record.map(|r| r.epochs.len()),
            message: String::new(),
            ..template
        }
    }
}

const RESULTS_HEADER: &str = "subject,arm,size,rep,status,accuracy,f1,precision,recall,tp,fn,fp,tn,best_epoch,epochs,message";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Commas and line breaks are replaced so the message stays one field.
fn clean_message(m: &str) -> String {
    m.replace([',', '\n', '\r'], ";")
}

pub fn results_csv(rows: &[CellRow]) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let s = r.scores;
        let c = r.confusion;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.subject,
            r.arm,
            r.size,
            r.rep,
            match r.status {
                CellStatus::Ok => "ok",
                CellStatus::Failed => "failed",
            },
            opt(s.map(|s| s.accuracy)),
            opt(s.map(|s| s.f1)),
            opt(s.map(|s| s.precision)),
            opt(s.map(|s| s.recall)),
            opt(c.map(|c| c.tp)),
            opt(c.map(|c| c.fn_)),
            opt(c.map(|c| c.fp)),
            opt(c.map(|c| c.tn)),
            opt(r.best_epoch),
            opt(r.epochs),
            clean_message(&r.message),
        );
    }
    out
}

pub fn parse_results_csv(text: &str, origin: &Path) -> Result<Vec<CellRow>> {
    let bad = |line: usize, what: &str| ExperimentError::Input {
        path: origin.to_path_buf(),
        message: format!("line {line}: {what}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULTS_HEADER => {}
        _ => return Err(bad(1, "unexpected header")),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 16 {
            return Err(bad(n, "expected 16 fields"));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "bad integer"));
        let opt_int = |s: &str| if s.is_empty() { Ok(None) } else { int(s).map(Some) };
        let opt_f = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(n, "bad number"))
            }
        };
        let status = match f[4] {
            "ok" => CellStatus::Ok,
            "failed" => CellStatus::Failed,
            _ => return Err(bad(n, "bad status")),
        };
        let scores = match (opt_f(f[5])?, opt_f(f[6])?, opt_f(f[7])?, opt_f(f[8])?) {
            (Some(accuracy), Some(f1), Some(precision), Some(recall)) => Some(Scores {
                accuracy,
                f1,
                precision,
                recall,
            }),
            (None, None, None, None) => None,
            _ => return Err(bad(n, "partial scores")),
        };
        let confusion = match (opt_int(f[9])?, opt_int(f[10])?, opt_int(f[11])?, opt_int(f[12])?) {
            (Some(tp), Some(fn_), Some(fp), Some(tn)) => Some(Confusion { tp, fn_, fp, tn }),
            (None, None, None, None) => None,
            _ => return Err(bad(n, "partial confusion counts")),
        };
        if (status == CellStatus::Ok) != scores.is_some() {
            return Err(bad(n, "status and scores disagree"));
        }
        rows.push(CellRow {
            subject: f[0].to_string(),
            arm: f[1].to_string(),
            size: int(f[2])?,
            rep: int(f[3])?,
            status,
            scores,
            confusion,
            best_epoch: opt_int(f[13])?,
            epochs: opt_int(f[14])?,
            message: f[15].to_string(),
        });
    }
    Ok(rows)
}

/// Rows from every `<dir>/<subject>/results.csv`, subjects in name order.
pub fn load_runs(dir: &Path) -> Result<Vec<CellRow>> {
    let entries = std::fs::read_dir(dir).map_err(|source| ExperimentError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("results.csv"))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ExperimentError::EmptyRuns(dir.to_path_buf()));
    }
    let mut rows = Vec::new();
    for f in files {
        rows.extend(parse_results_csv(&read_file(&f)?, &f)?);
    }
    Ok(rows)
}

/// Mean over the successful repetitions of one (subject, arm, size) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub subject: String,
    pub arm: String,
    pub size: usize,
    pub runs: usize,
    pub failed: usize,
    pub mean: Option<Scores>,
}

fn classical(arm: &str) -> Option<BaselineKind> {
    BaselineKind::ALL.into_iter().find(|k| k.name() == arm)
}

fn is_generator(arm: &str) -> bool {
    arm != BASELINE_ARM && classical(arm).is_none()
}

fn arm_order(arm: &str) -> (u8, String) {
    let rank = match arm {
        BASELINE_ARM => 0,
        "lstm" => 1,
        "gpt" => 2,
        a if classical(a).is_some() => 4,
        _ => 3,
    };
    (rank, arm.to_string())
}

pub fn summarize(rows: &[CellRow]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<(String, (u8, String), usize), Vec<&CellRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.subject.clone(), arm_order(&r.arm), r.size))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((subject, (_, arm), size), rs)| {
            let ok: Vec<Scores> = rs.iter().filter_map(|r| r.scores).collect();
            CellSummary {
                subject,
                arm,
                size,
                runs: ok.len(),
                failed: rs.len() - ok.len(),
                mean: Scores::mean(&ok),
            }
        })
        .collect()
}

/// Accuracy at display precision.
fn acc_key(accuracy: f64) -> i64 {
    (accuracy * 100.0).round() as i64
}

pub fn model_name(arm: &str) -> String {
    match arm {
        BASELINE_ARM => "MLP".to_string(),
        "lstm" => "MLP + LSTM transfer".to_string(),
        "gpt" => "MLP + GPT transfer".to_string(),
        a => match classical(a) {
            Some(k) => k.display_name().to_string(),
            None => format!("MLP + {a} transfer"),
        },
    }
}

fn generator_label(arm: &str) -> String {
    match arm {
        "lstm" => "LSTM".into(),
        "gpt" => "GPT".into(),
        a => a.to_string(),
    }
}

/// One line of the per-subject matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLine {
    /// Generator column; `None` when the subject ran no generator.
    pub generator: Option<String>,
    pub cell: CellSummary,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestEntry {
    pub model: String,
    pub arm: String,
    pub size: usize,
    pub runs: usize,
    pub scores: Scores,
    /// Rank by displayed accuracy, with `=` marking a shared rank.
    pub rank: String,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectReport {
    pub subject: String,
    pub matrix: Vec<MatrixLine>,
    pub best: Vec<BestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AverageEntry {
    pub model: String,
    pub subjects: usize,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub subjects: Vec<SubjectReport>,
    pub averages: Vec<AverageEntry>,
}

fn subject_report(subject: &str, cells: &[CellSummary]) -> SubjectReport {
    let baseline = cells.iter().find(|c| c.arm == BASELINE_ARM);
    let base_key = baseline.and_then(|b| b.mean).map(|m| acc_key(m.accuracy));
    let mlp_cells: Vec<&CellSummary> = cells.iter().filter(|c| !classical(&c.arm).is_some()).collect();
    let best_key = mlp_cells.iter().filter_map(|c| c.mean).map(|m| acc_key(m.accuracy)).max();
    let n_best = mlp_cells
        .iter()
        .filter(|c| c.mean.map(|m| acc_key(m.accuracy)) == best_key && best_key.is_some())
        .count();
    let note = |c: &CellSummary| -> String {
        let mut notes = Vec::new();
        match c.mean {
            None => notes.push("failed".to_string()),
            Some(m) => {
                let k = acc_key(m.accuracy);
                if Some(k) == best_key {
                    notes.push(if n_best > 1 { "best (tie)".into() } else { "best".into() });
                }
                if c.arm != BASELINE_ARM && base_key.is_some_and(|b| k < b) {
                    notes.push("below baseline".into());
                }
                if c.failed > 0 {
                    notes.push(format!("{} failed", c.failed));
                }
            }
        }
        notes.join("; ")
    };
    let generators: Vec<&str> = {
        let mut g: Vec<&str> = cells.iter().map(|c| c.arm.as_str()).filter(|a| is_generator(a)).collect();
        g.dedup();
        g
    };
    let mut matrix = Vec::new();
    if generators.is_empty() {
        if let Some(b) = baseline {
            matrix.push(MatrixLine {
                generator: None,
                cell: b.clone(),
                note: note(b),
            });
        }
    }
    for g in &generators {
        if let Some(b) = baseline {
            matrix.push(MatrixLine {
                generator: Some(generator_label(g)),
                cell: b.clone(),
                note: note(b),
            });
        }
        for c in cells.iter().filter(|c| c.arm == *g) {
            matrix.push(MatrixLine {
                generator: Some(generator_label(g)),
                cell: c.clone(),
                note: note(c),
            });
        }
    }

    let mut best: Vec<BestEntry> = Vec::new();
    let mut families: Vec<&str> = vec![BASELINE_ARM];
    families.extend(&generators);
    families.extend(cells.iter().map(|c| c.arm.as_str()).filter(|a| classical(a).is_some()));
    for fam in families {
        let candidates: Vec<(&CellSummary, Scores)> = cells
            .iter()
            .filter(|c| c.arm == fam)
            .filter_map(|c| c.mean.map(|m| (c, m)))
            .collect();
        let Some(top) = candidates
            .iter()
            .copied()
            .reduce(|a, b| if b.1.accuracy > a.1.accuracy { b } else { a })
        else {
            continue;
        };
        let tied: Vec<String> = candidates
            .iter()
            .filter(|(c, m)| acc_key(m.accuracy) == acc_key(top.1.accuracy) && c.size != top.0.size)
            .map(|(c, _)| c.size.to_string())
            .collect();
        let mut model = model_name(fam);
        if is_generator(fam) {
            model = format!("{model} ({})", top.0.size);
        }
        best.push(BestEntry {
            model,
            arm: fam.to_string(),
            size: top.0.size,
            runs: top.0.runs,
            scores: top.1,
            rank: String::new(),
            note: if tied.is_empty() {
                String::new()
            } else {
                format!("tie with size {}", tied.join("/"))
            },
        });
    }
    best.sort_by(|a, b| b.scores.accuracy.total_cmp(&a.scores.accuracy).then_with(|| a.model.cmp(&b.model)));
    let keys: Vec<i64> = best.iter().map(|e| acc_key(e.scores.accuracy)).collect();
    for (i, e) in best.iter_mut().enumerate() {
        let rank = 1 + keys.iter().filter(|&&k| k > keys[i]).count();
        let shared = keys.iter().filter(|&&k| k == keys[i]).count() > 1;
        e.rank = if shared { format!("{rank}=") } else { rank.to_string() };
    }
    SubjectReport {
        subject: subject.to_string(),
        matrix,
        best,
    }
}

pub fn build_report(rows: &[CellRow]) -> Report {
    let summaries = summarize(rows);
    let mut by_subject: BTreeMap<&str, Vec<CellSummary>> = BTreeMap::new();
    for s in &summaries {
        by_subject.entry(s.subject.as_str()).or_default().push(s.clone());
    }
    let subjects: Vec<SubjectReport> = by_subject.iter().map(|(s, cells)| subject_report(s, cells)).collect();

    let mut families: BTreeMap<(u8, String), Vec<Scores>> = BTreeMap::new();
    for s in &subjects {
        for e in &s.best {
            families.entry(arm_order(&e.arm)).or_default().push(e.scores);
        }
    }
    let mut averages: Vec<AverageEntry> = families
        .into_iter()
        .map(|((_, arm), scores)| AverageEntry {
            model: model_name(&arm),
            subjects: scores.len(),
            scores: Scores::mean(&scores).expect("each family has an entry"),
        })
        .collect();
    averages.sort_by(|a, b| b.scores.accuracy.total_cmp(&a.scores.accuracy).then_with(|| a.model.cmp(&b.model)));
    Report { subjects, averages }
}

fn md_scores(s: Option<Scores>) -> String {
    match s {
        Some(s) => format!("{:.2} | {:.3} | {:.3} | {:.3}", s.accuracy, s.f1, s.precision, s.recall),
        None => "- | - | - | -".into(),
    }
}

pub fn render_markdown(rows: &[CellRow]) -> String {
    let report = build_report(rows);
    let mut out = String::from("# Results\n");
    for s in &report.subjects {
        let _ = writeln!(out, "\n## Subject {}\n", s.subject);
        out.push_str("| Generator | Synth. size | Acc. | F1 | Prec. | Rec. | Runs | Note |\n");
        out.push_str("|---|---:|---:|---:|---:|---:|---:|---|\n");
        for l in &s.matrix {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {}/{} | {} |",
                l.generator.as_deref().unwrap_or("-"),
                l.cell.size,
                md_scores(l.cell.mean),
                l.cell.runs,
                l.cell.runs + l.cell.failed,
                l.note
            );
        }
        let _ = writeln!(out, "\n### Best models for {} (sorted by accuracy)\n", s.subject);
        out.push_str("| Rank | Model | Acc. | F1 | Prec. | Rec. | Note |\n");
        out.push_str("|---:|---|---:|---:|---:|---:|---|\n");
        for e in &s.best {
            let _ = writeln!(out, "| {} | {} | {} | {} |", e.rank, e.model, md_scores(Some(e.scores)), e.note);
        }
    }
    out.push_str("\n## Average over subjects\n\n");
    out.push_str("| Model | Subjects | Acc. | F1 | Prec. | Rec. |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|\n");
    for a in &report.averages {
        let _ = writeln!(out, "| {} | {} | {} |", a.model, a.subjects, md_scores(Some(a.scores)));
    }
    out
}

pub const REPORT_CSV_HEADER: &str = "table,subject,model,generator,size,runs,failed,accuracy,f1,precision,recall,note";

fn csv_scores(s: Option<Scores>) -> String {
    match s {
        Some(s) => format!("{},{},{},{}", s.accuracy, s.f1, s.precision, s.recall),
        None => ",,,".into(),
    }
}

pub fn render_csv(rows: &[CellRow]) -> String {
    let report = build_report(rows);
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for s in &report.subjects {
        for l in &s.matrix {
            let _ = writeln!(
                out,
                "matrix,{},{},{},{},{},{},{},{}",
                s.subject,
                model_name(&l.cell.arm),
                l.generator.as_deref().unwrap_or(""),
                l.cell.size,
                l.cell.runs,
                l.cell.failed,
                csv_scores(l.cell.mean),
                clean_message(&l.note)
            );
        }
        for e in &s.best {
            let generator = if is_generator(&e.arm) { generator_label(&e.arm) } else { String::new() };
            let note = if e.note.is_empty() { format!("rank {}", e.rank) } else { format!("rank {}; {}", e.rank, e.note) };
            let _ = writeln!(
                out,
                "best,{},{},{},{},{},0,{},{}",
                s.subject,
                e.model,
                generator,
                e.size,
                e.runs,
                csv_scores(Some(e.scores)),
                clean_message(&note)
            );
        }
    }
    for a in &report.averages {
        let _ = writeln!(out, "average,,{},,,{},0,{},", a.model, a.subjects, csv_scores(Some(a.scores)));
    }
    out
}
