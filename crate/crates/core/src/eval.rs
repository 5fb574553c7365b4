//! Scoring and analysis surfaces: top-1 accuracy overall, per question
//! type, per hop count, per KB involvement, and the seven-configuration
//! ablation grid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::QARecord;
use crate::error::{Error, Result};
use crate::llm::parse_answer;
use crate::reasoner::{InputModes, SourceMode};

/// One prediction aligned with a record by id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub answer: String,
}

/// Correct/total counts for one evaluation cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub correct: usize,
    pub n: usize,
}

impl Cell {
    pub fn accuracy(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.correct as f64 / self.n as f64
        }
    }

    fn add(&mut self, correct: bool) {
        self.n += 1;
        if correct {
            self.correct += 1;
        }
    }
}

/// Run provenance carried on every report.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMeta {
    pub branch: String,
    pub modes: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Cell,
    pub per_qtype: [Cell; 7],
    pub per_hop: [Cell; 2],
    /// kb-related, then non-kb
    pub kb_split: [Cell; 2],
    pub meta: RunMeta,
}

/// Exact-match top-1 scoring after answer normalization (lowercase, first
/// line, terminal punctuation stripped). Predictions must align with the
/// records by id.
pub fn score(predictions: &[Prediction], records: &[QARecord], meta: RunMeta) -> Result<EvalReport> {
    if predictions.len() != records.len() {
        return Err(Error::Alignment(format!(
            "{} predictions vs {} records",
            predictions.len(),
            records.len()
        )));
    }
    let mut report = EvalReport {
        overall: Cell::default(),
        per_qtype: Default::default(),
        per_hop: Default::default(),
        kb_split: Default::default(),
        meta,
    };
    for (pred, record) in predictions.iter().zip(records) {
        if pred.id != record.id {
            return Err(Error::Alignment(format!(
                "prediction id {} does not match record id {}",
                pred.id, record.id
            )));
        }
        let correct = parse_answer(&pred.answer) == parse_answer(&record.answer);
        report.overall.add(correct);
        report.per_qtype[record.qtype.min(6) as usize].add(correct);
        report.per_hop[(record.hops.clamp(1, 2) - 1) as usize].add(correct);
        report.kb_split[if record.kb_related { 0 } else { 1 }].add(correct);
    }
    Ok(report)
}

/// The seven ablation configurations in their fixed order.
pub fn ablation_configs() -> [(&'static str, InputModes); 7] {
    use SourceMode::*;
    [
        ("none", InputModes { kb: None, sg: None }),
        ("kb_ret", InputModes { kb: Retrieved, sg: None }),
        ("sg_ret", InputModes { kb: None, sg: Retrieved }),
        (
            "kb_ret+sg_ret",
            InputModes {
                kb: Retrieved,
                sg: Retrieved,
            },
        ),
        ("kb_gt", InputModes { kb: GroundTruth, sg: None }),
        ("sg_gt", InputModes { kb: None, sg: GroundTruth }),
        (
            "kb_gt+sg_gt",
            InputModes {
                kb: GroundTruth,
                sg: GroundTruth,
            },
        ),
    ]
}

/// One row of the ablation grid; `report` is None when the configuration
/// was skipped (missing checkpoint).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub config: String,
    pub branch: String,
    pub report: Option<EvalReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationGrid {
    pub branch: String,
    pub rows: Vec<AblationRow>,
}

impl AblationGrid {
    pub fn accuracy(&self, config: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.config == config)
            .and_then(|r| r.report.as_ref())
            .map(|r| r.overall.accuracy())
    }
}

/// Evaluate every configuration with a caller-supplied predictor; the
/// predictor returns None for a configuration whose artifacts are missing
/// (the row is marked absent).
pub fn run_ablation<F>(records: &[QARecord], branch: &str, mut predict: F) -> Result<AblationGrid>
where
    F: FnMut(&InputModes) -> Result<Option<Vec<Prediction>>>,
{
    let mut rows = Vec::with_capacity(7);
    for (label, modes) in ablation_configs() {
        let report = match predict(&modes)? {
            Some(predictions) => Some(score(
                &predictions,
                records,
                RunMeta {
                    branch: branch.to_string(),
                    modes: label.to_string(),
                    ..Default::default()
                },
            )?),
            None => None,
        };
        rows.push(AblationRow {
            config: label.to_string(),
            branch: branch.to_string(),
            report,
        });
    }
    Ok(AblationGrid {
        branch: branch.to_string(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Per-question-type table (`qtype,accuracy,n`); rows appear only for
/// populated cells.
pub fn qtype_table(report: &EvalReport, format: ReportFormat) -> String {
    let rows: Vec<(String, Cell)> = report
        .per_qtype
        .iter()
        .enumerate()
        .filter(|(_, c)| c.n > 0)
        .map(|(q, c)| (q.to_string(), *c))
        .collect();
    render_table("qtype", &rows, format)
}

/// Split table (`split,accuracy,n`) over 1hop/2hop/kb/nokb.
pub fn split_table(report: &EvalReport, format: ReportFormat) -> String {
    let rows: Vec<(String, Cell)> = [
        ("1hop", report.per_hop[0]),
        ("2hop", report.per_hop[1]),
        ("kb", report.kb_split[0]),
        ("nokb", report.kb_split[1]),
    ]
    .into_iter()
    .filter(|(_, c)| c.n > 0)
    .map(|(s, c)| (s.to_string(), c))
    .collect();
    render_table("split", &rows, format)
}

fn render_table(key: &str, rows: &[(String, Cell)], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = format!("{key},accuracy,n\n");
            for (name, cell) in rows {
                out.push_str(&format!("{name},{},{}\n", cell.accuracy(), cell.n));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = format!("| {key} | accuracy | n |\n| --- | --- | --- |\n");
            for (name, cell) in rows {
                out.push_str(&format!("| {name} | {} | {} |\n", cell.accuracy(), cell.n));
            }
            out
        }
    }
}

/// Grid table (`config,branch,accuracy,n`); absent configurations emit an
/// empty accuracy with n = 0.
pub fn grid_table(grid: &AblationGrid, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("config,branch,accuracy,n\n");
            for row in &grid.rows {
                match &row.report {
                    Some(r) => out.push_str(&format!(
                        "{},{},{},{}\n",
                        row.config,
                        row.branch,
                        r.overall.accuracy(),
                        r.overall.n
                    )),
                    None => out.push_str(&format!("{},{},,0\n", row.config, row.branch)),
                }
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out =
                String::from("| config | branch | accuracy | n |\n| --- | --- | --- | --- |\n");
            for row in &grid.rows {
                match &row.report {
                    Some(r) => out.push_str(&format!(
                        "| {} | {} | {} | {} |\n",
                        row.config,
                        row.branch,
                        r.overall.accuracy(),
                        r.overall.n
                    )),
                    None => out.push_str(&format!(
                        "| {} | {} | absent | 0 |\n",
                        row.config, row.branch
                    )),
                }
            }
            out
        }
    }
}

/// Write one rendered table to disk.
pub fn emit_table(content: &str, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, content)?;
    Ok(())
}

/// Write the qtype and split tables (CSV + markdown) under `dir/stem_*`.
pub fn emit_report(report: &EvalReport, dir: &Path, stem: &str) -> Result<()> {
    emit_table(
        &qtype_table(report, ReportFormat::Csv),
        &dir.join(format!("{stem}_qtype.csv")),
    )?;
    emit_table(
        &qtype_table(report, ReportFormat::Markdown),
        &dir.join(format!("{stem}_qtype.md")),
    )?;
    emit_table(
        &split_table(report, ReportFormat::Csv),
        &dir.join(format!("{stem}_splits.csv")),
    )?;
    emit_table(
        &split_table(report, ReportFormat::Markdown),
        &dir.join(format!("{stem}_splits.md")),
    )?;
    Ok(())
}
