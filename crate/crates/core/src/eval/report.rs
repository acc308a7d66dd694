//! Runs × language-pairs Spearman grid with significance marks.
//!
//! CSV cells hold three decimals. A `+` suffix marks the best value in a
//! column (the Avg column included); a `*` prefix marks a value whose gap to
//! the column best is not significant under the Williams test. `NA` marks an
//! undefined correlation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AlopeError, Result};
use crate::eval::stats::spearman;
use crate::eval::williams::{williams_test, Tails, WilliamsInput, WilliamsResult};

/// Predictions of one run (a layer, a strategy, a model), keyed by pair id.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPredictions {
    pub label: String,
    pub predictions: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub rho: Option<f64>,
    pub best: bool,
    /// Not significantly worse than the column best (always false for the best itself).
    pub insignificant: bool,
    /// Williams result against the column best; `None` for the best cell or a degenerate test.
    pub williams: Option<WilliamsResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub cells: Vec<Cell>,
    pub avg: Option<f64>,
    pub best_avg: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub pairs: Vec<String>,
    pub rows: Vec<Row>,
    pub alpha: f64,
    pub tails: Tails,
}

/// Builds the grid. `references` fixes the column order.
pub fn build_report(
    runs: &[RunPredictions],
    references: &[(String, Vec<f64>)],
    alpha: f64,
    tails: Tails,
) -> Result<Report> {
    if references.is_empty() {
        return Err(AlopeError::Empty("report pairs"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AlopeError::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    // A run without predictions for a pair gets an NA cell.
    let mut preds: Vec<Vec<Option<&[f64]>>> = Vec::with_capacity(runs.len());
    for run in runs {
        let mut row = Vec::with_capacity(references.len());
        for (pair, refs) in references {
            let p = run.predictions.get(pair);
            if let Some(p) = p {
                if p.len() != refs.len() {
                    return Err(AlopeError::shape("report", &[p.len()], &[refs.len()]));
                }
            }
            row.push(p.map(Vec::as_slice));
        }
        preds.push(row);
    }

    let mut rows: Vec<Row> = runs
        .iter()
        .zip(&preds)
        .map(|(run, row)| {
            let cells: Vec<Cell> = row
                .iter()
                .zip(references)
                .map(|(p, (_, refs))| Cell {
                    rho: p.and_then(|p| spearman(p, refs).ok()),
                    best: false,
                    insignificant: false,
                    williams: None,
                })
                .collect();
            let avg = cells
                .iter()
                .map(|c| c.rho)
                .collect::<Option<Vec<f64>>>()
                .map(|v| v.iter().sum::<f64>() / v.len() as f64);
            Row {
                label: run.label.clone(),
                cells,
                avg,
                best_avg: false,
            }
        })
        .collect();

    for (col, (_, refs)) in references.iter().enumerate() {
        let Some(best) = argmax(rows.iter().map(|r| r.cells[col].rho)) else {
            continue;
        };
        rows[best].cells[col].best = true;
        let r12 = rows[best].cells[col].rho.expect("best has a value");
        for i in 0..rows.len() {
            if i == best {
                continue;
            }
            let Some(r13) = rows[i].cells[col].rho else { continue };
            let (Some(pb), Some(pi)) = (preds[best][col], preds[i][col]) else { continue };
            let test = spearman(pb, pi).and_then(|r23| {
                williams_test(
                    WilliamsInput {
                        r12,
                        r13,
                        r23,
                        n: refs.len(),
                    },
                    tails,
                )
            });
            let cell = &mut rows[i].cells[col];
            match test {
                Ok(w) => {
                    cell.insignificant = w.p >= alpha;
                    cell.williams = Some(w);
                }
                // No evidence of a difference (e.g. identical rankings).
                Err(_) => cell.insignificant = true,
            }
        }
    }
    if let Some(best) = argmax(rows.iter().map(|r| r.avg)) {
        rows[best].best_avg = true;
    }
    Ok(Report {
        pairs: references.iter().map(|(p, _)| p.clone()).collect(),
        rows,
        alpha,
        tails,
    })
}

/// First index of the largest defined value.
fn argmax(values: impl Iterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn fmt_cell(rho: Option<f64>, best: bool, insignificant: bool) -> String {
    match rho {
        None => "NA".to_string(),
        Some(v) => format!(
            "{}{:.3}{}",
            if insignificant { "*" } else { "" },
            v,
            if best { "+" } else { "" }
        ),
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run");
        for p in &self.pairs {
            out.push(',');
            out.push_str(p);
        }
        out.push_str(",Avg\n");
        for row in &self.rows {
            out.push_str(&row.label);
            for c in &row.cells {
                out.push(',');
                out.push_str(&fmt_cell(c.rho, c.best, c.insignificant));
            }
            let _ = writeln!(out, ",{}", fmt_cell(row.avg, row.best_avg, false));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Label of the row with the best average, if any row has one.
    pub fn best_row(&self) -> Option<&str> {
        self.rows.iter().find(|r| r.best_avg).map(|r| r.label.as_str())
    }
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub pair_id: String,
    pub index: usize,
    pub prediction: f64,
    pub reference: f64,
}

pub fn predictions_to_tsv(rows: &[PredictionRow]) -> String {
    let mut out = String::from("pair_id\tindex\tprediction\treference\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", r.pair_id, r.index, r.prediction, r.reference);
    }
    out
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let file = std::fs::File::open(path).map_err(|e| AlopeError::io(path, e))?;
    parse_predictions(file, &path.display().to_string())
}

pub fn parse_predictions<R: Read>(reader: R, label: &str) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<PredictionRow>() {
        let row = rec.map_err(|e| AlopeError::Parse {
            path: label.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Splits prediction rows into per-pair vectors, ordered by `index`.
pub fn group_predictions(rows: &[PredictionRow]) -> BTreeMap<String, (Vec<f64>, Vec<f64>)> {
    let mut by_pair: BTreeMap<String, Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows {
        by_pair.entry(r.pair_id.clone()).or_default().push(r);
    }
    by_pair
        .into_iter()
        .map(|(pair, mut v)| {
            v.sort_by_key(|r| r.index);
            let preds = v.iter().map(|r| r.prediction).collect();
            let refs = v.iter().map(|r| r.reference).collect();
            (pair, (preds, refs))
        })
        .collect()
}
