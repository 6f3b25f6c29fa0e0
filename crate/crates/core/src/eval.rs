//! Scoring: MAE, frame accuracy, per-DOA histograms and results tables.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::room_sim::DoaGrid;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("nothing to score")]
    Empty,
    #[error("{estimates} estimates for {truths} truths")]
    Mismatch { estimates: usize, truths: usize },
    #[error("angle {0} is not on the DOA grid")]
    OffGrid(f64),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("malformed results table: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "vae-ssl")]
    VaeSsl,
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "srp-phat")]
    SrpPhat,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::VaeSsl, Method::Cnn, Method::SrpPhat];

    pub fn name(self) -> &'static str {
        match self {
            Method::VaeSsl => "vae-ssl",
            Method::Cnn => "cnn",
            Method::SrpPhat => "srp-phat",
        }
    }

    /// Learned methods depend on the label budget; SRP-PHAT does not.
    pub fn uses_labels(self) -> bool {
        self != Method::SrpPhat
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| EvalError::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: Method,
    pub preset: String,
    /// Label budget; `None` for SRP-PHAT.
    pub j: Option<usize>,
    pub mae_degrees: f64,
    pub accuracy_percent: f64,
    /// `counts[true][estimated]`.
    pub histogram: Vec<Vec<usize>>,
}

fn check_lengths(estimates: usize, truths: usize) -> Result<(), EvalError> {
    if estimates != truths {
        return Err(EvalError::Mismatch { estimates, truths });
    }
    if truths == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Mean absolute angular error in degrees, without wrapping.
pub fn mae_degrees(estimates: &[f64], truths: &[f64]) -> Result<f64, EvalError> {
    check_lengths(estimates.len(), truths.len())?;
    let sum: f64 = estimates.iter().zip(truths).map(|(e, t)| (e - t).abs()).sum();
    Ok(sum / truths.len() as f64)
}

/// Percentage of exact grid-bin matches.
pub fn frame_accuracy(estimates: &[usize], truths: &[usize]) -> Result<f64, EvalError> {
    check_lengths(estimates.len(), truths.len())?;
    let hits = estimates.iter().zip(truths).filter(|(e, t)| e == t).count();
    Ok(100.0 * hits as f64 / truths.len() as f64)
}

fn grid_index(grid: &DoaGrid, angle: f64) -> Result<usize, EvalError> {
    grid.index_of(angle).ok_or(EvalError::OffGrid(angle))
}

/// Raw `T x T` counts, rows indexed by true DOA.
pub fn doa_counts(estimates: &[f64], truths: &[f64], grid: &DoaGrid) -> Result<Vec<Vec<usize>>, EvalError> {
    check_lengths(estimates.len(), truths.len())?;
    let mut counts = vec![vec![0; grid.len()]; grid.len()];
    for (&e, &t) in estimates.iter().zip(truths) {
        counts[grid_index(grid, t)?][grid_index(grid, e)?] += 1;
    }
    Ok(counts)
}

/// Row-normalized counts. Rows for DOAs that never occur stay zero.
pub fn normalize_rows(counts: &[Vec<usize>]) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.iter().map(|&c| if n == 0 { 0.0 } else { c as f64 / n as f64 }).collect()
        })
        .collect()
}

pub fn doa_histogram(estimates: &[f64], truths: &[f64], grid: &DoaGrid) -> Result<Vec<Vec<f64>>, EvalError> {
    Ok(normalize_rows(&doa_counts(estimates, truths, grid)?))
}

/// Score grid-index predictions against grid-index truths.
pub fn evaluate_indices(
    method: Method,
    preset: &str,
    j: Option<usize>,
    estimates: &[usize],
    truths: &[usize],
    grid: &DoaGrid,
) -> Result<EvalResult, EvalError> {
    check_lengths(estimates.len(), truths.len())?;
    let angle = |i: usize| if i < grid.len() { Ok(grid.angle(i)) } else { Err(EvalError::OffGrid(i as f64)) };
    let est: Vec<f64> = estimates.iter().map(|&i| angle(i)).collect::<Result<_, _>>()?;
    let tru: Vec<f64> = truths.iter().map(|&i| angle(i)).collect::<Result<_, _>>()?;
    Ok(EvalResult {
        method,
        preset: preset.to_string(),
        j,
        mae_degrees: mae_degrees(&est, &tru)?,
        accuracy_percent: frame_accuracy(estimates, truths)?,
        histogram: doa_counts(&est, &tru, grid)?,
    })
}

/// Normalized histogram as CSV: header of estimated angles, one row per true
/// angle.
pub fn histogram_csv(hist: &[Vec<f64>], grid: &DoaGrid) -> String {
    let mut out = String::from("true\\estimated");
    for a in grid.angles() {
        out.push_str(&format!(",{a}"));
    }
    out.push('\n');
    for (a, row) in grid.angles().iter().zip(hist) {
        out.push_str(&a.to_string());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn histogram_file_name(method: Method, preset: &str, j: Option<usize>) -> String {
    match j {
        Some(j) => format!("hist_{method}_{preset}_{j}.csv"),
        None => format!("hist_{method}_{preset}_all.csv"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// One scored cell pair recovered from a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEntry {
    pub method: Method,
    pub preset: String,
    pub j: Option<usize>,
    pub mae_degrees: f64,
    pub accuracy_percent: f64,
}

impl From<&EvalResult> for TableEntry {
    fn from(r: &EvalResult) -> Self {
        TableEntry {
            method: r.method,
            preset: r.preset.clone(),
            j: r.j,
            mae_degrees: r.mae_degrees,
            accuracy_percent: r.accuracy_percent,
        }
    }
}

/// Rows keyed by (preset, J), one MAE/Acc column pair per method present.
/// Label-free methods get their own trailing row keyed by the method name.
pub fn emit_results_table(results: &[EvalResult]) -> ResultsTable {
    let mut methods: Vec<Method> = results.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut header = vec!["preset".to_string(), "J".to_string()];
    for m in &methods {
        header.push(format!("{m} MAE"));
        header.push(format!("{m} Acc"));
    }
    let mut keys: Vec<(String, Option<usize>, Option<Method>)> = results
        .iter()
        .map(|r| (r.preset.clone(), r.j, if r.j.is_none() { Some(r.method) } else { None }))
        .collect();
    // J rows first (ascending), then method rows
    keys.sort_by(|a, b| (&a.0, a.1.is_none(), a.1, a.2).cmp(&(&b.0, b.1.is_none(), b.1, b.2)));
    keys.dedup();
    let rows = keys
        .into_iter()
        .map(|(preset, j, only)| {
            let mut row = vec![preset.clone(), j.map_or_else(|| only.map(|m| m.to_string()).unwrap_or_default(), |j| j.to_string())];
            for m in &methods {
                let hit = results.iter().find(|r| r.preset == preset && r.j == j && r.method == *m && (j.is_some() || only == Some(*m)));
                match hit {
                    Some(r) => {
                        row.push(r.mae_degrees.to_string());
                        row.push(r.accuracy_percent.to_string());
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            row
        })
        .collect();
    ResultsTable { header, rows }
}

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf8")
    }

    /// Space-padded columns; numbers rounded to two decimals.
    pub fn to_text(&self) -> String {
        let shown: Vec<Vec<String>> = std::iter::once(self.header.clone())
            .chain(self.rows.iter().map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(i, c)| match c.parse::<f64>() {
                        Ok(v) if i >= 2 => format!("{v:.2}"),
                        _ => c.clone(),
                    })
                    .collect()
            }))
            .collect();
        let widths: Vec<usize> =
            (0..self.header.len()).map(|i| shown.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &shown {
            let line: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Parse a table written by [`ResultsTable::to_csv`] back into entries.
pub fn parse_results_csv(text: &str) -> Result<Vec<TableEntry>, EvalError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rd.headers().map_err(|e| EvalError::Parse(e.to_string()))?.clone();
    if header.len() < 2 || header.len() % 2 != 0 {
        return Err(EvalError::Parse(format!("{} header columns", header.len())));
    }
    let methods: Vec<Method> = header
        .iter()
        .skip(2)
        .step_by(2)
        .map(|h| h.strip_suffix(" MAE").ok_or_else(|| EvalError::Parse(h.to_string()))?.parse())
        .collect::<Result<_, _>>()?;
    let num = |s: &str| s.parse::<f64>().map_err(|e| EvalError::Parse(format!("{s}: {e}")));
    let mut out = vec![];
    for rec in rd.records() {
        let rec = rec.map_err(|e| EvalError::Parse(e.to_string()))?;
        if rec.len() != header.len() {
            return Err(EvalError::Parse(format!("row has {} cells", rec.len())));
        }
        let j = rec[1].parse::<usize>().ok();
        for (i, m) in methods.iter().enumerate() {
            let (mae, acc) = (&rec[2 + 2 * i], &rec[3 + 2 * i]);
            if mae.is_empty() && acc.is_empty() {
                continue;
            }
            out.push(TableEntry {
                method: *m,
                preset: rec[0].to_string(),
                j,
                mae_degrees: num(mae)?,
                accuracy_percent: num(acc)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(method: Method, j: Option<usize>, mae: f64, acc: f64) -> EvalResult {
        EvalResult { method, preset: "desk".into(), j, mae_degrees: mae, accuracy_percent: acc, histogram: vec![] }
    }

    #[test]
    fn mae_and_accuracy_basics() {
        let t = [-10.0, 0.0, 10.0];
        assert_eq!(mae_degrees(&t, &t).unwrap(), 0.0);
        assert_eq!(mae_degrees(&[-5.0, 5.0, 15.0], &t).unwrap(), 5.0);
        assert_eq!(frame_accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(frame_accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(mae_degrees(&[], &[]), Err(EvalError::Empty));
        assert_eq!(frame_accuracy(&[1], &[]), Err(EvalError::Mismatch { estimates: 1, truths: 0 }));
    }

    #[test]
    fn perfect_histogram_is_identity() {
        let g = DoaGrid::desk();
        let a = g.angles().to_vec();
        let h = doa_histogram(&a, &a, &g).unwrap();
        for (i, row) in h.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == k { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(doa_histogram(&[3.0], &[0.0], &g), Err(EvalError::OffGrid(3.0)));
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = emit_results_table(&[]);
        assert!(t.rows.is_empty());
        assert_eq!(t.to_csv(), "preset,J\n");
        assert!(parse_results_csv(&t.to_csv()).unwrap().is_empty());
    }

    #[test]
    fn table_layout_and_round_trip() {
        let rs = vec![
            result(Method::SrpPhat, None, 18.0, 11.6),
            result(Method::Cnn, Some(19), 7.123456789012345, 64.2),
            result(Method::VaeSsl, Some(19), 1.0 / 3.0, 88.42105263157895),
            result(Method::VaeSsl, Some(38), 0.1, 99.0),
        ];
        let t = emit_results_table(&rs);
        assert_eq!(t.header, ["preset", "J", "vae-ssl MAE", "vae-ssl Acc", "cnn MAE", "cnn Acc", "srp-phat MAE", "srp-phat Acc"]);
        assert_eq!(t.rows.len(), 3);
        assert_eq!(t.rows[0][1], "19");
        assert_eq!(t.rows[2][1], "srp-phat");
        let mut back = parse_results_csv(&t.to_csv()).unwrap();
        let mut want: Vec<TableEntry> = rs.iter().map(TableEntry::from).collect();
        let key = |e: &TableEntry| (e.j.is_none(), e.j, e.method);
        back.sort_by_key(key);
        want.sort_by_key(key);
        assert_eq!(back, want);
        assert!(t.to_text().lines().count() == 4);
    }
}
