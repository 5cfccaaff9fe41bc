//! Result rows and mean ± std summaries over seeds.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rsa::mean_std;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: String,
    pub method: String,
    pub n_d: usize,
    pub seed: u64,
    /// Exact-match in `[0, 1]`.
    pub score: f64,
    pub params: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub method: String,
    pub n_d: usize,
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub count: usize,
    pub params: usize,
}

/// Groups rows by `(task, method, N_D)` in sorted order.
pub fn aggregate_results(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::Config("no result rows to aggregate".into()));
    }
    let mut groups: BTreeMap<(String, String, usize), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.task.clone(), r.method.clone(), r.n_d)).or_default().push(r);
    }
    Ok(groups
        .into_iter()
        .map(|((task, method, n_d), group)| {
            let scores: Vec<f64> = group.iter().map(|r| r.score).collect();
            let (mean, std) = mean_std(&scores);
            SummaryRow {
                task,
                method,
                n_d,
                mean,
                std,
                count: group.len(),
                params: group[0].params,
            }
        })
        .collect())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(e.to_string())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Writes `summary.csv` and `summary.json` into `dir`.
pub fn write_summary(dir: &Path, summary: &[SummaryRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(&dir.join("summary.csv"), summary)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, score: f64) -> ResultRow {
        ResultRow {
            task: "kv".into(),
            method: method.into(),
            n_d: 64,
            seed,
            score,
            params: 968,
            seconds: 1.0,
        }
    }

    #[test]
    fn single_row_has_zero_std() {
        let s = aggregate_results(&[row("m", 1, 0.7)]).unwrap();
        assert_eq!((s[0].mean, s[0].std, s[0].count), (0.7, 0.0, 1));
    }

    #[test]
    fn two_rows_average() {
        let s = aggregate_results(&[row("m", 1, 0.4), row("m", 2, 0.6)]).unwrap();
        assert!((s[0].mean - 0.5).abs() < 1e-15);
    }

    #[test]
    fn five_rows_match_spreadsheet_oracle() {
        let scores = [0.52, 0.61, 0.47, 0.58, 0.55];
        let rows: Vec<ResultRow> = scores.iter().enumerate().map(|(i, &s)| row("m", i as u64, s)).collect();
        let s = aggregate_results(&rows).unwrap();
        // AVERAGE = 2.73 / 5; STDEV.P from Σ(x−μ)² = 0.01172
        assert!((s[0].mean - 0.546).abs() < 1e-12);
        assert!((s[0].std - (0.01172f64 / 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn groups_are_separate_and_sorted() {
        let s = aggregate_results(&[row("pfeiffer", 1, 0.2), row("mixphm", 1, 0.8), row("pfeiffer", 2, 0.4)]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].method, "mixphm");
        assert_eq!(s[1].count, 2);
    }

    #[test]
    fn empty_input_is_a_config_error() {
        assert!(matches!(aggregate_results(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row("m", 1, 0.25), row("m", 2, 0.75)];
        let path = dir.path().join("results.csv");
        write_csv(&path, &rows).unwrap();
        assert_eq!(read_results_csv(&path).unwrap(), rows);
        write_summary(dir.path(), &aggregate_results(&rows).unwrap()).unwrap();
        assert!(dir.path().join("summary.json").exists());
    }
}
