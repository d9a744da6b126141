//! Training diagnostics and their CSV / JSON emission.
//!
//! Metrics CSV columns are fixed:
//! `epoch,mse,l1,kl,di_mean,runtime_s,effective_rank,op_fro_1..op_fro_M`.
//! Floats use Rust's shortest round-trip formatting, which never depends on
//! locale. Optional values are written as empty fields.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operators::OperatorDictionary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean over the batch of `‖x' − T_Ψ(c)x‖²`.
    pub mse: f64,
    /// Mean over the batch of `‖c‖₁`.
    pub l1: f64,
    pub kl: f64,
    /// Mean distance improvement on held-out pairs, when evaluated.
    pub di_mean: Option<f64>,
    /// Cumulative training time in seconds.
    pub runtime_s: f64,
    pub effective_rank: Option<f64>,
    pub op_fro: Vec<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_f64(field: &str, name: &str) -> Result<f64> {
    field
        .parse()
        .map_err(|_| Error::invalid(format!("cannot parse `{field}` in column {name}")))
}

fn parse_opt(field: &str, name: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_f64(field, name).map(Some)
    }
}

/// Metrics CSV header for a dictionary of `n_ops` operators.
pub fn metrics_header(n_ops: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "mse", "l1", "kl", "di_mean", "runtime_s", "effective_rank"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=n_ops).map(|m| format!("op_fro_{m}")));
    h
}

/// Renders records as CSV text. `n_ops` fixes the header when `records` is empty.
pub fn metrics_csv(records: &[MetricsRecord], n_ops: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::invalid(format!("csv encoding failed: {e}"));
    w.write_record(metrics_header(n_ops)).map_err(csv_err)?;
    for r in records {
        if r.op_fro.len() != n_ops {
            return Err(Error::invalid("record operator-norm count does not match header"));
        }
        let mut row = vec![
            r.epoch.to_string(),
            r.mse.to_string(),
            r.l1.to_string(),
            r.kl.to_string(),
            fmt_opt(r.di_mean),
            r.runtime_s.to_string(),
            fmt_opt(r.effective_rank),
        ];
        row.extend(r.op_fro.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parses metrics CSV text produced by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr
        .headers()
        .map_err(|e| Error::invalid(format!("bad metrics header: {e}")))?
        .clone();
    let n_ops = headers.len().saturating_sub(7);
    if metrics_header(n_ops).iter().map(String::as_str).ne(headers.iter()) {
        return Err(Error::invalid("metrics header does not match the expected schema"));
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::invalid(format!("bad metrics row: {e}")))?;
        out.push(MetricsRecord {
            epoch: row[0]
                .parse()
                .map_err(|_| Error::invalid(format!("bad epoch `{}`", &row[0])))?,
            mse: parse_f64(&row[1], "mse")?,
            l1: parse_f64(&row[2], "l1")?,
            kl: parse_f64(&row[3], "kl")?,
            di_mean: parse_opt(&row[4], "di_mean")?,
            runtime_s: parse_f64(&row[5], "runtime_s")?,
            effective_rank: parse_opt(&row[6], "effective_rank")?,
            op_fro: (7..row.len())
                .map(|i| parse_f64(&row[i], "op_fro"))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Run summary written next to the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub experiment: String,
    pub seed: u64,
    /// The exact configuration the run used.
    pub config: serde_json::Value,
    pub final_metrics: Option<MetricsRecord>,
    pub wall_clock_s: f64,
    #[serde(default)]
    pub results: serde_json::Value,
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the metrics CSV and the JSON summary.
pub fn emit(records: &[MetricsRecord], n_ops: usize, csv_path: &Path, json_path: &Path, summary: &RunSummary) -> Result<()> {
    write_text(csv_path, &metrics_csv(records, n_ops)?)?;
    write_text(json_path, &serde_json::to_string_pretty(summary)?)
}

/// `exp(H(p))` where `p` is the singular-value distribution of the
/// mean-centered feature matrix (one feature vector per row).
pub fn effective_rank(rows: &[Vec<f64>]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::invalid("effective rank needs at least two rows"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("feature rows must share a positive dimension"));
    }
    if rows.iter().all(|r| r.iter().all(|&v| v == 0.0)) {
        return Err(Error::invalid("effective rank of an all-zero matrix is undefined"));
    }
    let n = rows.len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let sv = x.singular_values();
    let total: f64 = sv.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("centered features are identically zero"));
    }
    let entropy: f64 = sv
        .iter()
        .map(|s| s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

/// Points `T_Ψ(c·e_m) x` for every `c` in `grid`.
pub fn operator_paths(dict: &OperatorDictionary, start: &[f64], op: usize, grid: &[f64]) -> Result<Vec<Vec<f64>>> {
    if op >= dict.n_ops() {
        return Err(Error::invalid(format!(
            "operator index {op} out of range for {} operators",
            dict.n_ops()
        )));
    }
    if grid.is_empty() {
        return Err(Error::invalid("coefficient grid is empty"));
    }
    let mut coeffs = vec![0.0; dict.n_ops()];
    grid.iter()
        .map(|&c| {
            coeffs[op] = c;
            dict.transport(&coeffs, start)
        })
        .collect()
}

/// Symmetric grid `[-n_c, …, n_c]` with the given step.
pub fn symmetric_grid(n_c: f64, step: f64) -> Vec<f64> {
    let k = (n_c / step).round() as i64;
    (-k..=k).map(|i| i as f64 * step).collect()
}

/// One path row per point: `path,op,c,x0,…`.
pub fn paths_csv(paths: &[(usize, usize, Vec<f64>, Vec<Vec<f64>>)]) -> String {
    let dim = paths
        .iter()
        .find_map(|(_, _, _, pts)| pts.first().map(Vec::len))
        .unwrap_or(0);
    let mut out = String::from("path,op,c");
    for i in 0..dim {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for (path_id, op, grid, pts) in paths {
        for (c, p) in grid.iter().zip(pts) {
            out.push_str(&format!("{path_id},{op},{c}"));
            for v in p {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(epoch: usize) -> MetricsRecord {
        MetricsRecord {
            epoch,
            mse: 0.1 * epoch as f64 + 1e-17,
            l1: 2.5,
            kl: 0.0,
            di_mean: if epoch % 2 == 0 { Some(0.25) } else { None },
            runtime_s: 1.0 / 3.0,
            effective_rank: None,
            op_fro: vec![1.0, 0.5],
        }
    }

    #[test]
    fn empty_records_give_header_only() {
        let text = metrics_csv(&[], 3).unwrap();
        assert_eq!(
            text,
            "epoch,mse,l1,kl,di_mean,runtime_s,effective_rank,op_fro_1,op_fro_2,op_fro_3\n"
        );
        assert!(parse_metrics_csv(&text).unwrap().is_empty());
    }

    #[test]
    fn csv_round_trip() {
        let recs: Vec<_> = (0..4).map(record).collect();
        let text = metrics_csv(&recs, 2).unwrap();
        assert_eq!(parse_metrics_csv(&text).unwrap(), recs);
    }

    #[test]
    fn mismatched_header_is_rejected() {
        assert!(parse_metrics_csv("epoch,mse\n1,2\n").is_err());
    }

    #[test]
    fn effective_rank_of_line_is_one() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64, -0.5 * i as f64]).collect();
        assert!((effective_rank(&rows).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn effective_rank_scale_invariant() {
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| {
                let t = i as f64;
                vec![t.sin(), (0.3 * t).cos(), t * 0.01, (t * t).sin()]
            })
            .collect();
        let scaled: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * 37.5).collect()).collect();
        let (a, b) = (effective_rank(&rows).unwrap(), effective_rank(&scaled).unwrap());
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn effective_rank_errors() {
        assert!(effective_rank(&[vec![1.0, 2.0]]).is_err());
        assert!(effective_rank(&[vec![0.0, 0.0], vec![0.0, 0.0]]).is_err());
    }

    #[test]
    fn path_edge_cases() {
        let dict = OperatorDictionary::from_params(1, 2, 2, vec![0.0, -1.0, 1.0, 0.0]).unwrap();
        let start = [1.0, 2.0];
        assert_eq!(operator_paths(&dict, &start, 0, &[0.0]).unwrap(), vec![start.to_vec()]);
        assert!(operator_paths(&dict, &start, 1, &[0.0]).is_err());
        assert!(operator_paths(&dict, &start, 0, &[]).is_err());
        assert_eq!(symmetric_grid(1.0, 0.5), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }
}
