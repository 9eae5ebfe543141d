//! Metrics CSV and JSON run summaries.
//!
//! CSV columns: `k,eps_k,tau_k,R,S,S_delayed,V,td_error,lemma3_slack,lemma4_slack`.
//! Missing or NaN values are written as empty fields. Reals use plain
//! decimal notation with 13 significant digits.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithm::{AdmissibilityReport, MetricsRecord};

pub const CSV_HEADER: &str = "k,eps_k,tau_k,R,S,S_delayed,V,td_error,lemma3_slack,lemma4_slack";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
}

/// Decimal rendering with at least 12 significant digits; NaN is empty.
pub fn format_real(x: f64) -> String {
    if x.is_nan() {
        return String::new();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let exp = x.abs().log10().floor() as i64;
    // one spare digit absorbs log10 rounding at powers of ten
    let decimals = (12 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

fn opt(x: Option<f64>) -> String {
    x.map_or(String::new(), format_real)
}

pub fn csv_line(r: &MetricsRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        r.k,
        format_real(r.eps_k),
        r.tau_k,
        format_real(r.r),
        format_real(r.s),
        format_real(r.s_delayed),
        format_real(r.v),
        opt(r.td_error),
        opt(r.lemma3_slack),
        opt(r.lemma4_slack)
    )
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", csv_line(r));
    }
    out
}

pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<(), OutputError> {
    write_file(path, metrics_csv(records).as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), OutputError> {
    let io = |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

fn parse_field(s: &str) -> Result<f64, String> {
    if s.is_empty() {
        Ok(f64::NAN)
    } else {
        s.parse::<f64>()
            .map_err(|e| format!("bad number {s:?}: {e}"))
    }
}

/// Reads a metrics CSV back. Empty `R`/`S`/`V` fields become NaN, empty
/// optional columns `None`.
pub fn read_metrics_csv(text: &str, path: &Path) -> Result<Vec<MetricsRecord>, OutputError> {
    let err = |line: usize, msg: String| OutputError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => {
            return Err(err(
                1,
                format!(
                    "expected header {CSV_HEADER:?}, got {:?}",
                    other.unwrap_or("")
                ),
            ))
        }
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(err(lineno, format!("expected 10 fields, got {}", f.len())));
        }
        let real = |i: usize| parse_field(f[i]).map_err(|m| err(lineno, m));
        let optional = |i: usize| real(i).map(|v| (!v.is_nan()).then_some(v));
        let int = |i: usize| {
            f[i].parse::<usize>()
                .map_err(|e| err(lineno, format!("bad integer {:?}: {e}", f[i])))
        };
        out.push(MetricsRecord {
            k: int(0)?,
            eps_k: real(1)?,
            tau_k: int(2)?,
            r: real(3)?,
            s: real(4)?,
            s_delayed: real(5)?,
            v: real(6)?,
            td_error: optional(7)?,
            lemma3_slack: optional(8)?,
            lemma4_slack: optional(9)?,
        });
    }
    Ok(out)
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRecord>, OutputError> {
    let text = std::fs::read_to_string(path).map_err(|source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_metrics_csv(&text, path)
}

/// Analysis of one run or ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAnalysis {
    pub scenario: String,
    pub seed: u64,
    pub slope: Option<f64>,
    pub r2: Option<f64>,
    pub plateau: Option<f64>,
    pub solved_mazes: Option<usize>,
    pub admissibility: Option<AdmissibilityReport>,
}

pub fn summary_json(a: &RunAnalysis) -> String {
    serde_json::to_string_pretty(a).expect("summary serializes")
}

pub fn emit_summary(a: &RunAnalysis, path: &Path) -> Result<(), OutputError> {
    write_file(path, summary_json(a).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> MetricsRecord {
        MetricsRecord {
            k: 3,
            eps_k: 5e-4,
            tau_k: 7,
            r: f64::NAN,
            s: 0.125,
            s_delayed: 1234.5,
            v: f64::NAN,
            td_error: Some(0.3),
            lemma3_slack: None,
            lemma4_slack: Some(-2e-9),
        }
    }

    #[test]
    fn empty_and_single() {
        assert_eq!(metrics_csv(&[]), format!("{CSV_HEADER}\n"));
        let text = metrics_csv(&[record()]);
        assert_eq!(text.lines().count(), 2);
        let fields: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(fields[0], "3");
        assert_eq!(fields[3], "");
        assert_eq!(fields[8], "");
    }

    #[test]
    fn reals_keep_twelve_digits() {
        assert_eq!(format_real(0.0), "0");
        assert_eq!(format_real(1.0), "1.000000000000");
        assert_eq!(format_real(5e-4), "0.0005000000000000");
        assert_eq!(format_real(-1234.5), "-1234.500000000");
        for x in [std::f64::consts::PI, 1e-13 / 3.0, 98765.4321e7, -2.0 / 3.0] {
            let back: f64 = format_real(x).parse().unwrap();
            assert!(((back - x) / x).abs() < 1e-11, "{x} -> {}", format_real(x));
            assert!(!format_real(x).contains('e'));
        }
    }

    #[test]
    fn csv_round_trip() {
        let text = metrics_csv(&[record()]);
        let back = read_metrics_csv(&text, Path::new("mem")).unwrap();
        assert_eq!(back[0].k, 3);
        assert!(back[0].r.is_nan());
        assert_eq!(back[0].lemma3_slack, None);
        assert_eq!(back[0].td_error, Some(0.3));
        assert!(read_metrics_csv("k,R\n", Path::new("mem")).is_err());
    }

    #[test]
    fn summary_keys() {
        let a = RunAnalysis {
            scenario: "system_id".into(),
            seed: 1,
            slope: Some(-1.0),
            r2: Some(0.99),
            plateau: None,
            solved_mazes: None,
            admissibility: None,
        };
        let v: serde_json::Value = serde_json::from_str(&summary_json(&a)).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        for k in [
            "scenario",
            "seed",
            "slope",
            "r2",
            "plateau",
            "solved_mazes",
            "admissibility",
        ] {
            assert!(keys.iter().any(|x| *x == k), "{k}");
        }
    }

    #[test]
    fn io_error_names_path() {
        let err = emit_metrics(&[], Path::new("/nonexistent-dir/x.csv")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }
}
