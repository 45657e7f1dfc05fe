//! HR@k and NDCG@k over ranked recommendation lists.
//!
//! The test split holds exactly one relevant item per user, so NDCG uses
//! the single-relevant-item form: DCG = 1/log2(1+rank), IDCG = 1. Lists
//! are ranked against the full catalog (no sampled negatives); users with
//! missing predictions count as misses rather than being excluded.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::SplitExample;

/// Per-model metric aggregate. `hr` and `ndcg` map k to the mean over users.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: String,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub num_users: usize,
}

/// 1 if the target appears within the first k entries, else 0.
pub fn hr_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    if ranked.iter().take(k).any(|item| item == target) {
        1.0
    } else {
        0.0
    }
}

/// 1/log2(1+rank) if the target is ranked within k, else 0. Ranks are 1-based.
pub fn ndcg_at_k(ranked: &[String], target: &str, k: usize) -> f64 {
    match ranked.iter().take(k).position(|item| item == target) {
        Some(idx) => 1.0 / ((idx as f64) + 2.0).log2(),
        None => 0.0,
    }
}

/// One user's ranked predictions, highest score first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserPrediction {
    pub user_id: String,
    pub items: Vec<String>,
}

/// Mean HR@k / NDCG@k over the test split.
///
/// Every test user must have at most one prediction entry; users without
/// one are scored as all-miss and reported via a warning.
pub fn evaluate_split(
    predictions: &[UserPrediction],
    test: &[SplitExample],
    ks: &[usize],
) -> Result<MetricsReport> {
    if ks.is_empty() {
        return Err(Error::config("evaluate: at least one k value is required"));
    }
    let mut by_user: HashMap<&str, &UserPrediction> = HashMap::new();
    for pred in predictions {
        let mut seen = HashSet::new();
        for item in &pred.items {
            if !seen.insert(item.as_str()) {
                return Err(Error::data(format!(
                    "duplicate item '{}' in prediction list for user '{}'",
                    item, pred.user_id
                )));
            }
        }
        if by_user.insert(pred.user_id.as_str(), pred).is_some() {
            return Err(Error::data(format!(
                "duplicate prediction entry for user '{}'",
                pred.user_id
            )));
        }
    }

    let empty: Vec<String> = Vec::new();
    let mut hr_sums: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut ndcg_sums: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut missing = 0usize;
    for example in test {
        let ranked = match by_user.get(example.user_id.as_str()) {
            Some(pred) => &pred.items,
            None => {
                missing += 1;
                &empty
            }
        };
        for &k in ks {
            *hr_sums.get_mut(&k).unwrap() += hr_at_k(ranked, &example.target, k);
            *ndcg_sums.get_mut(&k).unwrap() += ndcg_at_k(ranked, &example.target, k);
        }
    }
    if missing > 0 {
        log::warn!("{missing} test users had no prediction entry; scored as all-miss");
    }

    let n = test.len();
    let denom = if n == 0 { 1.0 } else { n as f64 };
    Ok(MetricsReport {
        dataset: String::new(),
        model: String::new(),
        hr: hr_sums.into_iter().map(|(k, s)| (k, s / denom)).collect(),
        ndcg: ndcg_sums.into_iter().map(|(k, s)| (k, s / denom)).collect(),
        num_users: n,
    })
}

/// Side-by-side comparison of named reports: an aligned text table with the
/// best value per column marked `*`, plus a machine-readable JSON value.
///
/// All reports must carry the same k set.
pub fn compare_reports(reports: &[(String, MetricsReport)]) -> Result<(String, serde_json::Value)> {
    if reports.is_empty() {
        return Err(Error::config("compare: at least one report is required"));
    }
    let ks: BTreeSet<usize> = reports[0].1.hr.keys().copied().collect();
    for (name, report) in reports {
        let report_ks: BTreeSet<usize> = report.hr.keys().copied().collect();
        let ndcg_ks: BTreeSet<usize> = report.ndcg.keys().copied().collect();
        if report_ks != ks || ndcg_ks != ks {
            return Err(Error::data(format!(
                "compare: report '{name}' has a mismatched k set"
            )));
        }
    }

    // Column order mirrors the usual reporting layout: HR@k, NDCG@k per k.
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for &k in &ks {
        let hr_vals: Vec<f64> = reports.iter().map(|(_, r)| r.hr[&k]).collect();
        let ndcg_vals: Vec<f64> = reports.iter().map(|(_, r)| r.ndcg[&k]).collect();
        columns.push((format!("HR@{k}"), hr_vals));
        columns.push((format!("NDCG@{k}"), ndcg_vals));
    }

    let best_per_column: Vec<f64> = columns
        .iter()
        .map(|(_, vals)| vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let name_width = reports
        .iter()
        .map(|(name, _)| name.len())
        .chain(std::iter::once("model".len()))
        .max()
        .unwrap();
    let col_width = columns
        .iter()
        .map(|(h, _)| h.len())
        .max()
        .unwrap()
        .max(8)
        + 1; // room for the best marker

    let mut table = String::new();
    table.push_str(&format!("{:<name_width$}", "model"));
    for (header, _) in &columns {
        table.push_str(&format!("  {header:>col_width$}"));
    }
    table.push('\n');
    let mut rows_json = Vec::new();
    for (row, (name, report)) in reports.iter().enumerate() {
        table.push_str(&format!("{name:<name_width$}"));
        let mut values = serde_json::Map::new();
        let mut best_cols = Vec::new();
        for (col, (header, vals)) in columns.iter().enumerate() {
            let v = vals[row];
            let is_best = v == best_per_column[col];
            let cell = if is_best {
                format!("{v:.4}*")
            } else {
                format!("{v:.4}")
            };
            table.push_str(&format!("  {cell:>col_width$}"));
            values.insert(header.clone(), serde_json::json!(v));
            if is_best {
                best_cols.push(header.clone());
            }
        }
        table.push('\n');
        rows_json.push(serde_json::json!({
            "model": name,
            "dataset": report.dataset,
            "values": serde_json::Value::Object(values),
            "best": best_cols,
        }));
    }

    let json = serde_json::json!({
        "columns": columns.iter().map(|(h, _)| h.clone()).collect::<Vec<_>>(),
        "rows": rows_json,
    });
    Ok((table, json))
}
