//! Tables derived from stored records: mean and sample standard deviation
//! over seeds per (method, sparsity) cell, as tab-separated text with a JSON
//! mirror. Reports only read record fields; nothing is recomputed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{write_atomic, ExperimentRecord};
use crate::tickets::TicketMethod;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    AccuracyVsSparsity,
    SearchTime,
    KlProfile,
    LayerSparsity,
    SpikesVsSparsity,
    EbEpoch,
}

impl ReportKind {
    pub const ALL: [ReportKind; 6] = [
        ReportKind::AccuracyVsSparsity,
        ReportKind::SearchTime,
        ReportKind::KlProfile,
        ReportKind::LayerSparsity,
        ReportKind::SpikesVsSparsity,
        ReportKind::EbEpoch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReportKind::AccuracyVsSparsity => "accuracy-vs-sparsity",
            ReportKind::SearchTime => "search-time",
            ReportKind::KlProfile => "kl-profile",
            ReportKind::LayerSparsity => "layer-sparsity",
            ReportKind::SpikesVsSparsity => "spikes-vs-sparsity",
            ReportKind::EbEpoch => "eb-epoch",
        }
    }
}

impl std::str::FromStr for ReportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ReportKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown report kind `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: ReportKind,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<serde_json::Value>>,
}

/// Mean and sample standard deviation; the deviation is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Grouping key: sparsity in units of 1e-4 so that seeds of one cell coincide.
fn sparsity_key(r: &ExperimentRecord) -> i64 {
    (r.target_sparsity.unwrap_or(r.achieved_sparsity) * 1e4).round() as i64
}

fn num(v: f64) -> serde_json::Value {
    serde_json::Value::from((v * 1e6).round() / 1e6)
}

type Cells<'a> = BTreeMap<(i64, TicketMethod), Vec<&'a ExperimentRecord>>;

fn cells<'a>(records: &'a [ExperimentRecord], keep: impl Fn(&ExperimentRecord) -> bool) -> Cells<'a> {
    let mut out: Cells<'a> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_ok() && keep(r)) {
        out.entry((sparsity_key(r), r.method)).or_default().push(r);
    }
    out
}

fn stat_columns(prefix: &str) -> [String; 2] {
    [format!("{prefix}_mean"), format!("{prefix}_std")]
}

fn push_stat(row: &mut Vec<serde_json::Value>, values: &[f64]) {
    let (m, s) = mean_std(values);
    row.push(num(m));
    row.push(num(s));
}

fn cell_head(method: TicketMethod, group: &[&ExperimentRecord]) -> Vec<serde_json::Value> {
    let achieved: Vec<f64> = group.iter().map(|r| r.achieved_sparsity).collect();
    vec![
        serde_json::Value::from(method.label()),
        num(mean_std(&achieved).0),
        serde_json::Value::from(group.len()),
    ]
}

fn head_columns() -> Vec<String> {
    vec!["method".into(), "sparsity".into(), "n".into()]
}

/// Builds the table for `kind`, or an empty-report error when no record has the needed fields.
pub fn build_report(records: &[ExperimentRecord], kind: ReportKind) -> Result<Report> {
    let mut columns = head_columns();
    let mut rows = Vec::new();
    match kind {
        ReportKind::AccuracyVsSparsity | ReportKind::SpikesVsSparsity => {
            let field = |r: &ExperimentRecord| match kind {
                ReportKind::AccuracyVsSparsity => Some(r.final_test_accuracy),
                _ => r.mean_spikes_per_image,
            };
            columns.extend(stat_columns(if kind == ReportKind::AccuracyVsSparsity {
                "accuracy"
            } else {
                "spikes_per_image"
            }));
            for ((_, method), group) in cells(records, |r| field(r).is_some()) {
                let mut row = cell_head(method, &group);
                let values: Vec<f64> = group.iter().filter_map(|r| field(r)).collect();
                push_stat(&mut row, &values);
                rows.push(row);
            }
        }
        ReportKind::SearchTime => {
            for prefix in ["search_wall_seconds", "search_cpu_seconds", "retrain_wall_seconds", "end_to_end_seconds"] {
                columns.extend(stat_columns(prefix));
            }
            for ((_, method), group) in cells(records, |_| true) {
                let mut row = cell_head(method, &group);
                let wall: Vec<f64> = group.iter().map(|r| r.search_wall_seconds).collect();
                push_stat(&mut row, &wall);
                let cpu: Vec<f64> = group.iter().filter_map(|r| r.search_cpu_seconds).collect();
                if cpu.is_empty() {
                    row.extend([serde_json::Value::Null, serde_json::Value::Null]);
                } else {
                    push_stat(&mut row, &cpu);
                }
                let retrain: Vec<f64> = group.iter().map(|r| r.retrain_wall_seconds).collect();
                push_stat(&mut row, &retrain);
                let total: Vec<f64> = group.iter().map(|r| r.end_to_end_seconds).collect();
                push_stat(&mut row, &total);
                rows.push(row);
            }
        }
        ReportKind::EbEpoch => {
            columns.extend(stat_columns("discovery_epoch"));
            columns.push("converged_fraction".into());
            for ((_, method), group) in cells(records, |r| r.eb_converged.is_some()) {
                let mut row = cell_head(method, &group);
                let epochs: Vec<f64> = group.iter().filter_map(|r| r.discovery_epoch.map(|e| e as f64)).collect();
                if epochs.is_empty() {
                    row.extend([serde_json::Value::Null, serde_json::Value::Null]);
                } else {
                    push_stat(&mut row, &epochs);
                }
                let converged = group.iter().filter(|r| r.eb_converged == Some(true)).count();
                row.push(num(converged as f64 / group.len() as f64));
                rows.push(row);
            }
        }
        ReportKind::LayerSparsity => {
            columns.push("layer".into());
            columns.extend(stat_columns("layer_sparsity"));
            for ((_, method), group) in cells(records, |r| !r.layer_sparsity.is_empty()) {
                let names: Vec<&str> = group[0].layer_sparsity.iter().map(|l| l.name.as_str()).collect();
                for (i, name) in names.iter().enumerate() {
                    let values: Vec<f64> = group
                        .iter()
                        .filter_map(|r| r.layer_sparsity.get(i).filter(|l| l.name == *name).map(|l| l.sparsity))
                        .collect();
                    let mut row = cell_head(method, &group);
                    row.push(serde_json::Value::from(*name));
                    push_stat(&mut row, &values);
                    rows.push(row);
                }
            }
        }
        ReportKind::KlProfile => {
            columns = vec!["method".into(), "n".into(), "t".into()];
            columns.extend(stat_columns("kl"));
            columns.extend(stat_columns("kl_normalized"));
            columns.extend(stat_columns("t_early"));
            let mut by_method: BTreeMap<TicketMethod, Vec<&ExperimentRecord>> = BTreeMap::new();
            for r in records.iter().filter(|r| r.is_ok() && r.kl_profile.is_some()) {
                by_method.entry(r.method).or_default().push(r);
            }
            for (method, group) in by_method {
                let len = group
                    .iter()
                    .filter_map(|r| r.kl_profile.as_ref().map(|p| p.raw.len()))
                    .min()
                    .unwrap_or(0);
                let t_early: Vec<f64> = group.iter().filter_map(|r| r.t_early.map(|t| t as f64)).collect();
                for i in 0..len {
                    let raw: Vec<f64> = group.iter().filter_map(|r| r.kl_profile.as_ref().map(|p| p.raw[i])).collect();
                    let norm: Vec<f64> = group
                        .iter()
                        .filter_map(|r| r.kl_profile.as_ref().map(|p| p.normalized[i]))
                        .collect();
                    let mut row = vec![
                        serde_json::Value::from(method.label()),
                        serde_json::Value::from(group.len()),
                        serde_json::Value::from(i + 2),
                    ];
                    push_stat(&mut row, &raw);
                    push_stat(&mut row, &norm);
                    if t_early.is_empty() {
                        row.extend([serde_json::Value::Null, serde_json::Value::Null]);
                    } else {
                        push_stat(&mut row, &t_early);
                    }
                    rows.push(row);
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyReport(kind.name().into()));
    }
    Ok(Report { kind, columns, rows })
}

impl Report {
    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .map(|v| match v {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Null => "NA".into(),
                    other => other.to_string(),
                })
                .collect();
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Writes `<stem>.tsv` and `<stem>.json` and returns both paths.
pub fn emit_report(records: &[ExperimentRecord], kind: ReportKind, stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let report = build_report(records, kind)?;
    let tsv = stem.with_extension("tsv");
    let json = stem.with_extension("json");
    write_atomic(&tsv, report.to_tsv().as_bytes(), true)?;
    write_atomic(&json, report.to_json()?.as_bytes(), true)?;
    Ok((tsv, json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_has_zero_std() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn kinds_parse() {
        for k in ReportKind::ALL {
            assert_eq!(k.name().parse::<ReportKind>().unwrap(), k);
        }
    }
}
