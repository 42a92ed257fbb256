//! Round metrics, report export and multi-run comparison.
//!
//! `rounds.csv` has a fixed column order:
//!
//! ```text
//! round, selected_ids,
//! for each weight group g, for each roster id c: u:g:c, v:g:c, w:g:c, final:g:c
//! drift, val_loss, val_acc, cum_comm_cost, wall_ms
//! ```
//!
//! The group label is the tensor name in per-tensor scope and `all` otherwise.
//! Cells are empty where a value does not apply (unselected collaborator,
//! strategy without similarity weights, round without evaluation). Floats are
//! written in shortest round-trip decimal form.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::{run_experiment, ExperimentConfig, ExperimentResult, RoundRecord};
use crate::error::{Error, Result};
use crate::params::ParameterSet;

/// Fraction of possible participations used: `Σ|selected| / (rounds · roster)`.
pub fn communication_cost(records: &[RoundRecord], roster_size: usize) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if roster_size == 0 {
        return Err(Error::EmptyRoster);
    }
    let used: usize = records.iter().map(|r| r.selected.len()).sum();
    Ok(used as f64 / (records.len() as f64 * roster_size as f64))
}

/// Byte-level view of the same participation count: every selected
/// collaborator downloads and uploads one checkpoint-encoded parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCostModel {
    /// Encoded size of one parameter set (header plus 8 bytes per element).
    pub per_update_payload: u64,
    /// `roster_size × rounds`.
    pub total_possible: u64,
}

impl CommCostModel {
    pub fn new(params: &ParameterSet, roster_size: usize, rounds: usize) -> Result<Self> {
        let mut buf = Vec::new();
        params.write_to(&mut buf)?;
        Ok(Self {
            per_update_payload: buf.len() as u64,
            total_possible: (roster_size * rounds) as u64,
        })
    }

    /// Bytes moved in both directions by the given rounds.
    pub fn bytes_transferred(&self, records: &[RoundRecord]) -> u64 {
        let used: u64 = records.iter().map(|r| r.selected.len() as u64).sum();
        2 * used * self.per_update_payload
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStat {
    /// Area under the validation-accuracy curve with the evaluated rounds
    /// mapped onto `[0, 1]` (trapezoid rule). A single evaluation gives its
    /// accuracy.
    pub accuracy_auc: f64,
    pub final_val_loss: f64,
    pub final_val_acc: f64,
    pub best_val_acc: f64,
    /// First round whose validation accuracy reaches the threshold.
    pub rounds_to_threshold: Option<u32>,
}

pub fn convergence_stat(records: &[RoundRecord], threshold: f64) -> Result<ConvergenceStat> {
    let points: Vec<(u32, f64, f64)> = records
        .iter()
        .filter_map(|r| Some((r.round, r.val_loss?, r.val_acc?)))
        .collect();
    let (&first, &last) = match (points.first(), points.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::EmptyRecords),
    };
    let accuracy_auc = if points.len() == 1 {
        first.2
    } else {
        let span = (last.0 - first.0) as f64;
        points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) as f64 / span * (w[0].2 + w[1].2) / 2.0)
            .sum()
    };
    Ok(ConvergenceStat {
        accuracy_auc,
        final_val_loss: last.1,
        final_val_acc: last.2,
        best_val_acc: points.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max),
        rounds_to_threshold: points.iter().find(|p| p.2 >= threshold).map(|p| p.0),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    /// `summary.json` and the lossless `rounds.jsonl`.
    Json,
    /// `summary.json`, `rounds.csv` and `series/*.csv`.
    #[default]
    Csv,
    Both,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "both" => Ok(Self::Both),
            _ => Err(Error::BadConfig(format!(
                "unknown report format `{s}` (expected json, csv or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub name: String,
    pub strategy: String,
    pub rounds_completed: u32,
    pub roster_size: usize,
    pub communication_cost: f64,
    pub comm_model: CommCostModel,
    pub bytes_transferred: u64,
    pub accuracy_threshold: f64,
    pub convergence: Option<ConvergenceStat>,
    pub final_schema_hash: String,
    pub config: ExperimentConfig,
}

pub fn summarize(result: &ExperimentResult) -> Result<Summary> {
    let cfg = &result.config;
    let comm_model = CommCostModel::new(
        &result.final_params,
        result.roster.len(),
        result.records.len(),
    )?;
    Ok(Summary {
        schema: 1,
        name: cfg.name.clone(),
        strategy: cfg.aggregation.strategy.to_string(),
        rounds_completed: result.records.len() as u32,
        roster_size: result.roster.len(),
        communication_cost: communication_cost(&result.records, result.roster.len())?,
        comm_model,
        bytes_transferred: comm_model.bytes_transferred(&result.records),
        accuracy_threshold: cfg.accuracy_threshold,
        convergence: match convergence_stat(&result.records, cfg.accuracy_threshold) {
            Ok(c) => Some(c),
            Err(Error::EmptyRecords) => None,
            Err(e) => return Err(e),
        },
        final_schema_hash: result.final_params.schema_hash().to_hex(),
        config: cfg.clone(),
    })
}

fn group_label(tensor: &Option<String>) -> &str {
    tensor.as_deref().unwrap_or("all")
}

const WEIGHT_KINDS: [&str; 4] = ["u", "v", "w", "final"];
const TRAILING: [&str; 5] = ["drift", "val_loss", "val_acc", "cum_comm_cost", "wall_ms"];

/// Header of `rounds.csv` for the given roster and weight groups.
pub fn rounds_csv_header(roster: &[String], groups: &[String]) -> Vec<String> {
    let mut cols = vec!["round".to_string(), "selected_ids".to_string()];
    for g in groups {
        for c in roster {
            for k in WEIGHT_KINDS {
                cols.push(format!("{k}:{g}:{c}"));
            }
        }
    }
    cols.extend(TRAILING.iter().map(|s| s.to_string()));
    cols
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_rounds_csv(path: &Path, roster: &[String], records: &[RoundRecord]) -> Result<()> {
    let groups: Vec<String> = records
        .first()
        .map(|r| {
            r.weights
                .groups
                .iter()
                .map(|g| group_label(&g.tensor).to_string())
                .collect()
        })
        .unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(rounds_csv_header(roster, &groups))?;
    for r in records {
        let mut row = vec![r.round.to_string(), r.selected.join(";")];
        for g in &groups {
            let group = r
                .weights
                .groups
                .iter()
                .find(|x| group_label(&x.tensor) == g)
                .ok_or_else(|| {
                    Error::SchemaMismatch(format!("round {} lacks weight group {g}", r.round))
                })?;
            for c in roster {
                match r.selected.iter().position(|s| s == c) {
                    Some(i) => {
                        row.push(cell(group.similarity.as_ref().map(|u| u[i])));
                        row.push(cell(Some(group.sample[i])));
                        row.push(cell(group.combined.as_ref().map(|w| w[i])));
                        row.push(cell(Some(group.final_weights[i])));
                    }
                    None => row.extend(std::iter::repeat_n(String::new(), 4)),
                }
            }
        }
        row.push(cell(Some(r.drift)));
        row.push(cell(r.val_loss));
        row.push(cell(r.val_acc));
        row.push(cell(Some(r.cum_comm_cost)));
        row.push(r.wall_ms.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// The per-round scalar series of `rounds.csv`, plus the final weights keyed
/// by column name.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRound {
    pub round: u32,
    pub selected: Vec<String>,
    pub final_weights: BTreeMap<String, f64>,
    pub drift: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
    pub cum_comm_cost: f64,
    pub wall_ms: u64,
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<CsvRound>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaMismatch(format!("rounds.csv lacks column {name}")))
    };
    let bad = |what: &str, v: &str| {
        Error::SchemaMismatch(format!("bad {what} value `{v}` in rounds.csv"))
    };
    let num = |v: &str, what: &str| v.parse::<f64>().map_err(|_| bad(what, v));
    let opt = |v: &str, what: &str| {
        if v.is_empty() {
            Ok(None)
        } else {
            num(v, what).map(Some)
        }
    };
    let (i_round, i_sel, i_drift) = (col("round")?, col("selected_ids")?, col("drift")?);
    let (i_loss, i_acc, i_cost, i_ms) = (
        col("val_loss")?,
        col("val_acc")?,
        col("cum_comm_cost")?,
        col("wall_ms")?,
    );
    let final_cols: Vec<(usize, String)> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("final:"))
        .map(|(i, h)| (i, h.to_string()))
        .collect();
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let sel = &row[i_sel];
        let mut final_weights = BTreeMap::new();
        for (i, name) in &final_cols {
            if let Some(v) = opt(&row[*i], name)? {
                final_weights.insert(name.clone(), v);
            }
        }
        out.push(CsvRound {
            round: row[i_round]
                .parse()
                .map_err(|_| bad("round", &row[i_round]))?,
            selected: if sel.is_empty() {
                Vec::new()
            } else {
                sel.split(';').map(String::from).collect()
            },
            final_weights,
            drift: num(&row[i_drift], "drift")?,
            val_loss: opt(&row[i_loss], "val_loss")?,
            val_acc: opt(&row[i_acc], "val_acc")?,
            cum_comm_cost: num(&row[i_cost], "cum_comm_cost")?,
            wall_ms: row[i_ms].parse().map_err(|_| bad("wall_ms", &row[i_ms]))?,
        });
    }
    Ok(out)
}

fn write_series(
    dir: &Path,
    name: &str,
    points: impl Iterator<Item = (u32, Option<f64>)>,
) -> Result<PathBuf> {
    let path = dir.join(format!("{name}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["round", name])?;
    for (round, v) in points {
        if let Some(v) = v {
            w.write_record([round.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(path)
}

/// Writes the report files into `dir` and returns their paths.
pub fn export_report(
    result: &ExperimentResult,
    dir: &Path,
    format: ReportFormat,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let summary = summarize(result)?;
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary)?)?;
    written.push(path);
    let records = &result.records;
    if matches!(format, ReportFormat::Json | ReportFormat::Both) {
        let path = dir.join("rounds.jsonl");
        let mut buf = String::new();
        for r in records {
            buf.push_str(&r.to_json_line()?);
            buf.push('\n');
        }
        fs::write(&path, buf)?;
        written.push(path);
    }
    if matches!(format, ReportFormat::Csv | ReportFormat::Both) {
        let path = dir.join("rounds.csv");
        write_rounds_csv(&path, &result.roster, records)?;
        written.push(path);
        let series = dir.join("series");
        fs::create_dir_all(&series)?;
        let it = |f: fn(&RoundRecord) -> Option<f64>| records.iter().map(move |r| (r.round, f(r)));
        written.push(write_series(&series, "val_loss", it(|r| r.val_loss))?);
        written.push(write_series(&series, "val_acc", it(|r| r.val_acc))?);
        written.push(write_series(&series, "drift", it(|r| Some(r.drift)))?);
        written.push(write_series(
            &series,
            "cum_comm_cost",
            it(|r| Some(r.cum_comm_cost)),
        )?);
    }
    Ok(written)
}

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("no values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub final_val_loss: Vec<f64>,
    pub final_val_acc: Vec<f64>,
    pub loss: MeanStd,
    pub accuracy: MeanStd,
    pub accuracy_auc: MeanStd,
    pub communication_cost: MeanStd,
}

/// Checks that runs differ only in aggregation, selection and local training.
pub fn ensure_comparable(configs: &[(String, ExperimentConfig)]) -> Result<()> {
    let Some((first_label, first)) = configs.first() else {
        return Err(Error::EmptyInput("no configs to compare"));
    };
    for (label, c) in &configs[1..] {
        let differs = if c.task != first.task {
            Some("task")
        } else if c.partition != first.partition {
            Some("partition")
        } else if c.rounds != first.rounds {
            Some("rounds")
        } else if c.validation_fraction != first.validation_fraction {
            Some("validation_fraction")
        } else {
            None
        };
        if let Some(field) = differs {
            return Err(Error::IncomparableConfigs(format!(
                "`{label}` and `{first_label}` differ in {field}"
            )));
        }
    }
    Ok(())
}

/// Runs every config once per seed (the seed replaces `master_seed`) and
/// summarizes the final validation metrics. Nothing is written to disk.
pub fn compare(
    configs: &[(String, ExperimentConfig)],
    seeds: &[u64],
    workers: usize,
) -> Result<Vec<ComparisonRow>> {
    ensure_comparable(configs)?;
    if seeds.is_empty() {
        return Err(Error::EmptyInput("no seeds"));
    }
    let mut rows = Vec::new();
    for (label, cfg) in configs {
        let (mut loss, mut acc, mut auc, mut cost) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for &seed in seeds {
            let run_cfg = ExperimentConfig {
                master_seed: seed,
                output_dir: None,
                ..cfg.clone()
            };
            let result = run_experiment(run_cfg, workers)?;
            let conv = convergence_stat(&result.records, cfg.accuracy_threshold)?;
            loss.push(conv.final_val_loss);
            acc.push(conv.final_val_acc);
            auc.push(conv.accuracy_auc);
            cost.push(communication_cost(&result.records, result.roster.len())?);
        }
        rows.push(ComparisonRow {
            label: label.clone(),
            strategy: cfg.aggregation.strategy.to_string(),
            seeds: seeds.to_vec(),
            loss: MeanStd::of(&loss)?,
            accuracy: MeanStd::of(&acc)?,
            accuracy_auc: MeanStd::of(&auc)?,
            communication_cost: MeanStd::of(&cost)?,
            final_val_loss: loss,
            final_val_acc: acc,
        });
    }
    Ok(rows)
}

const COMPARISON_COLUMNS: [&str; 11] = [
    "label",
    "strategy",
    "runs",
    "val_loss_mean",
    "val_loss_std",
    "val_acc_mean",
    "val_acc_std",
    "acc_auc_mean",
    "acc_auc_std",
    "comm_cost_mean",
    "comm_cost_std",
];

fn comparison_cells(r: &ComparisonRow) -> Vec<String> {
    vec![
        r.label.clone(),
        r.strategy.clone(),
        r.seeds.len().to_string(),
        r.loss.mean.to_string(),
        r.loss.std.to_string(),
        r.accuracy.mean.to_string(),
        r.accuracy.std.to_string(),
        r.accuracy_auc.mean.to_string(),
        r.accuracy_auc.std.to_string(),
        r.communication_cost.mean.to_string(),
        r.communication_cost.std.to_string(),
    ]
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COMPARISON_COLUMNS)?;
    for r in rows {
        w.write_record(comparison_cells(r))?;
    }
    w.flush()?;
    Ok(())
}

/// A fixed-width text table with `mean ± std` cells.
pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let header = [
        "config",
        "strategy",
        "runs",
        "val_loss",
        "val_acc",
        "acc_auc",
        "comm_cost",
    ];
    let pm = |m: MeanStd| format!("{:.4} ± {:.4}", m.mean, m.std);
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                r.strategy.clone(),
                r.seeds.len().to_string(),
                pm(r.loss),
                pm(r.accuracy),
                pm(r.accuracy_auc),
                pm(r.communication_cost),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            body.iter()
                .map(|row| row[i].chars().count())
                .chain([header[i].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec());
    for row in &body {
        line(row.iter().map(String::as_str).collect());
    }
    out
}
