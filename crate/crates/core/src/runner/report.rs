use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, write_json};
use crate::ot::correlations;

/// Columns correlated against `gen_gap` when present.
pub const COMPLEXITY_COLUMNS: [&str; 8] = [
    "b_proxy",
    "b_proxy_sqrt_n",
    "sgld_bound",
    "e1",
    "pmag_sqrt_n",
    "pmag_small",
    "lifetime_bound",
    "w2",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    /// Value of the grouping column (`beta`).
    pub group: String,
    pub complexity: String,
    pub count: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub target: String,
    pub group_by: String,
    pub rows: Vec<CorrelationRow>,
}

impl Report {
    pub fn get(&self, group: &str, complexity: &str) -> Option<&CorrelationRow> {
        self.rows.iter().find(|r| r.group == group && r.complexity == complexity)
    }
}

fn schema(e: impl std::fmt::Display) -> Error {
    Error::Schema(e.to_string())
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-`beta` Pearson and Spearman correlations between every complexity
/// column and `gen_gap`, over rows whose `status` is `ok`. Writes
/// `correlations.json`, `correlations.csv` and `scatter.csv` (complexity, x,
/// y, color) to `out`.
pub fn report(aggregate: &Path, out: &Path) -> Result<Report> {
    let mut reader = csv::Reader::from_path(aggregate).map_err(|e| Error::Schema(format!("{}: {e}", aggregate.display())))?;
    let headers = reader.headers().map_err(schema)?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let gap = col("gen_gap").ok_or_else(|| schema("missing column gen_gap"))?;
    let group = col("beta").ok_or_else(|| schema("missing column beta"))?;
    let status = col("status");
    let complexities: Vec<(&str, usize)> = COMPLEXITY_COLUMNS.iter().filter_map(|c| col(c).map(|i| (*c, i))).collect();
    if complexities.is_empty() {
        return Err(schema("no complexity columns"));
    }

    // group -> complexity -> (x, y)
    let mut points: BTreeMap<String, BTreeMap<&str, Vec<(f64, f64)>>> = BTreeMap::new();
    let mut group_order: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(schema)?;
        if status.is_some_and(|s| record.get(s) != Some("ok")) {
            continue;
        }
        let key = record.get(group).unwrap_or_default().to_string();
        if !points.contains_key(&key) {
            group_order.push(key.clone());
        }
        let entry = points.entry(key).or_default();
        let Some(y) = record.get(gap).and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite()) else {
            continue;
        };
        for &(name, i) in &complexities {
            if let Some(x) = record.get(i).and_then(|v| v.parse::<f64>().ok()).filter(|v| v.is_finite()) {
                entry.entry(name).or_default().push((x, y));
            }
        }
    }
    group_order.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    });

    let mut rows = Vec::new();
    let mut scatter = csv_writer();
    scatter.write_record(["complexity", "x", "y", "color"]).map_err(schema)?;
    for g in &group_order {
        for &(name, _) in &complexities {
            let pts = points[g].get(name).cloned().unwrap_or_default();
            for (x, y) in &pts {
                scatter.write_record([name, &x.to_string(), &y.to_string(), g]).map_err(schema)?;
            }
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.iter().copied().unzip();
            let (pearson, spearman, note) = match correlations(&xs, &ys) {
                Ok(c) => (Some(c.pearson), Some(c.spearman), None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            rows.push(CorrelationRow {
                group: g.clone(),
                complexity: name.to_string(),
                count: pts.len(),
                pearson,
                spearman,
                note,
            });
        }
    }

    let result = Report {
        target: "gen_gap".into(),
        group_by: "beta".into(),
        rows,
    };
    let mut table = csv_writer();
    table.write_record(["beta", "complexity", "count", "pearson", "spearman"]).map_err(schema)?;
    for r in &result.rows {
        table
            .write_record([r.group.as_str(), &r.complexity, &r.count.to_string(), &opt(r.pearson), &opt(r.spearman)])
            .map_err(schema)?;
    }
    atomic_write(&out.join("correlations.csv"), &table.into_inner().map_err(schema)?)?;
    atomic_write(&out.join("scatter.csv"), &scatter.into_inner().map_err(schema)?)?;
    write_json(&out.join("correlations.json"), &result)?;
    Ok(result)
}
