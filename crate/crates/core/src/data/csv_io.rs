//! CSV ingestion and export.
//!
//! The schema names a task column, the feature columns with their kind, and
//! the target column. Categorical features are expanded to one indicator per
//! level (levels in order of first appearance), named `column=level`.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::MultiTaskDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub task_column: String,
    pub features: Vec<FeatureSpec>,
    pub target_column: String,
}

impl CsvSchema {
    /// Schema matching the layout written by [`write_csv`].
    pub fn for_dataset(data: &MultiTaskDataset) -> Self {
        Self {
            task_column: "task".into(),
            features: data
                .feature_names()
                .iter()
                .map(|n| FeatureSpec {
                    name: n.clone(),
                    kind: ColumnKind::Continuous,
                })
                .collect(),
            target_column: "y".into(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse_number(cell: &str, line: usize, column: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::Parse {
        row: line,
        message: format!("column `{column}`: cannot parse `{cell}` as a number"),
    })
}

/// Reads a dataset; row order is preserved and task labels are mapped to
/// dense ids in order of first appearance. Error rows are file line numbers.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<MultiTaskDataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let task_col = column_index(&headers, &schema.task_column)?;
    let target_col = column_index(&headers, &schema.target_column)?;
    let feature_cols = schema
        .features
        .iter()
        .map(|f| column_index(&headers, &f.name))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for record in reader.records() {
        rows.push(record?);
    }

    // categorical levels, in order of first appearance
    let mut levels: Vec<Vec<String>> = vec![Vec::new(); schema.features.len()];
    for record in &rows {
        for (k, spec) in schema.features.iter().enumerate() {
            if spec.kind == ColumnKind::Categorical {
                let v = &record[feature_cols[k]];
                if !levels[k].iter().any(|l| l == v) {
                    levels[k].push(v.to_string());
                }
            }
        }
    }
    let mut feature_names = Vec::new();
    for (k, spec) in schema.features.iter().enumerate() {
        match spec.kind {
            ColumnKind::Continuous => feature_names.push(spec.name.clone()),
            ColumnKind::Categorical => feature_names.extend(levels[k].iter().map(|l| format!("{}={}", spec.name, l))),
        }
    }

    let width = feature_names.len();
    let mut x = Array2::zeros((rows.len(), width));
    let mut y = Array1::zeros(rows.len());
    let mut task = Vec::with_capacity(rows.len());
    let mut task_ids: HashMap<String, usize> = HashMap::new();
    let mut task_labels = Vec::new();
    for (i, record) in rows.iter().enumerate() {
        let line = i + 2;
        let label = record[task_col].to_string();
        let next = task_ids.len();
        let id = *task_ids.entry(label.clone()).or_insert_with(|| {
            task_labels.push(label);
            next
        });
        task.push(id);
        y[i] = parse_number(&record[target_col], line, &schema.target_column)?;
        let mut col = 0;
        for (k, spec) in schema.features.iter().enumerate() {
            let cell = &record[feature_cols[k]];
            match spec.kind {
                ColumnKind::Continuous => {
                    x[[i, col]] = parse_number(cell, line, &spec.name)?;
                    col += 1;
                }
                ColumnKind::Categorical => {
                    let level = levels[k].iter().position(|l| l == cell).unwrap_or(0);
                    x[[i, col + level]] = 1.0;
                    col += levels[k].len();
                }
            }
        }
    }
    let num_tasks = task_labels.len();
    MultiTaskDataset::with_labels(x, y, task, num_tasks, task_labels, feature_names)
}

/// Writes `task, <features...>, y` with task labels and shortest round-trip floats.
pub fn write_csv(data: &MultiTaskDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["task".to_string()];
    header.extend(data.feature_names().iter().cloned());
    header.push("y".into());
    writer.write_record(&header)?;
    for i in 0..data.len() {
        let mut record = vec![data.task_labels()[data.tasks()[i]].clone()];
        record.extend(data.x_row(i).iter().map(|v| v.to_string()));
        record.push(data.y()[i].to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}
