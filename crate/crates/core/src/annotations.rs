//! Crowd annotations: vote counts, soft labels and disagreement.
//!
//! The disagreement of a sample is the probability that two independent
//! draws from its vote histogram name different classes, `d = 1 - sum_c p_c^2`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Class columns of a labels file plus auxiliary vote columns that are read
/// but dropped before normalization (e.g. `unknown`, `NF`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSchema {
    pub class_names: Vec<String>,
    #[serde(default)]
    pub excluded_columns: Vec<String>,
}

impl LabelSchema {
    pub fn new(class_names: Vec<String>, excluded_columns: Vec<String>) -> Result<Self> {
        let schema = Self {
            class_names,
            excluded_columns,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Config("schema has no class names".into()));
        }
        let mut seen = HashSet::new();
        for name in self.class_names.iter().chain(&self.excluded_columns) {
            if name == ID_COLUMN {
                return Err(Error::Config("`id` is reserved for sample ids".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate column name `{name}`")));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Raw votes of one sample: class columns in schema order, and the
/// excluded auxiliary columns kept alongside.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub counts: Vec<u32>,
    #[serde(default)]
    pub excluded_counts: Vec<u32>,
}

impl AnnotationRecord {
    pub fn new(sample_id: impl Into<String>, counts: Vec<u32>) -> Self {
        Self {
            sample_id: sample_id.into(),
            counts,
            excluded_counts: Vec::new(),
        }
    }

    pub fn total_votes(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub sample_id: String,
    pub probs: Vec<f64>,
    pub disagreement: f64,
}

/// Drop excluded columns and normalize the class votes to a probability
/// vector.
pub fn normalize_counts(record: &AnnotationRecord, schema: &LabelSchema) -> Result<SoftLabel> {
    if record.counts.len() != schema.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: schema.num_classes(),
            got: record.counts.len(),
        });
    }
    if !record.excluded_counts.is_empty()
        && record.excluded_counts.len() != schema.excluded_columns.len()
    {
        return Err(Error::DimensionMismatch {
            expected: schema.excluded_columns.len(),
            got: record.excluded_counts.len(),
        });
    }
    let total = record.total_votes();
    if total == 0 {
        return Err(Error::UnlabeledSample(record.sample_id.clone()));
    }
    let probs: Vec<f64> = record
        .counts
        .iter()
        .map(|&c| f64::from(c) / total as f64)
        .collect();
    let disagreement = disagreement(&probs)?;
    Ok(SoftLabel {
        sample_id: record.sample_id.clone(),
        probs,
        disagreement,
    })
}

/// `1 - sum_c p_c^2`, clamped to `[0, 1 - 1/C]`.
pub fn disagreement(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyInput("probability vector"));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(
            "disagreement needs a probability vector".into(),
        ));
    }
    let purity: f64 = probs.iter().map(|p| p * p).sum();
    let max = 1.0 - 1.0 / probs.len() as f64;
    Ok((1.0 - purity).clamp(0.0, max))
}

const ID_COLUMN: &str = "id";

enum Column {
    Id,
    Class(usize),
    Excluded(usize),
}

/// Read a labels CSV (`id,<class..>[,<excluded..>]`, integer votes).
///
/// Columns are matched by name in any order; every schema class must be
/// present and unknown columns are rejected. Without an `id` column the
/// 0-based row index becomes the sample id.
pub fn load_labels(path: &Path, schema: &LabelSchema) -> Result<Vec<AnnotationRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_labels(file, schema)
}

pub fn read_labels<R: std::io::Read>(
    reader: R,
    schema: &LabelSchema,
) -> Result<Vec<AnnotationRecord>> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();

    let mut columns = Vec::with_capacity(headers.len());
    let mut seen_class = vec![false; schema.num_classes()];
    for name in headers.iter() {
        let col = if name == ID_COLUMN {
            Column::Id
        } else if let Some(c) = schema.class_names.iter().position(|n| n == name) {
            seen_class[c] = true;
            Column::Class(c)
        } else if let Some(e) = schema.excluded_columns.iter().position(|n| n == name) {
            Column::Excluded(e)
        } else {
            return Err(Error::SchemaMismatch(format!("unexpected column `{name}`")));
        };
        columns.push(col);
    }
    if let Some(missing) = seen_class.iter().position(|s| !s) {
        return Err(Error::SchemaMismatch(format!(
            "missing class column `{}`",
            schema.class_names[missing]
        )));
    }

    let mut records = Vec::new();
    for (row_index, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row
            .position()
            .map(|p| p.line())
            .unwrap_or(row_index as u64 + 2);
        if row.len() != columns.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", columns.len(), row.len()),
            });
        }
        let mut record = AnnotationRecord {
            sample_id: row_index.to_string(),
            counts: vec![0; schema.num_classes()],
            excluded_counts: vec![0; schema.excluded_columns.len()],
        };
        for (col, cell) in columns.iter().zip(row.iter()) {
            let slot = match col {
                Column::Id => {
                    if cell.is_empty() {
                        return Err(Error::Parse {
                            line,
                            message: "empty sample id".into(),
                        });
                    }
                    record.sample_id = cell.to_string();
                    continue;
                }
                Column::Class(c) => &mut record.counts[*c],
                Column::Excluded(e) => &mut record.excluded_counts[*e],
            };
            *slot = parse_count(cell, line)?;
        }
        records.push(record);
    }
    Ok(records)
}

fn parse_count(cell: &str, line: u64) -> Result<u32> {
    match cell.parse::<i64>() {
        Ok(v) if v < 0 => Err(Error::InvalidInput(format!(
            "negative vote count {v} at line {line}"
        ))),
        Ok(v) => u32::try_from(v).map_err(|_| Error::Parse {
            line,
            message: format!("vote count {v} out of range"),
        }),
        Err(_) => Err(Error::Parse {
            line,
            message: format!("`{cell}` is not an integer vote count"),
        }),
    }
}

/// Density-scaled histogram on `[0, 1]`: bins of width `1 / bins`,
/// half-open except the last, which includes 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub densities: Vec<f64>,
}

pub fn disagreement_histogram(values: &[f64], bins: usize) -> Result<DensityHistogram> {
    if values.is_empty() {
        return Err(Error::EmptyInput("disagreement values"));
    }
    if bins == 0 {
        return Err(Error::InvalidInput(
            "histogram needs at least one bin".into(),
        ));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("value {v} outside [0, 1]")));
    }
    let edges: Vec<f64> = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        counts[unit_bin(v, bins)] += 1;
    }
    let n = values.len() as f64;
    let densities = counts
        .iter()
        .zip(edges.windows(2))
        .map(|(&c, e)| c as f64 / (n * (e[1] - e[0])))
        .collect();
    Ok(DensityHistogram {
        edges,
        counts,
        densities,
    })
}

/// Bin index of `v` in `[0, 1]` split into `bins` equal bins with edges
/// `b / bins`; the comparison is against the edge values themselves so
/// that membership is exact.
pub(crate) fn unit_bin(v: f64, bins: usize) -> usize {
    let edge = |b: usize| b as f64 / bins as f64;
    let mut b = ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    while b > 0 && v < edge(b) {
        b -= 1;
    }
    while b + 1 < bins && v >= edge(b + 1) {
        b += 1;
    }
    b
}
