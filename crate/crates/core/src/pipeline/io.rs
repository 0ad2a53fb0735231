//! File formats: features CSV, labels CSV, synth sidecar, atomic writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotations::LabelSchema;
use crate::linalg::Matrix;
use crate::synth::{SynthConfig, SynthDataset};
use crate::{Error, Result};

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(file);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn table_csv<F>(header: Vec<String>, rows: usize, mut row: F) -> Vec<u8>
where
    F: FnMut(usize) -> Vec<String>,
{
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(&header).expect("in-memory csv");
    for i in 0..rows {
        w.write_record(row(i)).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

/// `id,f_0,...,f_{D-1}` with shortest round-trip float formatting.
pub fn features_csv(ids: &[String], features: &Matrix) -> Vec<u8> {
    let header = std::iter::once("id".to_string())
        .chain((0..features.cols()).map(|j| format!("f_{j}")))
        .collect();
    table_csv(header, ids.len(), |i| {
        std::iter::once(ids[i].clone())
            .chain(features.row(i).iter().map(|v| v.to_string()))
            .collect()
    })
}

/// `id,<class..>` vote counts.
pub fn labels_csv(ids: &[String], counts: &[Vec<u32>], schema: &LabelSchema) -> Vec<u8> {
    let header = std::iter::once("id".to_string())
        .chain(schema.class_names.iter().cloned())
        .collect();
    table_csv(header, ids.len(), |i| {
        std::iter::once(ids[i].clone())
            .chain(counts[i].iter().map(|c| c.to_string()))
            .collect()
    })
}

/// Read a features CSV into ids and a matrix.
pub fn read_features(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.get(0) != Some("id") || headers.len() < 2 {
        return Err(Error::Format(format!(
            "{}: features header must be `id,f_0,...`",
            path.display()
        )));
    }
    let dim = headers.len() - 1;
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        ids.push(row[0].to_string());
        for cell in row.iter().skip(1) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("`{cell}` is not a number"),
            })?;
            data.push(v);
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptyInput("features file"));
    }
    Ok((ids.clone(), Matrix::new(ids.len(), dim, data)?))
}

/// Sidecar written next to a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub library_version: String,
    pub config: SynthConfig,
    pub sample_ids: Vec<String>,
    pub is_ood: Vec<bool>,
    pub components: Vec<usize>,
    pub mean_disagreement: f64,
}

impl Sidecar {
    pub fn new(config: &SynthConfig, data: &SynthDataset, mean_disagreement: f64) -> Self {
        Self {
            library_version: crate::pipeline::LIBRARY_VERSION.to_string(),
            config: config.clone(),
            sample_ids: data.sample_ids.clone(),
            is_ood: data.is_ood.clone(),
            components: data.components.clone(),
            mean_disagreement,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

pub fn loss_trace_csv(trace: &[f64]) -> Vec<u8> {
    table_csv(vec!["epoch".into(), "loss".into()], trace.len(), |i| {
        vec![(i + 1).to_string(), trace[i].to_string()]
    })
}
