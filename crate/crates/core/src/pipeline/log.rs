//! JSON Lines prediction logs, one record per sample.

use serde::{Deserialize, Serialize};

use super::config::{Model, Split};
use crate::uncertainty::UncertaintyTriple;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub split: Split,
    pub model: Model,
    /// `T` MC rows for uncnet, a single deterministic row for baseline.
    pub probs: Vec<Vec<f64>>,
    pub mean_probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<UncertaintyTriple>,
}

pub fn to_jsonl(records: &[PredictionRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    out
}

/// Parse a log and check that every record has the same `T` and `C`.
pub fn parse_jsonl(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut records: Vec<PredictionRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        let c = r.mean_probs.len();
        if r.probs.is_empty() || r.probs.iter().any(|row| row.len() != c) {
            return Err(Error::Format(format!(
                "line {}: probability rows disagree with {c} classes",
                i + 1
            )));
        }
        if let Some(first) = records.first() {
            if first.probs.len() != r.probs.len() || first.mean_probs.len() != c {
                return Err(Error::Format(format!(
                    "line {}: expected T = {}, C = {}; found T = {}, C = {c}",
                    i + 1,
                    first.probs.len(),
                    first.mean_probs.len(),
                    r.probs.len()
                )));
            }
            if first.model != r.model {
                return Err(Error::Format(format!(
                    "line {}: mixed models in one log",
                    i + 1
                )));
            }
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput("prediction log"));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(t: usize, c: usize) -> PredictionRecord {
        PredictionRecord {
            sample_id: "s".into(),
            split: Split::Test,
            model: Model::Uncnet,
            probs: vec![vec![1.0 / c as f64; c]; t],
            mean_probs: vec![1.0 / c as f64; c],
            uncertainty: None,
        }
    }

    #[test]
    fn round_trip() {
        let recs = vec![rec(3, 2), rec(3, 2)];
        let text = String::from_utf8(to_jsonl(&recs)).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("uncertainty"));
        assert_eq!(parse_jsonl(&text).unwrap(), recs);
    }

    #[test]
    fn inconsistent_shapes_are_format_errors() {
        let text = String::from_utf8(to_jsonl(&[rec(3, 2), rec(2, 2)])).unwrap();
        assert!(matches!(parse_jsonl(&text), Err(Error::Format(_))));
        let text = String::from_utf8(to_jsonl(&[rec(3, 2), rec(3, 4)])).unwrap();
        assert!(matches!(parse_jsonl(&text), Err(Error::Format(_))));
        assert!(matches!(
            parse_jsonl("{not json"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_jsonl("").is_err());
    }
}
