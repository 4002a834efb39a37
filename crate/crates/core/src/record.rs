//! Per-frame detector counts for one generated video.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed count record: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid count record: {0}")]
    Invalid(String),
}

/// Detected instance counts, one row per frame and one column per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub classes: Vec<String>,
    pub targets: Vec<u32>,
    #[serde(rename = "frames")]
    pub per_frame_counts: Vec<Vec<u32>>,
}

impl CountRecord {
    pub fn frames(&self) -> usize {
        self.per_frame_counts.len()
    }

    pub fn validate(&self) -> Result<(), RecordError> {
        if self.classes.is_empty() {
            return Err(RecordError::Invalid("no classes".into()));
        }
        if self.targets.len() != self.classes.len() {
            return Err(RecordError::Invalid(format!(
                "{} targets for {} classes",
                self.targets.len(),
                self.classes.len()
            )));
        }
        if let Some(t) = self.targets.iter().position(|&t| t == 0) {
            return Err(RecordError::Invalid(format!(
                "target for {:?} must be positive",
                self.classes[t]
            )));
        }
        if let Some((f, row)) = self
            .per_frame_counts
            .iter()
            .enumerate()
            .find(|(_, row)| row.len() != self.classes.len())
        {
            return Err(RecordError::Invalid(format!(
                "frame {f} has {} counts for {} classes",
                row.len(),
                self.classes.len()
            )));
        }
        Ok(())
    }
}

/// Accepts either a single record or an array of records.
pub fn parse_records(json: &str) -> Result<Vec<CountRecord>, RecordError> {
    let value: serde_json::Value = serde_json::from_str(json)?;
    let records: Vec<CountRecord> = if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<CountRecord>, RecordError> {
    parse_records(&std::fs::read_to_string(path)?)
}
