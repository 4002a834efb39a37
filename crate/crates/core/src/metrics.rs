//! Count accuracy and temporal consistency over detector count records.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::record::{CountRecord, RecordError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("need at least {needed} frames, record has {frames}")]
    TooFewFrames { frames: usize, needed: usize },
    #[error(transparent)]
    Record(#[from] RecordError),
}

fn too_few(record: &CountRecord, needed: usize) -> Result<(), MetricsError> {
    if record.frames() < needed {
        return Err(MetricsError::TooFewFrames {
            frames: record.frames(),
            needed,
        });
    }
    Ok(())
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Per frame, the fraction of classes whose count equals the target.
pub fn frame_accuracies(record: &CountRecord) -> Vec<f64> {
    record
        .per_frame_counts
        .iter()
        .map(|row| {
            mean(
                row.iter()
                    .zip(&record.targets)
                    .map(|(c, t)| indicator(c == t)),
            )
        })
        .collect()
}

/// Mean over frames of the per-frame class match rate.
pub fn count_acc(record: &CountRecord) -> Result<f64, MetricsError> {
    record.validate()?;
    too_few(record, 1)?;
    Ok(mean(frame_accuracies(record)))
}

fn class_tc(record: &CountRecord, class: usize) -> f64 {
    mean(
        record
            .per_frame_counts
            .windows(2)
            .map(|w| indicator(w[0][class] == w[1][class])),
    )
}

/// Fraction of (adjacent frame pair, class) cells whose counts agree.
pub fn temporal_consistency(record: &CountRecord) -> Result<f64, MetricsError> {
    record.validate()?;
    too_few(record, 2)?;
    Ok(mean(record.per_frame_counts.windows(2).flat_map(|w| {
        w[0].iter()
            .zip(&w[1])
            .map(|(a, b)| indicator(a == b))
            .collect::<Vec<_>>()
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class: String,
    pub target: u32,
    pub count_acc: f64,
    pub tc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordMetrics {
    pub count_acc: f64,
    /// `None` for single-frame records.
    pub tc: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub per_frame: Vec<f64>,
}

pub fn record_metrics(record: &CountRecord) -> Result<RecordMetrics, MetricsError> {
    let count_acc = count_acc(record)?;
    let tc = if record.frames() >= 2 {
        Some(temporal_consistency(record)?)
    } else {
        None
    };
    let per_class = record
        .classes
        .iter()
        .enumerate()
        .map(|(c, class)| ClassMetrics {
            class: class.clone(),
            target: record.targets[c],
            count_acc: mean(
                record
                    .per_frame_counts
                    .iter()
                    .map(|row| indicator(row[c] == record.targets[c])),
            ),
            tc: tc.map(|_| class_tc(record, c)),
        })
        .collect();
    Ok(RecordMetrics {
        count_acc,
        tc,
        per_class,
        per_frame: frame_accuracies(record),
    })
}

/// Records grouped by their largest target count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NumeralBucket {
    pub k: u32,
    pub records: usize,
    pub count_acc: f64,
    pub tc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub records: usize,
    /// Mean of the per-record scores.
    pub count_acc: f64,
    /// Mean over records with at least two frames.
    pub tc: Option<f64>,
    pub per_numeral: Vec<NumeralBucket>,
    pub per_record: Vec<RecordMetrics>,
}

fn mean_opt(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.into_iter().flatten().collect();
    (!present.is_empty()).then(|| mean(present))
}

pub fn evaluate(records: &[CountRecord]) -> Result<MetricReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::TooFewFrames {
            frames: 0,
            needed: 1,
        });
    }
    let per_record = records
        .iter()
        .map(record_metrics)
        .collect::<Result<Vec<_>, _>>()?;
    let mut buckets: BTreeMap<u32, Vec<&RecordMetrics>> = BTreeMap::new();
    for (rec, m) in records.iter().zip(&per_record) {
        buckets
            .entry(rec.targets.iter().copied().max().unwrap_or(0))
            .or_default()
            .push(m);
    }
    let per_numeral = buckets
        .into_iter()
        .map(|(k, ms)| NumeralBucket {
            k,
            records: ms.len(),
            count_acc: mean(ms.iter().map(|m| m.count_acc)),
            tc: mean_opt(ms.iter().map(|m| m.tc)),
        })
        .collect();
    Ok(MetricReport {
        records: records.len(),
        count_acc: mean(per_record.iter().map(|m| m.count_acc)),
        tc: mean_opt(per_record.iter().map(|m| m.tc)),
        per_numeral,
        per_record,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

impl MetricReport {
    /// `scope,key,records,count_acc,tc` rows: the aggregate, each numeral bucket, each record.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,key,records,count_acc,tc\n");
        out.push_str(&format!(
            "all,,{},{},{}\n",
            self.records,
            self.count_acc,
            fmt_opt(self.tc)
        ));
        for b in &self.per_numeral {
            out.push_str(&format!(
                "numeral,{},{},{},{}\n",
                b.k,
                b.records,
                b.count_acc,
                fmt_opt(b.tc)
            ));
        }
        for (i, r) in self.per_record.iter().enumerate() {
            out.push_str(&format!("record,{i},1,{},{}\n", r.count_acc, fmt_opt(r.tc)));
        }
        out
    }
}
