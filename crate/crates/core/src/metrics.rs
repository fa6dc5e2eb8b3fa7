//! Similarity measures and per-position aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

/// Norms below this are treated as zero.
pub const NORM_EPSILON: f64 = 1e-12;

pub fn cosine<T: Scalar>(u: &[T], v: &[T]) -> Result<T> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    let eps = T::lit(NORM_EPSILON);
    if !(nu > eps && nv > eps) {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).max(-T::one()).min(T::one()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// Document embedding vs. standalone segment embedding.
    Representation,
    /// Standalone vs. in-document (span-pooled) segment embedding.
    Retention,
}

impl SimilarityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SimilarityKind::Representation => "representation",
            SimilarityKind::Retention => "retention",
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "representation" | "sim1" => Ok(SimilarityKind::Representation),
            "retention" | "sim2" => Ok(SimilarityKind::Retention),
            other => Err(Error::InvalidArgument(format!("unknown similarity kind `{other}`"))),
        }
    }
}

/// Identifying metadata shared by every record of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordContext {
    pub segment_set_id: String,
    pub permutation_id: String,
    pub n: usize,
    pub language_config_id: String,
    pub model_id: String,
    pub calibration_id: String,
}

/// One row of the records CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub segment_set_id: String,
    pub permutation_id: String,
    pub position: usize,
    pub kind: SimilarityKind,
    pub value: f64,
    pub n: usize,
    pub language_config_id: String,
    pub model_id: String,
    pub calibration_id: String,
}

impl SimilarityRecord {
    fn new(ctx: &RecordContext, position: usize, kind: SimilarityKind, value: f64) -> Self {
        Self {
            segment_set_id: ctx.segment_set_id.clone(),
            permutation_id: ctx.permutation_id.clone(),
            position,
            kind,
            value,
            n: ctx.n,
            language_config_id: ctx.language_config_id.clone(),
            model_id: ctx.model_id.clone(),
            calibration_id: ctx.calibration_id.clone(),
        }
    }

    /// `n{n}-{language_config_id}`, the experiment instance a record belongs to.
    pub fn instance_id(&self) -> String {
        format!("n{}-{}", self.n, self.language_config_id)
    }
}

fn scores<T: Scalar, V: AsRef<[T]>>(
    anchors: &[V],
    others: &[V],
    ctx: &RecordContext,
    kind: SimilarityKind,
) -> Result<Vec<SimilarityRecord>> {
    if anchors.len() != others.len() || anchors.len() != ctx.n {
        return Err(Error::LengthMismatch {
            expected: ctx.n,
            actual: if anchors.len() != ctx.n { anchors.len() } else { others.len() },
        });
    }
    anchors
        .iter()
        .zip(others)
        .enumerate()
        .map(|(i, (a, b))| {
            let value = cosine(a.as_ref(), b.as_ref())?.as_f64();
            Ok(SimilarityRecord::new(ctx, i + 1, kind, value))
        })
        .collect()
}

/// sim¹ for every position: cosine between the document embedding and the
/// standalone embedding of the segment at that position.
///
/// `standalone[i]` belongs to the segment at 1-based position `i + 1`.
pub fn positional_fairness_scores<T: Scalar, V: AsRef<[T]>>(
    document: &[T],
    standalone: &[V],
    ctx: &RecordContext,
) -> Result<Vec<SimilarityRecord>> {
    let docs: Vec<&[T]> = vec![document; standalone.len()];
    let standalone: Vec<&[T]> = standalone.iter().map(AsRef::as_ref).collect();
    scores(&docs, &standalone, ctx, SimilarityKind::Representation)
}

/// sim² for every position: cosine between a segment's standalone embedding
/// and its contextualized embedding inside the document.
pub fn information_retention_scores<T: Scalar, V: AsRef<[T]>>(
    standalone: &[V],
    contextualized: &[V],
    ctx: &RecordContext,
) -> Result<Vec<SimilarityRecord>> {
    scores(standalone, contextualized, ctx, SimilarityKind::Retention)
}

/// Fields records can be grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKey {
    SegmentSet,
    Kind,
    N,
    LanguageConfig,
    Model,
    Calibration,
}

impl GroupKey {
    fn value(self, r: &SimilarityRecord) -> String {
        match self {
            GroupKey::SegmentSet => r.segment_set_id.clone(),
            GroupKey::Kind => r.kind.to_string(),
            GroupKey::N => r.n.to_string(),
            GroupKey::LanguageConfig => r.language_config_id.clone(),
            GroupKey::Model => r.model_id.clone(),
            GroupKey::Calibration => r.calibration_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PositionAggregate {
    pub group: Vec<String>,
    pub position: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single record.
    pub std_dev: f64,
    pub count: usize,
}

/// Mean, standard deviation and count per `(group, position)`, sorted by group then position.
pub fn aggregate_by_position(records: &[SimilarityRecord], keys: &[GroupKey]) -> Result<Vec<PositionAggregate>> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no records to aggregate".into()));
    }
    let mut groups: BTreeMap<(Vec<String>, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        let group = keys.iter().map(|k| k.value(r)).collect();
        groups.entry((group, r.position)).or_default().push(r.value);
    }
    Ok(groups
        .into_iter()
        .map(|((group, position), values)| {
            let count = values.len();
            let mean = values.iter().sum::<f64>() / count as f64;
            let std_dev = if count > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt()
            } else {
                0.0
            };
            PositionAggregate {
                group,
                position,
                mean,
                std_dev,
                count,
            }
        })
        .collect())
}

pub fn write_records_csv<W: Write>(writer: W, records: &[SimilarityRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record([
            "segment_set_id",
            "permutation_id",
            "position",
            "kind",
            "value",
            "n",
            "language_config_id",
            "model_id",
            "calibration_id",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: Read>(reader: R) -> Result<Vec<SimilarityRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ctx(n: usize) -> RecordContext {
        RecordContext {
            segment_set_id: "set-0".into(),
            permutation_id: "p3".into(),
            n,
            language_config_id: "mono-en".into(),
            model_id: "m".into(),
            calibration_id: "none".into(),
        }
    }

    #[test]
    fn cosine_basics() {
        let x = [0.3, -1.2, 2.0];
        assert_abs_diff_eq!(cosine(&x, &x).unwrap(), 1.0, epsilon = 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_abs_diff_eq!(cosine(&x, &neg).unwrap(), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn fairness_scores_shape_and_metadata() {
        let doc = vec![1.0, 0.5, 0.0];
        let segs = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.2, 0.2, 1.0]];
        let recs = positional_fairness_scores(&doc, &segs, &ctx(3)).unwrap();
        assert_eq!(recs.iter().map(|r| r.position).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(recs.iter().all(|r| r.segment_set_id == "set-0" && r.permutation_id == "p3"));
        assert!(recs.iter().all(|r| r.kind == SimilarityKind::Representation));
        assert!(positional_fairness_scores(&doc, &segs[..2], &ctx(3)).is_err());
    }

    #[test]
    fn retention_scores_bounded() {
        let a = vec![vec![1.0, 2.0], vec![-1.0, 0.5], vec![3.0, 3.0], vec![0.1, -0.1]];
        let b = vec![vec![2.0, 1.0], vec![1.0, 0.5], vec![-3.0, -3.0], vec![0.1, 0.1]];
        let recs = information_retention_scores(&a, &b, &ctx(4)).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| r.value.abs() <= 1.0 + 1e-9));
        assert!(information_retention_scores(&a, &b[..3], &ctx(4)).is_err());
    }

    #[test]
    fn aggregation_means_and_grouping() {
        let mut base = positional_fairness_scores(&[1.0, 0.0], &[vec![1.0, 0.0]], &ctx(1)).unwrap();
        base[0].value = 0.9;
        let mut second = base[0].clone();
        second.value = 0.7;
        let mut calibrated = base[0].clone();
        calibrated.calibration_id = "B2-L1..1-uniform".into();
        calibrated.value = 0.1;
        let records = vec![base[0].clone(), second, calibrated];

        let all = aggregate_by_position(&records[..2], &[]).unwrap();
        assert_eq!(all.len(), 1);
        assert_abs_diff_eq!(all[0].mean, 0.8, epsilon = 1e-15);
        assert_eq!(all[0].count, 2);
        assert_abs_diff_eq!(all[0].std_dev, 0.2f64.hypot(0.0) / 2f64.sqrt(), epsilon = 1e-12);

        let split = aggregate_by_position(&records, &[GroupKey::Calibration]).unwrap();
        assert_eq!(split.len(), 2);
        assert!(aggregate_by_position(&[], &[]).is_err());
    }

    #[test]
    fn csv_round_trip_with_quoting() {
        let mut recs = positional_fairness_scores(&[1.0, 0.0], &[vec![1.0, 1.0]], &ctx(1)).unwrap();
        recs[0].model_id = "mini, \"quoted\"".into();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &recs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("segment_set_id,permutation_id,position,kind,value,n,"));
        assert_eq!(read_records_csv(buf.as_slice()).unwrap(), recs);
    }
}
