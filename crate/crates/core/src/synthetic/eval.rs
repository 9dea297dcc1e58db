use crate::geometry::{pose_error, Pose};
use serde::Serialize;
use std::collections::{BTreeMap, HashSet};
use thiserror::Error;

/// Three nested (meters, degrees) thresholds.
pub type Thresholds = [(f64, f64); 3];

pub const OUTDOOR_THRESHOLDS: Thresholds = [(0.25, 2.0), (0.5, 5.0), (5.0, 10.0)];
pub const INLOC_THRESHOLDS: Thresholds = [(0.25, 10.0), (0.5, 10.0), (5.0, 10.0)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("no ground truth for query {0:?}")]
    UnknownQuery(String),
    #[error("query {0:?} appears more than once")]
    Duplicate(String),
    #[error("ground truth is empty")]
    EmptyGroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryError {
    pub name: String,
    /// `None` when the query has no result.
    pub trans_err: Option<f64>,
    pub rot_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub thresholds: Thresholds,
    /// Percentages, one per threshold.
    pub accuracy: [f64; 3],
    /// Medians over all queries; a missing query counts as infinitely wrong.
    pub median_trans: f64,
    pub median_rot: f64,
    pub per_query: Vec<QueryError>,
}

impl EvalReport {
    pub fn triple(&self) -> String {
        format_triple(&self.accuracy)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        let (a, b) = (v[n / 2 - 1], v[n / 2]);
        if a.is_infinite() || b.is_infinite() { f64::INFINITY } else { (a + b) / 2.0 }
    }
}

/// Localization accuracy of `results` against `ground_truth`.
pub fn evaluate(
    results: &[(String, Pose)],
    ground_truth: &BTreeMap<String, Pose>,
    thresholds: &Thresholds,
) -> Result<EvalReport, EvalError> {
    if ground_truth.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let mut seen = HashSet::new();
    let mut found: BTreeMap<&str, &Pose> = BTreeMap::new();
    for (name, pose) in results {
        if !ground_truth.contains_key(name) {
            return Err(EvalError::UnknownQuery(name.clone()));
        }
        if !seen.insert(name.as_str()) {
            return Err(EvalError::Duplicate(name.clone()));
        }
        found.insert(name, pose);
    }
    let per_query: Vec<QueryError> = ground_truth
        .iter()
        .map(|(name, gt)| match found.get(name.as_str()) {
            Some(p) => {
                let (t, r) = pose_error(p, gt);
                QueryError { name: name.clone(), trans_err: Some(t), rot_err: Some(r) }
            }
            None => QueryError { name: name.clone(), trans_err: None, rot_err: None },
        })
        .collect();
    let n = per_query.len() as f64;
    let accuracy = thresholds.map(|(tt, tr)| {
        let hit = per_query
            .iter()
            .filter(|q| matches!((q.trans_err, q.rot_err), (Some(t), Some(r)) if t <= tt && r <= tr))
            .count();
        100.0 * hit as f64 / n
    });
    Ok(EvalReport {
        thresholds: *thresholds,
        accuracy,
        median_trans: median(per_query.iter().map(|q| q.trans_err.unwrap_or(f64::INFINITY)).collect()),
        median_rot: median(per_query.iter().map(|q| q.rot_err.unwrap_or(f64::INFINITY)).collect()),
        per_query,
    })
}

/// `"41.9 / 68.2 / 84.3"`
pub fn format_triple(acc: &[f64; 3]) -> String {
    format!("{:.1} / {:.1} / {:.1}", acc[0], acc[1], acc[2])
}

pub fn parse_triple(s: &str) -> Option<[f64; 3]> {
    let parts: Vec<f64> = s.split('/').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
    <[f64; 3]>::try_from(parts).ok()
}
