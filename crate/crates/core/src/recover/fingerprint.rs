use serde::Serialize;

use super::knn::KnnModel;
use super::rsa::activity_starts;
use crate::attacks::ActivitySample;
use crate::error::{Error, Result};
use crate::uarch::SETS;

/// Activity count of every L1i set over one measurement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActivityVector {
    counts: Vec<u64>,
}

impl ActivityVector {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.len() != SETS {
            return Err(Error::Dimension {
                expected: SETS,
                got: counts.len(),
            });
        }
        Ok(ActivityVector { counts })
    }

    /// Counts the active samples of one trace per set.
    pub fn from_traces(per_set: &[Vec<ActivitySample>]) -> Result<Self> {
        ActivityVector::new(per_set.iter().map(|t| t.iter().filter(|s| s.activity).count() as u64).collect())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn features(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }
}

/// Library id of an activity fingerprint.
pub fn fingerprint_library(model: &KnnModel, v: &ActivityVector) -> Result<usize> {
    model.classify(&v.features())
}

/// Features of one set's trace: fraction of active samples, and the
/// coefficient of variation of the distance between activity runs.
/// Secret-dependent code has irregular spacing.
pub fn set_features(samples: &[ActivitySample]) -> Vec<f64> {
    if samples.is_empty() {
        return vec![0.0, 0.0];
    }
    let active = samples.iter().filter(|s| s.activity).count() as f64 / samples.len() as f64;
    let starts = activity_starts(samples);
    let gaps: Vec<f64> = starts.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
    let cv = if gaps.len() < 2 {
        0.0
    } else {
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        let var = gaps.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / gaps.len() as f64;
        var.sqrt() / mean
    };
    vec![active, cv]
}

/// Label of multiplication sets in a set-classifier training set.
pub const MUL_SET_LABEL: usize = 1;

/// Classifies every set's trace with `model` (trained on [`set_features`],
/// [`MUL_SET_LABEL`] for the multiplication set) and returns the set with
/// the most positive votes among those classified positive. Ties go to the
/// higher set index. `None` when no set is positive.
pub fn detect_multiplication_set(per_set: &[Vec<ActivitySample>], model: &KnnModel) -> Result<Option<usize>> {
    if let Some(first) = per_set.first() {
        if let Some(t) = per_set.iter().find(|t| t.len() != first.len()) {
            return Err(Error::Data(format!("set traces differ in length ({} vs {})", first.len(), t.len())));
        }
    }
    let mut best: Option<(usize, usize)> = None;
    for (set, trace) in per_set.iter().enumerate() {
        let f = set_features(trace);
        if model.classify(&f)? != MUL_SET_LABEL {
            continue;
        }
        let score = model
            .votes(&f)?
            .into_iter()
            .find(|(l, _)| *l == MUL_SET_LABEL)
            .map_or(0, |(_, n)| n);
        if best.is_none_or(|(_, b)| score >= b) {
            best = Some((set, score));
        }
    }
    Ok(best.map(|(s, _)| s))
}
