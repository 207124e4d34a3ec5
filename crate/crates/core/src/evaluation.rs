//! Accuracy metrics and the distance / weight-alignment diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledSample, PartitionReport};
use crate::error::{Error, Result};
use crate::numkit::{sq_dist, Vector};
use crate::protomodel::{predict, ModelState};
use crate::ClassId;

/// `rows[i][j]`: accuracy on task `j`'s test classes after stage `i` (0-based, `j <= i`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn stages(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.rows.get(stage).and_then(|r| r.get(task)).copied()
    }
}

/// Pooled accuracy over `test`, predicting among `seen` classes.
pub fn acc_all_seen(model: &ModelState, test: &[LabeledSample], seen: &[ClassId]) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty { op: "acc_all_seen" });
    }
    let feats = model.features_batch(test.iter().map(|s| s.features.as_slice()))?;
    let mut correct = 0usize;
    for (s, f) in test.iter().zip(&feats) {
        if predict(f, &model.prototypes, seen)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Accuracy on each task's test set, predicting among `seen` classes.
pub fn task_accuracies(
    model: &ModelState,
    task_tests: &[Vec<LabeledSample>],
    seen: &[ClassId],
) -> Result<Vec<f64>> {
    task_tests
        .iter()
        .map(|t| acc_all_seen(model, t, seen))
        .collect()
}

pub fn avg_metric(per_stage: &[f64]) -> Result<f64> {
    if per_stage.is_empty() {
        return Err(Error::Empty { op: "avg_metric" });
    }
    Ok(per_stage.iter().sum::<f64>() / per_stage.len() as f64)
}

/// Per task `j` before the last stage: best accuracy seen on `j` minus its final accuracy.
pub fn forgetting_report(m: &AccuracyMatrix) -> Vec<f64> {
    let Some(last) = m.rows.last() else {
        return Vec::new();
    };
    let t = m.rows.len();
    (0..t.saturating_sub(1))
        .map(|j| {
            let best = m.rows[j..t]
                .iter()
                .filter_map(|r| r.get(j))
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            best - last[j]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtoDistanceRow {
    pub class: ClassId,
    pub samples: usize,
    pub reweight: f64,
    pub uniform: f64,
}

/// Mean L2 distance from each class's test features to both aggregates.
pub fn proto_distance_report(
    reweight: &BTreeMap<ClassId, Vector>,
    uniform: &BTreeMap<ClassId, Vector>,
    test_features: &[(ClassId, Vector)],
) -> Result<Vec<ProtoDistanceRow>> {
    let mut rows = Vec::with_capacity(reweight.len());
    for (&c, pr) in reweight {
        let pu = uniform.get(&c).ok_or(Error::MissingPrototype(c))?;
        let (mut dr, mut du, mut n) = (0.0, 0.0, 0usize);
        for (_, f) in test_features.iter().filter(|(l, _)| *l == c) {
            dr += sq_dist(f, pr)?.sqrt();
            du += sq_dist(f, pu)?.sqrt();
            n += 1;
        }
        if n == 0 {
            return Err(Error::Diagnostic(format!(
                "class {c} has no test samples"
            )));
        }
        rows.push(ProtoDistanceRow {
            class: c,
            samples: n,
            reweight: dr / n as f64,
            uniform: du / n as f64,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub class: ClassId,
    pub holders: usize,
    /// `None` when either side is constant (rank correlation undefined).
    pub spearman: Option<f64>,
    pub argmax_weight_client: usize,
    pub argmax_share_client: usize,
}

/// Rank correlation between each class's re-weight coefficients and the
/// clients' true share of that class.
pub fn weight_alignment_report(
    weights: &BTreeMap<ClassId, Vec<f64>>,
    partition: &PartitionReport,
) -> Result<Vec<AlignmentRow>> {
    let mut rows = Vec::with_capacity(weights.len());
    for (&c, w) in weights {
        let shares = partition
            .shares(c)
            .ok_or_else(|| Error::Diagnostic(format!("class {c} missing from partition report")))?;
        if shares.len() != w.len() {
            return Err(Error::Dim {
                op: "weight_alignment_report",
                left: w.len(),
                right: shares.len(),
            });
        }
        rows.push(AlignmentRow {
            class: c,
            holders: shares.iter().filter(|&&s| s > 0.0).count(),
            spearman: spearman(w, &shares),
            argmax_weight_client: argmax(w),
            argmax_share_client: argmax(&shares),
        });
    }
    Ok(rows)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Average ranks (ties share the mean rank), 1-based.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation of the ranks; `None` if either input is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}
