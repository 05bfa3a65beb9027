//! Nearest-cluster classification in latent space and the zero-shot
//! evaluation protocols.
//!
//! With unit covariance for every class cluster, the class maximizing
//! `N(μ(x); μ(a_y), I)` is the one whose prior mean is closest to the
//! encoder mean `μ(x)`, so classification is a Euclidean argmin.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{ClassTable, Dataset, Label};
use crate::model::SgalModel;
use crate::{Error, Result, Scalar};

/// For each row of `points`, the label of the nearest row of `centers`.
/// Ties go to the smallest label.
pub fn nearest_center<S: Scalar>(
    points: ArrayView2<S>,
    centers: ArrayView2<S>,
    labels: &[Label],
) -> Result<Vec<Label>> {
    if centers.nrows() == 0 {
        return Err(Error::usage("no candidate classes"));
    }
    if centers.nrows() != labels.len() {
        return Err(Error::shape("one label per center required"));
    }
    if points.ncols() != centers.ncols() {
        return Err(Error::shape(format!(
            "points have dimension {}, centers {}",
            points.ncols(),
            centers.ncols()
        )));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| labels[i]);
    Ok(points
        .rows()
        .into_iter()
        .map(|p| {
            let mut best = (S::infinity(), labels[order[0]]);
            for &c in &order {
                let dist: S = p
                    .iter()
                    .zip(centers.row(c))
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                if dist < best.0 {
                    best = (dist, labels[c]);
                }
            }
            best.1
        })
        .collect())
}

/// Labels for a batch of feature rows, choosing among `candidates`.
pub fn classify_batch<S: Scalar>(
    model: &SgalModel<S>,
    x: ArrayView2<S>,
    candidates: &ClassTable<S>,
) -> Result<Vec<Label>> {
    if candidates.is_empty() {
        return Err(Error::usage("no candidate classes"));
    }
    let latent = model.encode_eval(x)?.mean;
    let centers = model.prior_mean_eval(candidates.attributes().view())?;
    nearest_center(latent.view(), centers.view(), candidates.labels())
}

pub fn classify<S: Scalar>(
    model: &SgalModel<S>,
    x: ArrayView1<S>,
    candidates: &ClassTable<S>,
) -> Result<Label> {
    let batch = x.insert_axis(ndarray::Axis(0));
    Ok(classify_batch(model, batch, candidates)?[0])
}

/// Per-class top-1 accuracies (percent) and their unweighted mean.
pub fn per_class_top1(truth: &[Label], predicted: &[Label]) -> Result<(BTreeMap<Label, f64>, f64)> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("prediction count differs from label count"));
    }
    if truth.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let mut counts: BTreeMap<Label, (usize, usize)> = BTreeMap::new();
    for (t, p) in truth.iter().zip(predicted) {
        let entry = counts.entry(*t).or_default();
        entry.1 += 1;
        if t == p {
            entry.0 += 1;
        }
    }
    let per_class: BTreeMap<Label, f64> = counts
        .into_iter()
        .map(|(l, (hit, total))| (l, 100.0 * hit as f64 / total as f64))
        .collect();
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((per_class, mean))
}

/// Fraction (percent) of all rows predicted correctly.
pub fn per_sample_top1(truth: &[Label], predicted: &[Label]) -> Result<f64> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("prediction count differs from label count"));
    }
    if truth.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let hits = truth.iter().zip(predicted).filter(|(t, p)| t == p).count();
    Ok(100.0 * hits as f64 / truth.len() as f64)
}

/// `2us / (u + s)`, or 0 when both are 0.
pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    if u.is_nan() || s.is_nan() || u < 0.0 || s < 0.0 {
        return Err(Error::usage(format!(
            "harmonic mean needs nonnegative inputs, got {u} and {s}"
        )));
    }
    if u + s == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * u * s / (u + s))
}

/// Unseen-only evaluation: test rows come from unseen classes and only
/// unseen classes are candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConventionalReport {
    /// Mean of the per-class accuracies.
    pub top1: f64,
    pub per_sample_top1: f64,
    pub per_class: BTreeMap<Label, f64>,
}

/// Evaluation over the union of seen and unseen classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GzslReport {
    /// u
    pub unseen_top1: f64,
    /// s
    pub seen_top1: f64,
    /// H
    pub harmonic: f64,
    pub unseen_per_sample_top1: f64,
    pub seen_per_sample_top1: f64,
    pub per_class: BTreeMap<Label, f64>,
}

fn check_labels<S: Scalar>(data: &Dataset<S>, allowed: &ClassTable<S>, what: &str) -> Result<()> {
    if data.is_empty() {
        return Err(Error::data(format!("{what} test set is empty")));
    }
    if let Some(l) = data.labels().iter().find(|l| !allowed.contains(**l)) {
        return Err(Error::data(format!(
            "{what} test row has label {l} outside the candidate classes"
        )));
    }
    Ok(())
}

pub fn evaluate_conventional<S: Scalar>(
    model: &SgalModel<S>,
    test_unseen: &Dataset<S>,
    unseen_classes: &ClassTable<S>,
) -> Result<ConventionalReport> {
    check_labels(test_unseen, unseen_classes, "unseen")?;
    let predicted = classify_batch(model, test_unseen.features().view(), unseen_classes)?;
    let (per_class, top1) = per_class_top1(test_unseen.labels(), &predicted)?;
    Ok(ConventionalReport {
        top1,
        per_sample_top1: per_sample_top1(test_unseen.labels(), &predicted)?,
        per_class,
    })
}

/// Classifies every test row against all classes; `u` and `s` average the
/// per-class accuracies within the unseen and seen groups.
pub fn evaluate_gzsl<S: Scalar>(
    model: &SgalModel<S>,
    test_seen: &Dataset<S>,
    test_unseen: &Dataset<S>,
    all_classes: &ClassTable<S>,
) -> Result<GzslReport> {
    check_labels(test_seen, all_classes, "seen")?;
    check_labels(test_unseen, all_classes, "unseen")?;
    let seen_labels = test_seen.label_set();
    if let Some(l) = test_unseen.label_set().intersection(&seen_labels).next() {
        return Err(Error::data(format!(
            "class {l} appears in both seen and unseen test sets"
        )));
    }
    let pred_seen = classify_batch(model, test_seen.features().view(), all_classes)?;
    let pred_unseen = classify_batch(model, test_unseen.features().view(), all_classes)?;
    let (mut per_class, s) = per_class_top1(test_seen.labels(), &pred_seen)?;
    let (unseen_classes, u) = per_class_top1(test_unseen.labels(), &pred_unseen)?;
    per_class.extend(unseen_classes);
    Ok(GzslReport {
        unseen_top1: u,
        seen_top1: s,
        harmonic: harmonic_mean(u, s)?,
        unseen_per_sample_top1: per_sample_top1(test_unseen.labels(), &pred_unseen)?,
        seen_per_sample_top1: per_sample_top1(test_seen.labels(), &pred_seen)?,
        per_class,
    })
}

impl GzslReport {
    /// `key = value` lines; floats use the shortest exact decimal form.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "u = {}\ns = {}\nH = {}\nu_per_sample = {}\ns_per_sample = {}\n",
            self.unseen_top1,
            self.seen_top1,
            self.harmonic,
            self.unseen_per_sample_top1,
            self.seen_per_sample_top1
        );
        for (l, acc) in &self.per_class {
            writeln!(out, "class_{l} = {acc}").unwrap();
        }
        out
    }

    /// Parses [`to_text`](Self::to_text) output.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = crate::keyvalue::parse(text)?;
        let mut per_class = BTreeMap::new();
        let class_keys: Vec<String> = map
            .keys()
            .filter(|k| k.starts_with("class_"))
            .cloned()
            .collect();
        for key in class_keys {
            let label: Label = key["class_".len()..]
                .parse()
                .map_err(|_| Error::data(format!("bad class key {key:?}")))?;
            let value: f64 = crate::keyvalue::take(&mut map, &key)?.expect("present");
            per_class.insert(label, value);
        }
        let mut need = |key: &str| -> Result<f64> {
            crate::keyvalue::take(&mut map, key)?
                .ok_or_else(|| Error::data(format!("report is missing {key}")))
        };
        let report = Self {
            unseen_top1: need("u")?,
            seen_top1: need("s")?,
            harmonic: need("H")?,
            unseen_per_sample_top1: need("u_per_sample")?,
            seen_per_sample_top1: need("s_per_sample")?,
            per_class,
        };
        crate::keyvalue::finish(&map)?;
        Ok(report)
    }

    /// Labels whose per-class entry is present.
    pub fn classes(&self) -> BTreeSet<Label> {
        self.per_class.keys().copied().collect()
    }
}

impl ConventionalReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "top1 = {}\ntop1_per_sample = {}\n",
            self.top1, self.per_sample_top1
        );
        for (l, acc) in &self.per_class {
            writeln!(out, "class_{l} = {acc}").unwrap();
        }
        out
    }
}
