//! Datasets, class attribute tables and seen/unseen splits.

mod io;
mod projection;
mod standardize;
mod synthetic;

pub use io::{
    load_dataset, load_ground_truth, save_dataset, save_ground_truth, LoadedDataset,
    ATTRIBUTES_FILE, FEATURES_FILE, GENERATOR_FILE, GROUND_TRUTH_FILE, SPLITS_FILE,
};
pub use projection::{cluster_separation, principal_components, project_2d, Projection};
pub use standardize::Standardizer;
pub use synthetic::{
    bayes_oracle_accuracy, generate_synthetic, AttributeMap, SyntheticConfig, SyntheticFixture,
    SyntheticGroundTruth,
};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Scalar};

/// Class identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Label(pub u32);

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for Label {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        s.trim().parse().map(Label)
    }
}

/// Labelled feature vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S = f64> {
    features: Array2<S>,
    labels: Vec<Label>,
    ids: Option<Vec<String>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn new(features: Array2<S>, labels: Vec<Label>, ids: Option<Vec<String>>) -> Result<Self> {
        if labels.len() != features.nrows() {
            return Err(Error::data(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.nrows()
            )));
        }
        if let Some(ids) = &ids {
            if ids.len() != labels.len() {
                return Err(Error::data(format!(
                    "{} ids for {} rows",
                    ids.len(),
                    labels.len()
                )));
            }
            let mut seen = BTreeSet::new();
            if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
                return Err(Error::data(format!("duplicate id {dup:?}")));
            }
        }
        if let Some((row, _)) = features
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::data(format!("non-finite feature in row {row}")));
        }
        Ok(Self {
            features,
            labels,
            ids,
        })
    }

    pub fn features(&self) -> &Array2<S> {
        &self.features
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn ids(&self) -> Option<&[String]> {
        self.ids.as_deref()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn label_set(&self) -> BTreeSet<Label> {
        self.labels.iter().copied().collect()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, S> {
        self.features.row(i)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset<S> {
        Dataset {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: self
                .ids
                .as_ref()
                .map(|ids| rows.iter().map(|&r| ids[r].clone()).collect()),
        }
    }

    /// Rows with the given ids, in the given order.
    pub fn select_ids(&self, wanted: &[String]) -> Result<Dataset<S>> {
        let ids = self
            .ids
            .as_ref()
            .ok_or_else(|| Error::data("dataset has no ids to select by"))?;
        let index: HashMap<&str, usize> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let rows = wanted
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::data(format!("split references unknown id {id:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.select_rows(&rows))
    }

    pub fn filter_labels(&self, keep: &BTreeSet<Label>) -> Dataset<S> {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        self.select_rows(&rows)
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            features: self.features.mapv(|v| T::c(v.as_f64())),
            labels: self.labels.clone(),
            ids: self.ids.clone(),
        }
    }
}

/// One attribute vector per class. Vectors share a dimension and are
/// pairwise distinct.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeTable<S = f64> {
    dim: usize,
    entries: BTreeMap<Label, Array1<S>>,
}

impl<S: Scalar> AttributeTable<S> {
    pub fn new(entries: BTreeMap<Label, Array1<S>>) -> Result<Self> {
        let dim = entries
            .values()
            .next()
            .map(|a| a.len())
            .ok_or_else(|| Error::data("attribute table is empty"))?;
        for (label, a) in &entries {
            if a.len() != dim {
                return Err(Error::data(format!(
                    "attribute vector of class {label} has dimension {}, expected {dim}",
                    a.len()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!(
                    "non-finite attribute for class {label}"
                )));
            }
        }
        let items: Vec<_> = entries.iter().collect();
        for (i, (la, a)) in items.iter().enumerate() {
            for (lb, b) in &items[i + 1..] {
                if a == b {
                    return Err(Error::data(format!(
                        "classes {la} and {lb} share an attribute vector"
                    )));
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: Label) -> Option<&Array1<S>> {
        self.entries.get(&label)
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.entries.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Label, &Array1<S>)> + '_ {
        self.entries.iter().map(|(l, a)| (*l, a))
    }

    /// Matrix form of the given classes, sorted by label.
    pub fn class_table<'a>(
        &self,
        labels: impl IntoIterator<Item = &'a Label>,
    ) -> Result<ClassTable<S>> {
        let labels: BTreeSet<Label> = labels.into_iter().copied().collect();
        let mut rows = Vec::with_capacity(labels.len());
        for label in &labels {
            let a = self
                .get(*label)
                .ok_or_else(|| Error::data(format!("class {label} has no attribute vector")))?;
            rows.push(a.view());
        }
        if rows.is_empty() {
            return Err(Error::usage("class table needs at least one class"));
        }
        let attributes = ndarray::stack(Axis(0), &rows).map_err(|e| Error::shape(e.to_string()))?;
        Ok(ClassTable {
            labels: labels.into_iter().collect(),
            attributes,
        })
    }

    pub fn cast<T: Scalar>(&self) -> AttributeTable<T> {
        AttributeTable {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .map(|(l, a)| (*l, a.mapv(|v| T::c(v.as_f64()))))
                .collect(),
        }
    }
}

/// A set of candidate classes: labels in ascending order with their
/// attribute vectors stacked row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable<S = f64> {
    labels: Vec<Label>,
    attributes: Array2<S>,
}

impl<S: Scalar> ClassTable<S> {
    /// Rows of `attributes` belong to `labels`; pairs are re-sorted by label.
    pub fn new(labels: Vec<Label>, attributes: Array2<S>) -> Result<Self> {
        if labels.len() != attributes.nrows() {
            return Err(Error::shape("one attribute row per label required"));
        }
        if labels.is_empty() {
            return Err(Error::usage("class table needs at least one class"));
        }
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.sort_by_key(|&i| labels[i]);
        if order.windows(2).any(|w| labels[w[0]] == labels[w[1]]) {
            return Err(Error::data("duplicate label in class table"));
        }
        Ok(Self {
            labels: order.iter().map(|&i| labels[i]).collect(),
            attributes: attributes.select(Axis(0), &order),
        })
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn attributes(&self) -> &Array2<S> {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: Label) -> bool {
        self.labels.binary_search(&label).is_ok()
    }

    pub fn index_of(&self, label: Label) -> Option<usize> {
        self.labels.binary_search(&label).ok()
    }

    pub fn attribute(&self, label: Label) -> Option<ArrayView1<'_, S>> {
        self.index_of(label).map(|i| self.attributes.row(i))
    }

    /// Sub-table restricted to `keep`.
    pub fn restrict(&self, keep: &BTreeSet<Label>) -> Result<ClassTable<S>> {
        let rows: Vec<usize> = (0..self.len())
            .filter(|&i| keep.contains(&self.labels[i]))
            .collect();
        if rows.is_empty() {
            return Err(Error::usage("restriction leaves no candidate classes"));
        }
        Ok(ClassTable {
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            attributes: self.attributes.select(Axis(0), &rows),
        })
    }
}

/// Which classes are seen or unseen and which rows go where.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitSpec {
    pub seen: BTreeSet<Label>,
    pub unseen: BTreeSet<Label>,
    pub train: Vec<String>,
    pub test_seen: Vec<String>,
    pub test_unseen: Vec<String>,
    pub val: Vec<String>,
}

impl SplitSpec {
    pub fn all_labels(&self) -> BTreeSet<Label> {
        self.seen.union(&self.unseen).copied().collect()
    }

    /// Checks the split against a dataset: disjoint label groups, known ids,
    /// seen-only training rows, and test rows in the right group.
    pub fn validate<S: Scalar>(&self, dataset: &Dataset<S>) -> Result<()> {
        if let Some(label) = self.seen.intersection(&self.unseen).next() {
            return Err(Error::data(format!(
                "class {label} is listed as both seen and unseen"
            )));
        }
        let all = self.all_labels();
        let check = |name: &str, ids: &[String], allowed: &BTreeSet<Label>| -> Result<()> {
            let part = dataset.select_ids(ids)?;
            if let Some(bad) = part.labels().iter().find(|l| !allowed.contains(l)) {
                return Err(Error::data(format!(
                    "{name} split contains a row of class {bad}"
                )));
            }
            Ok(())
        };
        check("train", &self.train, &self.seen)?;
        check("test_seen", &self.test_seen, &self.seen)?;
        check("test_unseen", &self.test_unseen, &self.unseen)?;
        check("val", &self.val, &all)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
