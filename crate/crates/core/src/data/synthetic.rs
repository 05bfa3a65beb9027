use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{AttributeTable, Dataset, Label, SplitSpec};
use crate::classify::per_class_top1;
use crate::{Error, Result};

/// Parameters of the synthetic zero-shot benchmark.
///
/// Seen classes get labels `0..num_seen`, unseen classes the next
/// `num_unseen` labels. Every class gets `samples_per_class` training rows
/// (kept for seen classes only), `val_per_class` validation rows and
/// `samples_per_class` test rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_seen: usize,
    pub num_unseen: usize,
    pub feature_dim: usize,
    pub attribute_dim: usize,
    pub samples_per_class: usize,
    pub val_per_class: usize,
    pub noise_std: f64,
    /// Scale of the random offset added to each unseen attribute after
    /// mixing two seen parents. Zero gives exact convex combinations.
    pub attribute_smoothness: f64,
    /// Width of the tanh layer in the attribute-to-centroid map.
    pub map_hidden: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_seen: 8,
            num_unseen: 4,
            feature_dim: 32,
            attribute_dim: 6,
            samples_per_class: 200,
            val_per_class: 50,
            noise_std: 0.35,
            attribute_smoothness: 0.6,
            map_hidden: 16,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_seen < 2 {
            return Err(Error::usage(
                "synthetic fixture needs at least 2 seen classes",
            ));
        }
        if self.num_unseen < 1 {
            return Err(Error::usage(
                "synthetic fixture needs at least 1 unseen class",
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return Err(Error::usage(format!(
                "noise_std must be positive, got {}",
                self.noise_std
            )));
        }
        if !(self.attribute_smoothness.is_finite() && self.attribute_smoothness >= 0.0) {
            return Err(Error::usage(
                "attribute_smoothness must be a nonnegative number",
            ));
        }
        if self.feature_dim == 0 || self.attribute_dim == 0 || self.map_hidden == 0 {
            return Err(Error::usage("fixture dimensions must be positive"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::usage("samples_per_class must be positive"));
        }
        Ok(())
    }

    pub fn seen_labels(&self) -> BTreeSet<Label> {
        (0..self.num_seen).map(|c| Label(c as u32)).collect()
    }

    pub fn unseen_labels(&self) -> BTreeSet<Label> {
        (self.num_seen..self.num_seen + self.num_unseen)
            .map(|c| Label(c as u32))
            .collect()
    }
}

/// `centroid = w2 · tanh(w1 · a + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMap {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl AttributeMap {
    pub fn apply(&self, attribute: &Array1<f64>) -> Array1<f64> {
        let hidden = (self.w1.dot(attribute) + &self.b1).mapv(f64::tanh);
        self.w2.dot(&hidden) + &self.b2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGroundTruth {
    pub config: SyntheticConfig,
    pub centroids: BTreeMap<Label, Array1<f64>>,
    pub map: AttributeMap,
}

impl SyntheticGroundTruth {
    pub fn noise_std(&self) -> f64 {
        self.config.noise_std
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFixture {
    pub dataset: Dataset<f64>,
    pub attributes: AttributeTable<f64>,
    pub split: SplitSpec,
    pub ground_truth: SyntheticGroundTruth,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

fn normal_vector(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticFixture> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (s, u, d, k, h) = (
        config.num_seen,
        config.num_unseen,
        config.feature_dim,
        config.attribute_dim,
        config.map_hidden,
    );

    let mut attributes: Vec<Array1<f64>> =
        (0..s).map(|_| normal_vector(&mut rng, k, 1.0)).collect();
    for _ in 0..u {
        let first = rng.random_range(0..s);
        let mut second = rng.random_range(0..s - 1);
        if second >= first {
            second += 1;
        }
        let w: f64 = rng.random_range(0.3..0.7);
        let offset = normal_vector(&mut rng, k, config.attribute_smoothness);
        attributes.push(&attributes[first] * w + &attributes[second] * (1.0 - w) + offset);
    }

    let map = AttributeMap {
        w1: normal_matrix(&mut rng, h, k, 1.0 / (k as f64).sqrt()),
        b1: normal_vector(&mut rng, h, 0.1),
        w2: normal_matrix(&mut rng, d, h, 1.0 / (h as f64).sqrt()),
        b2: normal_vector(&mut rng, d, 0.1),
    };

    let labels: Vec<Label> = (0..s + u).map(|c| Label(c as u32)).collect();
    let centroids: BTreeMap<Label, Array1<f64>> = labels
        .iter()
        .zip(&attributes)
        .map(|(&l, a)| (l, map.apply(a)))
        .collect();
    let table = AttributeTable::new(labels.iter().copied().zip(attributes).collect())?;

    let per_class = 2 * config.samples_per_class + config.val_per_class;
    let total = (s + u) * per_class;
    let mut features = Array2::zeros((total, d));
    let mut row_labels = Vec::with_capacity(total);
    let mut ids = Vec::with_capacity(total);
    let mut split = SplitSpec {
        seen: config.seen_labels(),
        unseen: config.unseen_labels(),
        ..SplitSpec::default()
    };
    let mut row = 0;
    for &label in &labels {
        let centroid = &centroids[&label];
        let is_seen = split.seen.contains(&label);
        let parts = [
            ("train", config.samples_per_class),
            ("val", config.val_per_class),
            ("test", config.samples_per_class),
        ];
        for (part, count) in parts {
            for i in 0..count {
                let noise = normal_vector(&mut rng, d, config.noise_std);
                features.row_mut(row).assign(&(centroid + &noise));
                row_labels.push(label);
                let id = format!("c{label}-{part}-{i}");
                match (part, is_seen) {
                    ("train", true) => split.train.push(id.clone()),
                    ("train", false) => {}
                    ("val", _) => split.val.push(id.clone()),
                    (_, true) => split.test_seen.push(id.clone()),
                    (_, false) => split.test_unseen.push(id.clone()),
                }
                ids.push(id);
                row += 1;
            }
        }
    }

    let dataset = Dataset::new(features, row_labels, Some(ids))?;
    split.validate(&dataset)?;
    Ok(SyntheticFixture {
        dataset,
        attributes: table,
        split,
        ground_truth: SyntheticGroundTruth {
            config: config.clone(),
            centroids,
            map,
        },
    })
}

/// Per-class averaged top-1 (percent) of the nearest-true-centroid rule,
/// which is Bayes optimal under the fixture's isotropic noise.
pub fn bayes_oracle_accuracy(
    truth: &SyntheticGroundTruth,
    test: &Dataset<f64>,
    candidates: &BTreeSet<Label>,
) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::usage("no candidate classes"));
    }
    if test.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let centers = candidates
        .iter()
        .map(|l| {
            truth
                .centroids
                .get(l)
                .map(|c| (*l, c))
                .ok_or_else(|| Error::data(format!("class {l} has no ground-truth centroid")))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(l) = test
        .labels()
        .iter()
        .find(|l| !truth.centroids.contains_key(l))
    {
        return Err(Error::data(format!(
            "test row of class {l} has no ground-truth centroid"
        )));
    }
    let predictions: Vec<Label> = (0..test.len())
        .map(|i| {
            let x = test.row(i);
            let mut best = (f64::INFINITY, Label(0));
            for (label, c) in &centers {
                let dist: f64 = x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, *label);
                }
            }
            best.1
        })
        .collect();
    Ok(per_class_top1(test.labels(), &predictions)?.1)
}

impl SyntheticConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}
