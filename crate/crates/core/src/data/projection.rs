use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::Label;
use crate::{Error, Result};

/// Result of projecting onto the top two principal components.
#[derive(Debug, Clone)]
pub struct Projection {
    /// One row per input vector.
    pub points: Array2<f64>,
    /// Unit principal axes as rows.
    pub axes: Array2<f64>,
    /// Covariance eigenvalues along the two axes (divisor n).
    pub variances: [f64; 2],
    pub mean: Array1<f64>,
}

const MAX_ITERATIONS: usize = 100_000;

/// Dominant eigenvector of a symmetric PSD matrix, kept orthogonal to
/// `against`. Returns a zero eigenvalue when nothing is left.
fn power_iteration(cov: &Array2<f64>, against: Option<&Array1<f64>>) -> (f64, Array1<f64>) {
    let n = cov.nrows();
    let orthogonalize = |v: &mut Array1<f64>| {
        if let Some(u) = against {
            let p = v.dot(u);
            v.scaled_add(-p, u);
        }
    };
    // Start from the covariance column with the largest norm, or failing
    // that a coordinate axis, whichever survives orthogonalization.
    let unit = |j: usize| Array1::from_shape_fn(n, |i| if i == j { 1.0 } else { 0.0 });
    let widest = (0..n)
        .map(|j| cov.column(j).to_owned())
        .max_by(|a, b| a.dot(a).total_cmp(&b.dot(b)))
        .unwrap_or_else(|| Array1::zeros(n));
    let mut v = Array1::zeros(n);
    for mut candidate in std::iter::once(widest).chain((0..n).map(unit)) {
        let before = candidate.dot(&candidate).sqrt();
        orthogonalize(&mut candidate);
        orthogonalize(&mut candidate);
        let after = candidate.dot(&candidate).sqrt();
        if before > 0.0 && after > 1e-6 * before {
            v = candidate / after;
            break;
        }
    }
    if v.iter().all(|x| *x == 0.0) {
        return (0.0, v);
    }
    let scale = (0..n)
        .map(|i| cov[[i, i]])
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERATIONS {
        let mut w = cov.dot(&v);
        orthogonalize(&mut w);
        orthogonalize(&mut w);
        let norm = w.dot(&w).sqrt();
        if norm <= 1e-14 * scale {
            // Remaining variance is numerically zero; any orthogonal
            // direction will do.
            return (0.0, v);
        }
        w /= norm;
        let rayleigh = w.dot(&cov.dot(&w));
        let residual = &cov.dot(&w) - &(&w * rayleigh);
        let done = (rayleigh - lambda).abs() <= 1e-15 * scale
            && residual.dot(&residual).sqrt() <= 1e-10 * scale;
        v = w;
        lambda = rayleigh;
        if done {
            break;
        }
    }
    (lambda.max(0.0), v)
}

fn canonical_sign(v: &mut Array1<f64>) {
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if pivot < 0.0 {
        v.mapv_inplace(|x| -x);
    }
}

/// Leading principal components and eigenvalues of the centered data.
pub fn principal_components(data: ArrayView2<'_, f64>) -> Result<Projection> {
    let n = data.nrows();
    if n < 3 {
        return Err(Error::usage(format!(
            "projection needs at least 3 vectors, got {n}"
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite value in projection input".into(),
        ));
    }
    let dim = data.ncols();
    let mean = data.mean_axis(Axis(0)).expect("nonempty");
    let centered = &data - &mean;
    let cov = centered.t().dot(&centered) / n as f64;

    let (l1, mut v1) = power_iteration(&cov, None);
    canonical_sign(&mut v1);
    let (l2, mut v2) = if dim >= 2 {
        power_iteration(&cov, Some(&v1))
    } else {
        (0.0, Array1::zeros(dim))
    };
    canonical_sign(&mut v2);

    let mut axes = Array2::zeros((2, dim));
    axes.row_mut(0).assign(&v1);
    axes.row_mut(1).assign(&v2);
    let points = centered.dot(&axes.t());
    Ok(Projection {
        points,
        axes,
        variances: [l1, l2],
        mean,
    })
}

/// Centers `data` and projects it onto its top two principal components.
pub fn project_2d(data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    Ok(principal_components(data)?.points)
}

/// Mean pairwise distance between class centroids divided by the mean
/// distance of points to their own class centroid, over the classes in
/// `classes`.
pub fn cluster_separation(
    points: ArrayView2<'_, f64>,
    labels: &[Label],
    classes: &BTreeSet<Label>,
) -> Result<f64> {
    if points.nrows() != labels.len() {
        return Err(Error::shape("one label per point required"));
    }
    let mut members: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if classes.contains(l) {
            members.entry(*l).or_default().push(i);
        }
    }
    if members.len() < 2 {
        return Err(Error::usage(
            "cluster separation needs points from at least 2 classes",
        ));
    }
    let dist = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let centroids: Vec<Array1<f64>> = members
        .values()
        .map(|rows| {
            points
                .select(Axis(0), rows)
                .mean_axis(Axis(0))
                .expect("nonempty")
        })
        .collect();
    let spread = members
        .values()
        .zip(&centroids)
        .map(|(rows, c)| {
            rows.iter()
                .map(|&r| dist(points.row(r), c.view()))
                .sum::<f64>()
                / rows.len() as f64
        })
        .sum::<f64>()
        / members.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += dist(centroids[i].view(), centroids[j].view());
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    if spread == 0.0 {
        return Ok(if inter > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(inter / spread)
}
