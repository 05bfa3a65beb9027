use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};

use super::Dataset;
use crate::{Error, Result, Scalar};

/// Per-coordinate shift and scale fitted on training rows.
///
/// Constant coordinates get a scale of 1 so they map to zero instead of NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    pub fn fit<S: Scalar>(train: &Dataset<S>) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::usage(
                "cannot standardize with an empty training set",
            ));
        }
        let x = train.features().mapv(|v| v.as_f64());
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let std = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 0.0 && s.is_finite() { s } else { 1.0 });
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            std: Array1::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_rows<S: Scalar>(&self, rows: &Array2<S>) -> Result<Array2<S>> {
        if rows.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "standardizer fitted on {} coordinates, got {}",
                self.dim(),
                rows.ncols()
            )));
        }
        let mean = self.mean.mapv(S::c);
        let std = self.std.mapv(S::c);
        Ok((rows - &mean) / &std)
    }

    pub fn inverse_rows<S: Scalar>(&self, rows: &Array2<S>) -> Result<Array2<S>> {
        if rows.ncols() != self.dim() {
            return Err(Error::shape(format!(
                "standardizer fitted on {} coordinates, got {}",
                self.dim(),
                rows.ncols()
            )));
        }
        let mean = self.mean.mapv(S::c);
        let std = self.std.mapv(S::c);
        Ok(rows * &std + &mean)
    }

    pub fn transform<S: Scalar>(&self, data: &Dataset<S>) -> Result<Dataset<S>> {
        Dataset::new(
            self.transform_rows(data.features())?,
            data.labels().to_vec(),
            data.ids().map(<[String]>::to_vec),
        )
    }

    /// Two CSV rows, `mean,...` and `std,...`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let line = |name: &str, v: &Array1<f64>| {
            let mut s = name.to_string();
            for x in v {
                s.push_str(&format!(",{x:.16e}"));
            }
            s.push('\n');
            s
        };
        fs::write(path, line("mean", &self.mean) + &line("std", &self.std))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut mean = None;
        let mut std = None;
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let mut fields = line.split(',');
            let name = fields.next().unwrap_or_default();
            let values = fields
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::data(format!("{}: line {}: {e}", path.display(), n + 1)))?;
            match name {
                "mean" => mean = Some(Array1::from(values)),
                "std" => std = Some(Array1::from(values)),
                other => {
                    return Err(Error::data(format!(
                        "{}: unknown row {other:?}",
                        path.display()
                    )))
                }
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) if mean.len() == std.len() => {
                if std.iter().any(|s| !(s.is_finite() && *s > 0.0))
                    || mean.iter().any(|m| !m.is_finite())
                {
                    return Err(Error::data(format!(
                        "{}: invalid statistics",
                        path.display()
                    )));
                }
                Ok(Self { mean, std })
            }
            _ => Err(Error::data(format!(
                "{}: expected mean and std rows of equal length",
                path.display()
            ))),
        }
    }
}
