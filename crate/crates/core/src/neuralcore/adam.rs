use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Gradient, ParameterSet};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid Adam hyperparameters {self:?}"
            )))
        }
    }
}

/// Moment estimates for one [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub first_moment: Gradient<S>,
    pub second_moment: Gradient<S>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParameterSet<S>, config: AdamConfig) -> Self {
        Self {
            first_moment: Gradient::zeros_like(params),
            second_moment: Gradient::zeros_like(params),
            step_count: 0,
            config,
        }
    }

    fn check_shape(&self, params: &ParameterSet<S>, gradient: &Gradient<S>) -> Result<()> {
        let same = |g: &Gradient<S>| {
            g.layers.len() == params.layers.len()
                && g.layers.iter().zip(&params.layers).all(|(g, p)| {
                    g.weights.dim() == p.weights.dim() && g.biases.dim() == p.biases.dim()
                })
        };
        if !same(gradient) {
            return Err(Error::shape("gradient does not match parameter shapes"));
        }
        if !same(&self.first_moment) {
            return Err(Error::State(
                "Adam moments do not match parameter shapes".into(),
            ));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update, in place.
///
/// A gradient with any non-finite entry is rejected before anything is
/// modified.
pub fn adam_step<S: Scalar>(
    params: &mut ParameterSet<S>,
    gradient: &Gradient<S>,
    state: &mut AdamState<S>,
) -> Result<()> {
    state.check_shape(params, gradient)?;
    if !gradient.is_finite() {
        return Err(Error::Numeric("non-finite gradient passed to Adam".into()));
    }
    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let b1 = S::c(cfg.beta1);
    let b2 = S::c(cfg.beta2);
    let one = S::one();
    let lr = S::c(cfg.learning_rate);
    let eps = S::c(cfg.epsilon);
    let corr1 = one - b1.powi(t);
    let corr2 = one - b2.powi(t);

    let update = |p: &mut S, g: &S, m: &mut S, v: &mut S| {
        *m = b1 * *m + (one - b1) * *g;
        *v = b2 * *v + (one - b2) * *g * *g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for (((layer, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&gradient.layers)
        .zip(&mut state.first_moment.layers)
        .zip(&mut state.second_moment.layers)
    {
        Zip::from(&mut layer.weights)
            .and(&g.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(update);
        Zip::from(&mut layer.biases)
            .and(&g.biases)
            .and(&mut m.biases)
            .and(&mut v.biases)
            .for_each(update);
    }
    Ok(())
}
