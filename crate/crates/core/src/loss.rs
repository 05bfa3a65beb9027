//! Negative ELBO with a class-conditional unit-covariance prior, and the
//! pairwise hinge that pushes class prior means apart.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassTable, Label};
use crate::model::{
    standard_normal, EncoderOutput, ModelGradient, SgalModel, LOG_VARIANCE_MAX, LOG_VARIANCE_MIN,
};
use crate::neuralcore::Masks;
use crate::{Error, Result, Scalar};

/// Loss terms of one step. `total = kl + reconstruction + weight · prior_regularization`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<S> {
    /// Batch mean of `KL(q(z|x) ‖ N(μ(a), I))`.
    pub kl: S,
    /// Batch mean of `½‖x − decode(z)‖²`.
    pub reconstruction: S,
    pub prior_regularization: S,
    pub regularization_weight: S,
    pub total: S,
}

impl<S: Scalar> LossBreakdown<S> {
    pub fn new(
        kl: S,
        reconstruction: S,
        prior_regularization: S,
        regularization_weight: S,
    ) -> Self {
        Self {
            kl,
            reconstruction,
            prior_regularization,
            regularization_weight,
            total: kl + reconstruction + regularization_weight * prior_regularization,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.kl.is_finite()
            && self.reconstruction.is_finite()
            && self.prior_regularization.is_finite()
            && self.total.is_finite()
    }
}

fn check_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// `KL(N(mean, diag exp(log_variance)) ‖ N(prior_mean, I))` in closed form.
pub fn kl_to_class_prior<S: Scalar>(
    mean: ArrayView1<S>,
    log_variance: ArrayView1<S>,
    prior_mean: ArrayView1<S>,
) -> Result<S> {
    check_len("kl_to_class_prior", mean.len(), log_variance.len())?;
    check_len("kl_to_class_prior", mean.len(), prior_mean.len())?;
    let half = S::c(0.5);
    Ok(mean
        .iter()
        .zip(log_variance)
        .zip(prior_mean)
        .map(|((&mq, &lv), &mp)| half * (lv.exp() + (mq - mp) * (mq - mp) - S::one() - lv))
        .sum())
}

/// `½‖x − reconstruction‖²`.
pub fn reconstruction_loss<S: Scalar>(
    x: ArrayView1<S>,
    reconstruction: ArrayView1<S>,
) -> Result<S> {
    check_len("reconstruction_loss", x.len(), reconstruction.len())?;
    Ok(S::c(0.5)
        * x.iter()
            .zip(reconstruction)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum())
}

/// Mean over pairs `i < j` of `max(0, margin − ‖μ_i − μ_j‖)²`.
pub fn prior_regularization<S: Scalar>(means: ArrayView2<S>, margin: S) -> Result<S> {
    Ok(prior_regularization_with_gradient(means, margin)?.0)
}

/// Value and gradient of [`prior_regularization`] with respect to each mean.
/// Coincident means get a zero gradient.
pub fn prior_regularization_with_gradient<S: Scalar>(
    means: ArrayView2<S>,
    margin: S,
) -> Result<(S, Array2<S>)> {
    let n = means.nrows();
    if n < 2 {
        return Err(Error::usage(
            "prior regularization needs at least 2 class means",
        ));
    }
    if !(margin.is_finite() && margin > S::zero()) {
        return Err(Error::usage("margin must be positive"));
    }
    let pairs = S::c((n * (n - 1) / 2) as f64);
    let mut value = S::zero();
    let mut grad = Array2::zeros(means.raw_dim());
    for i in 0..n {
        for j in i + 1..n {
            let diff = &means.row(i) - &means.row(j);
            let dist = diff.dot(&diff).sqrt();
            let gap = margin - dist;
            if gap <= S::zero() {
                continue;
            }
            value += gap * gap;
            if dist > S::zero() {
                let coef = -S::c(2.0) * gap / (dist * pairs);
                let g = diff * coef;
                let mut gi = grad.row_mut(i);
                gi += &g;
                let mut gj = grad.row_mut(j);
                gj -= &g;
            }
        }
    }
    Ok((value / pairs, grad))
}

/// Margin and weight of the prior regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub margin: f64,
    pub regularization_weight: f64,
}

impl ObjectiveConfig {
    /// Margin `4√m`, weight 1.
    pub fn for_latent_dim(latent_dim: usize) -> Self {
        Self {
            margin: 4.0 * (latent_dim as f64).sqrt(),
            regularization_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.regularization_weight.is_finite() && self.regularization_weight >= 0.0) {
            return Err(Error::Config(format!(
                "regularization weight must be nonnegative, got {}",
                self.regularization_weight
            )));
        }
        Ok(())
    }
}

/// Feature rows with the class each one is paired with.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<S> {
    pub features: Array2<S>,
    pub labels: Vec<Label>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(features: Array2<S>, labels: Vec<Label>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Every random quantity of one loss evaluation. Holding it fixed makes the
/// loss a deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct ElboNoise<S> {
    /// Reparameterization noise, one row per batch item.
    pub epsilon: Array2<S>,
    pub encoder_masks: Masks<S>,
    pub decoder_masks: Masks<S>,
    /// Masks for the class-table pass through the prior network.
    pub prior_masks: Masks<S>,
}

impl<S: Scalar> ElboNoise<S> {
    pub fn sample<R: Rng + ?Sized>(
        model: &SgalModel<S>,
        batch_size: usize,
        class_count: usize,
        rng: &mut R,
    ) -> Self {
        let encoder_masks = model.encoder.sample_masks(batch_size, rng);
        let epsilon = standard_normal(batch_size, model.dims().latent_dim, rng);
        let decoder_masks = model.decoder.sample_masks(batch_size, rng);
        let prior_masks = model.prior.sample_masks(class_count, rng);
        Self {
            epsilon,
            encoder_masks,
            decoder_masks,
            prior_masks,
        }
    }
}

/// Negative ELBO over `batch` plus the weighted prior regularizer over
/// every class in `classes`, with its gradient. Dropout is active in all
/// three networks and one `z` is drawn per item.
pub fn elbo_loss<S: Scalar, R: Rng + ?Sized>(
    model: &SgalModel<S>,
    batch: &Batch<S>,
    classes: &ClassTable<S>,
    objective: &ObjectiveConfig,
    rng: &mut R,
) -> Result<(LossBreakdown<S>, ModelGradient<S>)> {
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let noise = ElboNoise::sample(model, batch.len(), classes.len(), rng);
    elbo_loss_with_noise(model, batch, classes, objective, &noise)
}

/// Forward quantities of one loss evaluation.
struct Forward<S> {
    rows: Vec<usize>,
    raw: Array2<S>,
    enc: EncoderOutput<S>,
    std: Array2<S>,
    class_means: Array2<S>,
    prior_means: Array2<S>,
    recon: Array2<S>,
    reg_grad: Array2<S>,
    loss: LossBreakdown<S>,
}

fn check_inputs<S: Scalar>(
    model: &SgalModel<S>,
    batch: &Batch<S>,
    classes: &ClassTable<S>,
    objective: &ObjectiveConfig,
    noise: &ElboNoise<S>,
) -> Result<Vec<usize>> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::usage("empty batch"));
    }
    objective.validate()?;
    if noise.epsilon.dim() != (n, model.dims().latent_dim) {
        return Err(Error::shape(
            "reparameterization noise does not match the batch",
        ));
    }
    batch
        .labels
        .iter()
        .map(|&l| {
            classes
                .index_of(l)
                .ok_or_else(|| Error::usage(format!("batch label {l} is not in the class table")))
        })
        .collect()
}

/// Loss terms from already-computed network outputs.
fn assemble<S: Scalar>(
    batch: &Batch<S>,
    classes: &ClassTable<S>,
    objective: &ObjectiveConfig,
    noise: &ElboNoise<S>,
    rows: Vec<usize>,
    raw: Array2<S>,
    class_means: Array2<S>,
    decode: impl FnOnce(ArrayView2<S>) -> Result<Array2<S>>,
) -> Result<Forward<S>> {
    let n = batch.len();
    let m = class_means.ncols();
    let enc = EncoderOutput::from_raw(&raw, m);
    let prior_means = class_means.select(Axis(0), &rows);
    let half = S::c(0.5);
    let std = enc.log_variance.mapv(|lv| (half * lv).exp());
    let z = &enc.mean + &(&std * &noise.epsilon);
    let recon = decode(z.view())?;

    let inv_n = S::one() / S::c(n as f64);
    let mut kl = S::zero();
    let mut rec = S::zero();
    for i in 0..n {
        kl += kl_to_class_prior(enc.mean.row(i), enc.log_variance.row(i), prior_means.row(i))?;
        rec += reconstruction_loss(batch.features.row(i), recon.row(i))?;
    }
    kl *= inv_n;
    rec *= inv_n;

    let (reg, reg_grad) = if classes.len() >= 2 {
        prior_regularization_with_gradient(class_means.view(), S::c(objective.margin))?
    } else {
        (S::zero(), Array2::zeros(class_means.raw_dim()))
    };
    let loss = LossBreakdown::new(kl, rec, reg, S::c(objective.regularization_weight));
    Ok(Forward {
        rows,
        raw,
        enc,
        std,
        class_means,
        prior_means,
        recon,
        reg_grad,
        loss,
    })
}

/// Elementwise contributions to the objective, before summation.
///
/// Finite-difference checks on large losses lose most of their digits to
/// cancellation between two nearly equal totals. Subtracting a baseline term
/// by term first ([`ElboTerms::shifted_total`]) keeps those digits.
#[derive(Debug, Clone)]
pub struct ElboTerms<S> {
    /// Per item and latent dimension.
    pub kl: Array2<S>,
    /// `½(x − x̂)²` per item and feature.
    pub reconstruction: Array2<S>,
    /// Squared hinge per class pair, zero where the margin is cleared.
    pub pair_penalties: Vec<S>,
    pub regularization_weight: S,
}

impl<S: Scalar> ElboTerms<S> {
    pub fn breakdown(&self) -> LossBreakdown<S> {
        let inv_n = S::one() / S::c(self.kl.nrows() as f64);
        let reg = if self.pair_penalties.is_empty() {
            S::zero()
        } else {
            self.pair_penalties.iter().copied().sum::<S>() / S::c(self.pair_penalties.len() as f64)
        };
        LossBreakdown::new(
            self.kl.sum() * inv_n,
            self.reconstruction.sum() * inv_n,
            reg,
            self.regularization_weight,
        )
    }

    /// `total(self) − total(base)`, accumulated as differences of matching
    /// terms.
    pub fn shifted_total(&self, base: &Self) -> Result<S> {
        if self.kl.dim() != base.kl.dim()
            || self.reconstruction.dim() != base.reconstruction.dim()
            || self.pair_penalties.len() != base.pair_penalties.len()
        {
            return Err(Error::shape("objective terms come from different problems"));
        }
        let diff = |a: &Array2<S>, b: &Array2<S>| {
            Zip::from(a)
                .and(b)
                .fold(S::zero(), |acc, &x, &y| acc + (x - y))
        };
        let inv_n = S::one() / S::c(self.kl.nrows() as f64);
        let mut total =
            (diff(&self.kl, &base.kl) + diff(&self.reconstruction, &base.reconstruction)) * inv_n;
        if !self.pair_penalties.is_empty() {
            let reg: S = self
                .pair_penalties
                .iter()
                .zip(&base.pair_penalties)
                .map(|(&x, &y)| x - y)
                .sum();
            total += self.regularization_weight * reg / S::c(self.pair_penalties.len() as f64);
        }
        Ok(total)
    }
}

/// Objective terms with all randomness supplied, without recording
/// activations for a backward pass.
pub fn elbo_terms_with_noise<S: Scalar>(
    model: &SgalModel<S>,
    batch: &Batch<S>,
    classes: &ClassTable<S>,
    objective: &ObjectiveConfig,
    noise: &ElboNoise<S>,
) -> Result<ElboTerms<S>> {
    let rows = check_inputs(model, batch, classes, objective, noise)?;
    let m = model.dims().latent_dim;
    let raw = model
        .encoder
        .forward_masked(batch.features.view(), &noise.encoder_masks)?;
    let enc = EncoderOutput::from_raw(&raw, m);
    let class_means = model
        .prior
        .forward_masked(classes.attributes().view(), &noise.prior_masks)?;
    let prior_means = class_means.select(Axis(0), &rows);
    let half = S::c(0.5);
    let std = enc.log_variance.mapv(|lv| (half * lv).exp());
    let z = &enc.mean + &(&std * &noise.epsilon);
    let recon = model
        .decoder
        .forward_masked(z.view(), &noise.decoder_masks)?;

    let mut kl = Array2::zeros(enc.mean.raw_dim());
    Zip::from(&mut kl)
        .and(&enc.mean)
        .and(&enc.log_variance)
        .and(&prior_means)
        .for_each(|k, &mq, &lv, &mp| {
            *k = half * (lv.exp() + (mq - mp) * (mq - mp) - S::one() - lv)
        });
    let reconstruction = Zip::from(&batch.features)
        .and(&recon)
        .map_collect(|&x, &r| half * (x - r) * (x - r));

    let mut pair_penalties = Vec::new();
    if classes.len() >= 2 {
        let margin = S::c(objective.margin);
        let c = class_means.nrows();
        for i in 0..c {
            for j in i + 1..c {
                let diff = &class_means.row(i) - &class_means.row(j);
                let gap = margin - diff.dot(&diff).sqrt();
                pair_penalties.push(if gap > S::zero() {
                    gap * gap
                } else {
                    S::zero()
                });
            }
        }
    }
    Ok(ElboTerms {
        kl,
        reconstruction,
        pair_penalties,
        regularization_weight: S::c(objective.regularization_weight),
    })
}

/// [`elbo_loss`] with all randomness supplied.
///
/// The regularizer is skipped when the class table holds a single class.
pub fn elbo_loss_with_noise<S: Scalar>(
    model: &SgalModel<S>,
    batch: &Batch<S>,
    classes: &ClassTable<S>,
    objective: &ObjectiveConfig,
    noise: &ElboNoise<S>,
) -> Result<(LossBreakdown<S>, ModelGradient<S>)> {
    let rows = check_inputs(model, batch, classes, objective, noise)?;
    let (raw, enc_tape) = model
        .encoder
        .forward_with_masks(batch.features.view(), &noise.encoder_masks)?;
    let (class_means, prior_tape) = model
        .prior
        .forward_with_masks(classes.attributes().view(), &noise.prior_masks)?;
    let mut dec_tape = None;
    let fwd = assemble(
        batch,
        classes,
        objective,
        noise,
        rows,
        raw,
        class_means,
        |z| {
            let (out, tape) = model.decoder.forward_with_masks(z, &noise.decoder_masks)?;
            dec_tape = Some(tape);
            Ok(out)
        },
    )?;
    let dec_tape = dec_tape.expect("decoder ran");

    let n = batch.len();
    let m = fwd.class_means.ncols();
    let half = S::c(0.5);
    let inv_n = S::one() / S::c(n as f64);
    let weight = fwd.loss.regularization_weight;

    // Decoder.
    let d_recon = (&fwd.recon - &batch.features) * inv_n;
    let (dec_grad, d_z) = model.decoder.backward(&dec_tape, d_recon.view())?;

    // Encoder heads: reparameterization path plus KL.
    let centered = &fwd.enc.mean - &fwd.prior_means;
    let d_mean = &d_z + &(&centered * inv_n);
    let mut d_logvar = &d_z * &noise.epsilon * &fwd.std * half;
    Zip::from(&mut d_logvar)
        .and(&fwd.enc.log_variance)
        .for_each(|g, &lv| *g += half * (lv.exp() - S::one()) * inv_n);
    let (lo, hi) = (S::c(LOG_VARIANCE_MIN), S::c(LOG_VARIANCE_MAX));
    Zip::from(&mut d_logvar)
        .and(fwd.raw.slice(s![.., m..]))
        .for_each(|g, &r| {
            if r < lo || r > hi {
                *g = S::zero();
            }
        });
    let mut d_raw = Array2::zeros(fwd.raw.raw_dim());
    d_raw.slice_mut(s![.., ..m]).assign(&d_mean);
    d_raw.slice_mut(s![.., m..]).assign(&d_logvar);
    let (enc_grad, _) = model.encoder.backward(&enc_tape, d_raw.view())?;

    // Prior network: KL pulls each item's class mean, regularizer pushes
    // class means apart.
    let mut d_class = fwd.reg_grad * weight;
    for (i, &r) in fwd.rows.iter().enumerate() {
        let mut row = d_class.row_mut(r);
        row.scaled_add(-inv_n, &centered.row(i));
    }
    let (prior_grad, _) = model.prior.backward(&prior_tape, d_class.view())?;

    Ok((
        fwd.loss,
        ModelGradient {
            encoder: enc_grad,
            decoder: dec_grad,
            prior: prior_grad,
        },
    ))
}
