//! Two-phase training: seen-only pretraining, then fine-tuning on batches
//! that mix real seen rows with pseudo-unseen features drawn from the
//! current model.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{concatenate, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classify::{classify_batch, evaluate_gzsl, per_class_top1, GzslReport};
use crate::data::{AttributeTable, ClassTable, Dataset, Label, SplitSpec, Standardizer};
use crate::loss::{elbo_loss, Batch, LossBreakdown, ObjectiveConfig};
use crate::model::{save_checkpoint, GenerationOptions, ModelOptimizer, SgalModel};
use crate::neuralcore::AdamConfig;
use crate::{Error, Result, Scalar};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str =
    "iteration,phase,kl,reconstruction,prior_regularization,total,seen_top1,unseen_top1,harmonic,wall_ms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Sgal,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Sgal => "sgal",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "sgal" => Ok(Phase::Sgal),
            other => Err(Error::Format(format!("unknown phase {other:?}"))),
        }
    }
}

/// Iteration budgets and step hyperparameters.
///
/// Batch sizes, learning rates and the dropout rate are not given by the
/// method itself; the defaults here were chosen on the synthetic fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_iterations: usize,
    pub sgal_iterations: usize,
    /// M
    pub seen_batch_size: usize,
    /// N, unseen labels drawn per SGAL step.
    pub unseen_batch_size: usize,
    pub dropout_generation: bool,
    /// L, decoder passes per latent draw when `dropout_generation` is set.
    pub samples_per_latent: usize,
    /// `None` means `4√m`.
    pub margin: Option<f64>,
    pub regularization_weight: f64,
    /// Pretraining optimizer.
    pub adam: AdamConfig,
    /// `None` means a tenth of the pretraining learning rate.
    pub sgal_learning_rate: Option<f64>,
    pub seed: u64,
    pub eval_every: usize,
    /// Fill `wall_ms` in the log. Off by default so that logs are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_iterations: 4000,
            sgal_iterations: 1500,
            seen_batch_size: 64,
            unseen_batch_size: 16,
            dropout_generation: false,
            samples_per_latent: 5,
            margin: None,
            regularization_weight: 1.0,
            adam: AdamConfig::default(),
            sgal_learning_rate: None,
            seed: 0,
            eval_every: 100,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.seen_batch_size == 0 {
            return bad("seen batch size must be at least 1");
        }
        if self.sgal_iterations > 0 && self.unseen_batch_size == 0 {
            return bad("unseen batch size must be at least 1");
        }
        if self.samples_per_latent == 0 {
            return bad("samples per latent must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        self.adam.validate()?;
        self.sgal_adam().validate()?;
        self.objective(1).validate()
    }

    pub fn objective(&self, latent_dim: usize) -> ObjectiveConfig {
        let default = ObjectiveConfig::for_latent_dim(latent_dim);
        ObjectiveConfig {
            margin: self.margin.unwrap_or(default.margin),
            regularization_weight: self.regularization_weight,
        }
    }

    pub fn sgal_adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self
                .sgal_learning_rate
                .unwrap_or(self.adam.learning_rate / 10.0),
            ..self.adam
        }
    }

    /// Rows added to each SGAL batch by generation.
    pub fn pseudo_rows(&self) -> usize {
        if self.dropout_generation {
            self.unseen_batch_size * self.samples_per_latent
        } else {
            self.unseen_batch_size
        }
    }
}

/// Generator for model initialization. Training draws from a separate stream
/// of the same seed, so the two never share randomness.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn training_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Seen, unseen and combined class tables of one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplit<S> {
    pub seen: ClassTable<S>,
    pub unseen: ClassTable<S>,
    pub all: ClassTable<S>,
}

impl<S: Scalar> ClassSplit<S> {
    pub fn new(
        attributes: &AttributeTable<S>,
        seen: &BTreeSet<Label>,
        unseen: &BTreeSet<Label>,
    ) -> Result<Self> {
        if let Some(l) = seen.intersection(unseen).next() {
            return Err(Error::data(format!(
                "class {l} is listed as both seen and unseen"
            )));
        }
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::data(
                "both the seen and the unseen class lists must be nonempty",
            ));
        }
        let all: BTreeSet<Label> = seen.union(unseen).copied().collect();
        Ok(Self {
            seen: attributes.class_table(seen)?,
            unseen: attributes.class_table(unseen)?,
            all: attributes.class_table(&all)?,
        })
    }
}

/// A dataset cut into its split partitions, standardized with statistics of
/// the training rows.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub standardizer: Standardizer,
    pub train: Dataset<f64>,
    /// Empty when the split lists no validation rows.
    pub validation: Dataset<f64>,
    pub test_seen: Dataset<f64>,
    pub test_unseen: Dataset<f64>,
    pub classes: ClassSplit<f64>,
}

impl PreparedData {
    pub fn new(
        dataset: &Dataset<f64>,
        attributes: &AttributeTable<f64>,
        split: &SplitSpec,
    ) -> Result<Self> {
        split.validate(dataset)?;
        let standardizer = Standardizer::fit(&dataset.select_ids(&split.train)?)?;
        Self::with_standardizer(dataset, attributes, split, standardizer)
    }

    /// Like [`new`](Self::new) but with given statistics, e.g. the ones saved
    /// next to a checkpoint.
    pub fn with_standardizer(
        dataset: &Dataset<f64>,
        attributes: &AttributeTable<f64>,
        split: &SplitSpec,
        standardizer: Standardizer,
    ) -> Result<Self> {
        split.validate(dataset)?;
        if standardizer.dim() != dataset.feature_dim() {
            return Err(Error::data(format!(
                "standardizer has dimension {}, dataset features {}",
                standardizer.dim(),
                dataset.feature_dim()
            )));
        }
        let classes = ClassSplit::new(attributes, &split.seen, &split.unseen)?;
        let part = |ids: &[String]| standardizer.transform(&dataset.select_ids(ids)?);
        Ok(Self {
            train: part(&split.train)?,
            validation: part(&split.val)?,
            test_seen: part(&split.test_seen)?,
            test_unseen: part(&split.test_unseen)?,
            standardizer,
            classes,
        })
    }

    pub fn validation(&self) -> Option<&Dataset<f64>> {
        (!self.validation.is_empty()).then_some(&self.validation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// Counts across both phases, starting at 1.
    pub iteration: usize,
    pub phase: Phase,
    pub loss: LossBreakdown<f64>,
    pub seen_top1: Option<f64>,
    pub unseen_top1: Option<f64>,
    pub harmonic: Option<f64>,
    pub wall_ms: u64,
}

impl TrainLogRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.8e}")).unwrap_or_default();
        format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{},{},{},{}",
            self.iteration,
            self.phase,
            self.loss.kl,
            self.loss.reconstruction,
            self.loss.prior_regularization,
            self.loss.total,
            opt(self.seen_top1),
            opt(self.unseen_top1),
            opt(self.harmonic),
            self.wall_ms
        )
    }
}

/// Writes the header and one line per record.
pub fn write_log<W: Write>(out: &mut W, records: &[TrainLogRecord]) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_line())?;
    }
    Ok(())
}

fn loss_f64<S: Scalar>(l: &LossBreakdown<S>) -> LossBreakdown<f64> {
    LossBreakdown {
        kl: l.kl.as_f64(),
        reconstruction: l.reconstruction.as_f64(),
        prior_regularization: l.prior_regularization.as_f64(),
        regularization_weight: l.regularization_weight.as_f64(),
        total: l.total.as_f64(),
    }
}

/// Validation scores. `unseen_top1` and `harmonic` are absent when the
/// validation rows hold no unseen class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub seen_top1: f64,
    pub unseen_top1: Option<f64>,
    pub harmonic: Option<f64>,
}

/// `size` rows drawn uniformly with replacement.
pub fn seen_minibatch<S: Scalar, R: Rng + ?Sized>(
    data: &Dataset<S>,
    size: usize,
    rng: &mut R,
) -> Result<Batch<S>> {
    if data.is_empty() {
        return Err(Error::usage("no seen training rows"));
    }
    let rows: Vec<usize> = (0..size).map(|_| rng.random_range(0..data.len())).collect();
    let picked = data.select_rows(&rows);
    Batch::new(picked.features().clone(), picked.labels().to_vec())
}

/// Draws `unseen_batch_size` unseen labels uniformly with replacement and
/// generates features for them from `model`. With dropout generation each
/// label contributes `samples_per_latent` consecutive rows.
///
/// The result is plain data: nothing links it back to the model.
pub fn pseudo_unseen_batch<S: Scalar, R: Rng + ?Sized>(
    model: &SgalModel<S>,
    unseen: &ClassTable<S>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Batch<S>> {
    if unseen.is_empty() {
        return Err(Error::usage("no unseen classes to generate"));
    }
    let picks: Vec<usize> = (0..config.unseen_batch_size)
        .map(|_| rng.random_range(0..unseen.len()))
        .collect();
    let attributes = unseen.attributes().select(Axis(0), &picks);
    let per_latent = if config.dropout_generation {
        config.samples_per_latent
    } else {
        1
    };
    let generated = model.generate(
        attributes.view(),
        per_latent,
        config.dropout_generation,
        GenerationOptions::default(),
        rng,
    )?;
    let labels = picks
        .iter()
        .flat_map(|&i| std::iter::repeat_n(unseen.labels()[i], per_latent))
        .collect();
    Batch::new(generated.features, labels)
}

/// One Adam step on `batch`. A non-finite loss or gradient stops training
/// without touching the model.
pub fn training_step<S: Scalar, R: Rng + ?Sized>(
    model: &mut SgalModel<S>,
    optimizer: &mut ModelOptimizer<S>,
    batch: &Batch<S>,
    classes: &ClassTable<S>,
    objective: &ObjectiveConfig,
    iteration: usize,
    rng: &mut R,
) -> Result<LossBreakdown<S>> {
    let (loss, grad) = elbo_loss(model, batch, classes, objective, rng)?;
    let diverged = |message: String| Error::Training { iteration, message };
    if !loss.is_finite() {
        return Err(diverged(format!(
            "non-finite loss (kl {}, reconstruction {}, regularization {})",
            loss.kl, loss.reconstruction, loss.prior_regularization
        )));
    }
    if !grad.is_finite() {
        return Err(diverged("non-finite gradient".into()));
    }
    optimizer.step(model, &grad)?;
    if !model.is_finite() {
        return Err(diverged("parameters became non-finite".into()));
    }
    Ok(loss)
}

/// What one SGAL step used and produced.
#[derive(Debug, Clone)]
pub struct SgalStep<S> {
    pub loss: LossBreakdown<S>,
    /// The generated half of the batch, with the label of the attribute
    /// vector behind each row.
    pub pseudo: Batch<S>,
    /// Items in the combined batch.
    pub batch_size: usize,
}

/// Result of [`Trainer::train_sgal`].
#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    /// The model after pretraining (the seen-only baseline).
    pub pretrained: SgalModel<S>,
    /// Highest validation H among the pretrained model and every SGAL
    /// evaluation. Equals `final_model` when validation has no unseen rows.
    pub best: SgalModel<S>,
    pub best_iteration: usize,
    pub final_model: SgalModel<S>,
    pub final_iteration: usize,
    pub log: Vec<TrainLogRecord>,
}

impl<S: Scalar> TrainOutcome<S> {
    pub fn best_checkpoint_name(&self) -> String {
        format!("checkpoint_best_iter{}.bin", self.best_iteration)
    }

    pub fn final_checkpoint_name(&self) -> String {
        format!("checkpoint_final_iter{}.bin", self.final_iteration)
    }

    /// Writes both checkpoints and the log into `dir`, returning their paths.
    pub fn save(&self, dir: &Path, class_count: usize) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let best = dir.join(self.best_checkpoint_name());
        let last = dir.join(self.final_checkpoint_name());
        let log = dir.join(LOG_FILE);
        save_checkpoint(&best, &self.best, class_count)?;
        save_checkpoint(&last, &self.final_model, class_count)?;
        let mut out = std::io::BufWriter::new(std::fs::File::create(&log)?);
        write_log(&mut out, &self.log)?;
        out.flush()?;
        Ok(vec![best, last, log])
    }
}

/// Owns the training randomness and the log of one run.
///
/// Clone a trainer after [`Trainer::pretrain_seen`] to branch several SGAL
/// runs off the same pretrained model; each branch then matches a full
/// [`Trainer::train_sgal`] run with its configuration.
#[derive(Debug, Clone)]
pub struct Trainer<S> {
    config: TrainConfig,
    classes: ClassSplit<S>,
    seen_data: Dataset<S>,
    validation: Option<(Dataset<S>, Option<Dataset<S>>)>,
    rng: ChaCha8Rng,
    log: Vec<TrainLogRecord>,
    iteration: usize,
    started: Instant,
}

impl<S: Scalar> Trainer<S> {
    /// `seen_data` must only hold seen classes. `validation` may mix seen and
    /// unseen rows of classes in `classes.all`.
    pub fn new(
        config: TrainConfig,
        classes: ClassSplit<S>,
        seen_data: Dataset<S>,
        validation: Option<&Dataset<S>>,
    ) -> Result<Self> {
        config.validate()?;
        if seen_data.is_empty() {
            return Err(Error::data("no seen training rows"));
        }
        if let Some(l) = seen_data
            .labels()
            .iter()
            .find(|l| !classes.seen.contains(**l))
        {
            return Err(Error::data(format!(
                "training row with label {l} is not a seen class"
            )));
        }
        let validation = match validation {
            Some(val) if !val.is_empty() => {
                if let Some(l) = val.labels().iter().find(|l| !classes.all.contains(**l)) {
                    return Err(Error::data(format!(
                        "validation row with unknown class {l}"
                    )));
                }
                let seen_set: BTreeSet<Label> = classes.seen.labels().iter().copied().collect();
                let unseen_set: BTreeSet<Label> = classes.unseen.labels().iter().copied().collect();
                let seen = val.filter_labels(&seen_set);
                let unseen = val.filter_labels(&unseen_set);
                if seen.is_empty() {
                    return Err(Error::data("validation split has no seen rows"));
                }
                Some((seen, (!unseen.is_empty()).then_some(unseen)))
            }
            _ => None,
        };
        let rng = training_rng(config.seed);
        Ok(Self {
            config,
            classes,
            seen_data,
            validation,
            rng,
            log: Vec::new(),
            iteration: 0,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Changing pretraining settings after [`Trainer::pretrain_seen`] has
    /// no effect.
    pub fn config_mut(&mut self) -> &mut TrainConfig {
        &mut self.config
    }

    pub fn classes(&self) -> &ClassSplit<S> {
        &self.classes
    }

    pub fn log(&self) -> &[TrainLogRecord] {
        &self.log
    }

    /// Iterations run so far, over both phases.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Scores `model` on the validation rows, or `None` without validation
    /// data.
    pub fn validate(&self, model: &SgalModel<S>) -> Result<Option<Validation>> {
        let Some((seen, unseen)) = &self.validation else {
            return Ok(None);
        };
        Ok(Some(match unseen {
            Some(unseen) => {
                let r: GzslReport = evaluate_gzsl(model, seen, unseen, &self.classes.all)?;
                Validation {
                    seen_top1: r.seen_top1,
                    unseen_top1: Some(r.unseen_top1),
                    harmonic: Some(r.harmonic),
                }
            }
            None => {
                let pred = classify_batch(model, seen.features().view(), &self.classes.all)?;
                Validation {
                    seen_top1: per_class_top1(seen.labels(), &pred)?.1,
                    unseen_top1: None,
                    harmonic: None,
                }
            }
        }))
    }

    fn record(
        &mut self,
        phase: Phase,
        loss: &LossBreakdown<S>,
        model: &SgalModel<S>,
    ) -> Result<Option<Validation>> {
        let scores = if self.iteration.is_multiple_of(self.config.eval_every) {
            self.validate(model)?
        } else {
            None
        };
        let wall_ms = if self.config.record_wall_time {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        };
        self.log.push(TrainLogRecord {
            iteration: self.iteration,
            phase,
            loss: loss_f64(loss),
            seen_top1: scores.map(|s| s.seen_top1),
            unseen_top1: scores.and_then(|s| s.unseen_top1),
            harmonic: scores.and_then(|s| s.harmonic),
            wall_ms,
        });
        Ok(scores)
    }

    /// `pretrain_iterations` Adam steps on seen minibatches, with the prior
    /// regularizer over seen classes only.
    pub fn pretrain_seen(&mut self, model: &mut SgalModel<S>) -> Result<()> {
        let objective = self.config.objective(model.dims().latent_dim);
        let mut optimizer = ModelOptimizer::new(model, self.config.adam)?;
        for _ in 0..self.config.pretrain_iterations {
            self.iteration += 1;
            let batch =
                seen_minibatch(&self.seen_data, self.config.seen_batch_size, &mut self.rng)?;
            let loss = training_step(
                model,
                &mut optimizer,
                &batch,
                &self.classes.seen,
                &objective,
                self.iteration,
                &mut self.rng,
            )?;
            self.record(Phase::Pretrain, &loss, model)?;
        }
        Ok(())
    }

    /// One generate-then-learn step. Pseudo-features come from `model` as it
    /// is before the update, and the regularizer spans all classes.
    pub fn sgal_step(
        &mut self,
        model: &mut SgalModel<S>,
        optimizer: &mut ModelOptimizer<S>,
    ) -> Result<SgalStep<S>> {
        let step = self.sgal_update(model, optimizer)?;
        self.record(Phase::Sgal, &step.loss, model)?;
        Ok(step)
    }

    fn sgal_update(
        &mut self,
        model: &mut SgalModel<S>,
        optimizer: &mut ModelOptimizer<S>,
    ) -> Result<SgalStep<S>> {
        self.iteration += 1;
        let objective = self.config.objective(model.dims().latent_dim);
        let seen = seen_minibatch(&self.seen_data, self.config.seen_batch_size, &mut self.rng)?;
        let pseudo = pseudo_unseen_batch(model, &self.classes.unseen, &self.config, &mut self.rng)?;
        let features = concatenate(Axis(0), &[seen.features.view(), pseudo.features.view()])
            .map_err(|e| Error::shape(e.to_string()))?;
        let labels = seen.labels.iter().chain(&pseudo.labels).copied().collect();
        let batch = Batch::new(features, labels)?;
        let loss = training_step(
            model,
            optimizer,
            &batch,
            &self.classes.all,
            &objective,
            self.iteration,
            &mut self.rng,
        )?;
        Ok(SgalStep {
            loss,
            pseudo,
            batch_size: batch.len(),
        })
    }

    /// The SGAL phase from an already pretrained model, with a fresh
    /// optimizer at the SGAL learning rate.
    pub fn sgal_phase(&mut self, pretrained: SgalModel<S>) -> Result<TrainOutcome<S>> {
        let pretrain_iteration = self.iteration;
        let mut best_h = self.validate(&pretrained)?.and_then(|v| v.harmonic);
        let mut best = (pretrained.clone(), pretrain_iteration);
        let mut model = pretrained.clone();
        let mut optimizer = ModelOptimizer::new(&model, self.config.sgal_adam())?;
        for _ in 0..self.config.sgal_iterations {
            let step = self.sgal_update(&mut model, &mut optimizer)?;
            let scores = self.record(Phase::Sgal, &step.loss, &model)?;
            match (scores.and_then(|s| s.harmonic), best_h) {
                (Some(h), Some(b)) if h > b => {
                    best_h = Some(h);
                    best = (model.clone(), self.iteration);
                }
                _ => {}
            }
        }
        if best_h.is_none() {
            best = (model.clone(), self.iteration);
        }
        Ok(TrainOutcome {
            pretrained,
            best: best.0,
            best_iteration: best.1,
            final_model: model,
            final_iteration: self.iteration,
            log: self.log.clone(),
        })
    }

    /// Pretraining followed by the SGAL phase.
    pub fn train_sgal(&mut self, mut model: SgalModel<S>) -> Result<TrainOutcome<S>> {
        self.pretrain_seen(&mut model)?;
        self.sgal_phase(model)
    }
}

#[cfg(test)]
mod tests;
