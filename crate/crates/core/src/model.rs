//! Encoder, decoder and prior network, plus feature generation.
//!
//! The encoder maps a feature vector to a diagonal Gaussian over the latent
//! space, the decoder maps a latent code to the mean of a unit-variance
//! Gaussian over features, and the prior network maps a class attribute
//! vector to the mean of that class's `N(μ(a), I)` latent cluster.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::neuralcore::{
    adam_step, read_parameter_set, write_parameter_set, Activation, AdamConfig, AdamState,
    FlatParams, Gradient, Mode, ParameterSet,
};
use crate::{Error, Result, Scalar};

/// Bounds applied to encoder log-variances so `exp` stays finite.
pub const LOG_VARIANCE_MIN: f64 = -10.0;
pub const LOG_VARIANCE_MAX: f64 = 10.0;

/// Latent width used when none is configured; chosen on the synthetic fixture.
pub const DEFAULT_LATENT_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// d
    pub feature_dim: usize,
    /// m
    pub latent_dim: usize,
    /// k
    pub attribute_dim: usize,
}

/// Hidden layer widths and dropout rates of the three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub prior_hidden: Vec<usize>,
    pub activation: Activation,
    /// Dropout after each decoder hidden layer. Needed by dropout-based
    /// generation.
    pub decoder_dropout: f64,
    /// Dropout after each prior hidden layer. Off by default.
    pub prior_dropout: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![512],
            decoder_hidden: vec![512],
            prior_hidden: vec![128],
            activation: Activation::Relu,
            decoder_dropout: 0.2,
            prior_dropout: 0.0,
        }
    }
}

/// Latent Gaussian for a batch of inputs, one row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<S> {
    pub mean: Array2<S>,
    /// Clamped to `[LOG_VARIANCE_MIN, LOG_VARIANCE_MAX]`.
    pub log_variance: Array2<S>,
}

impl<S: Scalar> EncoderOutput<S> {
    /// Splits raw encoder output `[mean | log-variance]` and clamps the
    /// second half.
    pub(crate) fn from_raw(raw: &Array2<S>, latent_dim: usize) -> Self {
        let lo = S::c(LOG_VARIANCE_MIN);
        let hi = S::c(LOG_VARIANCE_MAX);
        Self {
            mean: raw.slice(s![.., ..latent_dim]).to_owned(),
            log_variance: raw.slice(s![.., latent_dim..]).mapv(|v| v.max(lo).min(hi)),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }
}

/// `z = mean + exp(½ log σ²) ⊙ ε` for a given `ε`.
pub fn reparameterize_with<S: Scalar>(
    enc: &EncoderOutput<S>,
    epsilon: ArrayView2<S>,
) -> Result<Array2<S>> {
    if epsilon.dim() != enc.mean.dim() {
        return Err(Error::shape(format!(
            "noise has shape {:?}, latent batch is {:?}",
            epsilon.dim(),
            enc.mean.dim()
        )));
    }
    let half = S::c(0.5);
    Ok(&enc.mean + &(enc.log_variance.mapv(|lv| (half * lv).exp()) * epsilon))
}

/// Draws `ε ~ N(0, I)` and applies [`reparameterize_with`].
pub fn reparameterize<S: Scalar, R: Rng + ?Sized>(
    enc: &EncoderOutput<S>,
    rng: &mut R,
) -> Array2<S> {
    let eps = standard_normal(enc.mean.nrows(), enc.mean.ncols(), rng);
    reparameterize_with(enc, eps.view()).expect("noise shaped like the batch")
}

pub(crate) fn standard_normal<S: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Array2<S> {
    Array2::from_shape_simple_fn((rows, cols), || S::c(rng.sample::<f64, _>(StandardNormal)))
}

/// Switches for pseudo-feature generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GenerationOptions {
    /// Add unit-variance Gaussian noise to the decoder mean.
    pub observation_noise: bool,
    /// Run the prior network with its dropout active.
    pub prior_dropout: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgalModel<S> {
    /// d → 2m: latent mean and log-variance heads.
    pub encoder: ParameterSet<S>,
    /// m → d
    pub decoder: ParameterSet<S>,
    /// k → m
    pub prior: ParameterSet<S>,
}

impl<S: Scalar> SgalModel<S> {
    pub fn new<R: Rng + ?Sized>(dims: ModelDims, arch: &Architecture, rng: &mut R) -> Result<Self> {
        let ModelDims {
            feature_dim: d,
            latent_dim: m,
            attribute_dim: k,
        } = dims;
        if d == 0 || m == 0 || k == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let encoder = ParameterSet::mlp(d, &arch.encoder_hidden, 2 * m, arch.activation, 0.0, rng)?;
        let decoder = ParameterSet::mlp(
            m,
            &arch.decoder_hidden,
            d,
            arch.activation,
            arch.decoder_dropout,
            rng,
        )?;
        let prior = ParameterSet::mlp(
            k,
            &arch.prior_hidden,
            m,
            arch.activation,
            arch.prior_dropout,
            rng,
        )?;
        Self::from_parts(encoder, decoder, prior)
    }

    /// Assembles a model, checking that the three networks fit together.
    pub fn from_parts(
        encoder: ParameterSet<S>,
        decoder: ParameterSet<S>,
        prior: ParameterSet<S>,
    ) -> Result<Self> {
        let m = decoder.in_dim();
        let d = decoder.out_dim();
        if encoder.in_dim() != d || encoder.out_dim() != 2 * m {
            return Err(Error::shape(format!(
                "encoder maps {} → {}, expected {d} → {}",
                encoder.in_dim(),
                encoder.out_dim(),
                2 * m
            )));
        }
        if prior.out_dim() != m {
            return Err(Error::shape(format!(
                "prior network outputs {} values, latent dimension is {m}",
                prior.out_dim()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            prior,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.decoder.out_dim(),
            latent_dim: self.decoder.in_dim(),
            attribute_dim: self.prior.in_dim(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite() && self.prior.is_finite()
    }

    /// Encodes a batch of feature rows.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        x: ArrayView2<S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<EncoderOutput<S>> {
        let (raw, _) = self.encoder.forward(x, mode, rng)?;
        Ok(EncoderOutput::from_raw(&raw, self.dims().latent_dim))
    }

    /// Dropout-free encoding.
    pub fn encode_eval(&self, x: ArrayView2<S>) -> Result<EncoderOutput<S>> {
        let raw = self.encoder.forward_eval(x)?;
        Ok(EncoderOutput::from_raw(&raw, self.dims().latent_dim))
    }

    /// Decoder means for a batch of latent rows.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        z: ArrayView2<S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Array2<S>> {
        Ok(self.decoder.forward(z, mode, rng)?.0)
    }

    pub fn decode_eval(&self, z: ArrayView2<S>) -> Result<Array2<S>> {
        self.decoder.forward_eval(z)
    }

    /// Class cluster means `μ(a)` for a batch of attribute rows.
    pub fn prior_mean<R: Rng + ?Sized>(
        &self,
        a: ArrayView2<S>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Array2<S>> {
        Ok(self.prior.forward(a, mode, rng)?.0)
    }

    pub fn prior_mean_eval(&self, a: ArrayView2<S>) -> Result<Array2<S>> {
        self.prior.forward_eval(a)
    }

    /// `count` pseudo-features for attribute `a`: `z ~ N(μ(a), I)`, then the
    /// dropout-free decoder mean of each `z`.
    pub fn generate_unseen<R: Rng + ?Sized>(
        &self,
        a: ArrayView1<S>,
        count: usize,
        rng: &mut R,
    ) -> Result<Array2<S>> {
        self.generate_unseen_with(a, count, GenerationOptions::default(), rng)
    }

    pub fn generate_unseen_with<R: Rng + ?Sized>(
        &self,
        a: ArrayView1<S>,
        count: usize,
        options: GenerationOptions,
        rng: &mut R,
    ) -> Result<Array2<S>> {
        let attrs = repeat_row(a, count)?;
        Ok(self
            .generate(attrs.view(), 1, false, options, rng)?
            .features)
    }

    /// `count` latent draws, each decoded `samples_per_latent` times under
    /// independent decoder dropout masks. Rows are grouped by latent draw.
    pub fn generate_unseen_dropout<R: Rng + ?Sized>(
        &self,
        a: ArrayView1<S>,
        count: usize,
        samples_per_latent: usize,
        rng: &mut R,
    ) -> Result<Array2<S>> {
        self.generate_unseen_dropout_with(
            a,
            count,
            samples_per_latent,
            GenerationOptions::default(),
            rng,
        )
    }

    pub fn generate_unseen_dropout_with<R: Rng + ?Sized>(
        &self,
        a: ArrayView1<S>,
        count: usize,
        samples_per_latent: usize,
        options: GenerationOptions,
        rng: &mut R,
    ) -> Result<Array2<S>> {
        if !self.decoder.has_dropout() {
            return Err(Error::Config(
                "dropout generation needs a decoder with a nonzero dropout rate".into(),
            ));
        }
        let attrs = repeat_row(a, count)?;
        Ok(self
            .generate(attrs.view(), samples_per_latent, true, options, rng)?
            .features)
    }

    /// Batched generation with one latent draw per attribute row.
    ///
    /// With `decoder_dropout`, every latent draw is decoded
    /// `samples_per_latent` times under fresh masks, and output row
    /// `i * samples_per_latent + j` belongs to attribute row `i`. Without it,
    /// `samples_per_latent` must be 1. Randomness is consumed in a fixed
    /// order: prior masks, latent noise, decoder masks, observation noise.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        attributes: ArrayView2<S>,
        samples_per_latent: usize,
        decoder_dropout: bool,
        options: GenerationOptions,
        rng: &mut R,
    ) -> Result<Generated<S>> {
        if attributes.nrows() == 0 {
            return Err(Error::usage("generation count must be at least 1"));
        }
        if samples_per_latent == 0 {
            return Err(Error::usage("samples_per_latent must be at least 1"));
        }
        if !decoder_dropout && samples_per_latent != 1 {
            return Err(Error::usage(
                "several samples per latent need decoder dropout",
            ));
        }
        if !self.is_finite() {
            return Err(Error::Numeric("model has non-finite parameters".into()));
        }
        let prior_mode = if options.prior_dropout {
            Mode::EvalWithDropout
        } else {
            Mode::EvalDeterministic
        };
        let means = self.prior_mean(attributes, prior_mode, rng)?;
        let latents = &means + &standard_normal::<S, R>(means.nrows(), means.ncols(), rng);
        let mut features = if decoder_dropout {
            let repeated = repeat_rows(latents.view(), samples_per_latent);
            self.decode(repeated.view(), Mode::EvalWithDropout, rng)?
        } else {
            self.decode_eval(latents.view())?
        };
        if options.observation_noise {
            features += &standard_normal::<S, R>(features.nrows(), features.ncols(), rng);
        }
        Ok(Generated { latents, features })
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.decoder.num_params() + self.prior.num_params()
    }

    pub fn cast<T: Scalar>(&self) -> SgalModel<T> {
        let cast = |p: &ParameterSet<S>| ParameterSet {
            layers: p
                .layers
                .iter()
                .map(|l| crate::neuralcore::DenseLayer {
                    weights: l.weights.mapv(|v| T::c(v.as_f64())),
                    biases: l.biases.mapv(|v| T::c(v.as_f64())),
                    activation: l.activation,
                    dropout_rate: l.dropout_rate,
                })
                .collect(),
        };
        SgalModel {
            encoder: cast(&self.encoder),
            decoder: cast(&self.decoder),
            prior: cast(&self.prior),
        }
    }
}

/// Output of [`SgalModel::generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generated<S> {
    /// One row per attribute row.
    pub latents: Array2<S>,
    /// `samples_per_latent` rows per latent row.
    pub features: Array2<S>,
}

fn repeat_row<S: Scalar>(a: ArrayView1<S>, count: usize) -> Result<Array2<S>> {
    if count == 0 {
        return Err(Error::usage("generation count must be at least 1"));
    }
    Ok(a.insert_axis(Axis(0))
        .broadcast((count, a.len()))
        .expect("broadcast")
        .to_owned())
}

fn repeat_rows<S: Scalar>(rows: ArrayView2<S>, times: usize) -> Array2<S> {
    let index: Vec<usize> = (0..rows.nrows())
        .flat_map(|i| std::iter::repeat_n(i, times))
        .collect();
    rows.select(Axis(0), &index)
}

/// Gradient with respect to all three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradient<S> {
    pub encoder: Gradient<S>,
    pub decoder: Gradient<S>,
    pub prior: Gradient<S>,
}

impl<S: Scalar> ModelGradient<S> {
    pub fn zeros_like(model: &SgalModel<S>) -> Self {
        Self {
            encoder: Gradient::zeros_like(&model.encoder),
            decoder: Gradient::zeros_like(&model.decoder),
            prior: Gradient::zeros_like(&model.prior),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.decoder.is_finite() && self.prior.is_finite()
    }

    pub fn is_zero(&self) -> bool {
        self.encoder.is_zero() && self.decoder.is_zero() && self.prior.is_zero()
    }

    pub fn max_abs(&self) -> S {
        self.encoder
            .max_abs()
            .max(self.decoder.max_abs())
            .max(self.prior.max_abs())
    }

    pub fn add_assign(&mut self, other: &ModelGradient<S>) -> Result<()> {
        self.encoder.add_assign(&other.encoder)?;
        self.decoder.add_assign(&other.decoder)?;
        self.prior.add_assign(&other.prior)
    }

    pub fn scale(&mut self, factor: S) {
        self.encoder.scale(factor);
        self.decoder.scale(factor);
        self.prior.scale(factor);
    }
}

fn split3<A: FlatParams<S>, S>(parts: [&A; 3], index: usize) -> (usize, usize) {
    let mut offset = index;
    for (i, p) in parts.iter().enumerate() {
        if offset < p.num_params() {
            return (i, offset);
        }
        offset -= p.num_params();
    }
    panic!("parameter index {index} out of range");
}

macro_rules! flat_three {
    ($ty:ident) => {
        impl<S: Scalar> FlatParams<S> for $ty<S> {
            fn num_params(&self) -> usize {
                self.encoder.num_params() + self.decoder.num_params() + self.prior.num_params()
            }

            fn param(&self, index: usize) -> S {
                let (part, offset) = split3([&self.encoder, &self.decoder, &self.prior], index);
                [&self.encoder, &self.decoder, &self.prior][part].param(offset)
            }

            fn set_param(&mut self, index: usize, value: S) {
                let (part, offset) = split3([&self.encoder, &self.decoder, &self.prior], index);
                match part {
                    0 => self.encoder.set_param(offset, value),
                    1 => self.decoder.set_param(offset, value),
                    _ => self.prior.set_param(offset, value),
                }
            }
        }
    };
}

// Flat order: encoder, decoder, prior.
flat_three!(SgalModel);
flat_three!(ModelGradient);

/// Adam state for the three networks.
#[derive(Debug, Clone)]
pub struct ModelOptimizer<S> {
    pub encoder: AdamState<S>,
    pub decoder: AdamState<S>,
    pub prior: AdamState<S>,
}

impl<S: Scalar> ModelOptimizer<S> {
    pub fn new(model: &SgalModel<S>, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: AdamState::new(&model.encoder, config),
            decoder: AdamState::new(&model.decoder, config),
            prior: AdamState::new(&model.prior, config),
        })
    }

    /// One Adam step on all three networks. Nothing is modified if any part
    /// of the gradient is non-finite.
    pub fn step(&mut self, model: &mut SgalModel<S>, gradient: &ModelGradient<S>) -> Result<()> {
        if !gradient.is_finite() {
            return Err(Error::Numeric("non-finite gradient passed to Adam".into()));
        }
        adam_step(&mut model.encoder, &gradient.encoder, &mut self.encoder)?;
        adam_step(&mut model.decoder, &gradient.decoder, &mut self.decoder)?;
        adam_step(&mut model.prior, &gradient.prior, &mut self.prior)
    }

    pub fn step_count(&self) -> u64 {
        self.encoder.step_count
    }
}

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SGALMODL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header fields of a model checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub dims: ModelDims,
    /// Number of classes in the class table the model was trained with.
    pub class_count: usize,
}

/// Writes a checkpoint: magic, version, `d`, `m`, `k` and class count, then
/// the encoder, decoder and prior parameter blocks.
pub fn write_checkpoint<S: Scalar, W: Write>(
    out: &mut W,
    model: &SgalModel<S>,
    class_count: usize,
) -> Result<()> {
    let dims = model.dims();
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for v in [
        dims.feature_dim,
        dims.latent_dim,
        dims.attribute_dim,
        class_count,
    ] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    write_parameter_set(out, &model.encoder)?;
    write_parameter_set(out, &model.decoder)?;
    write_parameter_set(out, &model.prior)
}

pub fn read_checkpoint<S: Scalar, R: Read>(
    input: &mut R,
) -> Result<(SgalModel<S>, CheckpointInfo)> {
    let mut magic = [0u8; 8];
    read_exact(input, &mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a model checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    read_exact(input, &mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut fields = [0usize; 4];
    for f in &mut fields {
        let mut buf = [0u8; 8];
        read_exact(input, &mut buf)?;
        *f = usize::try_from(u64::from_le_bytes(buf))
            .map_err(|_| Error::Format("checkpoint header value out of range".into()))?;
    }
    let encoder = read_parameter_set(input)?;
    let decoder = read_parameter_set(input)?;
    let prior = read_parameter_set(input)?;
    let model =
        SgalModel::from_parts(encoder, decoder, prior).map_err(|e| Error::Format(e.to_string()))?;
    let dims = ModelDims {
        feature_dim: fields[0],
        latent_dim: fields[1],
        attribute_dim: fields[2],
    };
    if model.dims() != dims {
        return Err(Error::Format(format!(
            "checkpoint header says {dims:?}, networks are {:?}",
            model.dims()
        )));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((
        model,
        CheckpointInfo {
            version,
            dims,
            class_count: fields[3],
        },
    ))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &SgalModel<S>,
    class_count: usize,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut out, model, class_count)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(SgalModel<S>, CheckpointInfo)> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
