//! Experiment settings resolved from built-in defaults, then an optional
//! `key = value` file, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sgal::data::SyntheticConfig;
use sgal::keyvalue::{self, take};
use sgal::model::{Architecture, DEFAULT_LATENT_DIM};
use sgal::trainer::TrainConfig;
use sgal::{Error, Result};

use crate::args::{GenDataArgs, TrainArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Seen-only pretraining.
    Mmvae,
    /// Pretraining, then generate-and-learn fine-tuning.
    Sgal,
    /// As `sgal`, with decoder dropout active while generating.
    SgalDropout,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let value = self.to_possible_value().expect("no variant is skipped");
        f.write_str(value.get_name())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        <Mode as ValueEnum>::from_str(&s.replace('_', "-"), true)
    }
}

type Map = BTreeMap<String, String>;

fn set<T: FromStr>(map: &mut Map, key: &str, slot: &mut T) -> Result<()>
where
    T::Err: Display,
{
    if let Some(v) = take(map, key)? {
        *slot = v;
    }
    Ok(())
}

fn set_some<T: FromStr>(map: &mut Map, key: &str, slot: &mut Option<T>) -> Result<()>
where
    T::Err: Display,
{
    if let Some(v) = take(map, key)? {
        *slot = Some(v);
    }
    Ok(())
}

fn set_widths(map: &mut Map, key: &str, slot: &mut Vec<usize>) -> Result<()> {
    if let Some(text) = take::<String>(map, key)? {
        *slot = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|w| {
                w.parse()
                    .map_err(|_| Error::Config(format!("{key} = {text:?}: bad width {w:?}")))
            })
            .collect::<Result<_>>()?;
    }
    Ok(())
}

fn override_with<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn read_config(path: &Path) -> Result<Map> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    keyvalue::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Everything `train` needs. `out` is not part of the recorded config since
/// the manifest lives inside it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub dataset: Option<PathBuf>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub mode: Mode,
    pub latent_dim: usize,
    pub architecture: Architecture,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: None,
            mode: Mode::Sgal,
            latent_dim: DEFAULT_LATENT_DIM,
            architecture: Architecture::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Applies a parsed config file. Unknown keys are errors.
    pub fn apply_map(&mut self, mut map: Map) -> Result<()> {
        let m = &mut map;
        set_some(m, "dataset", &mut self.dataset)?;
        set_some(m, "out", &mut self.out)?;
        set(m, "mode", &mut self.mode)?;
        set(m, "latent_dim", &mut self.latent_dim)?;
        let arch = &mut self.architecture;
        set_widths(m, "encoder_hidden", &mut arch.encoder_hidden)?;
        set_widths(m, "decoder_hidden", &mut arch.decoder_hidden)?;
        set_widths(m, "prior_hidden", &mut arch.prior_hidden)?;
        set(m, "decoder_dropout", &mut arch.decoder_dropout)?;
        let t = &mut self.train;
        set(m, "seed", &mut t.seed)?;
        set(m, "pretrain_iters", &mut t.pretrain_iterations)?;
        set(m, "sgal_iters", &mut t.sgal_iterations)?;
        set(m, "batch_seen", &mut t.seen_batch_size)?;
        set(m, "batch_unseen", &mut t.unseen_batch_size)?;
        set(m, "samples_per_latent", &mut t.samples_per_latent)?;
        set_some(m, "margin", &mut t.margin)?;
        set(m, "reg_weight", &mut t.regularization_weight)?;
        set(m, "lr", &mut t.adam.learning_rate)?;
        set_some(m, "sgal_lr", &mut t.sgal_learning_rate)?;
        set(m, "beta1", &mut t.adam.beta1)?;
        set(m, "beta2", &mut t.adam.beta2)?;
        set(m, "adam_epsilon", &mut t.adam.epsilon)?;
        set(m, "eval_every", &mut t.eval_every)?;
        set(m, "record_wall_time", &mut t.record_wall_time)?;
        keyvalue::finish(&map)
    }

    pub fn apply_flags(&mut self, args: &TrainArgs) {
        if args.dataset.is_some() {
            self.dataset = args.dataset.clone();
        }
        if args.out.is_some() {
            self.out = args.out.clone();
        }
        override_with(&mut self.mode, &args.mode);
        let t = &mut self.train;
        override_with(&mut t.seed, &args.seed);
        override_with(&mut t.pretrain_iterations, &args.pretrain_iters);
        override_with(&mut t.sgal_iterations, &args.sgal_iters);
        override_with(&mut t.seen_batch_size, &args.batch_seen);
        override_with(&mut t.unseen_batch_size, &args.batch_unseen);
        override_with(&mut t.samples_per_latent, &args.samples_per_latent);
        if args.margin.is_some() {
            t.margin = args.margin;
        }
        override_with(&mut t.regularization_weight, &args.reg_weight);
        override_with(&mut t.adam.learning_rate, &args.lr);
        override_with(&mut t.eval_every, &args.eval_every);
    }

    /// Enforces the mode rules and checks every value, before any data is
    /// read.
    pub fn finalize(mut self) -> Result<Self> {
        match self.mode {
            Mode::Mmvae => {
                self.train.sgal_iterations = 0;
                self.train.dropout_generation = false;
            }
            Mode::Sgal | Mode::SgalDropout => {
                if self.train.sgal_iterations == 0 {
                    return Err(Error::Usage(
                        "mode sgal with 0 SGAL iterations is mmvae; use --mode mmvae".into(),
                    ));
                }
                self.train.dropout_generation = self.mode == Mode::SgalDropout;
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        let p = self.architecture.decoder_dropout;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "decoder_dropout must be in [0, 1), got {p}"
            )));
        }
        if self.mode == Mode::SgalDropout && p == 0.0 {
            return Err(Error::Config(
                "mode sgal-dropout needs decoder_dropout > 0".into(),
            ));
        }
        self.train.validate()?;
        Ok(self)
    }

    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let mut config = Self::default();
        if let Some(path) = &args.config {
            config.apply_map(read_config(path)?)?;
        }
        config.apply_flags(args);
        config.finalize()
    }
}

/// Settings for `gen-data`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenDataConfig {
    pub out: Option<PathBuf>,
    pub fixture: SyntheticConfig,
}

impl GenDataConfig {
    pub fn apply_map(&mut self, mut map: Map) -> Result<()> {
        let m = &mut map;
        let f = &mut self.fixture;
        set_some(m, "out", &mut self.out)?;
        set(m, "num_seen", &mut f.num_seen)?;
        set(m, "num_unseen", &mut f.num_unseen)?;
        set(m, "feature_dim", &mut f.feature_dim)?;
        set(m, "attribute_dim", &mut f.attribute_dim)?;
        set(m, "samples_per_class", &mut f.samples_per_class)?;
        set(m, "val_per_class", &mut f.val_per_class)?;
        set(m, "noise_std", &mut f.noise_std)?;
        set(m, "attribute_smoothness", &mut f.attribute_smoothness)?;
        set(m, "map_hidden", &mut f.map_hidden)?;
        set(m, "seed", &mut f.seed)?;
        keyvalue::finish(&map)
    }

    pub fn resolve(args: &GenDataArgs) -> Result<Self> {
        let mut config = Self {
            out: None,
            fixture: SyntheticConfig::default(),
        };
        if let Some(path) = &args.config {
            config.apply_map(read_config(path)?)?;
        }
        if args.out.is_some() {
            config.out = args.out.clone();
        }
        override_with(&mut config.fixture.seed, &args.seed);
        config.fixture.validate()?;
        Ok(config)
    }
}

#[cfg(test)]
mod tests;
