use super::*;
use crate::args::TrainArgs;

fn from_text(text: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    config.apply_map(keyvalue::parse(text)?)?;
    Ok(config)
}

#[test]
fn defaults_match_the_library() {
    let config = ExperimentConfig::default().finalize().unwrap();
    assert_eq!(config.mode, Mode::Sgal);
    assert_eq!(config.train, TrainConfig::default());
    assert_eq!(config.architecture, Architecture::default());
    assert_eq!(config.latent_dim, DEFAULT_LATENT_DIM);
}

#[test]
fn file_values_override_defaults_and_flags_override_the_file() {
    let mut config = from_text(
        "seed = 5\nlr = 0.01\nmargin = 3\nbatch_seen = 32\nencoder_hidden = 64, 32\nmode = sgal_dropout\n",
    )
    .unwrap();
    assert_eq!(config.train.seed, 5);
    assert_eq!(config.train.adam.learning_rate, 0.01);
    assert_eq!(config.train.margin, Some(3.0));
    assert_eq!(config.architecture.encoder_hidden, vec![64, 32]);
    assert_eq!(config.mode, Mode::SgalDropout);

    config.apply_flags(&TrainArgs {
        seed: Some(9),
        margin: Some(2.5),
        ..TrainArgs::default()
    });
    let config = config.finalize().unwrap();
    assert_eq!(config.train.seed, 9);
    assert_eq!(config.train.margin, Some(2.5));
    // untouched by flags
    assert_eq!(config.train.adam.learning_rate, 0.01);
    assert_eq!(config.train.seen_batch_size, 32);
    assert!(config.train.dropout_generation);
}

#[test]
fn mmvae_forces_zero_sgal_iterations() {
    let mut config = ExperimentConfig::default();
    config.mode = Mode::Mmvae;
    config.train.sgal_iterations = 700;
    let config = config.finalize().unwrap();
    assert_eq!(config.train.sgal_iterations, 0);
    assert!(!config.train.dropout_generation);
}

#[test]
fn sgal_with_zero_iterations_is_a_usage_error() {
    for mode in [Mode::Sgal, Mode::SgalDropout] {
        let mut config = ExperimentConfig::default();
        config.mode = mode;
        config.train.sgal_iterations = 0;
        assert!(matches!(config.finalize(), Err(Error::Usage(_))));
    }
}

#[test]
fn mode_sets_dropout_generation() {
    let mut config = ExperimentConfig::default();
    config.train.dropout_generation = true;
    assert!(!config.clone().finalize().unwrap().train.dropout_generation);
    config.mode = Mode::SgalDropout;
    config.train.dropout_generation = false;
    assert!(config.finalize().unwrap().train.dropout_generation);
}

#[test]
fn dropout_mode_needs_a_dropout_rate() {
    let mut config = ExperimentConfig::default();
    config.mode = Mode::SgalDropout;
    config.architecture.decoder_dropout = 0.0;
    assert!(matches!(config.finalize(), Err(Error::Config(_))));
}

#[test]
fn bad_files_are_config_errors() {
    for text in [
        "no_such_key = 1",
        "seed = minus one",
        "mode = vae",
        "encoder_hidden = 64,x",
        "lr",
    ] {
        assert!(
            matches!(from_text(text), Err(Error::Config(_))),
            "{text:?} was accepted"
        );
    }
}

#[test]
fn invalid_values_fail_finalize() {
    for text in [
        "lr = -1",
        "batch_seen = 0",
        "eval_every = 0",
        "latent_dim = 0",
        "reg_weight = -2",
    ] {
        let config = from_text(text).unwrap();
        assert!(config.finalize().is_err(), "{text:?} was accepted");
    }
}

#[test]
fn mode_spellings() {
    assert_eq!("sgal-dropout".parse::<Mode>().unwrap(), Mode::SgalDropout);
    assert_eq!("sgal_dropout".parse::<Mode>().unwrap(), Mode::SgalDropout);
    assert_eq!("MMVAE".parse::<Mode>().unwrap(), Mode::Mmvae);
    assert_eq!(Mode::SgalDropout.to_string(), "sgal-dropout");
}

#[test]
fn gen_data_file_keys() {
    let mut config = GenDataConfig {
        out: None,
        fixture: SyntheticConfig::default(),
    };
    config
        .apply_map(keyvalue::parse("num_seen = 3\nnoise_std = 0.5\nseed = 11\nout = x").unwrap())
        .unwrap();
    assert_eq!(config.fixture.num_seen, 3);
    assert_eq!(config.fixture.noise_std, 0.5);
    assert_eq!(config.fixture.seed, 11);
    assert_eq!(config.out, Some(PathBuf::from("x")));
    assert!(config
        .apply_map(keyvalue::parse("latent_dim = 3").unwrap())
        .is_err());
}
