use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array1, Array2, Axis};
use serde::Serialize;
use sgal::classify::{evaluate_conventional, evaluate_gzsl, ConventionalReport, GzslReport};
use sgal::data::{
    self, bayes_oracle_accuracy, cluster_separation, generate_synthetic, load_dataset, project_2d,
    save_dataset, save_ground_truth, Label, LoadedDataset, Standardizer,
};
use sgal::model::{load_checkpoint, GenerationOptions, ModelDims};
use sgal::trainer::{init_rng, PreparedData, TrainConfig, Trainer};
use sgal::{Error, Model, Result};

use crate::args::{EvalArgs, GenDataArgs, ProjectArgs, Restrict, SampleArgs, SplitName, TrainArgs};
use crate::config::{ExperimentConfig, GenDataConfig};
use crate::manifest::Manifest;

pub const STANDARDIZER_FILE: &str = "standardizer.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const CONVENTIONAL_FILE: &str = "conventional.txt";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const PROJECTION_FILE: &str = "projection.csv";

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Usage(format!("{what} is required")))
}

fn dataset_files(dir: &Path) -> [PathBuf; 3] {
    [
        dir.join(data::FEATURES_FILE),
        dir.join(data::ATTRIBUTES_FILE),
        dir.join(data::SPLITS_FILE),
    ]
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes the GZSL report as text and JSON plus the conventional report,
/// returning the file names written.
fn write_reports(
    dir: &Path,
    gzsl: Option<&GzslReport>,
    conventional: &ConventionalReport,
) -> Result<Vec<&'static str>> {
    let mut names = Vec::new();
    if let Some(report) = gzsl {
        fs::write(dir.join(REPORT_FILE), report.to_text())?;
        write_json(&dir.join(REPORT_JSON_FILE), report)?;
        names.extend([REPORT_FILE, REPORT_JSON_FILE]);
    }
    fs::write(dir.join(CONVENTIONAL_FILE), conventional.to_text())?;
    names.push(CONVENTIONAL_FILE);
    Ok(names)
}

fn print_reports(gzsl: Option<&GzslReport>, conventional: &ConventionalReport) {
    if let Some(r) = gzsl {
        println!("u = {}", r.unseen_top1);
        println!("s = {}", r.seen_top1);
        println!("H = {}", r.harmonic);
    }
    println!("unseen_top1_conventional = {}", conventional.top1);
}

pub fn gen_data(args: &GenDataArgs) -> Result<()> {
    let config = GenDataConfig::resolve(args)?;
    let out = required(&config.out, "--out")?;
    let fixture = generate_synthetic(&config.fixture)?;
    save_dataset(out, &fixture.dataset, &fixture.attributes, &fixture.split)?;
    save_ground_truth(out, &fixture.ground_truth)?;

    let split = &fixture.split;
    let all = split.all_labels();
    let test_seen = fixture.dataset.select_ids(&split.test_seen)?;
    let test_unseen = fixture.dataset.select_ids(&split.test_unseen)?;
    let truth = &fixture.ground_truth;
    let seen = bayes_oracle_accuracy(truth, &test_seen, &all)?;
    let unseen = bayes_oracle_accuracy(truth, &test_unseen, &all)?;
    let conventional = bayes_oracle_accuracy(truth, &test_unseen, &split.unseen)?;

    let mut manifest = Manifest::new("gen-data", &config.fixture)?;
    for name in [
        data::FEATURES_FILE,
        data::ATTRIBUTES_FILE,
        data::SPLITS_FILE,
        data::GROUND_TRUTH_FILE,
        data::GENERATOR_FILE,
    ] {
        manifest.add_artifact(out, name)?;
    }
    manifest.write(out)?;

    println!("oracle_seen = {seen}");
    println!("oracle_unseen = {unseen}");
    println!("oracle_unseen_conventional = {conventional}");
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let config = ExperimentConfig::resolve(args)?;
    let dataset_dir = required(&config.dataset, "--dataset")?;
    let out = required(&config.out, "--out")?;
    let loaded = load_dataset(dataset_dir)?;
    let prepared = PreparedData::new(&loaded.dataset, &loaded.attributes, &loaded.split)?;
    let dims = ModelDims {
        feature_dim: loaded.dataset.feature_dim(),
        latent_dim: config.latent_dim,
        attribute_dim: loaded.attributes.dim(),
    };
    let model = Model::new(dims, &config.architecture, &mut init_rng(config.train.seed))?;
    let classes = &prepared.classes;
    let mut trainer = Trainer::new(
        config.train.clone(),
        classes.clone(),
        prepared.train.clone(),
        prepared.validation(),
    )?;
    let outcome = trainer.train_sgal(model)?;

    fs::create_dir_all(out)?;
    let class_count = classes.all.len();
    outcome.save(out, class_count)?;
    prepared.standardizer.save(&out.join(STANDARDIZER_FILE))?;
    let gzsl = evaluate_gzsl(
        &outcome.best,
        &prepared.test_seen,
        &prepared.test_unseen,
        &classes.all,
    )?;
    let conventional =
        evaluate_conventional(&outcome.best, &prepared.test_unseen, &classes.unseen)?;
    let reports = write_reports(out, Some(&gzsl), &conventional)?;

    let mut manifest = Manifest::new("train", &config)?;
    manifest.dims = Some(dims);
    manifest.class_count = Some(class_count);
    for path in dataset_files(dataset_dir) {
        manifest.add_input(&path)?;
    }
    let best = outcome.best_checkpoint_name();
    let last = outcome.final_checkpoint_name();
    for name in [
        best.as_str(),
        last.as_str(),
        sgal::trainer::LOG_FILE,
        STANDARDIZER_FILE,
    ]
    .into_iter()
    .chain(reports)
    {
        manifest.add_artifact(out, name)?;
    }
    manifest.write(out)?;

    println!("mode = {}", config.mode);
    println!("best_iteration = {}", outcome.best_iteration);
    println!("best_checkpoint = {}", out.join(&best).display());
    print_reports(Some(&gzsl), &conventional);
    Ok(())
}

/// A checkpoint with the standardizer and manifest saved beside it, and a
/// dataset prepared with that standardizer.
struct Run {
    model: Model,
    dims: ModelDims,
    loaded: LoadedDataset,
    prepared: PreparedData,
}

fn checkpoint_dir(checkpoint: &Path) -> &Path {
    match checkpoint.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

fn load_run(checkpoint: &Path, dataset: &Path) -> Result<Run> {
    let dir = checkpoint_dir(checkpoint);
    let manifest = Manifest::read(dir)?;
    let dims = manifest
        .dims
        .ok_or_else(|| Error::Data("manifest records no model dimensions".into()))?;
    let (model, info) = load_checkpoint::<f64>(checkpoint)?;
    if info.dims != dims {
        return Err(Error::Data(format!(
            "checkpoint has dimensions {:?} but its manifest says {dims:?}",
            info.dims
        )));
    }
    let loaded = load_dataset(dataset)?;
    let (d, k) = (loaded.dataset.feature_dim(), loaded.attributes.dim());
    if (dims.feature_dim, dims.attribute_dim) != (d, k) {
        return Err(Error::Data(format!(
            "checkpoint was trained with {} features and {} attributes, the dataset has {d} and {k}",
            dims.feature_dim, dims.attribute_dim
        )));
    }
    let standardizer = Standardizer::load(&dir.join(STANDARDIZER_FILE))?;
    let prepared = PreparedData::with_standardizer(
        &loaded.dataset,
        &loaded.attributes,
        &loaded.split,
        standardizer,
    )?;
    Ok(Run {
        model,
        dims,
        loaded,
        prepared,
    })
}

fn run_inputs(manifest: &mut Manifest, checkpoint: &Path, dataset: &Path) -> Result<()> {
    manifest.add_input(checkpoint)?;
    manifest.add_input(&checkpoint_dir(checkpoint).join(STANDARDIZER_FILE))?;
    for path in dataset_files(dataset) {
        manifest.add_input(&path)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    restrict: &'static str,
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let run = load_run(&args.checkpoint, &args.dataset)?;
    let p = &run.prepared;
    let gzsl = match args.restrict {
        Restrict::All => Some(evaluate_gzsl(
            &run.model,
            &p.test_seen,
            &p.test_unseen,
            &p.classes.all,
        )?),
        Restrict::Unseen => None,
    };
    let conventional = evaluate_conventional(&run.model, &p.test_unseen, &p.classes.unseen)?;

    fs::create_dir_all(&args.out)?;
    let reports = write_reports(&args.out, gzsl.as_ref(), &conventional)?;
    let config = EvalConfig {
        checkpoint: &args.checkpoint,
        dataset: &args.dataset,
        restrict: match args.restrict {
            Restrict::All => "all",
            Restrict::Unseen => "unseen",
        },
    };
    let mut manifest = Manifest::new("eval", &config)?;
    manifest.dims = Some(run.dims);
    run_inputs(&mut manifest, &args.checkpoint, &args.dataset)?;
    for name in reports {
        manifest.add_artifact(&args.out, name)?;
    }
    manifest.write(&args.out)?;
    print_reports(gzsl.as_ref(), &conventional);
    Ok(())
}

#[derive(Serialize)]
struct SampleConfig<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    label: Option<u32>,
    attribute: Option<Vec<f64>>,
    count: usize,
    dropout: bool,
    samples_per_latent: usize,
    seed: u64,
}

fn parse_attribute(text: &str, dim: usize) -> Result<Array1<f64>> {
    let values = text
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Usage(format!("bad attribute value {v:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != dim {
        return Err(Error::Usage(format!(
            "attribute vector has {} values, the model expects {dim}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Usage("attribute values must be finite".into()));
    }
    Ok(Array1::from(values))
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::Usage("--count must be at least 1".into()));
    }
    let per_latent = match (args.dropout, args.samples_per_latent) {
        (true, l) => l.unwrap_or(TrainConfig::default().samples_per_latent),
        (false, None | Some(1)) => 1,
        (false, Some(_)) => {
            return Err(Error::Usage(
                "--samples-per-latent above 1 needs --dropout".into(),
            ))
        }
    };
    if per_latent == 0 {
        return Err(Error::Usage(
            "--samples-per-latent must be at least 1".into(),
        ));
    }
    let run = load_run(&args.checkpoint, &args.dataset)?;
    let attribute = match (args.label, &args.attribute) {
        (Some(l), _) => run
            .loaded
            .attributes
            .get(Label(l))
            .cloned()
            .ok_or_else(|| Error::Usage(format!("class {l} is not in the dataset")))?,
        (None, Some(text)) => parse_attribute(text, run.dims.attribute_dim)?,
        (None, None) => return Err(Error::Usage("give --label or --attribute".into())),
    };
    let attributes = attribute
        .view()
        .insert_axis(Axis(0))
        .broadcast((args.count, run.dims.attribute_dim))
        .expect("one row broadcasts")
        .to_owned();
    let generated = run.model.generate(
        attributes.view(),
        per_latent,
        args.dropout,
        GenerationOptions::default(),
        &mut init_rng(args.seed),
    )?;
    let features = run
        .prepared
        .standardizer
        .inverse_rows(&generated.features)?;

    let mut text = String::from("label");
    for j in 0..features.ncols() {
        write!(text, ",f{j}").unwrap();
    }
    text.push('\n');
    let label = args.label.map(|l| l.to_string()).unwrap_or_default();
    for row in features.rows() {
        text.push_str(&label);
        for v in row {
            write!(text, ",{v:.16e}").unwrap();
        }
        text.push('\n');
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(SAMPLES_FILE), text)?;

    let config = SampleConfig {
        checkpoint: &args.checkpoint,
        dataset: &args.dataset,
        label: args.label,
        attribute: args.label.is_none().then(|| attribute.to_vec()),
        count: args.count,
        dropout: args.dropout,
        samples_per_latent: per_latent,
        seed: args.seed,
    };
    let mut manifest = Manifest::new("sample", &config)?;
    manifest.dims = Some(run.dims);
    run_inputs(&mut manifest, &args.checkpoint, &args.dataset)?;
    manifest.add_artifact(&args.out, SAMPLES_FILE)?;
    manifest.write(&args.out)?;
    println!("rows = {}", features.nrows());
    Ok(())
}

#[derive(Serialize)]
struct ProjectConfig<'a> {
    checkpoint: &'a Path,
    dataset: &'a Path,
    split: &'static str,
}

pub fn project(args: &ProjectArgs) -> Result<()> {
    let run = load_run(&args.checkpoint, &args.dataset)?;
    let p = &run.prepared;
    let (features, labels): (Array2<f64>, Vec<Label>) = match args.split {
        SplitName::Train => (p.train.features().clone(), p.train.labels().to_vec()),
        SplitName::Val => (
            p.validation.features().clone(),
            p.validation.labels().to_vec(),
        ),
        SplitName::TestSeen => (
            p.test_seen.features().clone(),
            p.test_seen.labels().to_vec(),
        ),
        SplitName::TestUnseen => (
            p.test_unseen.features().clone(),
            p.test_unseen.labels().to_vec(),
        ),
        SplitName::Test => (
            concatenate(
                Axis(0),
                &[
                    p.test_seen.features().view(),
                    p.test_unseen.features().view(),
                ],
            )
            .map_err(|e| Error::Shape(e.to_string()))?,
            p.test_seen
                .labels()
                .iter()
                .chain(p.test_unseen.labels())
                .copied()
                .collect(),
        ),
    };
    let latent = run.model.encode_eval(features.view())?.mean;
    let points = project_2d(latent.view())?;

    let mut text = String::from("x,y,label\n");
    for (row, label) in points.rows().into_iter().zip(&labels) {
        writeln!(text, "{:.16e},{:.16e},{label}", row[0], row[1]).unwrap();
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join(PROJECTION_FILE), text)?;

    let split = match args.split {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::TestSeen => "test-seen",
        SplitName::TestUnseen => "test-unseen",
        SplitName::Test => "test",
    };
    let config = ProjectConfig {
        checkpoint: &args.checkpoint,
        dataset: &args.dataset,
        split,
    };
    let mut manifest = Manifest::new("project", &config)?;
    manifest.dims = Some(run.dims);
    run_inputs(&mut manifest, &args.checkpoint, &args.dataset)?;
    manifest.add_artifact(&args.out, PROJECTION_FILE)?;
    manifest.write(&args.out)?;

    println!("rows = {}", points.nrows());
    let present: BTreeSet<Label> = labels.iter().copied().collect();
    for (name, group) in [
        ("seen", &run.loaded.split.seen),
        ("unseen", &run.loaded.split.unseen),
    ] {
        let classes: BTreeSet<Label> = group.intersection(&present).copied().collect();
        if classes.len() >= 2 {
            let sep = cluster_separation(points.view(), &labels, &classes)?;
            println!("separation_{name} = {sep}");
        }
    }
    Ok(())
}
