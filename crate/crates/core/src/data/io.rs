use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{
    generate_synthetic, AttributeTable, Dataset, Label, SplitSpec, SyntheticConfig,
    SyntheticGroundTruth,
};
use crate::{keyvalue, Error, Result};

pub const FEATURES_FILE: &str = "features.csv";
pub const ATTRIBUTES_FILE: &str = "attributes.csv";
pub const SPLITS_FILE: &str = "splits.txt";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";
pub const GENERATOR_FILE: &str = "generator.txt";

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: Dataset<f64>,
    pub attributes: AttributeTable<f64>,
    pub split: SplitSpec,
}

fn csv_line(out: &mut String, head: &[&str], values: impl IntoIterator<Item = f64>) {
    out.push_str(&head.join(","));
    for v in values {
        write!(out, ",{v:.16e}").unwrap();
    }
    out.push('\n');
}

fn header(first: &[&str], prefix: &str, count: usize) -> String {
    let mut cols: Vec<String> = first.iter().map(|s| s.to_string()).collect();
    cols.extend((0..count).map(|i| format!("{prefix}{i}")));
    cols.join(",") + "\n"
}

pub fn save_dataset(
    dir: &Path,
    dataset: &Dataset<f64>,
    attributes: &AttributeTable<f64>,
    split: &SplitSpec,
) -> Result<()> {
    let ids = dataset
        .ids()
        .ok_or_else(|| Error::data("dataset rows need ids to be saved"))?;
    fs::create_dir_all(dir)?;

    let mut text = header(&["id", "label"], "f", dataset.feature_dim());
    for (i, id) in ids.iter().enumerate() {
        csv_line(
            &mut text,
            &[id, &dataset.labels()[i].to_string()],
            dataset.row(i).iter().copied(),
        );
    }
    fs::write(dir.join(FEATURES_FILE), text)?;

    let mut text = header(&["label"], "a", attributes.dim());
    for (label, a) in attributes.iter() {
        csv_line(&mut text, &[&label.to_string()], a.iter().copied());
    }
    fs::write(dir.join(ATTRIBUTES_FILE), text)?;

    let mut text = String::new();
    let mut section = |name: &str, items: Vec<String>| {
        writeln!(text, "[{name}]").unwrap();
        for item in items {
            writeln!(text, "{item}").unwrap();
        }
    };
    section("seen", split.seen.iter().map(Label::to_string).collect());
    section(
        "unseen",
        split.unseen.iter().map(Label::to_string).collect(),
    );
    section("train", split.train.clone());
    section("test_seen", split.test_seen.clone());
    section("test_unseen", split.test_unseen.clone());
    section("val", split.val.clone());
    fs::write(dir.join(SPLITS_FILE), text)?;
    Ok(())
}

fn read_required(dir: &Path, name: &str) -> Result<String> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(Error::data(format!("missing file {}", path.display())));
    }
    Ok(fs::read_to_string(path)?)
}

/// Rows of a numeric table: `lead` leading text columns followed by
/// `prefix{i}` value columns. Returns the value count and the rows.
fn read_table(
    name: &str,
    text: &str,
    lead: &[&str],
    prefix: &str,
) -> Result<(usize, Vec<(Vec<String>, Vec<f64>)>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(text.as_bytes());
    let head = reader.headers()?.clone();
    let width = head.len().saturating_sub(lead.len());
    let expected: Vec<String> = lead
        .iter()
        .map(|s| s.to_string())
        .chain((0..width).map(|i| format!("{prefix}{i}")))
        .collect();
    if width == 0
        || head
            .iter()
            .map(str::trim)
            .ne(expected.iter().map(String::as_str))
    {
        return Err(Error::data(format!(
            "{name}: header must be {}",
            header(lead, prefix, width.max(1)).trim_end()
        )));
    }
    let mut rows = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let row = n + 1;
        let record = record?;
        if record.len() != lead.len() + width {
            return Err(Error::data(format!(
                "{name} row {row}: expected {width} values, found {}",
                record.len().saturating_sub(lead.len())
            )));
        }
        let text_fields = record
            .iter()
            .take(lead.len())
            .map(|f| f.trim().to_string())
            .collect();
        let values = record
            .iter()
            .skip(lead.len())
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::data(format!("{name} row {row}: bad number {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data(format!("{name} row {row}: non-finite value")));
        }
        rows.push((text_fields, values));
    }
    Ok((width, rows))
}

fn parse_label(name: &str, row: usize, text: &str) -> Result<Label> {
    text.parse()
        .map_err(|_| Error::data(format!("{name} row {row}: bad label {text:?}")))
}

fn parse_splits(text: &str) -> Result<SplitSpec> {
    let mut split = SplitSpec::default();
    let mut current: Option<String> = None;
    let mut sections = BTreeSet::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            if !["seen", "unseen", "train", "test_seen", "test_unseen", "val"].contains(&name) {
                return Err(Error::data(format!(
                    "{SPLITS_FILE} line {}: unknown section [{name}]",
                    n + 1
                )));
            }
            if !sections.insert(name.to_string()) {
                return Err(Error::data(format!(
                    "{SPLITS_FILE} line {}: repeated section [{name}]",
                    n + 1
                )));
            }
            current = Some(name.to_string());
            continue;
        }
        let label = || {
            line.parse::<Label>().map_err(|_| {
                Error::data(format!("{SPLITS_FILE} line {}: bad label {line:?}", n + 1))
            })
        };
        match current.as_deref() {
            None => {
                return Err(Error::data(format!(
                    "{SPLITS_FILE} line {}: entry before any section",
                    n + 1
                )))
            }
            Some("seen") => {
                split.seen.insert(label()?);
            }
            Some("unseen") => {
                split.unseen.insert(label()?);
            }
            Some("train") => split.train.push(line.to_string()),
            Some("test_seen") => split.test_seen.push(line.to_string()),
            Some("test_unseen") => split.test_unseen.push(line.to_string()),
            Some(_) => split.val.push(line.to_string()),
        }
    }
    for required in ["seen", "unseen"] {
        if !sections.contains(required) {
            return Err(Error::data(format!(
                "{SPLITS_FILE}: missing section [{required}]"
            )));
        }
    }
    Ok(split)
}

/// Reads and validates a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let features_text = read_required(dir, FEATURES_FILE)?;
    let attributes_text = read_required(dir, ATTRIBUTES_FILE)?;
    let splits_text = read_required(dir, SPLITS_FILE)?;

    let (_, rows) = read_table(ATTRIBUTES_FILE, &attributes_text, &["label"], "a")?;
    let mut entries = BTreeMap::new();
    for (n, (lead, values)) in rows.into_iter().enumerate() {
        let label = parse_label(ATTRIBUTES_FILE, n + 1, &lead[0])?;
        if entries.insert(label, Array1::from(values)).is_some() {
            return Err(Error::data(format!(
                "{ATTRIBUTES_FILE} row {}: duplicate label {label}",
                n + 1
            )));
        }
    }
    let attributes = AttributeTable::new(entries)?;

    let (d, rows) = read_table(FEATURES_FILE, &features_text, &["id", "label"], "f")?;
    let mut features = Array2::zeros((rows.len(), d));
    let mut labels = Vec::with_capacity(rows.len());
    let mut ids = Vec::with_capacity(rows.len());
    for (n, (lead, values)) in rows.into_iter().enumerate() {
        let label = parse_label(FEATURES_FILE, n + 1, &lead[1])?;
        if attributes.get(label).is_none() {
            return Err(Error::data(format!(
                "{FEATURES_FILE} row {}: label {label} has no attribute vector",
                n + 1
            )));
        }
        features.row_mut(n).assign(&Array1::from(values));
        labels.push(label);
        ids.push(lead[0].clone());
    }
    let dataset = Dataset::new(features, labels, Some(ids))?;

    let split = parse_splits(&splits_text)?;
    if let Some(label) = split
        .all_labels()
        .into_iter()
        .find(|l| attributes.get(*l).is_none())
    {
        return Err(Error::data(format!(
            "{SPLITS_FILE}: label {label} has no attribute vector"
        )));
    }
    split.validate(&dataset)?;
    Ok(LoadedDataset {
        dataset,
        attributes,
        split,
    })
}

fn config_text(config: &SyntheticConfig) -> String {
    format!(
        "num_seen = {}\nnum_unseen = {}\nfeature_dim = {}\nattribute_dim = {}\n\
         samples_per_class = {}\nval_per_class = {}\nnoise_std = {:?}\n\
         attribute_smoothness = {:?}\nmap_hidden = {}\nseed = {}\n",
        config.num_seen,
        config.num_unseen,
        config.feature_dim,
        config.attribute_dim,
        config.samples_per_class,
        config.val_per_class,
        config.noise_std,
        config.attribute_smoothness,
        config.map_hidden,
        config.seed,
    )
}

fn parse_config(text: &str) -> Result<SyntheticConfig> {
    let mut map = keyvalue::parse(text)?;
    let mut need = |key: &str| -> Result<String> {
        map.remove(key)
            .ok_or_else(|| Error::data(format!("{GENERATOR_FILE}: missing key {key}")))
    };
    fn num<T: std::str::FromStr>(key: &str, v: String) -> Result<T> {
        v.parse()
            .map_err(|_| Error::data(format!("{GENERATOR_FILE}: bad value for {key}: {v:?}")))
    }
    let config = SyntheticConfig {
        num_seen: num("num_seen", need("num_seen")?)?,
        num_unseen: num("num_unseen", need("num_unseen")?)?,
        feature_dim: num("feature_dim", need("feature_dim")?)?,
        attribute_dim: num("attribute_dim", need("attribute_dim")?)?,
        samples_per_class: num("samples_per_class", need("samples_per_class")?)?,
        val_per_class: num("val_per_class", need("val_per_class")?)?,
        noise_std: num("noise_std", need("noise_std")?)?,
        attribute_smoothness: num("attribute_smoothness", need("attribute_smoothness")?)?,
        map_hidden: num("map_hidden", need("map_hidden")?)?,
        seed: num("seed", need("seed")?)?,
    };
    keyvalue::finish(&map).map_err(|e| Error::data(format!("{GENERATOR_FILE}: {e}")))?;
    Ok(config)
}

/// Writes `ground_truth.csv` (true class centroids) and `generator.txt`
/// (the generator settings, seed included).
pub fn save_ground_truth(dir: &Path, truth: &SyntheticGroundTruth) -> Result<()> {
    fs::create_dir_all(dir)?;
    let d = truth.centroids.values().next().map_or(0, |c| c.len());
    let mut text = header(&["label"], "c", d);
    for (label, c) in &truth.centroids {
        csv_line(&mut text, &[&label.to_string()], c.iter().copied());
    }
    fs::write(dir.join(GROUND_TRUTH_FILE), text)?;
    fs::write(dir.join(GENERATOR_FILE), config_text(&truth.config))?;
    Ok(())
}

/// Rebuilds the ground truth from `generator.txt` and checks it against
/// the centroids stored in `ground_truth.csv`.
pub fn load_ground_truth(dir: &Path) -> Result<SyntheticGroundTruth> {
    let config = parse_config(&read_required(dir, GENERATOR_FILE)?)?;
    let (_, rows) = read_table(
        GROUND_TRUTH_FILE,
        &read_required(dir, GROUND_TRUTH_FILE)?,
        &["label"],
        "c",
    )?;
    let mut stored = BTreeMap::new();
    for (n, (lead, values)) in rows.into_iter().enumerate() {
        stored.insert(
            parse_label(GROUND_TRUTH_FILE, n + 1, &lead[0])?,
            Array1::from(values),
        );
    }
    let truth = generate_synthetic(&config)?.ground_truth;
    if stored != truth.centroids {
        return Err(Error::data(format!(
            "{GROUND_TRUTH_FILE} does not match the fixture described by {GENERATOR_FILE}"
        )));
    }
    Ok(truth)
}
