use super::*;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fs;

fn small_config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        samples_per_class: 20,
        val_per_class: 5,
        seed,
        ..SyntheticConfig::default()
    }
}

fn labels(v: &[u32]) -> Vec<Label> {
    v.iter().map(|&l| Label(l)).collect()
}

#[test]
fn dataset_rejects_non_finite_rows() {
    let x = array![[1.0, 2.0], [f64::NAN, 0.0]];
    let err = Dataset::new(x, labels(&[0, 1]), None).unwrap_err();
    assert!(err.to_string().contains("row 1"), "{err}");
}

#[test]
fn attribute_table_rejects_duplicates() {
    let mut entries = BTreeMap::new();
    entries.insert(Label(0), array![1.0, 2.0]);
    entries.insert(Label(1), array![1.0, 2.0]);
    assert!(matches!(AttributeTable::new(entries), Err(Error::Data(_))));
}

#[test]
fn class_table_sorts_by_label() {
    let t = ClassTable::new(labels(&[5, 2]), array![[5.0], [2.0]]).unwrap();
    assert_eq!(t.labels(), &labels(&[2, 5])[..]);
    assert_eq!(t.attribute(Label(5)).unwrap()[0], 5.0);
}

#[test]
fn split_overlap_is_rejected() {
    let fx = generate_synthetic(&small_config(1)).unwrap();
    let mut split = fx.split.clone();
    split.unseen.insert(Label(0));
    let err = split.validate(&fx.dataset).unwrap_err();
    assert!(err.to_string().contains("both seen and unseen"), "{err}");
}

#[test]
fn split_rejects_unseen_rows_in_train() {
    let fx = generate_synthetic(&small_config(1)).unwrap();
    let mut split = fx.split.clone();
    split.train.push(fx.split.test_unseen[0].clone());
    assert!(split.validate(&fx.dataset).is_err());
}

#[test]
fn synthetic_is_deterministic() {
    let a = generate_synthetic(&small_config(9)).unwrap();
    let b = generate_synthetic(&small_config(9)).unwrap();
    assert_eq!(a.dataset, b.dataset);
    assert_eq!(a.attributes, b.attributes);
    assert_eq!(a.split, b.split);
    assert_eq!(a.ground_truth, b.ground_truth);
    let c = generate_synthetic(&small_config(10)).unwrap();
    assert_ne!(a.dataset, c.dataset);
}

#[test]
fn synthetic_rejects_degenerate_parameters() {
    for cfg in [
        SyntheticConfig {
            noise_std: 0.0,
            ..small_config(0)
        },
        SyntheticConfig {
            noise_std: -1.0,
            ..small_config(0)
        },
        SyntheticConfig {
            num_seen: 1,
            ..small_config(0)
        },
        SyntheticConfig {
            num_unseen: 0,
            ..small_config(0)
        },
    ] {
        assert!(
            matches!(generate_synthetic(&cfg), Err(Error::Usage(_))),
            "{cfg:?}"
        );
    }
}

#[test]
fn synthetic_split_shapes() {
    let cfg = small_config(2);
    let fx = generate_synthetic(&cfg).unwrap();
    assert_eq!(fx.split.train.len(), cfg.num_seen * cfg.samples_per_class);
    assert_eq!(
        fx.split.test_seen.len(),
        cfg.num_seen * cfg.samples_per_class
    );
    assert_eq!(
        fx.split.test_unseen.len(),
        cfg.num_unseen * cfg.samples_per_class
    );
    assert_eq!(
        fx.split.val.len(),
        (cfg.num_seen + cfg.num_unseen) * cfg.val_per_class
    );
    let train = fx.dataset.select_ids(&fx.split.train).unwrap();
    assert!(train.labels().iter().all(|l| fx.split.seen.contains(l)));
    assert_eq!(fx.attributes.len(), cfg.num_seen + cfg.num_unseen);
}

#[test]
fn centroids_are_the_map_of_attributes() {
    let fx = generate_synthetic(&small_config(3)).unwrap();
    for (label, a) in fx.attributes.iter() {
        assert_eq!(
            fx.ground_truth.map.apply(a),
            fx.ground_truth.centroids[&label]
        );
    }
}

#[test]
fn vanishing_noise_puts_features_on_centroids() {
    let cfg = SyntheticConfig {
        noise_std: 1e-300,
        ..small_config(4)
    };
    let fx = generate_synthetic(&cfg).unwrap();
    for i in 0..fx.dataset.len() {
        let c = &fx.ground_truth.centroids[&fx.dataset.labels()[i]];
        assert_eq!(fx.dataset.row(i), c.view());
    }
    let all = fx.split.all_labels();
    let test = fx.dataset.select_ids(&fx.split.test_unseen).unwrap();
    assert_eq!(
        bayes_oracle_accuracy(&fx.ground_truth, &test, &all).unwrap(),
        100.0
    );
}

#[test]
fn class_means_converge_to_centroids() {
    let cfg = SyntheticConfig {
        samples_per_class: 400,
        ..small_config(5)
    };
    let fx = generate_synthetic(&cfg).unwrap();
    let test = fx.dataset.select_ids(&fx.split.test_seen).unwrap();
    let se = cfg.noise_std / (cfg.samples_per_class as f64).sqrt();
    let mut outside = 0;
    let mut total = 0;
    for label in &fx.split.seen {
        let rows = test.filter_labels(&[*label].into_iter().collect());
        let mean = rows.features().mean_axis(Axis(0)).unwrap();
        for (m, c) in mean.iter().zip(fx.ground_truth.centroids[label].iter()) {
            total += 1;
            if (m - c).abs() > 3.0 * se {
                outside += 1;
            }
        }
    }
    // 3 standard errors leave about 0.27% outside by chance.
    assert!(
        outside as f64 <= 0.02 * total as f64,
        "{outside}/{total} coordinates beyond 3 SE"
    );
}

#[test]
fn smooth_free_unseen_classes_are_oracle_separable() {
    let cfg = SyntheticConfig {
        attribute_smoothness: 0.0,
        noise_std: 0.05,
        ..small_config(6)
    };
    let fx = generate_synthetic(&cfg).unwrap();
    let test = fx.dataset.select_ids(&fx.split.test_unseen).unwrap();
    let acc = bayes_oracle_accuracy(&fx.ground_truth, &test, &fx.split.all_labels()).unwrap();
    assert!(acc >= 99.0, "oracle unseen accuracy {acc}");
}

#[test]
fn oracle_matches_gaussian_error_integral() {
    // Two centroids 2σ apart: the nearest-centroid rule errs when the noise
    // component along the separating axis exceeds σ, so accuracy is Φ(1).
    let sigma = 0.7;
    let mut truth = generate_synthetic(&small_config(0)).unwrap().ground_truth;
    truth.centroids = [
        (Label(0), array![0.0, 0.0]),
        (Label(1), array![2.0 * sigma, 0.0]),
    ]
    .into_iter()
    .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 100_000;
    let mut x = Array2::zeros((2 * n, 2));
    let mut y = Vec::with_capacity(2 * n);
    for i in 0..2 * n {
        let label = (i % 2) as u32;
        let c = &truth.centroids[&Label(label)];
        for j in 0..2 {
            x[[i, j]] = c[j] + sigma * rng.sample::<f64, _>(StandardNormal);
        }
        y.push(Label(label));
    }
    let data = Dataset::new(x, y, None).unwrap();
    let acc =
        bayes_oracle_accuracy(&truth, &data, &[Label(0), Label(1)].into_iter().collect()).unwrap();
    let phi1 = 84.134_474_606_854_3;
    // Per-class SE is about 0.12 points; the average of two halves that.
    assert!((acc - phi1).abs() < 0.4, "oracle {acc} vs Φ(1) {phi1}");
}

#[test]
fn oracle_rejects_unknown_labels() {
    let fx = generate_synthetic(&small_config(0)).unwrap();
    let data = Dataset::new(array![[0.0; 32]], labels(&[99]), None).unwrap();
    let err = bayes_oracle_accuracy(&fx.ground_truth, &data, &fx.split.all_labels()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    let test = fx.dataset.select_ids(&fx.split.test_seen).unwrap();
    let err = bayes_oracle_accuracy(
        &fx.ground_truth,
        &test,
        &labels(&[0, 77]).into_iter().collect(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

#[test]
fn save_load_round_trip() {
    let fx = generate_synthetic(&small_config(11)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &fx.dataset, &fx.attributes, &fx.split).unwrap();
    save_ground_truth(dir.path(), &fx.ground_truth).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.dataset, fx.dataset);
    assert_eq!(loaded.attributes, fx.attributes);
    assert_eq!(loaded.split, fx.split);
    assert_eq!(load_ground_truth(dir.path()).unwrap(), fx.ground_truth);
    let text = fs::read_to_string(dir.path().join("features.csv")).unwrap();
    assert!(!text.contains('\r'));
    assert!(text.starts_with("id,label,f0,f1,"));
}

fn saved_fixture() -> (tempfile::TempDir, SyntheticFixture) {
    let fx = generate_synthetic(&small_config(12)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &fx.dataset, &fx.attributes, &fx.split).unwrap();
    (dir, fx)
}

fn load_err(dir: &std::path::Path) -> String {
    match load_dataset(dir) {
        Err(Error::Data(msg)) => msg,
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn load_reports_missing_file() {
    let (dir, _) = saved_fixture();
    fs::remove_file(dir.path().join("splits.txt")).unwrap();
    assert!(load_err(dir.path()).contains("missing file"));
}

#[test]
fn load_reports_overlap() {
    let (dir, _) = saved_fixture();
    let path = dir.path().join("splits.txt");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("[unseen]\n", "[unseen]\n0\n");
    fs::write(&path, text).unwrap();
    assert!(load_err(dir.path()).contains("both seen and unseen"));
}

#[test]
fn load_reports_short_row() {
    let (dir, _) = saved_fixture();
    let path = dir.path().join("features.csv");
    let mut lines: Vec<String> = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let row = 7;
    let cut = lines[row].rfind(',').unwrap();
    lines[row].truncate(cut);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let msg = load_err(dir.path());
    assert!(
        msg.contains(&format!("row {row}")) && msg.contains("expected 32 values, found 31"),
        "{msg}"
    );
}

#[test]
fn load_reports_label_without_attribute() {
    let (dir, _) = saved_fixture();
    let path = dir.path().join("attributes.csv");
    let text = fs::read_to_string(&path).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("11,")).collect();
    fs::write(&path, kept.join("\n") + "\n").unwrap();
    assert!(load_err(dir.path()).contains("has no attribute vector"));
}

#[test]
fn load_reports_attribute_dimension_mismatch() {
    let (dir, _) = saved_fixture();
    let path = dir.path().join("attributes.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[2].push_str(",1.0");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    assert!(load_err(dir.path()).contains("attributes.csv row 2"));
}

#[test]
fn ground_truth_must_match_generator() {
    let fx = generate_synthetic(&small_config(13)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_ground_truth(dir.path(), &fx.ground_truth).unwrap();
    let path = dir.path().join("generator.txt");
    let text = fs::read_to_string(&path)
        .unwrap()
        .replace("seed = 13", "seed = 14");
    fs::write(&path, text).unwrap();
    assert!(matches!(load_ground_truth(dir.path()), Err(Error::Data(_))));
}

#[test]
fn standardizer_uses_train_statistics() {
    let train = Dataset::new(array![[1.0, 5.0], [3.0, 5.0]], labels(&[0, 0]), None).unwrap();
    let st = Standardizer::fit(&train).unwrap();
    assert_eq!(st.mean, array![2.0, 5.0]);
    assert_eq!(st.std, array![1.0, 1.0]);
    let out = st.transform(&train).unwrap();
    assert_eq!(out.features(), &array![[-1.0, 0.0], [1.0, 0.0]]);
    let back = st.inverse_rows(out.features()).unwrap();
    assert_eq!(&back, train.features());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("standardizer.csv");
    let st = Standardizer {
        mean: array![0.1, -2.5e-7],
        std: array![1.0 / 3.0, 7.0],
    };
    st.save(&path).unwrap();
    assert_eq!(Standardizer::load(&path).unwrap(), st);
}

fn pairwise(p: &Array2<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..p.nrows() {
        for j in i + 1..p.nrows() {
            let d = &p.row(i) - &p.row(j);
            out.push(d.dot(&d).sqrt());
        }
    }
    out
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn projection_of_planar_data_is_a_rotation() {
    let x = random_matrix(50, 2, 1) * array![3.0, 0.5];
    let p = project_2d(x.view()).unwrap();
    for (a, b) in pairwise(&x).iter().zip(pairwise(&p)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn projection_of_rank_one_data_is_a_line() {
    let t = random_matrix(30, 1, 2);
    let dir = array![[1.0, -2.0, 0.5, 3.0]];
    let x = t.dot(&dir);
    let p = project_2d(x.view()).unwrap();
    assert!(p.column(1).iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn projection_variances_match_independent_eigensolver() {
    let x = random_matrix(400, 10, 3) * Array1::from_shape_fn(10, |j| 1.0 + j as f64 * 0.4);
    let proj = principal_components(x.view()).unwrap();
    let n = x.nrows() as f64;
    let centered = &x - &x.mean_axis(Axis(0)).unwrap();
    let cov = centered.t().dot(&centered) / n;
    let m = nalgebra::DMatrix::from_fn(10, 10, |i, j| cov[[i, j]]);
    let mut eig: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    for k in 0..2 {
        assert!(
            (proj.variances[k] - eig[k]).abs() < 1e-8 * eig[0],
            "{k}: {} vs {}",
            proj.variances[k],
            eig[k]
        );
        let captured = proj.points.column(k).mapv(|v| v * v).sum() / n;
        assert!((captured - eig[k]).abs() < 1e-8 * eig[0]);
    }
    assert!(proj.variances[0] >= proj.variances[1]);
    assert!(proj.axes.row(0).dot(&proj.axes.row(1)).abs() < 1e-10);
}

#[test]
fn projection_needs_three_vectors() {
    assert!(matches!(
        project_2d(Array2::<f64>::zeros((2, 3)).view()),
        Err(Error::Usage(_))
    ));
}

#[test]
fn separation_statistic_hand_case() {
    // Two classes, points at ±1 around centroids 0 and 10.
    let p = array![[-1.0, 0.0], [1.0, 0.0], [9.0, 0.0], [11.0, 0.0]];
    let sep = cluster_separation(
        p.view(),
        &labels(&[0, 0, 1, 1]),
        &labels(&[0, 1]).into_iter().collect(),
    )
    .unwrap();
    assert_eq!(sep, 10.0);
}

proptest! {
    #[test]
    fn generated_attributes_are_distinct(seed in 0u64..1000) {
        let fx = generate_synthetic(&SyntheticConfig { samples_per_class: 1, val_per_class: 0, ..SyntheticConfig::default().clone() }.with_seed(seed)).unwrap();
        let all: Vec<_> = fx.attributes.iter().collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let d = all[i].1 - all[j].1;
                prop_assert!(d.dot(&d) > 0.0);
            }
        }
        prop_assert!(fx.split.validate(&fx.dataset).is_ok());
    }

    #[test]
    fn projection_axis_variances_are_ordered(seed in 0u64..200, rows in 3usize..40, cols in 1usize..6) {
        let x = random_matrix(rows, cols, seed);
        let p = project_2d(x.view()).unwrap();
        let v0 = p.column(0).mapv(|v| v * v).sum();
        let v1 = p.column(1).mapv(|v| v * v).sum();
        prop_assert!(v0 + 1e-9 >= v1);
    }
}
