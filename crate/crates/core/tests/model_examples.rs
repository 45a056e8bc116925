use std::path::Path;

use ldgd::data::{load_csv, split, synthetic_moons, Dataset, Scaling, Standardizer, MOON_NOISE};
use ldgd::model::{generate, infer_test_latent, train, LdgdModel, ModelConfig, TestInferenceConfig, TrainConfig};
use ldgd::optim::Mat;

fn iris() -> Dataset {
    load_csv(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/iris.csv"), "species").unwrap()
}

fn trained_iris() -> (LdgdModel, Dataset, Standardizer) {
    let data = iris();
    let s = split(&data.labels(), 0.2, 0).unwrap();
    let train_set = data.subset(&s.train);
    let scaler = Standardizer::fit_with(&train_set.yr, Scaling::Center);
    let train_set = train_set.with_features(scaler.transform(&train_set.yr));
    let config = ModelConfig {
        latent_dim: 7,
        inducing_reg: 10,
        inducing_cls: 10,
        ..ModelConfig::default()
    };
    let mut model = LdgdModel::init(&train_set, config, 0).unwrap();
    train(&mut model, &train_set, &TrainConfig::default()).unwrap();
    (model, train_set, scaler)
}

fn centroids(data: &Dataset) -> Vec<Mat> {
    let labels = data.labels();
    (0..data.n_classes())
        .map(|c| {
            let rows: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == c).collect();
            let mut sum = Mat::zeros(1, data.n_features());
            for &i in &rows {
                sum += data.yr.row(i);
            }
            sum / rows.len() as f64
        })
        .collect()
}

#[test]
fn duplicated_training_rows_infer_nearby_latents() {
    let data = synthetic_moons(500, 5, MOON_NOISE, 7).unwrap();
    let s = split(&data.labels(), 0.2, 0).unwrap();
    let train_set = data.subset(&s.train);
    let scaler = Standardizer::fit(&train_set.yr);
    let train_set = train_set.with_features(scaler.transform(&train_set.yr));
    let config = ModelConfig {
        latent_dim: 10,
        inducing_reg: 25,
        inducing_cls: 25,
        ..ModelConfig::default()
    };
    let mut model = LdgdModel::init(&train_set, config, 0).unwrap();
    train(&mut model, &train_set, &TrainConfig::default()).unwrap();
    let rows: Vec<usize> = (0..train_set.len()).step_by(40).collect();
    let dup = train_set.subset(&rows);
    let inferred = infer_test_latent(&model, &dup.yr, &TestInferenceConfig::default()).unwrap();
    let trained = model.latent().unwrap();
    for (k, &i) in rows.iter().enumerate() {
        let dist = (inferred.latent.mean.row(k) - trained.mean.row(i)).norm();
        assert!(dist < 0.5, "row {i}: distance {dist}");
    }
}

#[test]
fn generation_is_calibrated_and_lands_near_class_centroids() {
    let (model, train_set, _) = trained_iris();
    let latent = model.latent().unwrap();
    let g = generate(&model, &latent.mean, None).unwrap();
    let (n, d) = train_set.yr.shape();
    let covered = (0..n)
        .flat_map(|i| (0..d).map(move |j| (i, j)))
        .filter(|&(i, j)| (train_set.yr[(i, j)] - g.mean[(i, j)]).abs() <= 2.0 * g.variance[(i, j)].sqrt())
        .count();
    assert!(covered as f64 >= 0.95 * (n * d) as f64, "{covered} of {}", n * d);

    let labels = train_set.labels();
    let feature_centroids = centroids(&train_set);
    for c in 0..train_set.n_classes() {
        let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let mut point = Mat::zeros(1, latent.mean.ncols());
        for &i in &rows {
            point += latent.mean.row(i);
        }
        point /= rows.len() as f64;
        let g = generate(&model, &point, None).unwrap();
        let dists: Vec<f64> = feature_centroids.iter().map(|m| (&g.mean - m).norm()).collect();
        let nearest = (0..dists.len()).min_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap();
        assert_eq!(nearest, c, "class {c}: {dists:?}");
    }
}
