use std::path::Path;

use ldgd::data::{make_moons, metrics, synthetic_moons, Dataset, Standardizer};
use ldgd::kernels::ard_report;
use ldgd::latent::{encode, FreeFormLatent};
use ldgd::model::{
    decode_labels, generate as decode_points, infer_test_latent, train as fit, Checkpoint, LdgdModel, ModelKind,
};
use ldgd::numerics::SeededRng;
use ldgd::optim::Mat;
use serde_json::{json, Value};

use crate::config::{resolve_seed, RunConfig, RunFlags};
use crate::error::{CliError, CliResult};
use crate::output::{csv_writer, finish_csv, fmt, provenance, write_json};
use crate::{GenKind, Rows};

pub fn gen_data(kind: GenKind, base_dim: usize, n: usize, noise: f64, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let seed = resolve_seed(seed)?;
    let data = match kind {
        GenKind::MoonsLinear => synthetic_moons(n, base_dim, noise, seed)?,
        GenKind::Moons => {
            let (x, labels) = make_moons(n, noise, &mut SeededRng::new(seed).substream("moons"))?;
            Dataset::from_labels(x, &labels, vec!["0".into(), "1".into()], vec!["x0".into(), "x1".into()])?
        }
    };
    let kind_name = match kind {
        GenKind::MoonsLinear => "moons-linear",
        GenKind::Moons => "moons",
    };
    let prov = provenance(
        "gen-data",
        &json!({ "kind": kind_name, "base_dim": base_dim, "n": n, "noise": noise, "seed": seed }),
    );
    let mut buf = format!("# {}\n", serde_json::to_string(&prov)?).into_bytes();
    data.write_csv_to(&mut buf)?;
    std::fs::write(out, buf).map_err(|e| CliError::write(out, e))?;
    let summary = json!({ "n": data.len(), "d": data.n_features(), "k": data.n_classes(), "path": out });
    write_json(None, &prov, &summary)
}

fn scaled(data: &Dataset, scaler: &Standardizer) -> Dataset {
    data.with_features(scaler.transform(&data.yr))
}

pub fn train(flags: &RunFlags, out: &Path, trace_path: Option<&Path>) -> CliResult<()> {
    let cfg = flags.resolve()?;
    let data = cfg.load_data()?;
    let (train_rows, test_rows) = cfg.partition(&data)?;
    let raw = data.subset(&train_rows);
    let scaler = Standardizer::fit_with(&raw.yr, cfg.scaling);
    let train_set = scaled(&raw, &scaler);
    let echo = serde_json::to_value(&cfg)?;
    let prov = provenance("train", &echo);

    let mut model = LdgdModel::init(&train_set, cfg.model_config(), cfg.seed())?;
    let train_config = cfg.train_config();
    let result = match fit(&mut model, &train_set, &train_config) {
        Ok(r) => r,
        Err(failure) => {
            if let Some(p) = trace_path {
                write_json(Some(p), &prov, &failure.trace)?;
            }
            return Err(failure.error.into());
        }
    };

    let mut ck = Checkpoint::from_model(&model, data.label_names.clone(), data.feature_names.clone());
    ck.standardizer = Some(scaler);
    ck.train_config = Some(train_config);
    ck.config_echo = prov.clone();
    ck.final_report = Some(result.final_report);
    ck.train_labels = train_set.labels();
    ck.save(out)?;
    if let Some(p) = trace_path {
        write_json(Some(p), &prov, &result.trace)?;
    }
    let summary = json!({
        "checkpoint": out,
        "n_train": train_rows.len(),
        "n_test": test_rows.len(),
        "final_report": result.final_report,
    });
    write_json(None, &prov, &summary)
}

/// The checkpoint, its run configuration with `flags` applied, and the model.
fn reopen(path: &Path, flags: &RunFlags) -> CliResult<(Checkpoint, RunConfig, LdgdModel)> {
    let ck = Checkpoint::load(path)?;
    let mut cfg: RunConfig = match ck.config_echo.get("config") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => RunConfig::default(),
    };
    flags.apply(&mut cfg);
    cfg.seed = Some(resolve_seed(cfg.seed)?);
    cfg.validate()?;
    let model = ck.to_model()?;
    Ok((ck, cfg, model))
}

fn scaler_of(ck: &Checkpoint) -> Standardizer {
    ck.standardizer.clone().unwrap_or_else(|| Standardizer {
        mean: vec![0.0; ck.d],
        std: vec![1.0; ck.d],
    })
}

fn check_features(ck: &Checkpoint, data: &Dataset) -> CliResult<()> {
    if data.n_features() != ck.d || data.n_classes() != ck.k {
        return Err(CliError::Validation(format!(
            "checkpoint expects {} features and {} classes, data has {} and {}",
            ck.d,
            ck.k,
            data.n_features(),
            data.n_classes()
        )));
    }
    Ok(())
}

pub fn predict(
    checkpoint: &Path,
    flags: &RunFlags,
    rows: Option<Rows>,
    out: Option<&Path>,
    metrics_path: Option<&Path>,
    score: bool,
) -> CliResult<()> {
    let (ck, cfg, model) = reopen(checkpoint, flags)?;
    let data = cfg.load_data()?;
    check_features(&ck, &data)?;
    let (train_rows, test_rows) = cfg.partition(&data)?;
    let rows = match rows.unwrap_or(if cfg.test_fraction.is_some() { Rows::Test } else { Rows::All }) {
        Rows::All => (0..data.len()).collect(),
        Rows::Train => train_rows,
        Rows::Test => test_rows,
    };
    let subset = data.subset(&rows);
    let y = scaler_of(&ck).transform(&subset.yr);
    let inferred = infer_test_latent(&model, &y, &cfg.test_config())?;
    let decoded = decode_labels(&model, &inferred.latent.mean)?;
    let prov = provenance(if score { "evaluate" } else { "predict" }, &serde_json::to_value(&cfg)?);

    if let Some(path) = out {
        let mut w = csv_writer(path, &prov)?;
        let q = model.latent_dim();
        let mut header = vec!["row".to_string(), "predicted".into(), "label".into()];
        header.extend(ck.label_names.iter().map(|c| format!("p_{c}")));
        header.extend((0..q).map(|j| format!("mu_{j}")));
        header.extend((0..q).map(|j| format!("s_{j}")));
        w.write_record(&header)?;
        let truth = subset.labels();
        for (i, &r) in rows.iter().enumerate() {
            let mut rec = vec![
                r.to_string(),
                ck.label_names[decoded.labels[i]].clone(),
                ck.label_names[truth[i]].clone(),
            ];
            rec.extend(decoded.probabilities.row(i).iter().map(|&v| fmt(v)));
            rec.extend(inferred.latent.mean.row(i).iter().map(|&v| fmt(v)));
            rec.extend(inferred.latent.scale.row(i).iter().map(|&v| fmt(v)));
            w.write_record(&rec)?;
        }
        finish_csv(w, path)?;
    }
    if score {
        let report = metrics(&decoded.labels, &subset.labels(), ck.k)?;
        let result = json!({ "rows": rows.len(), "test_iterations": inferred.iterations, "metrics": report });
        write_json(metrics_path, &prov, &result)?;
    }
    Ok(())
}

/// Training-row latent posterior: stored for free-form models, encoded
/// from the training data for encoder models.
fn training_latent(ck: &Checkpoint, cfg: &RunConfig, model: &LdgdModel) -> CliResult<FreeFormLatent> {
    if let Some(latent) = model.latent() {
        return Ok(latent);
    }
    let data = cfg.load_data().map_err(|e| match e {
        CliError::Validation(_) => CliError::Validation("encoder models need the training data (--data)".into()),
        other => other,
    })?;
    check_features(ck, &data)?;
    let (train_rows, _) = cfg.partition(&data)?;
    let y = scaler_of(ck).transform(&data.subset(&train_rows).yr);
    let (mean, scale) = encode(&model.encoder().expect("encoder model"), &y)?;
    Ok(FreeFormLatent { mean, scale })
}

pub fn latent(checkpoint: &Path, flags: &RunFlags, out: &Path) -> CliResult<()> {
    let (ck, cfg, model) = reopen(checkpoint, flags)?;
    let latent = training_latent(&ck, &cfg, &model)?;
    let prov = provenance("latent", &serde_json::to_value(&cfg)?);
    let mut w = csv_writer(out, &prov)?;
    let q = latent.dim();
    let mut header = vec!["row".to_string(), "label".into()];
    header.extend((0..q).map(|j| format!("mu_{j}")));
    header.extend((0..q).map(|j| format!("s_{j}")));
    w.write_record(&header)?;
    for i in 0..latent.rows() {
        let label = ck.train_labels.get(i).map(|&c| ck.label_names[c].clone()).unwrap_or_default();
        let mut rec = vec![i.to_string(), label];
        rec.extend(latent.mean.row(i).iter().map(|&v| fmt(v)));
        rec.extend(latent.scale.row(i).iter().map(|&v| fmt(v)));
        w.write_record(&rec)?;
    }
    finish_csv(w, out)
}

pub fn ard(checkpoint: &Path, ratio: f64, out: Option<&Path>) -> CliResult<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.to_model()?;
    let cls = model.classification_kernel();
    let reg = model.regression_kernel();
    let cls_report = ard_report(&cls, ratio)?;
    let reg_report = ard_report(&reg, ratio)?;
    let result = json!({
        "ratio": ratio,
        "classification": { "alpha": cls.inv_lengthscales, "selected": cls_report.selected, "ranked": cls_report.ranked },
        "regression": { "alpha": reg.inv_lengthscales, "selected": reg_report.selected, "ranked": reg_report.ranked },
    });
    let echo = ck.config_echo.get("config").cloned().unwrap_or(Value::Null);
    write_json(out, &provenance("ard", &echo), &result)
}

fn read_points(path: &Path, q: usize) -> CliResult<Mat> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut values = Vec::new();
    let mut n = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != q {
            return Err(CliError::Validation(format!(
                "latent point row {} has {} columns, the model has {q} latent dimensions",
                r + 1,
                record.len()
            )));
        }
        for cell in &record {
            let v: f64 = cell
                .parse()
                .map_err(|_| CliError::Validation(format!("unparseable latent value {cell:?} at row {}", r + 1)))?;
            values.push(v);
        }
        n += 1;
    }
    Ok(Mat::from_row_slice(n, q, &values))
}

/// `count` points at the class-`k` latent centroid plus `0.1·std` noise.
fn near_class_points(latent: &FreeFormLatent, labels: &[usize], k: usize, count: usize, rng: &mut SeededRng) -> CliResult<Mat> {
    let rows: Vec<usize> = (0..latent.rows()).filter(|&i| labels.get(i) == Some(&k)).collect();
    if rows.is_empty() {
        return Err(CliError::Validation(format!("class {k} has no training rows")));
    }
    let q = latent.dim();
    let class = latent.mean.select_rows(&rows);
    let centroid: Vec<f64> = (0..q).map(|j| class.column(j).mean()).collect();
    let std: Vec<f64> = (0..q).map(|j| class.column(j).variance().sqrt()).collect();
    let eps = rng.normal_matrix(count, q);
    Ok(Mat::from_fn(count, q, |i, j| centroid[j] + 0.1 * std[j] * eps[(i, j)]))
}

pub fn generate(
    checkpoint: &Path,
    points: Option<&Path>,
    near_class: Option<usize>,
    count: usize,
    noisy: bool,
    flags: &RunFlags,
    out: &Path,
) -> CliResult<()> {
    let (ck, cfg, model) = reopen(checkpoint, flags)?;
    let mut rng = SeededRng::new(cfg.seed()).substream("generate");
    let x = match (points, near_class) {
        (Some(p), _) => read_points(p, model.latent_dim())?,
        (None, Some(k)) => {
            if k >= ck.k {
                return Err(CliError::Validation(format!("class {k} out of range (model has {} classes)", ck.k)));
            }
            let latent = training_latent(&ck, &cfg, &model)?;
            if model.config.kind == ModelKind::Ldgd && ck.train_labels.len() != latent.rows() {
                return Err(CliError::Validation("checkpoint carries no training labels".into()));
            }
            near_class_points(&latent, &ck.train_labels, k, count, &mut rng)?
        }
        (None, None) => return Err(CliError::Validation("give --points or --near-class".into())),
    };
    let g = decode_points(&model, &x, if noisy { Some(&mut rng) } else { None })?;
    let scaler = scaler_of(&ck);
    let values = scaler.inverse(g.samples.as_ref().unwrap_or(&g.mean));

    let prov = provenance("generate", &serde_json::to_value(&cfg)?);
    let mut w = csv_writer(out, &prov)?;
    let mut header = ck.feature_names.clone();
    header.extend(ck.feature_names.iter().map(|f| format!("std_{f}")));
    w.write_record(&header)?;
    for i in 0..values.nrows() {
        let mut rec: Vec<String> = values.row(i).iter().map(|&v| fmt(v)).collect();
        rec.extend((0..ck.d).map(|j| fmt(g.variance[(i, j)].sqrt() * scaler.std[j])));
        w.write_record(&rec)?;
    }
    finish_csv(w, out)
}

pub fn gradcheck(seed: Option<u64>, seeds: u64, corrupt: Option<&str>, out: Option<&Path>) -> CliResult<()> {
    let first = resolve_seed(seed)?;
    let mut runs = Vec::new();
    let mut failing: Vec<String> = Vec::new();
    for s in first..first + seeds.max(1) {
        for kind in [ModelKind::Ldgd, ModelKind::FastLdgd] {
            let (instance, report) = ldgd::model::gradcheck(s, kind, corrupt)?;
            for b in report.failing_blocks() {
                if !failing.iter().any(|f| f == b) {
                    failing.push(b.to_string());
                }
            }
            runs.push(json!({ "instance": instance, "passed": report.passed(), "report": report }));
        }
    }
    let prov = provenance("gradcheck", &json!({ "seed": first, "seeds": seeds, "corrupt_block": corrupt }));
    let result = json!({ "passed": failing.is_empty(), "failing_blocks": failing, "runs": runs });
    write_json(out, &prov, &result)?;
    if failing.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failing))
    }
}
