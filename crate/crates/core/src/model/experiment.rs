use super::{decode_labels, infer_test_latent, train, Decoded, InferredLatent, LdgdModel, ModelConfig, TestInferenceConfig, TrainConfig, TrainResult};
use crate::data::{metrics, Dataset, MetricsReport, Scaling, Standardizer};
use crate::error::Result;

/// Everything produced by one train/test run.
#[derive(Debug, Clone)]
pub struct HoldoutRun {
    pub model: LdgdModel,
    pub scaler: Standardizer,
    pub training: TrainResult,
    pub test_latent: InferredLatent,
    pub decoded: Decoded,
    pub metrics: MetricsReport,
}

/// Fits the scaler and the model on `train_rows`, infers latents for
/// `test_rows` without their labels and scores the decoded labels.
/// The model is initialized from `train.seed`.
pub fn run_holdout(
    data: &Dataset,
    train_rows: &[usize],
    test_rows: &[usize],
    scaling: Scaling,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    test_config: &TestInferenceConfig,
) -> Result<HoldoutRun> {
    let train_set = data.subset(train_rows);
    let test_set = data.subset(test_rows);
    let scaler = Standardizer::fit_with(&train_set.yr, scaling);
    let train_set = train_set.with_features(scaler.transform(&train_set.yr));
    let test_y = scaler.transform(&test_set.yr);
    let mut model = LdgdModel::init(&train_set, model_config.clone(), train_config.seed)?;
    let training = train(&mut model, &train_set, train_config).map_err(|f| f.error)?;
    let test_latent = infer_test_latent(&model, &test_y, test_config)?;
    let decoded = decode_labels(&model, &test_latent.latent.mean)?;
    let metrics = metrics(&decoded.labels, &test_set.labels(), data.n_classes())?;
    Ok(HoldoutRun {
        model,
        scaler,
        training,
        test_latent,
        decoded,
        metrics,
    })
}
