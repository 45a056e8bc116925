use serde::{Deserialize, Serialize};

use super::elbo::build;
use super::{LatentInit, LdgdModel, ModelConfig, ModelKind};
use crate::data::Dataset;
use crate::error::Result;
use crate::numerics::SeededRng;
use crate::optim::{check_gradient, gradient, GradCheckReport, Mat, Tape, FD_STEP, FD_TOLERANCE};

/// Shape of one randomized tiny model used for gradient checking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckInstance {
    pub seed: u64,
    pub kind: ModelKind,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub q: usize,
    pub inducing: usize,
    pub samples: usize,
    pub batch: Vec<usize>,
}

/// Builds a random tiny model from `seed`, perturbs every block away from
/// its initialization and compares the tape gradient of the minibatch ELBO
/// with central differences. `corrupt_block` names a block whose analytic
/// gradient is deliberately distorted before the comparison.
pub fn gradcheck(seed: u64, kind: ModelKind, corrupt_block: Option<&str>) -> Result<(GradCheckInstance, GradCheckReport)> {
    let mut rng = SeededRng::new(seed).substream("gradcheck");
    let n = 5 + rng.index(4);
    let d = 1 + rng.index(3);
    let k = 1 + rng.index(3);
    let (q, inducing, samples) = (2, 3, 2);
    let labels: Vec<usize> = (0..n).map(|i| (i + rng.index(k)) % k).collect();
    let data = Dataset::from_labels(
        rng.normal_matrix(n, d),
        &labels,
        (0..k).map(|c| format!("c{c}")).collect(),
        (0..d).map(|j| format!("f{j}")).collect(),
    )?;
    let config = ModelConfig {
        kind,
        latent_dim: q,
        inducing_reg: inducing,
        inducing_cls: inducing,
        latent_samples: samples,
        latent_init: LatentInit::Random,
        encoder_hidden: vec![4],
        quadrature_order: 20,
        ..ModelConfig::default()
    };
    let mut model = LdgdModel::init(&data, config, seed)?;
    let names: Vec<String> = model.params.blocks().iter().map(|b| b.name.clone()).collect();
    for name in &names {
        let s = model.params.storage(name);
        let noise = rng.normal_matrix(s.nrows(), s.ncols()) * 0.3;
        model.params.set_storage(name, &(s + noise))?;
    }
    let batch = rng.sample_indices(n, n - 1);
    let eps = rng.normal_matrix(samples * batch.len(), q);

    let (_, mut analytic) = gradient(&model.params, |tape, p| {
        Ok(build(tape, p, &model, &data, &batch, &eps)?.total)
    })?;
    if let Some(name) = corrupt_block {
        if let Some((_, range)) = model.params.layout().into_iter().find(|(b, _)| b == name) {
            for g in &mut analytic[range] {
                *g = *g * 1.5 + 1e-3;
            }
        }
    }
    let mut probe = model.clone();
    let report = check_gradient(
        &model.params,
        &analytic,
        |params| {
            probe.params = params.clone();
            let tape = Tape::new();
            let bound = probe.params.bind_with(&tape, |_| false);
            Ok(tape.scalar(build(&tape, &bound, &probe, &data, &batch, &eps)?.total))
        },
        FD_STEP,
        FD_TOLERANCE,
    )?;
    let instance = GradCheckInstance {
        seed,
        kind,
        n,
        d,
        k,
        q,
        inducing,
        samples,
        batch,
    };
    Ok((instance, report))
}

/// Block names of a model built for gradient checking, for callers that
/// want to pick a block to corrupt.
pub fn block_names(kind: ModelKind) -> Result<Vec<String>> {
    let data = Dataset::from_labels(
        Mat::from_row_slice(2, 1, &[0.0, 1.0]),
        &[0, 0],
        vec!["c0".into()],
        vec!["f0".into()],
    )?;
    let config = ModelConfig {
        kind,
        latent_init: LatentInit::Random,
        inducing_reg: 1,
        inducing_cls: 1,
        encoder_hidden: vec![4],
        ..ModelConfig::default()
    };
    let model = LdgdModel::init(&data, config, 0)?;
    Ok(model.params.blocks().iter().map(|b| b.name.clone()).collect())
}
