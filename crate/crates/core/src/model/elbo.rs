use serde::{Deserialize, Serialize};

use super::{blocks, LdgdModel, ModelKind};
use crate::data::Dataset;
use crate::error::{LdgdError, Result};
use crate::numerics::SeededRng;
use crate::optim::{BoundParams, Mat, Tape, Var};
use crate::svgp::INDUCING_JITTER;

/// Signed decomposition of one ELBO evaluation. Data terms are already
/// scaled to the full training set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub iteration: usize,
    pub ell_reg: f64,
    pub ell_cls: f64,
    pub kl_x: f64,
    pub kl_u_reg: f64,
    pub kl_u_cls: f64,
    pub elbo: f64,
}

impl ElboReport {
    /// `ell_reg + ell_cls − kl_x − kl_u_reg − kl_u_cls`.
    pub fn recomputed(&self) -> f64 {
        self.ell_reg + self.ell_cls - self.kl_x - self.kl_u_reg - self.kl_u_cls
    }
}

pub(crate) struct ElboTerms {
    pub ell_reg: Var,
    pub ell_cls: Var,
    pub kl_x: Var,
    pub kl_u_reg: Var,
    pub kl_u_cls: Var,
    pub total: Var,
}

impl ElboTerms {
    pub fn report(&self, tape: &Tape, iteration: usize) -> ElboReport {
        ElboReport {
            iteration,
            ell_reg: tape.scalar(self.ell_reg),
            ell_cls: tape.scalar(self.ell_cls),
            kl_x: tape.scalar(self.kl_x),
            kl_u_reg: tape.scalar(self.kl_u_reg),
            kl_u_cls: tape.scalar(self.kl_u_cls),
            elbo: tape.scalar(self.total),
        }
    }
}

/// `Â = L⁻¹ K_MB` for inducing inputs `z` against latent rows `x`.
pub(crate) fn whitened_projection(tape: &Tape, z: Var, x: Var, variance: Var, alpha: Var) -> Result<Var> {
    let m = tape.shape(z).0;
    let kmm = tape.ard_gram(z, z, variance, alpha);
    let jitter = tape.constant(Mat::identity(m, m) * INDUCING_JITTER);
    let l = tape.cholesky(tape.add(kmm, jitter), 0.0)?;
    let kmb = tape.ard_gram(z, x, variance, alpha);
    Ok(tape.solve_lower(l, kmb))
}

pub(crate) fn check_batch(model: &LdgdModel, data: &Dataset, batch: &[usize]) -> Result<()> {
    model.check_data(data)?;
    if batch.is_empty() {
        return Err(LdgdError::InvalidArgument("batch is empty".into()));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(LdgdError::InvalidArgument(format!(
            "batch index {i} out of range for {} rows",
            data.len()
        )));
    }
    Ok(())
}

fn rows(m: &Mat, idx: &[usize]) -> Mat {
    Mat::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

/// Assembles the minibatch ELBO on `tape`. `eps` holds `J·B` standard-normal
/// rows; row `s·B + i` perturbs batch row `i` in sample `s`.
pub(crate) fn build(
    tape: &Tape,
    p: &BoundParams,
    model: &LdgdModel,
    data: &Dataset,
    batch: &[usize],
    eps: &Mat,
) -> Result<ElboTerms> {
    let b = batch.len();
    let j = eps.nrows() / b;
    let n = data.len() as f64;

    let (mean, scale) = match model.config.kind {
        ModelKind::Ldgd => (
            tape.gather_rows(p.get(blocks::LATENT_MEAN), batch),
            tape.gather_rows(p.get(blocks::LATENT_SCALE), batch),
        ),
        ModelKind::FastLdgd => {
            let y = tape.constant(rows(&data.yr, batch));
            let layers: Vec<(Var, Var)> = (0..=model.config.encoder_hidden.len())
                .map(|l| (p.get(&blocks::encoder_weight(l)), p.get(&blocks::encoder_bias(l))))
                .collect();
            tape.encode(y, &layers, model.config.latent_dim)
        }
    };
    let rep: Vec<usize> = (0..j).flat_map(|_| 0..b).collect();
    let x = tape.add(
        tape.gather_rows(mean, &rep),
        tape.mul(tape.gather_rows(scale, &rep), tape.constant(eps.clone())),
    );
    let full_rows: Vec<usize> = rep.iter().map(|&i| batch[i]).collect();

    let a_reg = whitened_projection(
        tape,
        p.get(blocks::REG_Z),
        x,
        p.get(blocks::REG_VARIANCE),
        p.get(blocks::REG_ALPHA),
    )?;
    let ell_reg = tape.ell_gaussian_whitened(
        a_reg,
        p.get(blocks::REG_VARIANCE),
        p.get(blocks::REG_MEAN),
        p.get(blocks::REG_CHOL),
        &rows(&data.yr, &full_rows),
        p.get(blocks::NOISE),
    );

    let a_cls = whitened_projection(
        tape,
        p.get(blocks::CLS_Z),
        x,
        p.get(blocks::CLS_VARIANCE),
        p.get(blocks::CLS_ALPHA),
    )?;
    let moments = tape.whitened_predictive(
        a_cls,
        p.get(blocks::CLS_VARIANCE),
        p.get(blocks::CLS_MEAN),
        p.get(blocks::CLS_CHOL),
    );
    let k = model.k;
    let ell_cls = tape.ell_probit(
        &rows(&data.yc, &full_rows),
        tape.slice_cols(moments, 0, k),
        tape.slice_cols(moments, k, k),
        model.quadrature(),
    );

    let data_scale = n / (b * j) as f64;
    let ell_reg = tape.scale(ell_reg, data_scale);
    let ell_cls = tape.scale(ell_cls, data_scale);
    let kl_x = tape.scale(tape.kl_latent(mean, scale), n / b as f64);
    let kl_u_reg = tape.kl_whitened(p.get(blocks::REG_MEAN), p.get(blocks::REG_CHOL));
    let kl_u_cls = tape.kl_whitened(p.get(blocks::CLS_MEAN), p.get(blocks::CLS_CHOL));
    let total = tape.sub(
        tape.sub(tape.sub(tape.add(ell_reg, ell_cls), kl_x), kl_u_reg),
        kl_u_cls,
    );
    Ok(ElboTerms {
        ell_reg,
        ell_cls,
        kl_x,
        kl_u_reg,
        kl_u_cls,
        total,
    })
}

/// Minibatch ELBO with `J` reparameterized latent draws per batch row taken
/// from `rng`.
pub fn elbo(model: &LdgdModel, data: &Dataset, batch: &[usize], rng: &mut SeededRng) -> Result<ElboReport> {
    elbo_samples(model, data, batch, model.config.latent_samples, rng)
}

fn elbo_samples(
    model: &LdgdModel,
    data: &Dataset,
    batch: &[usize],
    samples: usize,
    rng: &mut SeededRng,
) -> Result<ElboReport> {
    check_batch(model, data, batch)?;
    let eps = rng.normal_matrix(samples * batch.len(), model.latent_dim());
    let tape = Tape::new();
    let bound = model.params.bind_with(&tape, |_| false);
    let terms = build(&tape, &bound, model, data, batch, &eps)?;
    let report = terms.report(&tape, 0);
    if !report.elbo.is_finite() {
        return Err(LdgdError::Numerical(format!("ELBO evaluated to {}", report.elbo)));
    }
    Ok(report)
}

/// Full-batch ELBO with `samples` latent draws per row from the `report`
/// substream of `seed`.
pub fn evaluate_elbo(model: &LdgdModel, data: &Dataset, samples: usize, seed: u64) -> Result<ElboReport> {
    if samples == 0 {
        return Err(LdgdError::InvalidArgument("samples must be positive".into()));
    }
    let batch: Vec<usize> = (0..data.len()).collect();
    let mut rng = SeededRng::new(seed).substream("report");
    elbo_samples(model, data, &batch, samples, &mut rng)
}
