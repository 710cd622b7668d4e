//! Fan-out evaluation of a frozen bundle.
//!
//! Predictions are per-row functions of the bundle and `h`, so splitting the
//! target set into chunks leaves every label unchanged.

use osda_core::data::OsdaTask;
use osda_core::metrics::{compute_metrics, Prediction};
use osda_core::nn::ModelBundle;
use osda_core::trainer::{eval_threshold, predict, DecisionRule, Evaluation, TrainConfig};
use osda_core::{Error, Result, Tensor};
use rayon::prelude::*;

/// [`predict`] over row chunks of at most `chunk` rows, in parallel.
pub fn par_predict(bundle: &ModelBundle, x: &Tensor, h: f64, rule: DecisionRule, chunk: usize) -> Result<Vec<Prediction>> {
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be >= 1".into()));
    }
    let rows: Vec<usize> = (0..x.rows()).collect();
    let parts: Vec<Vec<Prediction>> = rows
        .par_chunks(chunk)
        .map(|idx| predict(bundle, &x.select_rows(idx), h, rule))
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Parallel counterpart of [`osda_core::trainer::evaluate_with_rule`].
pub fn par_evaluate(
    task: &OsdaTask,
    bundle: &ModelBundle,
    cfg: &TrainConfig,
    manual_h: Option<f64>,
    rule: DecisionRule,
    chunk: usize,
) -> Result<Evaluation> {
    if !task.has_target_labels() {
        return Err(Error::NoLabeledTargets);
    }
    if bundle.n_common != task.n_common || bundle.input_dim() != task.dim() {
        return Err(Error::Shape {
            op: "evaluate",
            detail: format!(
                "model has {} common classes over {} inputs, task has {} over {}",
                bundle.n_common,
                bundle.input_dim(),
                task.n_common,
                task.dim()
            ),
        });
    }
    let h = match manual_h {
        Some(h) => h,
        None => eval_threshold(bundle, &task.target_x, cfg)?,
    };
    let preds = par_predict(bundle, &task.target_x, h, rule, chunk)?;
    let metrics = compute_metrics(&task.target_y, &preds, task.n_common)?;
    Ok(Evaluation { metrics, h, manual_h: manual_h.is_some() })
}
