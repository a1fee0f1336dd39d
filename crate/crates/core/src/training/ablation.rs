use serde::{Deserialize, Serialize};

use super::pipeline::Prepared;
use super::trainer::fit_and_evaluate;
use super::{Metrics, TrainConfig};
use crate::error::Result;
use crate::model::{Model, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub description: String,
    pub parameters: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub metrics: Metrics,
    pub split_hash: String,
}

/// Trains every variant on the same split and seed and scores it on the
/// held-out trials.
pub fn run_ablation(data: &Prepared, cfg: &TrainConfig, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let mc = cfg.model_config(data.train.n_channels, data.n_classes, variant);
            let model = Model::<f32>::init(mc, &data.adjacency, cfg.seed)?;
            let parameters = model.param_counts().total_with_adjacency;
            let res = fit_and_evaluate(model, &data.train, &data.val, &data.test, cfg, &mut |_, _| {})?;
            Ok(AblationRow {
                variant,
                description: variant.description().to_string(),
                parameters,
                best_epoch: res.outcome.best_epoch,
                epochs_run: res.outcome.history.len(),
                metrics: res.metrics,
                split_hash: data.split_hash.clone(),
            })
        })
        .collect()
}
