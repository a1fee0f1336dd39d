//! Optimization, evaluation and the end-to-end experiment drivers.

mod ablation;
mod adam;
mod edges;
mod metrics;
mod pipeline;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::drdcae::LossWeights;
use crate::error::{invalid, Result};
use crate::model::{ModelConfig, StgnnInput, Variant};

pub use ablation::{run_ablation, AblationRow};
pub use adam::{adam_step, AdamState, ADAM_EPS, BETA1, BETA2};
pub use edges::{top_k_edge_deltas, EdgeDelta};
pub use metrics::{
    accuracy, argmax, binary_auc, cohen_kappa, confusion_matrix, macro_auc, macro_f1, Metrics,
};
pub use pipeline::{prepare, Prepared, TEST_FRACTION, VAL_FRACTION};
pub use trainer::{
    batch_tensor, evaluate, fit_and_evaluate, mean_inference_ms, predict_proba, score, train, EpochLog, RunResult, Scored,
    TrainOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_ae: f64,
    /// Accepted for configuration compatibility; both branches step on the
    /// same `batch_st` mini-batches.
    pub batch_ae: usize,
    pub lr_st: f64,
    pub batch_st: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub stgnn_input: StgnnInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_ae: 1e-3,
            batch_ae: 32,
            lr_st: 2e-4,
            batch_st: 16,
            lambda: 0.3,
            gamma: 1.0,
            max_epochs: 100,
            patience: 10,
            dropout: 0.3,
            seed: 42,
            stgnn_input: StgnnInput::Features,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lr_ae", self.lr_ae), ("lr_st", self.lr_st)] {
            if !(v.is_finite() && v >= 0.0) {
                return invalid(format!("{name} must be a finite non-negative rate, got {v}"));
            }
        }
        if self.batch_st < 2 || self.batch_ae < 2 {
            return invalid(format!(
                "batch sizes must be at least 2 for batch normalization, got batch_ae={} batch_st={}",
                self.batch_ae, self.batch_st
            ));
        }
        if self.max_epochs == 0 {
            return invalid("max_epochs must be positive");
        }
        if self.patience == 0 {
            return invalid("patience must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return invalid(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
        }
    }

    /// Default architecture for the given data shape and variant.
    pub fn model_config(&self, n_channels: usize, n_classes: usize, variant: Variant) -> ModelConfig {
        ModelConfig {
            n_channels,
            n_classes,
            dropout: self.dropout,
            variant,
            stgnn_input: self.stgnn_input,
            ..ModelConfig::default()
        }
    }
}
