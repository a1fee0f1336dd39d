use serde::{Deserialize, Serialize};

use super::FeatureTensor;
use crate::error::{invalid, Result};

/// Per-feature min-max scaler. Statistics pool every window and channel of
/// the fit partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub bounds: Vec<(f64, f64)>,
}

impl MinMaxScaler {
    pub fn fit(f: &FeatureTensor, windows: &[usize]) -> Result<Self> {
        if windows.is_empty() {
            return invalid("cannot fit a scaler on an empty partition");
        }
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); f.n_features];
        for &w in windows {
            for row in f.window(w).chunks(f.n_features) {
                for (b, &v) in bounds.iter_mut().zip(row) {
                    b.0 = b.0.min(v);
                    b.1 = b.1.max(v);
                }
            }
        }
        Ok(Self { bounds })
    }

    pub fn scale(&self, feature: usize, v: f64) -> f64 {
        let (lo, hi) = self.bounds[feature];
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }

    pub fn transform(&self, f: &FeatureTensor) -> Result<FeatureTensor> {
        if f.n_features != self.bounds.len() {
            return invalid(format!(
                "scaler fit on {} features, got {}",
                self.bounds.len(),
                f.n_features
            ));
        }
        let x = f
            .x
            .iter()
            .enumerate()
            .map(|(i, &v)| self.scale(i % f.n_features, v))
            .collect();
        Ok(FeatureTensor {
            x,
            scale_bounds: Some(self.bounds.clone()),
            ..f.clone()
        })
    }
}

/// Fits on `fit_on` windows and transforms the whole tensor.
pub fn minmax_scale(f: &FeatureTensor, fit_on: &[usize]) -> Result<FeatureTensor> {
    MinMaxScaler::fit(f, fit_on)?.transform(f)
}
