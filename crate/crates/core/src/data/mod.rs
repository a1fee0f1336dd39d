//! Synthetic motor-imagery EEG, preprocessing, feature extraction, and the
//! on-disk epoch format.

mod epoch_io;
mod features;
mod pearson;
mod preprocess;
mod scale;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use epoch_io::{read_epochs, read_epochs_from, write_epochs, write_epochs_to, EPOCH_MAGIC};
pub use features::{extract_features, BANDS, N_FEATURES};
pub use pearson::pearson_adjacency;
pub use preprocess::{common_average_reference, sliding_windows, WindowConfig, Windows};
pub use scale::{minmax_scale, MinMaxScaler};
pub use split::{split_hash, stratified_split, TrialSplit};
pub use synthetic::{default_erd_channels, generate_synthetic, SyntheticSpec};

/// 10-20 labels of a 22-electrode motor-imagery montage.
pub const MONTAGE_22: [&str; 22] = [
    "Fz", "FC3", "FC1", "FCz", "FC2", "FC4", "C5", "C3", "C1", "Cz", "C2", "C4", "C6", "CP3",
    "CP1", "CPz", "CP2", "CP4", "P1", "Pz", "P2", "POz",
];

/// Channel labels used when none are stored: the 22-electrode montage when
/// the count matches, `Ch1..ChC` otherwise.
pub fn default_channel_names(n_channels: usize) -> Vec<String> {
    if n_channels == MONTAGE_22.len() {
        MONTAGE_22.iter().map(|s| s.to_string()).collect()
    } else {
        (1..=n_channels).map(|i| format!("Ch{i}")).collect()
    }
}

/// Labeled multi-channel trials, `data[trial][channel][sample]` flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSet {
    pub n_trials: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_classes: usize,
    pub fs: f32,
    pub data: Vec<f32>,
    pub labels: Vec<u32>,
    pub channel_names: Vec<String>,
}

impl EpochSet {
    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.n_trials * self.n_channels * self.n_samples {
            return invalid(format!(
                "epoch data has {} values, expected {} x {} x {}",
                self.data.len(),
                self.n_trials,
                self.n_channels,
                self.n_samples
            ));
        }
        if self.labels.len() != self.n_trials {
            return invalid(format!(
                "{} labels for {} trials",
                self.labels.len(),
                self.n_trials
            ));
        }
        if let Some((i, &l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l as usize >= self.n_classes)
        {
            return invalid(format!(
                "trial {i} has label {l} but there are {} classes",
                self.n_classes
            ));
        }
        if !(self.fs > 0.0) {
            return invalid(format!("sampling rate must be positive, got {}", self.fs));
        }
        if self.n_channels < 2 {
            return invalid(format!("need at least 2 channels, got {}", self.n_channels));
        }
        if self.channel_names.len() != self.n_channels {
            return invalid(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.n_channels
            ));
        }
        Ok(())
    }

    pub fn trial(&self, t: usize) -> &[f32] {
        let len = self.n_channels * self.n_samples;
        &self.data[t * len..(t + 1) * len]
    }

    pub fn channel(&self, t: usize, c: usize) -> &[f32] {
        let start = (t * self.n_channels + c) * self.n_samples;
        &self.data[start..start + self.n_samples]
    }

    /// New set holding only the listed trials, in the given order.
    pub fn subset(&self, trials: &[usize]) -> EpochSet {
        let mut data = Vec::with_capacity(trials.len() * self.n_channels * self.n_samples);
        for &t in trials {
            data.extend_from_slice(self.trial(t));
        }
        EpochSet {
            n_trials: trials.len(),
            data,
            labels: trials.iter().map(|&t| self.labels[t]).collect(),
            channel_names: self.channel_names.clone(),
            ..*self
        }
    }
}

/// Windowed per-channel features `x[window][channel][feature]` flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    pub n_windows: usize,
    pub n_channels: usize,
    pub n_features: usize,
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    /// Source trial of every window.
    pub trials: Vec<usize>,
    /// Per-feature (min, max) once scaled.
    pub scale_bounds: Option<Vec<(f64, f64)>>,
}

impl FeatureTensor {
    pub fn window(&self, w: usize) -> &[f64] {
        let len = self.n_channels * self.n_features;
        &self.x[w * len..(w + 1) * len]
    }

    pub fn select(&self, windows: &[usize]) -> FeatureTensor {
        let mut x = Vec::with_capacity(windows.len() * self.n_channels * self.n_features);
        for &w in windows {
            x.extend_from_slice(self.window(w));
        }
        FeatureTensor {
            n_windows: windows.len(),
            x,
            labels: windows.iter().map(|&w| self.labels[w]).collect(),
            trials: windows.iter().map(|&w| self.trials[w]).collect(),
            scale_bounds: self.scale_bounds.clone(),
            ..*self
        }
    }
}

/// CAR-free feature extraction over every window of an epoch set.
pub fn windowed_features(epochs: &EpochSet, window: &WindowConfig) -> Result<FeatureTensor> {
    use rayon::prelude::*;
    let w = sliding_windows(epochs, window)?;
    let per_window = epochs.n_channels * window.omega;
    let fs = epochs.fs as f64;
    let feats: Vec<Vec<f64>> = (0..w.index.len())
        .into_par_iter()
        .map(|i| {
            let win: Vec<f64> = w.data[i * per_window..(i + 1) * per_window]
                .iter()
                .map(|&v| v as f64)
                .collect();
            extract_features(&win, epochs.n_channels, window.omega, fs)
        })
        .collect::<Result<_>>()?;
    Ok(FeatureTensor {
        n_windows: w.index.len(),
        n_channels: epochs.n_channels,
        n_features: N_FEATURES,
        x: feats.concat(),
        labels: w.labels.iter().map(|&l| l as usize).collect(),
        trials: w.index.iter().map(|&(t, _)| t).collect(),
        scale_bounds: None,
    })
}
