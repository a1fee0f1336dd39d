use serde::{Deserialize, Serialize};

use crate::data::{
    common_average_reference, pearson_adjacency, split_hash, stratified_split, windowed_features, EpochSet,
    FeatureTensor, MinMaxScaler, TrialSplit, WindowConfig,
};
use crate::error::{invalid, Result};

pub const TEST_FRACTION: f64 = 0.2;
/// Share of the training trials held out for early stopping.
pub const VAL_FRACTION: f64 = 0.2;
const VAL_SEED_OFFSET: u64 = 0x5eed;

/// Scaled features of every partition plus what was fit on training data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prepared {
    pub train: FeatureTensor,
    pub val: FeatureTensor,
    pub test: FeatureTensor,
    /// Pearson correlation of the referenced training trials, row-major.
    pub adjacency: Vec<f64>,
    pub scaler: MinMaxScaler,
    /// Trial-level split; `split.train` includes the validation trials.
    pub split: TrialSplit,
    pub val_trials: Vec<usize>,
    pub split_hash: String,
    pub n_classes: usize,
    pub channel_names: Vec<String>,
}

fn windows_of(f: &FeatureTensor, trials: &[usize]) -> Vec<usize> {
    (0..f.n_windows)
        .filter(|&w| trials.binary_search(&f.trials[w]).is_ok())
        .collect()
}

/// Common average reference, an 80/20 stratified trial split, a further
/// validation split of the training trials, windowed features and a
/// min-max scaler fit on the remaining training windows.
pub fn prepare(epochs: &EpochSet, window: &WindowConfig, seed: u64) -> Result<Prepared> {
    epochs.validate()?;
    window.validate()?;
    let referenced = common_average_reference(epochs)?;
    let labels: Vec<usize> = epochs.labels.iter().map(|&l| l as usize).collect();
    let split = stratified_split(&labels, epochs.n_classes, TEST_FRACTION, seed)?;
    let train_labels: Vec<usize> = split.train.iter().map(|&t| labels[t]).collect();
    let inner = stratified_split(&train_labels, epochs.n_classes, VAL_FRACTION, seed ^ VAL_SEED_OFFSET)?;
    let fit_trials: Vec<usize> = inner.train.iter().map(|&i| split.train[i]).collect();
    let val_trials: Vec<usize> = inner.test.iter().map(|&i| split.train[i]).collect();
    for (name, part) in [("training", &fit_trials), ("validation", &val_trials), ("test", &split.test)] {
        if part.is_empty() {
            return invalid(format!(
                "{} trials leave the {name} partition empty",
                epochs.n_trials
            ));
        }
    }

    let features = windowed_features(&referenced, window)?;
    let fit_windows = windows_of(&features, &fit_trials);
    let scaler = MinMaxScaler::fit(&features, &fit_windows)?;
    let scaled = scaler.transform(&features)?;
    let adjacency = pearson_adjacency(&referenced.subset(&fit_trials));
    Ok(Prepared {
        train: scaled.select(&fit_windows),
        val: scaled.select(&windows_of(&scaled, &val_trials)),
        test: scaled.select(&windows_of(&scaled, &split.test)),
        adjacency,
        scaler,
        split_hash: split_hash(&split),
        split,
        val_trials,
        n_classes: epochs.n_classes,
        channel_names: epochs.channel_names.clone(),
    })
}
