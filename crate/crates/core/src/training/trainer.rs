use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::metrics::{argmax, Metrics};
use super::TrainConfig;
use crate::data::FeatureTensor;
use crate::drdcae::LossWeights;
use crate::error::{invalid, shape_err, Result};
use crate::model::Model;
use crate::params::Group;
use crate::stgnn::Phase;
use crate::tensor::{Tape, Tensor};

const EVAL_CHUNK: usize = 64;
const STREAM_SHUFFLE: u64 = 10;
const STREAM_DROPOUT: u64 = 11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters and batch-norm buffers from the best validation epoch.
    pub model: Model<f32>,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    /// Normalized adjacency at initialization and after training.
    pub adjacency_before: Option<Vec<f64>>,
    pub adjacency_after: Option<Vec<f64>>,
}

/// `[B, N, F]` input built from the given windows.
pub fn batch_tensor(f: &FeatureTensor, windows: &[usize]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(windows.len() * f.n_channels * f.n_features);
    for &w in windows {
        if w >= f.n_windows {
            return invalid(format!("window {w} out of range for {} windows", f.n_windows));
        }
        data.extend(f.window(w).iter().map(|&v| v as f32));
    }
    Tensor::new(vec![windows.len(), f.n_channels, f.n_features], data)
}

fn check_shape(model: &Model<f32>, f: &FeatureTensor) -> Result<()> {
    let c = &model.config;
    if f.n_channels != c.n_channels || f.n_features != c.n_features {
        return shape_err(format!(
            "features are {} channels x {} features, model expects {} x {}",
            f.n_channels, f.n_features, c.n_channels, c.n_features
        ));
    }
    if let Some(&l) = f.labels.iter().find(|&&l| l >= c.n_classes) {
        return invalid(format!("label {l} out of range for {} classes", c.n_classes));
    }
    Ok(())
}

/// Mean evaluation-mode loss and class probabilities over a feature set.
#[derive(Debug, Clone)]
pub struct Scored {
    pub loss: f64,
    pub proba: Vec<Vec<f64>>,
}

impl Scored {
    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self.proba.iter().zip(labels).filter(|(p, &l)| argmax(p) == l).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Evaluation-mode forward over `f` in parallel chunks.
pub fn score(model: &Model<f32>, f: &FeatureTensor, w: &LossWeights) -> Result<Scored> {
    check_shape(model, f)?;
    if f.n_windows == 0 {
        return invalid("cannot score an empty feature set");
    }
    let idx: Vec<usize> = (0..f.n_windows).collect();
    let parts = idx
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let x = tape.constant(batch_tensor(f, chunk)?);
            let mut bn = model.bn.clone();
            let out = model.forward(&mut tape, &p, x, &mut bn, &mut Phase::Eval)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| f.labels[i]).collect();
            let loss = model.loss(&mut tape, &out, &labels, w)?;
            let logits = tape.value(out.logits);
            let k = model.config.n_classes;
            let proba = logits.data().chunks(k).map(softmax).collect();
            Ok((tape.value(loss).item() as f64 * chunk.len() as f64, proba))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut proba = Vec::with_capacity(f.n_windows);
    for (l, p) in parts {
        loss += l;
        proba.extend(p);
    }
    Ok(Scored {
        loss: loss / f.n_windows as f64,
        proba,
    })
}

fn softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn predict_proba(model: &Model<f32>, f: &FeatureTensor) -> Result<Vec<Vec<f64>>> {
    Ok(score(model, f, &LossWeights::default())?.proba)
}

pub fn evaluate(model: &Model<f32>, f: &FeatureTensor) -> Result<Metrics> {
    let proba = predict_proba(model, f)?;
    Metrics::from_scores(&f.labels, &proba, model.config.n_classes)
}

/// Joint mini-batch training with per-group Adam rates and early stopping
/// on validation loss. `observer` sees every epoch's log and the current
/// parameters.
pub fn train(
    mut model: Model<f32>,
    train_set: &FeatureTensor,
    val_set: &FeatureTensor,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLog, &Model<f32>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_shape(&model, train_set)?;
    check_shape(&model, val_set)?;
    if train_set.n_windows < 2 {
        return invalid(format!(
            "training needs at least 2 windows, got {}",
            train_set.n_windows
        ));
    }
    if cfg.batch_st > train_set.n_windows {
        return invalid(format!(
            "batch_st={} exceeds the {} training windows",
            cfg.batch_st, train_set.n_windows
        ));
    }
    if val_set.n_windows == 0 {
        return invalid("validation set is empty");
    }
    let weights = cfg.loss_weights();
    let adjacency_before = model.normalized_adjacency();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_SHUFFLE);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(STREAM_DROPOUT);
    let mut adam = AdamState::new(&model.store);
    let lr = |g: Group| match g {
        Group::Ae => cfg.lr_ae,
        Group::St => cfg.lr_st,
    };

    let mut order: Vec<usize> = (0..train_set.n_windows).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    let mut waited = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_st) {
            // Batch normalization needs two rows.
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let x = tape.constant(batch_tensor(train_set, chunk)?);
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let mut bn = model.bn.clone();
            let out = model.forward(&mut tape, &p, x, &mut bn, &mut Phase::Train(Some(&mut dropout_rng)))?;
            let loss = model.loss(&mut tape, &out, &labels, &weights)?;
            let loss_value = tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return invalid(format!("training loss diverged at epoch {epoch}"));
            }
            let grads = tape.backward(loss)?;
            let g: Vec<Option<Vec<f32>>> = p.0.iter().map(|&v| grads.get(v).map(<[f32]>::to_vec)).collect();
            adam_step(&mut model.store, &g, &mut adam, lr)?;
            if cfg.lr_st > 0.0 {
                model.bn = bn;
            }
            loss_sum += loss_value * chunk.len() as f64;
            seen += chunk.len();
        }
        let val = score(&model, val_set, &weights)?;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss: val.loss,
            val_accuracy: val.accuracy(&val_set.labels),
        };
        observer(&log, &model);
        history.push(log);
        match &best {
            Some((b, _, _)) if val.loss >= *b => {
                waited += 1;
                if waited >= cfg.patience {
                    break;
                }
            }
            _ => {
                best = Some((val.loss, epoch, model.clone()));
                waited = 0;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch runs");
    let adjacency_after = model.normalized_adjacency();
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        adjacency_before,
        adjacency_after,
    })
}

/// Mean wall-clock milliseconds of an evaluation-mode forward pass on one
/// window, over the first `n` windows of `f`.
pub fn mean_inference_ms(model: &Model<f32>, f: &FeatureTensor, n: usize) -> Result<f64> {
    check_shape(model, f)?;
    let n = n.min(f.n_windows);
    if n == 0 {
        return invalid("no windows to time");
    }
    let start = std::time::Instant::now();
    for w in 0..n {
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let x = tape.constant(batch_tensor(f, &[w])?);
        let mut bn = model.bn.clone();
        let out = model.forward(&mut tape, &p, x, &mut bn, &mut Phase::Eval)?;
        std::hint::black_box(tape.value(out.logits));
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / n as f64)
}

/// A trained model and its held-out metrics.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub metrics: Metrics,
}

pub fn fit_and_evaluate(
    model: Model<f32>,
    train_set: &FeatureTensor,
    val_set: &FeatureTensor,
    test_set: &FeatureTensor,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochLog, &Model<f32>),
) -> Result<RunResult> {
    let outcome = train(model, train_set, val_set, cfg, observer)?;
    let metrics = evaluate(&outcome.model, test_set)?;
    Ok(RunResult { outcome, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};
    use rand::Rng;

    fn toy(n: usize, seed: u64, cfg: &ModelConfig) -> FeatureTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, f) = (cfg.n_channels, cfg.n_features);
        let labels: Vec<usize> = (0..n).map(|i| i % cfg.n_classes).collect();
        let mut x = Vec::new();
        for &l in &labels {
            for ch in 0..c {
                for j in 0..f {
                    let signal = if ch == l % c && j < 2 { 0.6 } else { 0.2 };
                    x.push(signal + rng.random_range(0.0..0.2));
                }
            }
        }
        FeatureTensor {
            n_windows: n,
            n_channels: c,
            n_features: f,
            x,
            trials: (0..n).collect(),
            labels,
            scale_bounds: None,
        }
    }

    fn tiny_model(variant: Variant) -> Model<f32> {
        let cfg = ModelConfig {
            variant,
            ..ModelConfig::tiny()
        };
        let c = cfg.n_channels;
        let adj: Vec<f64> = (0..c * c).map(|i| if i % (c + 1) == 0 { 1.0 } else { 0.3 }).collect();
        Model::init(cfg, &adj, 5).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            lr_ae: 1e-2,
            lr_st: 1e-2,
            batch_st: 8,
            max_epochs: 30,
            patience: 30,
            dropout: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_rates_stop_after_patience_plus_one_epochs() {
        let model = tiny_model(Variant::A);
        let tr = toy(24, 1, &model.config);
        let va = toy(12, 2, &model.config);
        let cfg = TrainConfig {
            lr_ae: 0.0,
            lr_st: 0.0,
            patience: 1,
            ..quick()
        };
        let before = model.clone();
        let out = train(model, &tr, &va, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.best_epoch, 1);
        assert_eq!(out.model.store, before.store);
        assert_eq!(out.model.bn, before.bn);
        assert_eq!(out.adjacency_before, out.adjacency_after);
    }

    #[test]
    fn training_learns_a_separable_toy_problem() {
        for variant in Variant::ALL {
            let model = tiny_model(variant);
            let tr = toy(96, 1, &model.config);
            let va = toy(24, 2, &model.config);
            let te = toy(48, 3, &model.config);
            let mut epochs = 0;
            let res = fit_and_evaluate(model, &tr, &va, &te, &quick(), &mut |_, _| epochs += 1).unwrap();
            assert!(epochs >= 1);
            let first = &res.outcome.history[0];
            let last = res.outcome.history.last().unwrap();
            assert!(last.train_loss < first.train_loss, "{variant}: {first:?} -> {last:?}");
            assert!(res.metrics.accuracy > 0.8, "{variant}: {:?}", res.metrics);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let model = tiny_model(Variant::A);
            let tr = toy(40, 1, &model.config);
            let va = toy(12, 2, &model.config);
            let cfg = TrainConfig {
                max_epochs: 4,
                dropout: 0.3,
                ..quick()
            };
            train(model, &tr, &va, &cfg, &mut |_, _| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn adjacency_moves_when_the_graph_branch_trains() {
        let model = tiny_model(Variant::A);
        let tr = toy(32, 1, &model.config);
        let va = toy(12, 2, &model.config);
        let cfg = TrainConfig {
            max_epochs: 3,
            ..quick()
        };
        let out = train(model, &tr, &va, &cfg, &mut |_, _| {}).unwrap();
        let (a, b) = (out.adjacency_before.unwrap(), out.adjacency_after.unwrap());
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
        let n = 4;
        for i in 0..n {
            assert_eq!(b[i * n + i], 0.0);
            let row: f64 = b[i * n..(i + 1) * n].iter().sum();
            assert!((row - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mismatched_features_are_rejected() {
        let model = tiny_model(Variant::A);
        let mut bad = toy(8, 1, &model.config);
        bad.labels[0] = 7;
        assert!(evaluate(&model, &bad).is_err());
        let ok = toy(8, 1, &model.config);
        assert!(train(model.clone(), &ok.select(&[0]), &ok, &quick(), &mut |_, _| {}).is_err());
        let e = train(model, &ok.select(&[0, 1, 2]), &ok, &quick(), &mut |_, _| {}).unwrap_err();
        assert!(e.to_string().contains("batch_st=8"), "{e}");
    }
}
