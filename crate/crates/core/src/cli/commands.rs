use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::data::{generate_synthetic, read_epochs, write_epochs, EpochSet, MinMaxScaler, WindowConfig};
use crate::error::{invalid, Error, Result};
use crate::layer_check::run_layer_suite;
use crate::model::{Model, StgnnInput, Variant};
use crate::tensor::{run_op_suite, OpCheck, DEFAULT_STEP, F64_THRESHOLD};
use crate::training::{
    evaluate, fit_and_evaluate, mean_inference_ms, prepare, run_ablation, top_k_edge_deltas, AblationRow, EpochLog,
    Metrics, Prepared,
};

pub const CONFIG_ECHO: &str = "config.resolved.txt";
pub const MODEL_FILE: &str = "model.json";
pub const TOP_EDGES: usize = 10;
/// Window lengths and steps of the sweep grid.
pub const SWEEP_OMEGAS: [usize; 3] = [125, 250, 500];
pub const SWEEP_STEPS: [usize; 3] = [62, 125, 250];
const LATENCY_WINDOWS: usize = 50;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Creates `out` and echoes the resolved configuration into it.
fn open_out_dir(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(CONFIG_ECHO), cfg.render())
}

/// Row-per-channel comma-separated matrix.
pub fn matrix_csv(m: &[f64], n: usize) -> String {
    let mut s = String::new();
    for row in m.chunks(n) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Parses a file written by [`matrix_csv`].
pub fn parse_matrix_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|c| {
                    c.trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad matrix cell `{c}`")))
                })
                .collect()
        })
        .collect()
}

pub fn cmd_gen_data(cfg: &RunConfig, out_path: &Path) -> Result<EpochSet> {
    let epochs = generate_synthetic(&cfg.synthetic)?;
    if let Some(dir) = out_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_epochs(out_path, &epochs)?;
    let mut echo = out_path.as_os_str().to_owned();
    echo.push(".config.txt");
    write(Path::new(&echo), cfg.render())?;
    Ok(epochs)
}

/// Everything needed to rebuild the evaluation of a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub scaler: MinMaxScaler,
    pub split_hash: String,
    pub adjacency_before: Option<Vec<f64>>,
    pub channel_names: Vec<String>,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub kappa: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
    pub confusion: Vec<Vec<usize>>,
    pub variant: Variant,
    pub stgnn_input: StgnnInput,
    pub parameters: usize,
    pub parameters_with_adjacency: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub n_train_windows: usize,
    pub n_val_windows: usize,
    pub n_test_windows: usize,
    pub split_hash: String,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub report: MetricsReport,
    pub history: Vec<EpochLog>,
    pub mean_inference_ms: f64,
}

fn load_data(path: &Path) -> Result<EpochSet> {
    read_epochs(path)
}

fn train_log(history: &[EpochLog]) -> String {
    let mut s = String::from("# epoch\ttrain_loss\tval_loss\tval_accuracy\n");
    for l in history {
        let _ = writeln!(s, "{}\t{}\t{}\t{}", l.epoch, l.train_loss, l.val_loss, l.val_accuracy);
    }
    s
}

fn edges_csv(edges: &[crate::training::EdgeDelta]) -> String {
    let mut s = String::from("i,j,delta\n");
    for e in edges {
        let _ = writeln!(s, "{},{},{}", e.i, e.j, e.delta);
    }
    s
}

fn write_graph_files(
    out: &Path,
    n: usize,
    before: &Option<Vec<f64>>,
    after: &Option<Vec<f64>>,
) -> Result<()> {
    if let (Some(b), Some(a)) = (before, after) {
        write(&out.join("adjacency_before.csv"), matrix_csv(b, n))?;
        write(&out.join("adjacency_after.csv"), matrix_csv(a, n))?;
        let k = TOP_EDGES.min(n * n.saturating_sub(1) / 2);
        write(&out.join("edges_top10.csv"), edges_csv(&top_k_edge_deltas(b, a, n, k)?))?;
    }
    Ok(())
}

/// Reference, split, featurize, scale, train, evaluate, and write the run
/// artifacts into `out`. `observer` sees every epoch.
pub fn cmd_train_with(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    observer: &mut dyn FnMut(&EpochLog, &Model<f32>),
) -> Result<TrainSummary> {
    cfg.validate()?;
    let epochs = load_data(data)?;
    open_out_dir(cfg, out)?;
    let prepared = prepare(&epochs, &cfg.window, cfg.train.seed)?;
    let mc = cfg.train.model_config(epochs.n_channels, epochs.n_classes, cfg.variant);
    let model = Model::<f32>::init(mc, &prepared.adjacency, cfg.train.seed)?;
    let counts = model.param_counts();
    let res = fit_and_evaluate(model, &prepared.train, &prepared.val, &prepared.test, &cfg.train, observer)?;
    let o = &res.outcome;
    let m = &res.metrics;
    let report = MetricsReport {
        accuracy: m.accuracy,
        kappa: m.kappa,
        macro_f1: m.macro_f1,
        macro_auc: m.macro_auc,
        confusion: m.confusion.clone(),
        variant: cfg.variant,
        stgnn_input: cfg.train.stgnn_input,
        parameters: counts.total,
        parameters_with_adjacency: counts.total_with_adjacency,
        best_epoch: o.best_epoch,
        epochs_run: o.history.len(),
        n_train_windows: prepared.train.n_windows,
        n_val_windows: prepared.val.n_windows,
        n_test_windows: prepared.test.n_windows,
        split_hash: prepared.split_hash.clone(),
    };
    write_json(&out.join("metrics.json"), &report)?;
    write(&out.join("train.log"), train_log(&o.history))?;
    write_graph_files(out, epochs.n_channels, &o.adjacency_before, &o.adjacency_after)?;
    let latency = mean_inference_ms(&o.model, &prepared.test, LATENCY_WINDOWS)?;
    write_json(
        &out.join("timing.json"),
        &serde_json::json!({ "mean_single_window_inference_ms": latency }),
    )?;
    let saved = SavedModel {
        config: cfg.clone(),
        model: o.model.clone(),
        scaler: prepared.scaler.clone(),
        split_hash: prepared.split_hash.clone(),
        adjacency_before: o.adjacency_before.clone(),
        channel_names: prepared.channel_names.clone(),
    };
    write_json(&out.join(MODEL_FILE), &saved)?;
    Ok(TrainSummary {
        report,
        history: o.history.clone(),
        mean_inference_ms: latency,
    })
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainSummary> {
    cmd_train_with(cfg, data, out, &mut |_, _| {})
}

/// Re-scores the model saved in `out` on the held-out trials of `data`,
/// which must reproduce the training split.
pub fn cmd_eval(data: &Path, out: &Path) -> Result<Metrics> {
    let saved: SavedModel = read_json(&out.join(MODEL_FILE))?;
    let epochs = load_data(data)?;
    let prepared = prepare(&epochs, &saved.config.window, saved.config.train.seed)?;
    if prepared.split_hash != saved.split_hash {
        return invalid(format!(
            "{} does not reproduce the training split of {}",
            data.display(),
            out.join(MODEL_FILE).display()
        ));
    }
    let metrics = evaluate(&saved.model, &prepared.test)?;
    write_json(&out.join("eval_metrics.json"), &metrics)?;
    Ok(metrics)
}

/// One cell of the window sweep. `metrics` is `None` for window lengths
/// longer than the trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub omega: usize,
    pub step: usize,
    pub seed: u64,
    pub metrics: Option<Metrics>,
    pub best_epoch: Option<usize>,
}

impl SweepCell {
    pub fn accuracy(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.accuracy)
    }
}

fn sweep_cell(cfg: &RunConfig, epochs: &EpochSet, index: usize, window: WindowConfig) -> Result<SweepCell> {
    let seed = cfg.train.seed + index as u64;
    let mut cell = SweepCell {
        omega: window.omega,
        step: window.step,
        seed,
        metrics: None,
        best_epoch: None,
    };
    if window.omega > epochs.n_samples {
        return Ok(cell);
    }
    // The trial split stays on the base seed so every cell sees the same
    // held-out trials.
    let prepared = prepare(epochs, &window, cfg.train.seed)?;
    let train = crate::training::TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let mc = train.model_config(epochs.n_channels, epochs.n_classes, cfg.variant);
    let model = Model::<f32>::init(mc, &prepared.adjacency, seed)?;
    let res = fit_and_evaluate(model, &prepared.train, &prepared.val, &prepared.test, &train, &mut |_, _| {})?;
    cell.best_epoch = Some(res.outcome.best_epoch);
    cell.metrics = Some(res.metrics);
    Ok(cell)
}

/// Trains one model per (omega, step) cell and writes `sweep.csv`
/// (accuracy, rows omega, columns step) and `sweep.json`.
pub fn cmd_sweep(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    let epochs = load_data(data)?;
    open_out_dir(cfg, out)?;
    let grid: Vec<WindowConfig> = SWEEP_OMEGAS
        .iter()
        .flat_map(|&omega| SWEEP_STEPS.iter().map(move |&step| WindowConfig { omega, step }))
        .collect();
    let cells = grid
        .par_iter()
        .enumerate()
        .map(|(i, &w)| sweep_cell(cfg, &epochs, i, w))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("omega");
    for s in SWEEP_STEPS {
        let _ = write!(csv, ",s={s}");
    }
    csv.push('\n');
    for row in cells.chunks(SWEEP_STEPS.len()) {
        let _ = write!(csv, "{}", row[0].omega);
        for c in row {
            match c.accuracy() {
                Some(a) => {
                    let _ = write!(csv, ",{a}");
                }
                None => csv.push_str(",invalid"),
            }
        }
        csv.push('\n');
    }
    write(&out.join("sweep.csv"), csv)?;
    write_json(&out.join("sweep.json"), &cells)?;
    Ok(cells)
}

/// Trains variants A to D on one split and writes `ablation.csv` and
/// `ablation.json`.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let epochs = load_data(data)?;
    open_out_dir(cfg, out)?;
    let prepared: Prepared = prepare(&epochs, &cfg.window, cfg.train.seed)?;
    let rows = run_ablation(&prepared, &cfg.train, &Variant::ALL)?;
    let mut csv = String::from("variant,description,parameters,accuracy,kappa,macro_f1,macro_auc,best_epoch,epochs_run,split_hash\n");
    for r in &rows {
        let m = &r.metrics;
        let _ = writeln!(
            csv,
            "{},\"{}\",{},{},{},{},{},{},{},{}",
            r.variant,
            r.description,
            r.parameters,
            m.accuracy,
            m.kappa,
            m.macro_f1,
            m.macro_auc,
            r.best_epoch,
            r.epochs_run,
            r.split_hash
        );
    }
    write(&out.join("ablation.csv"), csv)?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub operations: Vec<OpCheck>,
    pub layers: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.operations.iter().chain(&self.layers).all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<22} {:>12} {:>10} {:>8}  result\n", "check", "max_rel_err", "threshold", "entries");
        for (title, rows) in [("operations", &self.operations), ("layers", &self.layers)] {
            let _ = writeln!(s, "[{title}]");
            for r in rows {
                let _ = writeln!(
                    s,
                    "{:<22} {:>12.3e} {:>10.0e} {:>8}  {}",
                    r.name,
                    r.max_rel_error,
                    r.threshold,
                    r.checked,
                    if r.passed { "pass" } else { "FAIL" }
                );
            }
        }
        s
    }
}

/// Double-precision finite-difference checks of every operation and every
/// layer of the tiny model.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckReport> {
    Ok(GradcheckReport {
        operations: run_op_suite::<f64>(cfg.train.seed, DEFAULT_STEP, F64_THRESHOLD)?,
        layers: run_layer_suite(cfg.train.seed, DEFAULT_STEP, F64_THRESHOLD)?,
    })
}

/// Writes the adjacency matrices and top edge changes of a saved model.
pub fn cmd_export_graph(model_path: &Path, out: &Path) -> Result<Vec<String>> {
    let saved: SavedModel = read_json(model_path)?;
    let after = saved.model.normalized_adjacency();
    if after.is_none() {
        return invalid(format!(
            "variant {} has no learnable adjacency to export",
            saved.model.config.variant
        ));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n = saved.model.config.n_channels;
    write_graph_files(out, n, &saved.adjacency_before, &after)?;
    let mut names = String::from("index,channel\n");
    for (i, c) in saved.channel_names.iter().enumerate() {
        let _ = writeln!(names, "{i},{c}");
    }
    write(&out.join("channels.csv"), names)?;
    Ok(["adjacency_before.csv", "adjacency_after.csv", "edges_top10.csv", "channels.csv"]
        .iter()
        .map(|s| s.to_string())
        .collect())
}

/// `<out>/model.json` unless a path is given.
pub fn model_path(data: Option<&Path>, out: &Path) -> PathBuf {
    data.map(Path::to_path_buf).unwrap_or_else(|| out.join(MODEL_FILE))
}
