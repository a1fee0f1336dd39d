use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use migraph::cli::{self, RunConfig};
use migraph::Result;

#[derive(Parser)]
#[command(name = "migraph", version, about = "Motor-imagery EEG decoding with a graph network over learnable channel adjacency")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Input epoch file (or model file for export-graph).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output file for gen-data, output directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic epoch file.
    GenData,
    /// Train one model and export metrics, logs and adjacency matrices.
    Train,
    /// Re-score a trained model on its held-out trials.
    Eval,
    /// Train over the 3 x 3 grid of window lengths and steps.
    Sweep,
    /// Train and compare the four ablation variants.
    Ablate,
    /// Finite-difference gradient checks of every operation and layer.
    Gradcheck,
    /// Export the learned adjacency of a saved model.
    ExportGraph,
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| migraph::Error::Config(format!("--{flag} (or `{flag}` in the config) is required")))
}

fn run(args: Args) -> Result<bool> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if args.data.is_some() {
        cfg.data = args.data.clone();
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    cfg.validate()?;

    match args.command {
        Command::GenData => {
            let e = cli::cmd_gen_data(&cfg, required(&cfg.out, "out")?)?;
            println!(
                "wrote {} trials x {} channels x {} samples ({} classes) to {}",
                e.n_trials,
                e.n_channels,
                e.n_samples,
                e.n_classes,
                required(&cfg.out, "out")?.display()
            );
        }
        Command::Train => {
            let out = required(&cfg.out, "out")?;
            let s = cli::cmd_train_with(&cfg, required(&cfg.data, "data")?, out, &mut |l, _| {
                eprintln!(
                    "epoch {:>3}  train {:.4}  val {:.4}  val_acc {:.4}",
                    l.epoch, l.train_loss, l.val_loss, l.val_accuracy
                )
            })?;
            let r = &s.report;
            println!(
                "accuracy {:.4}  kappa {:.4}  macro_f1 {:.4}  macro_auc {:.4}  (best epoch {} of {})",
                r.accuracy, r.kappa, r.macro_f1, r.macro_auc, r.best_epoch, r.epochs_run
            );
            println!("mean single-window inference {:.3} ms", s.mean_inference_ms);
            println!("artifacts in {}", out.display());
        }
        Command::Eval => {
            let m = cli::cmd_eval(required(&cfg.data, "data")?, required(&cfg.out, "out")?)?;
            println!(
                "accuracy {:.4}  kappa {:.4}  macro_f1 {:.4}  macro_auc {:.4}",
                m.accuracy, m.kappa, m.macro_f1, m.macro_auc
            );
        }
        Command::Sweep => {
            let cells = cli::cmd_sweep(&cfg, required(&cfg.data, "data")?, required(&cfg.out, "out")?)?;
            for c in cells {
                match c.accuracy() {
                    Some(a) => println!("omega {:>4}  step {:>4}  accuracy {a:.4}", c.omega, c.step),
                    None => println!("omega {:>4}  step {:>4}  invalid", c.omega, c.step),
                }
            }
        }
        Command::Ablate => {
            let rows = cli::cmd_ablate(&cfg, required(&cfg.data, "data")?, required(&cfg.out, "out")?)?;
            for r in rows {
                println!(
                    "{}  accuracy {:.4}  kappa {:.4}  params {:>6}  {}",
                    r.variant, r.metrics.accuracy, r.metrics.kappa, r.parameters, r.description
                );
            }
        }
        Command::Gradcheck => {
            let report = cli::cmd_gradcheck(&cfg)?;
            print!("{}", report.table());
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(false);
            }
        }
        Command::ExportGraph => {
            let out = required(&cfg.out, "out")?;
            let model = cli::model_path(cfg.data.as_deref(), out);
            for f in cli::cmd_export_graph(&model, out)? {
                println!("{}", out.join(f).display());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
