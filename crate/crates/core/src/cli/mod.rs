//! Configuration files and the subcommands of the `migraph` binary.

mod commands;
mod config;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_export_graph, cmd_gen_data, cmd_gradcheck, cmd_sweep, cmd_train, cmd_train_with,
    matrix_csv, model_path, parse_matrix_csv, GradcheckReport, MetricsReport, SavedModel, SweepCell, TrainSummary,
    CONFIG_ECHO, MODEL_FILE, SWEEP_OMEGAS, SWEEP_STEPS, TOP_EDGES,
};
pub use config::{RunConfig, KEYS};
