//! Optimization loop, layout providers, checkpoints and experiment
//! protocols.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod provider;
pub mod run;
pub mod step;

pub use checkpoint::{load_checkpoint, read_meta, save_checkpoint, sidecar_path, CheckpointMeta};
pub use config::{config_diff, DataSource, ExperimentConfig, TrainConfig, RESUMABLE_KEYS};
pub use provider::{degrade_layout, provider_miou, DegradedProvider, FileProvider, FixedProvider, LayoutProvider, OracleProvider};
pub use step::{train_step, Batch, Real, StepOutcome, TrainState};
pub use run::{
    batch_indices, checkpoint_path, composite, evaluate_model, inpaint, load_samples, make_batch, predict, train, Inpainted, Prepared, TrainData,
    TrainOutcome, LOG_FILE,
};
pub use experiment::{
    ablation_runs, ablation_table, boundary_alignment_errors, mean_boundary_alignment, median, run_experiment, Protocol, Row, Table,
    VariantRun,
};
