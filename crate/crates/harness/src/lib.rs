//! Experiment harness for the dyad reference models: configuration, staged
//! training with resumable checkpoints, end-to-end inference, ablation tables,
//! and metric reports, all reproducible from one root seed.

pub mod ablate;
pub mod checkpoints;
pub mod config;
pub mod error;
pub mod evalcmd;
pub mod infer;
pub mod manifest;
pub mod paths;
pub mod stages;

pub use ablate::{cmd_ablate, AblationTable};
pub use config::{load_config, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use evalcmd::{cmd_eval, cmd_report, EvalOutcome};
pub use infer::{cmd_infer, InferSummary};
pub use manifest::{RunManifest, StageRecord};
pub use paths::{resolve_out_root, RunPaths, OUT_ROOT_ENV};
pub use stages::{cmd_gen_data, cmd_train, RunContext, TRAIN_STAGES};
