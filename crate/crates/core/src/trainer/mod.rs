//! Factual-recall training of small transformers with and without memory layers.

pub mod ablate;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod train;

pub use ablate::{ablate, apply_axis, AblationRow, Axis, ABLATION_HEADER};
pub use config::{centered_placement, ModelConfig, TrainConfig};
pub use data::{gen_facts, Fact, FactDataset, FACT_LEN};
pub use model::{build_model, Model, ParamCounts};
pub use train::{train, train_paired, Checkpoint, MetricsLog, MetricsRecord, PairedRun, Trainer};
