//! Experiment surface: configuration, synthetic corpus generation, and the
//! train, eval, separate and dereverb commands.

pub mod config;
pub mod data;
pub mod run;
pub mod separate;

pub use config::{DataConfig, ExperimentConfig, ModelSection, RoomKind, Voice};
pub use data::{generate, Dataset, Featurizer, ManifestEntry, Split, MANIFEST_FILE};
pub use run::{eval, load_model, train, EvalOptions, LoadedModel, MetricsRow, Stage, TrainOptions, TrainSummary};
pub use separate::{dereverb, oracle_masks, separate, MaskSource, SeparateOptions, SeparationReport};
