//! Domain types, configuration schema and parameter snapshots.

mod config;
mod snapshot;
pub(crate) mod types;

pub use config::{
    validate_config, AugmentConfig, CbmtConfig, EvalModel, FilterMode, ModelConfig, StatsLoss, StatsSource,
    StatsTiming,
};
pub use snapshot::{is_buffer_key, load_checkpoint, save_checkpoint, Checkpoint, ParamSnapshot};
pub use types::{ImageSample, ProbMap, Producer, PseudoLabelMap};
