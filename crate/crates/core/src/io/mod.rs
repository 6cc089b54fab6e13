//! File formats: binary feature files, correlation exports and the
//! key/value run manifest and training report.

mod export;
mod feature_file;
mod manifest;

pub use export::{
    export_correlation, heatmap_pixel, read_correlation_csv, write_correlation_csv, write_pgm,
};
pub use feature_file::{
    decode_features, encode_features, read_feature_file, write_feature_file, MAGIC,
};
pub use manifest::{report_to_kv, steps_csv, write_train_outputs, RunManifest, TrainOutputs};
