//! Slice-level CT classification with patient-level majority voting.
//!
//! The pipeline keeps the central slices of each CT volume, crops a fixed
//! lung region, resizes it to a 224x224x3 model input, scores every slice
//! with a pluggable backend, thresholds the per-slice non-COVID probability
//! and takes a majority vote per patient. [`metrics`] provides accuracy,
//! class-averaged macro F1 and binomial confidence radii for evaluation.

pub mod aggregate;
pub mod archive;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io_util;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod scorer;
pub mod synth;

pub use aggregate::{classify_slice, decide_patient, sweep_thresholds, PatientDecision, Threshold};
pub use archive::TensorArchive;
pub use config::{BackendConfig, ConfigOverrides, PipelineConfig};
pub use dataset::{load_manifest, load_volume, CtVolume, Manifest, PatientLabel, SliceImage};
pub use error::{Error, Result, Stage};
pub use metrics::{accuracy, ci_radius, macro_f1, ConfusionMatrix, EvalLevel, EvalReport};
pub use pipeline::{run_pipeline, PipelineOutcome};
pub use preprocess::{
    crop_slice, preprocess_volume, select_central_slices, to_model_input, CropSpec, CropWindow,
    ModelInputTensor, SelectionPolicy,
};
pub use scorer::{
    load_scores_file, score_slices, train_baseline, BaselineConfig, BaselineModel, SliceScore,
    SliceScorer,
};
pub use synth::{generate_synthetic_dataset, SynthParams};
