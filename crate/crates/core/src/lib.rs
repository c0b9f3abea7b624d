//! Relation-aware grounding and image-text matching over language scene
//! graphs, with belief propagation, synthetic data generation and evaluation.

pub mod autodiff;
pub mod beliefcore;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod graphs;
pub mod learning;
pub mod model;
pub mod params;
pub mod propagate;
pub mod readout;
pub mod synthgen;

pub use error::{Error, Result};
pub use evalkit::MetricsReport;
pub use graphs::{BBox, LanguageSceneGraph, MatchLabel, Sample, Split, VisualScene};
pub use learning::{Checkpoint, TrainConfig};
pub use model::{ModelConfig, Rcrn};
pub use propagate::ProgramTrace;
pub use readout::{Mode, Prediction};
pub use synthgen::{GenConfig, SynthSample};
