//! Semantic segmentation of power-line corridor point clouds: data model,
//! scene I/O, sampling, geometric features, losses, a dual-branch trainer,
//! probability fusion, geometric verification, evaluation and a synthetic
//! corridor generator.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod geoverify;
pub mod io;
pub mod losses;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod spatial;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{
    argmax, argmax_labels, to_primary_protocol, ClassId, FieldSource, LabeledCloud, Point3, Prediction,
    ProbabilityField, Provenance, Taxonomy,
};
