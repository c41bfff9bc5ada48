//! Hierarchical class-incremental learning over precomputed feature vectors.
//!
//! A two-level classifier (coarse group, then fine species) is built from
//! one-vs-all linear SVMs. Fine-level banks grow as new species arrive in a
//! task stream, and a fixed-budget rehearsal memory of hard cases plus
//! herding-selected exemplars keeps old classes from being forgotten.
//!
//! Module map:
//! - [`feature_store`]: labeled feature records, on-disk formats, task splitting
//! - [`svm`]: dual coordinate descent linear SVM and logistic calibration
//! - [`hierarchy`]: taxonomy, coarse/fine SVM banks, image and video inference
//! - [`memory`]: hard-case selection, herding, budgeted rehearsal store
//! - [`trainer`]: the incremental protocol and the joint-training comparator
//! - [`eval`]: image/video accuracy at both levels and forgetting breakdowns
//! - [`synth`]: synthetic hierarchical datasets with track structure

pub mod config;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod hierarchy;
pub mod memory;
pub mod svm;
pub mod synth;
pub mod taxonomy;
pub mod trainer;

pub use config::TrainConfig;
pub use error::{Error, Result};
pub use eval::{evaluate, forgetting_breakdown, CohortTable, EvalReport};
pub use feature_store::{Dataset, FeatureRecord, TaskStream};
pub use hierarchy::{HierPrediction, HierarchicalModel};
pub use memory::{ExemplarList, MemoryRecord, MemoryStore, Provenance};
pub use svm::{CalibratedSvm, SvmId, SvmParams, SvmProblem};
pub use synth::SynthSpec;
pub use taxonomy::{GroupId, SpeciesId, Taxonomy};
pub use trainer::{run_joint_oracle, run_stream, TrainOutcome, TrainReport};
