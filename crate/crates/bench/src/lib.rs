//! Shared fixtures for the criterion benches.

use hcil::feature_store::Dataset;
use hcil::synth::{self, SynthSpec};

/// Training half of the `paper_shape` preset for a given seed.
pub fn paper_shape_train(seed: u64) -> Dataset {
    let (ds, _) = synth::generate(&SynthSpec::paper_shape(seed)).expect("preset is valid");
    synth::split_tracks(&ds, 4).0
}
