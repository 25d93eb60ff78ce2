//! Classifier and generator architectures, and their snapshots.

mod classifier;
mod generator;
mod snapshot;

pub use classifier::{
    build_classifier, slice_logits, ClassifierOutput, GlobalClassifier, NormStats, ARCHITECTURES, HEAD_BIAS,
    HEAD_WEIGHT, SIGMA_FLOOR,
};
pub use generator::{build_generator, generator_layers, GeneratorNet, LEAKY_SLOPE};
pub use snapshot::{Bundle, ModelSnapshot, ModelSpec};
