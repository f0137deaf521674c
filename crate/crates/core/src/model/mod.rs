//! The toy transformer under study: configuration, parameters, forward
//! passes with FFN activation hooks, training, checkpoints and the planted
//! construction with known knowledge neurons.

mod checkpoint;
mod config;
mod params;
pub mod plant;
mod train;
mod transformer;

pub use config::{
    ActivationOverride, Architecture, ForwardResult, ModelConfig, NeuronId, OverrideMode, Position,
};
pub use params::{LayerParams, ParamMask, Params};
pub use plant::{plant_facts, PlantSpec, PlantedModel};
pub use train::{accuracy, train, train_masked, TrainConfig, TrainReport};
pub use transformer::{Probe, ToyTransformer};

pub(crate) use transformer::{argmax, LayerCache};
