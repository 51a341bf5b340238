//! Coupling-layer normalizing flows: masks, layers and model assembly.

pub mod batchnorm;
pub mod coupling;
pub mod mask;
pub mod model;
pub mod squeeze;

pub use batchnorm::{BatchNormLayer, BatchStats, BnMode, BN_EPS, BN_MOMENTUM};
pub use coupling::{CouplingLayer, CouplingOutput, Direction};
pub use mask::{Mask, MaskKind, Shape3};
pub use model::{
    base_log_prob, build_flow, ArchConfig, CouplingRecord, Encoded, FlowModel, Layer, Layout,
    LogProb,
};
