//! Coupling-layer normalizing flows with exact likelihoods, plus the
//! tooling to probe why such flows score out-of-distribution inputs highly:
//! alternative mask families, bottlenecked st-networks, a contrastive
//! objective, likelihood-based OOD metrics and latent/coupling inspection.

pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod inspect;
pub mod numerics;
pub mod ood;
pub mod stnet;
pub mod training;

pub use error::{Error, Result};
