//! Conditional sample consensus: learned, state-conditioned sampling for
//! robust multi-model fitting of lines, vanishing points and homographies.

pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod network;
pub mod refine;
pub mod sampler;
pub mod scoring;
pub mod training;

pub use data::Scene;
pub use error::{ConsacError, Result};
pub use eval::CostMatrix;
pub use geometry::{Homography, ModelInstance, ModelKind, Observation};
pub use network::{Architecture, Network, NetworkSampler};
pub use refine::RefineConfig;
pub use sampler::{MultiHypothesis, SamplerConfig, WeightSource};
pub use scoring::{ScoringParams, StateVector};
pub use training::{LossKind, TrainConfig};
