//! Unsupervised cross-modality label association over two-modality embedding sets.
//!
//! The crate implements the full pipeline: synthetic two-modality data
//! generation with k-means pseudo-label initialization, entropy-regularized
//! optimal-transport label assignment in both cross-modality directions,
//! neighbor-consistency label scoring and refinement, the loss stack for a
//! two-branch collaborative trainer (shared encoder, two classifier heads),
//! and cross-modality retrieval evaluation (CMC / mAP / mINP).
//!
//! All numeric modules are generic over the scalar type via [`Scalar`]
//! (`f32` or `f64`); the type aliases at the crate root pin the working
//! precision to `f64`, which is what the trainer, CLI, and file formats use.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod neighbor;
pub mod scalar;
pub mod seed;
pub mod simplex;
pub mod trainer;
pub mod transport;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working precision for the trainer, CLI, and all file formats.
pub type Real = f64;

pub type ModalityDataset = data::ModalityDataset<Real>;
pub type SynthConfig = data::SynthConfig<Real>;
pub type PseudoLabeling = data::PseudoLabeling<Real>;
pub type TransportConfig = transport::TransportConfig<Real>;
pub type TransportPlan = transport::TransportPlan<Real>;
pub type DualAssignment = transport::DualAssignment<Real>;
pub type NeighborIndex = neighbor::NeighborIndex<Real>;
pub type NclrConfig = neighbor::NclrConfig<Real>;
pub type CleanNoisyPartition = neighbor::CleanNoisyPartition<Real>;
pub type ScoreHistogram = neighbor::ScoreHistogram<Real>;
pub type LossWeights = losses::LossWeights<Real>;
pub type ModelParams = model::ModelParams<Real>;
pub type SgdConfig = model::SgdConfig<Real>;
pub type TrainConfig = trainer::TrainConfig<Real>;
pub type EpochState = trainer::EpochState<Real>;
pub type EpochRecord = trainer::EpochRecord<Real>;
pub type RetrievalReport = eval::RetrievalReport<Real>;
