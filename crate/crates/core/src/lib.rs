//! Localized latent editing and dose-response planning over facial landmark
//! asymmetry.
//!
//! The crate is organised bottom-up: [`geometry`] measures faces, [`faceworld`]
//! supplies the generator/encoder pair and its synthetic implementation,
//! [`axes`] discovers per-region latent directions, [`gbm`] and
//! [`doseresponse`] learn dose to outcome maps, [`cohort`] produces and ingests
//! patient records and [`evaluation`] scores the two modelling approaches.

pub mod axes;
pub mod cohort;
pub mod doseresponse;
pub mod error;
pub mod evaluation;
pub mod faceworld;
pub mod gbm;
pub mod geometry;
pub mod region;
#[cfg(test)]
mod testutil;

pub use axes::{combine, AlphaVector, AxisBasis, RoiMask};
pub use cohort::{CohortConfig, PatientRecord, Phase, SealedTruth, Session};
pub use doseresponse::{DoseVector, MuscleMap, TrainingCase};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, MetricScore};
pub use gbm::{GbmConfig, GbmModel};
pub use geometry::{
    align, compute_metrics, face_metrics, fit_similarity, procrustes_distance, symmetry_ratio,
    CanonicalLandmarks, LandmarkSet, MetricVector, Point, RegionIndexTable, SidePair,
    SimilarityTransform, CANONICAL_SIZE, N_LANDMARKS, N_METRICS,
};
pub use faceworld::{Generator, LatentCode, SyntheticWorld, WorldConfig};
pub use region::{Region, Side, K_REGIONS};
