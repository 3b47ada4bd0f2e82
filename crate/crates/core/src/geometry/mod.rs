//! Landmark alignment and asymmetry metrics.

pub mod landmarks;
pub mod metrics;
pub mod procrustes;
pub mod similarity;
pub mod table;

pub use landmarks::{CanonicalLandmarks, LandmarkSet, Point, CANONICAL_SIZE, N_LANDMARKS};
pub use metrics::{align, compute_metrics, face_metrics, symmetry_ratio, MetricVector, N_METRICS};
pub use procrustes::procrustes_distance;
pub use similarity::{fit_similarity, SimilarityTransform};
pub use table::{RegionIndexTable, SidePair};
