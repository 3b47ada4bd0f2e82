//! Dose to outcome modelling: analysis-by-synthesis calibration, the
//! generative (A) and direct (B) approaches, and inverse dose search.

mod approach;
mod calibrate;
mod inverse;

use serde::{Deserialize, Serialize};

use crate::axes::{AlphaVector, AxisBasis};
use crate::error::{Error, Result};
use crate::faceworld::LatentCode;
use crate::geometry::{LandmarkSet, MetricVector, N_METRICS};
use crate::region::Region;

pub use approach::{
    case_targets_b, features, predict_alpha, predict_delta_b, predict_post_a, predict_post_b, reconstruct_post,
    simulate_alpha, train_approach_a,
    train_approach_b, BTrainingReport, Exclusion, PostPrediction, EPS_DIV,
};
pub use calibrate::{calibrate_alpha, calibrate_cases, calibrate_alpha_with, metric_objective, Calibration, CalibrationOptions};
pub use inverse::{invert_dose, InverseOptions, InverseResult};

/// Number of treatable muscles.
pub const J_MUSCLES: usize = 22;
pub const N_FEATURES: usize = J_MUSCLES + N_METRICS;
pub const DEFAULT_DOSE_BOUND: f64 = 10.0;
pub const CASE_VERSION: u32 = 1;

const BROW: [&str; 4] = ["frontalis_medial", "frontalis_lateral", "corrugator_supercilii", "depressor_supercilii"];
const EYE: [&str; 3] = ["orbicularis_oculi_lateral", "orbicularis_oculi_superior", "orbicularis_oculi_inferior"];
const MOUTH: [&str; 4] = ["depressor_anguli_oris", "zygomaticus_major", "levator_labii_superioris", "risorius"];

/// Muscle labels and their region. Labels are placeholders; only the count
/// and the grouping carry meaning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuscleMap {
    pub labels: Vec<String>,
    pub regions: Vec<Region>,
}

impl Default for MuscleMap {
    fn default() -> Self {
        let mut labels = Vec::with_capacity(J_MUSCLES);
        let mut regions = Vec::with_capacity(J_MUSCLES);
        for r in Region::ALL {
            let names: &[&str] = match r {
                Region::BrowLeft | Region::BrowRight => &BROW,
                Region::EyeLeft | Region::EyeRight => &EYE,
                Region::MouthLeft | Region::MouthRight => &MOUTH,
            };
            let suffix = if r.side() == crate::region::Side::Left { "L" } else { "R" };
            for n in names {
                labels.push(format!("{n}_{suffix}"));
                regions.push(r);
            }
        }
        MuscleMap { labels, regions }
    }
}

impl MuscleMap {
    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != J_MUSCLES || self.regions.len() != J_MUSCLES {
            return Err(Error::shape(J_MUSCLES, self.labels.len().max(self.regions.len())));
        }
        for r in Region::ALL {
            if !self.regions.contains(&r) {
                return Err(Error::InvalidData(format!("region {r} has no muscle")));
            }
        }
        Ok(())
    }

    /// Muscle indices affiliated with `region`, ascending.
    pub fn muscles_of(&self, region: Region) -> Vec<usize> {
        (0..self.regions.len()).filter(|&j| self.regions[j] == region).collect()
    }
}

/// Per-muscle toxin doses in Units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DoseVector(pub Vec<f64>);

impl DoseVector {
    pub fn zeros() -> Self {
        DoseVector(vec![0.0; J_MUSCLES])
    }

    /// Checks length, sign and upper bounds, naming the first offending muscle.
    pub fn checked(values: Vec<f64>, bounds: &[f64]) -> Result<Self> {
        if values.len() != J_MUSCLES {
            return Err(Error::OutOfBounds {
                field: "dose".into(),
                message: format!("expected {J_MUSCLES} muscle doses, got {}", values.len()),
            });
        }
        for (j, &v) in values.iter().enumerate() {
            let bound = bounds.get(j).copied().unwrap_or(DEFAULT_DOSE_BOUND);
            if !v.is_finite() || v < 0.0 || v > bound {
                return Err(Error::OutOfBounds {
                    field: format!("dose[{j}]"),
                    message: format!("muscle {j} dose {v} is outside [0, {bound}]"),
                });
            }
        }
        Ok(DoseVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn default_bounds() -> Vec<f64> {
    vec![DEFAULT_DOSE_BOUND; J_MUSCLES]
}

/// One (patient, expression) observation pair with its source-side latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingCase {
    pub patient_id: String,
    pub expression: String,
    pub src_face: LandmarkSet,
    pub w_src: LatentCode,
    pub basis: AxisBasis,
    pub m_src: MetricVector,
    pub m_post: MetricVector,
    pub u: DoseVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_gt: Option<AlphaVector>,
}

#[derive(Serialize, Deserialize)]
struct CaseFile {
    version: u32,
    cases: Vec<TrainingCase>,
}

pub fn cases_to_json(cases: &[TrainingCase]) -> String {
    serde_json::to_string(&CaseFile { version: CASE_VERSION, cases: cases.to_vec() }).expect("cases serialize")
}

pub fn cases_from_json(text: &str) -> Result<Vec<TrainingCase>> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(CASE_VERSION as u64) {
        return Err(Error::Format(format!("case file version {version:?} is not supported")));
    }
    let file: CaseFile = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
    for (i, c) in file.cases.iter().enumerate() {
        if !c.m_src.is_valid() || !c.m_post.is_valid() {
            return Err(Error::Format(format!("case {i}: metrics are not finite and non-negative")));
        }
        if c.u.0.len() != J_MUSCLES {
            return Err(Error::Format(format!("case {i}: dose has {} entries", c.u.0.len())));
        }
    }
    Ok(file.cases)
}
