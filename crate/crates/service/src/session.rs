//! Planning sessions: initial simulation, slider adjustment with inverse dose
//! mapping, forward dose simulation and the append-only history behind them.

use chrono::{DateTime, Duration, Utc};
use latentdose_core::cohort::{source_state, Phase};
use latentdose_core::doseresponse::{invert_dose, predict_alpha, simulate_alpha, InverseOptions, PostPrediction};
use latentdose_core::faceworld::Generator;
use latentdose_core::{face_metrics, AlphaVector, AxisBasis, DoseVector, Error, LandmarkSet, LatentCode, MetricVector, PatientRecord, Result};
use serde::{Deserialize, Serialize};

use crate::layout::Engine;

pub const SESSION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Ai,
    Clinician,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub timestamp: DateTime<Utc>,
    pub alpha: AlphaVector,
    pub dose: DoseVector,
    /// Distance between the model's intensities at `dose` and `alpha`.
    pub residual: f64,
    pub origin: Origin,
}

/// Current state as implied by a history.
#[derive(Debug, Clone, PartialEq)]
pub struct Current {
    pub alpha: AlphaVector,
    pub dose: DoseVector,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningSession {
    pub version: u32,
    pub session_id: String,
    pub patient_id: String,
    pub expression: String,
    pub created: DateTime<Utc>,
    pub closed: Option<DateTime<Utc>>,
    pub src_face: LandmarkSet,
    pub w_src: LatentCode,
    pub basis: AxisBasis,
    /// Metrics of `decode(w_src)`, the reference for every simulated face.
    pub m_src: MetricVector,
    pub initial_dose: DoseVector,
    pub current_alpha: AlphaVector,
    pub current_dose: DoseVector,
    pub current_residual: f64,
    pub history: Vec<HistoryEntry>,
}

/// Result of a slider commit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjustment {
    pub dose_estimate: DoseVector,
    pub residual: f64,
    pub alpha: AlphaVector,
    pub metrics: MetricVector,
    pub landmarks: LandmarkSet,
}

pub fn replay(history: &[HistoryEntry]) -> Option<Current> {
    history.last().map(|h| Current { alpha: h.alpha, dose: h.dose.clone(), residual: h.residual })
}

fn model(engine: &Engine) -> Result<&latentdose_core::GbmModel> {
    engine
        .model_a
        .as_ref()
        .ok_or_else(|| Error::InvalidData("no Approach A model is loaded".into()))
}

impl PlanningSession {
    /// Source state of the patient's first pre-phase session of `expression`
    /// (or of any expression), with the model's intensities at `dose`.
    pub fn create(
        session_id: String,
        record: &PatientRecord,
        expression: Option<&str>,
        dose: DoseVector,
        engine: &Engine,
        now: DateTime<Utc>,
    ) -> Result<Self> {
        let model = model(engine)?;
        let pre = record
            .sessions
            .iter()
            .find(|s| s.phase == Phase::Pre && expression.map_or(true, |e| s.expression == e))
            .ok_or_else(|| Error::OutOfBounds {
                field: "expression".into(),
                message: format!(
                    "patient '{}' has no pre-treatment session{}",
                    record.patient_id,
                    expression.map_or(String::new(), |e| format!(" for expression '{e}'"))
                ),
            })?;
        let state = source_state(&record.patient_id, &pre.landmarks, &engine.world, &engine.world_id, &engine.table, &engine.masks)?;
        // measured on decode(w_src) so that alpha = 0 reproduces m_src exactly
        let m_src = face_metrics(&engine.world.decode(&state.w_src)?, &engine.table)?;
        let alpha = predict_alpha(&dose, &m_src, model)?;
        let entry = HistoryEntry { timestamp: now, alpha, dose: dose.clone(), residual: 0.0, origin: Origin::Ai };
        Ok(PlanningSession {
            version: SESSION_VERSION,
            session_id,
            patient_id: record.patient_id.clone(),
            expression: pre.expression.clone(),
            created: now,
            closed: None,
            src_face: state.src_face,
            w_src: state.w_src,
            basis: state.basis,
            m_src,
            initial_dose: dose.clone(),
            current_alpha: alpha,
            current_dose: dose,
            current_residual: 0.0,
            history: vec![entry],
        })
    }

    /// Decoded face and metrics of the current intensities.
    pub fn render(&self, engine: &Engine) -> Result<PostPrediction> {
        simulate_alpha(self.current_alpha, &self.w_src, &self.basis, &engine.world, &engine.table)
    }

    /// Appends an entry, keeping timestamps strictly increasing.
    fn push(&mut self, mut entry: HistoryEntry) {
        if let Some(last) = self.history.last() {
            if entry.timestamp <= last.timestamp {
                entry.timestamp = last.timestamp + Duration::microseconds(1);
            }
        }
        self.current_alpha = entry.alpha;
        self.current_dose = entry.dose.clone();
        self.current_residual = entry.residual;
        self.history.push(entry);
    }

    /// Clinician slider commit: finds a dose for `alpha` and decodes the face.
    /// An unchanged `alpha` keeps the dose on display.
    pub fn adjust(&mut self, alpha: AlphaVector, engine: &Engine, now: DateTime<Utc>) -> Result<Adjustment> {
        let model = model(engine)?;
        let (dose, residual) = if alpha == self.current_alpha {
            (self.current_dose.clone(), self.current_residual)
        } else {
            let opts = InverseOptions {
                seeds: vec![self.current_dose.clone(), self.initial_dose.clone()],
                ..engine.inverse.clone()
            };
            let inv = invert_dose(&alpha, &self.m_src, model, &engine.bounds, &opts)?;
            (inv.dose, inv.residual)
        };
        let post = simulate_alpha(alpha, &self.w_src, &self.basis, &engine.world, &engine.table)?;
        self.push(HistoryEntry { timestamp: now, alpha, dose: dose.clone(), residual, origin: Origin::Clinician });
        Ok(Adjustment { dose_estimate: dose, residual, alpha, metrics: post.metrics, landmarks: post.landmarks })
    }

    /// Forward path: the model's intensities at `dose` and the decoded face.
    pub fn simulate(&mut self, dose: DoseVector, engine: &Engine, now: DateTime<Utc>) -> Result<PostPrediction> {
        let model = model(engine)?;
        let alpha = predict_alpha(&dose, &self.m_src, model)?;
        let post = simulate_alpha(alpha, &self.w_src, &self.basis, &engine.world, &engine.table)?;
        self.push(HistoryEntry { timestamp: now, alpha, dose, residual: 0.0, origin: Origin::Ai });
        Ok(post)
    }
}
