use serde::{Deserialize, Serialize};

use super::{DoseVector, TrainingCase, J_MUSCLES, N_FEATURES};
use crate::axes::{combine, AlphaVector, AxisBasis};
use crate::error::{Error, Result};
use crate::faceworld::{Generator, LatentCode};
use crate::gbm::{train, train_traced, GbmConfig, GbmModel};
use crate::geometry::{face_metrics, LandmarkSet, MetricVector, RegionIndexTable, N_METRICS};
use crate::region::K_REGIONS;

/// Source metric components below this are excluded from relative deltas.
pub const EPS_DIV: f64 = 1e-6;

/// Feature vector `u_1..u_22, m_1..m_6`.
pub fn features(u: &DoseVector, m_src: &MetricVector) -> Result<Vec<f64>> {
    if u.0.len() != J_MUSCLES {
        return Err(Error::shape(J_MUSCLES, u.0.len()));
    }
    let mut x = Vec::with_capacity(N_FEATURES);
    x.extend_from_slice(&u.0);
    x.extend_from_slice(&m_src.to_array());
    Ok(x)
}

/// Fits `(u, m_src) -> alpha_gt`.
pub fn train_approach_a(cases: &[TrainingCase], cfg: &GbmConfig) -> Result<GbmModel> {
    if cases.len() < 2 {
        return Err(Error::InsufficientData(format!("approach A needs at least 2 cases, got {}", cases.len())));
    }
    let mut x = Vec::with_capacity(cases.len());
    let mut y = Vec::with_capacity(cases.len());
    for (i, c) in cases.iter().enumerate() {
        let alpha = c.alpha_gt.ok_or_else(|| {
            Error::NotCalibrated(format!("case {i} ({} / {}) has no alpha_gt", c.patient_id, c.expression))
        })?;
        x.push(features(&c.u, &c.m_src)?);
        y.push(alpha.0.to_vec());
    }
    train(&x, &y, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostPrediction {
    pub alpha: AlphaVector,
    pub metrics: MetricVector,
    pub landmarks: LandmarkSet,
}

/// Clamped model intensities for a dose.
pub fn predict_alpha(u: &DoseVector, m_src: &MetricVector, model: &GbmModel) -> Result<AlphaVector> {
    let raw = model.predict(&features(u, m_src)?)?;
    let arr: [f64; K_REGIONS] = raw
        .try_into()
        .map_err(|v: Vec<f64>| Error::shape(K_REGIONS, v.len()))?;
    Ok(AlphaVector::clamped(arr))
}

/// Approach A inference: predicted intensities, the decoded face and its metrics.
#[allow(clippy::too_many_arguments)]
pub fn predict_post_a<G: Generator + ?Sized>(
    u: &DoseVector,
    m_src: &MetricVector,
    w_src: &LatentCode,
    basis: &AxisBasis,
    model: &GbmModel,
    world: &G,
    table: &RegionIndexTable,
) -> Result<PostPrediction> {
    let alpha = predict_alpha(u, m_src, model)?;
    simulate_alpha(alpha, w_src, basis, world, table)
}

/// Decodes `combine(w_src, basis, alpha)` and measures it.
pub fn simulate_alpha<G: Generator + ?Sized>(
    alpha: AlphaVector,
    w_src: &LatentCode,
    basis: &AxisBasis,
    world: &G,
    table: &RegionIndexTable,
) -> Result<PostPrediction> {
    let landmarks = world.decode(&combine(w_src, basis, &alpha.0)?)?;
    let metrics = face_metrics(&landmarks, table)?;
    Ok(PostPrediction { alpha, metrics, landmarks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub case: usize,
    pub patient_id: String,
    pub metric: String,
}

/// Approach B training report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BTrainingReport {
    pub excluded: Vec<Exclusion>,
    pub samples_per_target: Vec<usize>,
    /// Per-target training MSE before and after every stage.
    pub mse: Vec<Vec<f64>>,
}

/// Relative deltas `(m_post - m_src) / m_src`; `None` where `m_src < EPS_DIV`.
pub fn case_targets_b(m_src: &MetricVector, m_post: &MetricVector) -> [Option<f64>; N_METRICS] {
    let (s, p) = (m_src.to_array(), m_post.to_array());
    std::array::from_fn(|k| if s[k] < EPS_DIV { None } else { Some((p[k] - s[k]) / s[k]) })
}

/// Fits `(u, m_src) -> delta m`, one ensemble per metric over the cases whose
/// source component is large enough to divide by.
pub fn train_approach_b(cases: &[TrainingCase], cfg: &GbmConfig) -> Result<(GbmModel, BTrainingReport)> {
    if cases.len() < 2 {
        return Err(Error::InsufficientData(format!("approach B needs at least 2 cases, got {}", cases.len())));
    }
    let feats: Vec<Vec<f64>> = cases.iter().map(|c| features(&c.u, &c.m_src)).collect::<Result<_>>()?;
    let targets: Vec<[Option<f64>; N_METRICS]> = cases.iter().map(|c| case_targets_b(&c.m_src, &c.m_post)).collect();
    let mut report = BTrainingReport { excluded: Vec::new(), samples_per_target: Vec::new(), mse: Vec::new() };
    let mut model: Option<GbmModel> = None;
    for k in 0..N_METRICS {
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (i, t) in targets.iter().enumerate() {
            match t[k] {
                Some(v) => {
                    x.push(feats[i].clone());
                    y.push(vec![v]);
                }
                None => report.excluded.push(Exclusion {
                    case: i,
                    patient_id: cases[i].patient_id.clone(),
                    metric: MetricVector::KEYS[k].to_string(),
                }),
            }
        }
        if x.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "metric {} has {} usable cases after excluding near-zero sources",
                MetricVector::KEYS[k],
                x.len()
            )));
        }
        let cfg_k = GbmConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
        let (m, trace) = train_traced(&x, &y, &cfg_k)?;
        report.samples_per_target.push(x.len());
        report.mse.extend(trace.mse);
        model = Some(match model {
            None => GbmModel { config: cfg.clone(), ..m },
            Some(mut acc) => {
                acc.n_targets += 1;
                acc.base_prediction.extend(m.base_prediction);
                acc.trees.extend(m.trees);
                acc
            }
        });
    }
    Ok((model.expect("six targets trained"), report))
}

pub fn predict_delta_b(u: &DoseVector, m_src: &MetricVector, model: &GbmModel) -> Result<[f64; N_METRICS]> {
    let raw = model.predict(&features(u, m_src)?)?;
    raw.try_into().map_err(|v: Vec<f64>| Error::shape(N_METRICS, v.len()))
}

/// `m_src * (1 + delta)` componentwise.
pub fn reconstruct_post(m_src: &MetricVector, delta: &[f64; N_METRICS]) -> MetricVector {
    let s = m_src.to_array();
    MetricVector::from_array(std::array::from_fn(|k| s[k] * (1.0 + delta[k])))
}

pub fn predict_post_b(u: &DoseVector, m_src: &MetricVector, model: &GbmModel) -> Result<MetricVector> {
    Ok(reconstruct_post(m_src, &predict_delta_b(u, m_src, model)?))
}
