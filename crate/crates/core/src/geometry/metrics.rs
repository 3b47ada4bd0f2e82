//! Canonical alignment and the six asymmetry metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::landmarks::{distance, CanonicalLandmarks, LandmarkSet, Point};
use crate::geometry::procrustes::procrustes_distance;
use crate::geometry::similarity::{fit_similarity, SimilarityTransform};
use crate::geometry::table::RegionIndexTable;

/// Template anchor positions in the canonical frame: left eye centre, right eye
/// centre, mouth centre.
pub const TEMPLATE_ANCHORS: [Point; 3] = [[96.0, 112.0], [160.0, 112.0], [128.0, 178.0]];

pub const N_METRICS: usize = 6;

/// The six asymmetry metrics, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricVector {
    pub eyebrows_asym: f64,
    pub eyes_asym: f64,
    pub furrow: f64,
    pub outer_eyebrow_nose: f64,
    /// Degrees.
    pub mouth_angle: f64,
    pub total_asym: f64,
}

impl MetricVector {
    pub const LABELS: [&'static str; N_METRICS] = [
        "Eyebrows Asym.",
        "Eyes Asym.",
        "Furrow",
        "Outer Eyebr.-Nose",
        "Mouth Angle",
        "Total Asym.",
    ];

    pub const KEYS: [&'static str; N_METRICS] = [
        "eyebrows_asym",
        "eyes_asym",
        "furrow",
        "outer_eyebrow_nose",
        "mouth_angle",
        "total_asym",
    ];

    pub fn to_array(&self) -> [f64; N_METRICS] {
        [
            self.eyebrows_asym,
            self.eyes_asym,
            self.furrow,
            self.outer_eyebrow_nose,
            self.mouth_angle,
            self.total_asym,
        ]
    }

    pub fn from_array(v: [f64; N_METRICS]) -> Self {
        MetricVector {
            eyebrows_asym: v[0],
            eyes_asym: v[1],
            furrow: v[2],
            outer_eyebrow_nose: v[3],
            mouth_angle: v[4],
            total_asym: v[5],
        }
    }

    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite() && *v >= 0.0)
            && self.outer_eyebrow_nose < 1.0
            && self.mouth_angle <= 90.0
    }
}

/// `1 - min(l/r, r/l)`.
pub fn symmetry_ratio(left: f64, right: f64) -> Result<f64> {
    if !(left > 0.0) || !(right > 0.0) || !left.is_finite() || !right.is_finite() {
        return Err(Error::InvalidMeasurement(format!(
            "symmetry ratio needs positive measurements, got {left} and {right}"
        )));
    }
    if left == right {
        return Ok(0.0);
    }
    Ok(1.0 - (left / right).min(right / left))
}

fn anchors(points: &[Point], table: &RegionIndexTable) -> [Point; 3] {
    let c = |idx: &[usize]| crate::geometry::landmarks::centroid(idx.iter().map(|&i| points[i]));
    let (l, r) = table.eye_contours();
    let [ml, mr] = table.mouth_corners;
    let mouth = [
        0.5 * (points[ml][0] + points[mr][0]),
        0.5 * (points[ml][1] + points[mr][1]),
    ];
    [c(l), c(r), mouth]
}

/// Maps landmarks into the canonical frame: least-squares similarity fit of the
/// eye centres and mouth centre to the template, followed by a rotation about
/// the eye midpoint that levels the eye segment.
pub fn align(landmarks: &LandmarkSet, table: &RegionIndexTable) -> Result<CanonicalLandmarks> {
    let src = anchors(landmarks.points(), table);
    let fit = fit_similarity(&src, &TEMPLATE_ANCHORS)?;
    let el = fit.apply(src[0]);
    let er = fit.apply(src[1]);
    if distance(el, er) <= 1e-12 {
        return Err(Error::DegenerateConfiguration(
            "eye centres coincide; inter-pupillary distance is zero".into(),
        ));
    }
    let tilt = (er[1] - el[1]).atan2(er[0] - el[0]);
    let mid = [0.5 * (el[0] + er[0]), 0.5 * (el[1] + er[1])];
    let transform = fit.then(&SimilarityTransform::rotation_about(-tilt, mid));
    let points: Vec<Point> = landmarks.points().iter().map(|p| transform.apply(*p)).collect();
    let [el, er, _] = anchors(&points, table);
    let ipd = distance(el, er);
    if !(ipd > 1e-12) {
        return Err(Error::DegenerateConfiguration(
            "inter-pupillary distance is zero".into(),
        ));
    }
    Ok(CanonicalLandmarks {
        points,
        ipd,
        transform,
    })
}

/// Procrustes distance between the left list and the mirrored right list,
/// both scaled by `1 / ipd`.
fn mirrored_procrustes(c: &CanonicalLandmarks, left: &[usize], right: &[usize]) -> Result<f64> {
    let s = 1.0 / c.ipd;
    let l: Vec<Point> = left.iter().map(|&i| [c.points[i][0] * s, c.points[i][1] * s]).collect();
    let r: Vec<Point> = right
        .iter()
        .map(|&i| [-c.points[i][0] * s, c.points[i][1] * s])
        .collect();
    procrustes_distance(&l, &r)
}

pub fn compute_metrics(c: &CanonicalLandmarks, table: &RegionIndexTable) -> Result<MetricVector> {
    if !(c.ipd > 0.0) {
        return Err(Error::DegenerateConfiguration("ipd must be positive".into()));
    }
    let eyebrows = mirrored_procrustes(c, &table.eyebrow.left, &table.eyebrow.right)?;
    let eyes = mirrored_procrustes(c, &table.eye.left, &table.eye.right)?;
    let furrow = mirrored_procrustes(c, &table.furrow.left, &table.furrow.right)?;
    let total = (eyebrows + eyes + furrow) / 3.0;

    let nose = c.points[table.nose_tip];
    let [bl, br] = table.outer_brow;
    let outer = symmetry_ratio(distance(c.points[bl], nose), distance(c.points[br], nose))?;

    let [ml, mr] = table.mouth_corners;
    let v = [c.points[mr][0] - c.points[ml][0], c.points[mr][1] - c.points[ml][1]];
    if v[0] == 0.0 && v[1] == 0.0 {
        return Err(Error::DegenerateConfiguration("mouth corners coincide".into()));
    }
    // angle between the corner segment and the vertical midline axis
    let to_vertical = v[0].abs().atan2(v[1].abs()).to_degrees();
    let mouth_angle = (to_vertical - 90.0).abs();

    Ok(MetricVector {
        eyebrows_asym: eyebrows,
        eyes_asym: eyes,
        furrow,
        outer_eyebrow_nose: outer,
        mouth_angle,
        total_asym: total,
    })
}

/// `compute_metrics(align(landmarks))`.
pub fn face_metrics(landmarks: &LandmarkSet, table: &RegionIndexTable) -> Result<MetricVector> {
    compute_metrics(&align(landmarks, table)?, table)
}
