//! Generator/encoder abstraction over landmark space and its synthetic,
//! affine implementation.

mod base_face;
mod world;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{align, LandmarkSet, Point, RegionIndexTable};
use crate::region::Side;

pub use base_face::{bounding_rect, synthetic_base_face, ROI_DILATION};
pub use world::{RefineOptions, Refinement, SyntheticWorld, WorldConfig, LATENT_SCALE, WORLD_VERSION};

/// An `rows x cols` latent matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLatent", into = "RawLatent")]
pub struct LatentCode {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawLatent {
    shape: [usize; 2],
    values: Vec<f64>,
}

impl TryFrom<RawLatent> for LatentCode {
    type Error = Error;
    fn try_from(raw: RawLatent) -> Result<Self> {
        LatentCode::from_vec(raw.shape[0], raw.shape[1], raw.values)
    }
}

impl From<LatentCode> for RawLatent {
    fn from(w: LatentCode) -> Self {
        RawLatent { shape: [w.rows, w.cols], values: w.values }
    }
}

impl LatentCode {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        LatentCode { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::shape(format!("{rows}x{cols} values"), values.len()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("latent entry {i} is not finite")));
        }
        Ok(LatentCode { rows, cols, values })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Row-major flattening.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn check_shape(&self, other: &LatentCode) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    pub fn sub(&self, other: &LatentCode) -> Result<LatentCode> {
        self.check_shape(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(LatentCode { rows: self.rows, cols: self.cols, values })
    }

    /// Elementwise `(a + b) / 2`.
    pub fn midpoint(a: &LatentCode, b: &LatentCode) -> Result<LatentCode> {
        a.check_shape(b)?;
        let values = a.values.iter().zip(&b.values).map(|(x, y)| (x + y) / 2.0).collect();
        Ok(LatentCode { rows: a.rows, cols: a.cols, values })
    }
}

/// A world that is affine in the latent code: `decode(w) = origin + sum_k t_k * field_k`
/// along a fixed set of directions, before clamping to the frame.
#[derive(Debug, Clone)]
pub struct AffineResponse {
    pub frame: [u32; 2],
    pub origin: Vec<Point>,
    pub fields: Vec<Vec<Point>>,
}

impl AffineResponse {
    pub fn synthesize(&self, coefficients: &[f64]) -> Result<LandmarkSet> {
        if coefficients.len() != self.fields.len() {
            return Err(Error::shape(self.fields.len(), coefficients.len()));
        }
        let (w, h) = (self.frame[0] as f64, self.frame[1] as f64);
        let mut pts = self.origin.clone();
        for (field, &t) in self.fields.iter().zip(coefficients) {
            if t == 0.0 {
                continue;
            }
            for (p, d) in pts.iter_mut().zip(field) {
                p[0] += t * d[0];
                p[1] += t * d[1];
            }
        }
        for p in &mut pts {
            p[0] = p[0].clamp(0.0, w);
            p[1] = p[1].clamp(0.0, h);
        }
        LandmarkSet::new(pts, self.frame)
    }
}

/// The generator/encoder pair: `decode` renders landmarks, `encode` inverts.
pub trait Generator: Send + Sync {
    fn latent_shape(&self) -> (usize, usize);
    fn mean_code(&self) -> LatentCode;
    fn decode(&self, w: &LatentCode) -> Result<LandmarkSet>;
    fn encode(&self, obs: &LandmarkSet) -> Result<LatentCode>;
    /// Weighted inversion started at `w0`; `weights` holds one entry per landmark.
    fn refine(&self, w0: &LatentCode, obs: &LandmarkSet, weights: &[f64]) -> Result<LatentCode>;

    /// Precomputed displacement fields for `origin + sum_k t_k * directions[k]`,
    /// when the generator is affine. `None` means callers must decode.
    fn affine_response(&self, _origin: &LatentCode, _directions: &[&LatentCode]) -> Option<AffineResponse> {
        None
    }
}

/// Keeps one half of the face and replaces the other by its reflection about
/// the vertical midline of the frame. Midline landmarks are moved onto the midline.
pub fn mirror_face(obs: &LandmarkSet, table: &RegionIndexTable, side: Side) -> LandmarkSet {
    let mid = obs.frame()[0] as f64 / 2.0;
    let src = obs.points();
    let mut pts = src.to_vec();
    for &[l, r] in table.pairs() {
        let (keep, replace) = match side {
            Side::Left => (l, r),
            Side::Right => (r, l),
        };
        pts[replace] = [2.0 * mid - src[keep][0], src[keep][1]];
    }
    for (i, p) in pts.iter_mut().enumerate() {
        if table.is_midline(i) {
            p[0] = mid;
        }
    }
    LandmarkSet::new(pts, obs.frame()).expect("mirroring preserves validity")
}

/// Brings a landmark set into the generator's canonical frame. Sets already in
/// the canonical frame are taken as aligned.
pub fn to_canonical(obs: &LandmarkSet, table: &RegionIndexTable) -> Result<LandmarkSet> {
    if obs.is_canonical_frame() {
        Ok(obs.clone())
    } else {
        align(obs, table)?.to_landmark_set()
    }
}

/// Output of [`symmetric_target`].
#[derive(Debug, Clone)]
pub struct SymmetricTarget {
    pub face: LandmarkSet,
    pub w_sym: LatentCode,
    pub w_left: LatentCode,
    pub w_right: LatentCode,
}

/// Encodes both mirrored halves and decodes their latent midpoint.
pub fn symmetric_target<G: Generator + ?Sized>(
    obs: &LandmarkSet,
    world: &G,
    table: &RegionIndexTable,
) -> Result<SymmetricTarget> {
    let w_left = world.encode(&mirror_face(obs, table, Side::Left))?;
    let w_right = world.encode(&mirror_face(obs, table, Side::Right))?;
    let w_sym = LatentCode::midpoint(&w_left, &w_right)?;
    let face = world.decode(&w_sym)?;
    Ok(SymmetricTarget { face, w_sym, w_left, w_right })
}
