//! ROI masks, localized axis discovery and the latent combination operator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::faceworld::{bounding_rect, symmetric_target, Generator, LatentCode, ROI_DILATION};
use crate::geometry::{LandmarkSet, RegionIndexTable};
use crate::region::{Region, K_REGIONS};

pub const ALPHA_MIN: f64 = -0.5;
pub const ALPHA_MAX: f64 = 1.5;
pub const BASIS_VERSION: u32 = 1;

/// Axis-aligned rectangle `[x0, y0, x1, y1]` in canonical coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoiMask {
    pub region_id: Region,
    pub rect: [f64; 4],
}

impl RoiMask {
    /// Bounds are inclusive.
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let [x0, y0, x1, y1] = self.rect;
        p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.rect;
        if !(x0 < x1 && y0 < y1) || self.rect.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("{}: rect {:?} is empty", self.region_id, self.rect)));
        }
        Ok(())
    }

    fn overlaps(&self, other: &RoiMask) -> bool {
        let (a, b) = (self.rect, other.rect);
        a[0] <= b[2] && b[0] <= a[2] && a[1] <= b[3] && b[1] <= a[3]
    }
}

/// Region bounding boxes on `base_face`, grown by 8 canonical pixels.
pub fn default_rois(base_face: &LandmarkSet, table: &RegionIndexTable) -> Vec<RoiMask> {
    Region::ALL
        .iter()
        .map(|&r| RoiMask {
            region_id: r,
            rect: bounding_rect(base_face.points(), &r.landmarks(table), ROI_DILATION),
        })
        .collect()
}

/// Every rect non-empty and no two rects intersecting.
pub fn validate_masks(masks: &[RoiMask]) -> Result<()> {
    for m in masks {
        m.validate()?;
    }
    for (a, m) in masks.iter().enumerate() {
        for n in &masks[a + 1..] {
            if m.overlaps(n) {
                return Err(Error::InvalidData(format!(
                    "ROI {} overlaps ROI {}",
                    m.region_id, n.region_id
                )));
            }
        }
    }
    Ok(())
}

pub fn rois_from_json(text: &str) -> Result<Vec<RoiMask>> {
    let masks: Vec<RoiMask> = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    validate_masks(&masks)?;
    Ok(masks)
}

pub fn rois_to_json(masks: &[RoiMask]) -> String {
    serde_json::to_string_pretty(masks).expect("masks serialize")
}

/// Takes `tgt` positions for landmarks whose `src` position lies in the mask.
pub fn patch_roi(src: &LandmarkSet, tgt: &LandmarkSet, mask: &RoiMask) -> Result<LandmarkSet> {
    if src.frame() != tgt.frame() {
        return Err(Error::shape(format!("frame {:?}", src.frame()), format!("frame {:?}", tgt.frame())));
    }
    let pts = src
        .points()
        .iter()
        .zip(tgt.points())
        .map(|(s, t)| if mask.contains(*s) { *t } else { *s })
        .collect();
    LandmarkSet::new(pts, src.frame())
}

/// `v_k = encode(patch_roi(src, tgt, M_k)) - encode(src)` for each mask, in mask order.
pub fn discover_axes<G: Generator + ?Sized>(
    src: &LandmarkSet,
    tgt: &LandmarkSet,
    masks: &[RoiMask],
    world: &G,
) -> Result<Vec<LatentCode>> {
    validate_masks(masks)?;
    let w_src = world.encode(src)?;
    masks
        .iter()
        .map(|m| world.encode(&patch_roi(src, tgt, m)?)?.sub(&w_src))
        .collect()
}

/// Per-region latent displacements `v_1..v_6`, ordered as [`Region::ALL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBasis", into = "RawBasis")]
pub struct AxisBasis {
    pub patient_id: String,
    /// Fingerprint of the world the axes were discovered in.
    pub world: String,
    axes: Vec<LatentCode>,
}

#[derive(Serialize, Deserialize)]
struct RawBasis {
    version: u32,
    patient_id: String,
    world: String,
    axes: Vec<LatentCode>,
}

impl TryFrom<RawBasis> for AxisBasis {
    type Error = Error;
    fn try_from(raw: RawBasis) -> Result<Self> {
        if raw.version != BASIS_VERSION {
            return Err(Error::Format(format!("axis basis version {} is not supported", raw.version)));
        }
        AxisBasis::new(raw.patient_id, raw.world, raw.axes)
    }
}

impl From<AxisBasis> for RawBasis {
    fn from(b: AxisBasis) -> Self {
        RawBasis { version: BASIS_VERSION, patient_id: b.patient_id, world: b.world, axes: b.axes }
    }
}

impl AxisBasis {
    pub fn new(patient_id: impl Into<String>, world: impl Into<String>, axes: Vec<LatentCode>) -> Result<Self> {
        if axes.len() != K_REGIONS {
            return Err(Error::shape(K_REGIONS, axes.len()));
        }
        for v in &axes[1..] {
            axes[0].check_shape(v)?;
        }
        Ok(AxisBasis { patient_id: patient_id.into(), world: world.into(), axes })
    }

    pub fn axes(&self) -> &[LatentCode] {
        &self.axes
    }

    pub fn axis(&self, region: Region) -> &LatentCode {
        &self.axes[region.index()]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("basis serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Discovers one axis per region; `masks` must name each region exactly once.
pub fn discover_basis<G: Generator + ?Sized>(
    patient_id: &str,
    world_id: &str,
    src: &LandmarkSet,
    tgt: &LandmarkSet,
    masks: &[RoiMask],
    world: &G,
) -> Result<AxisBasis> {
    let mut ordered: Vec<RoiMask> = Vec::with_capacity(K_REGIONS);
    for r in Region::ALL {
        let mut found = masks.iter().filter(|m| m.region_id == r);
        match (found.next(), found.next()) {
            (Some(m), None) => ordered.push(*m),
            _ => return Err(Error::InvalidData(format!("expected exactly one ROI for {r}"))),
        }
    }
    if masks.len() != K_REGIONS {
        return Err(Error::shape(K_REGIONS, masks.len()));
    }
    AxisBasis::new(patient_id, world_id, discover_axes(src, tgt, &ordered, world)?)
}

/// Symmetric target of `src` followed by [`discover_basis`].
pub fn patient_basis<G: Generator + ?Sized>(
    patient_id: &str,
    world_id: &str,
    src: &LandmarkSet,
    masks: &[RoiMask],
    world: &G,
    table: &RegionIndexTable,
) -> Result<AxisBasis> {
    let target = symmetric_target(src, world, table)?;
    discover_basis(patient_id, world_id, src, &target.face, masks, world)
}

/// Per-region intensities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AlphaVector(pub [f64; K_REGIONS]);

impl AlphaVector {
    pub const ZERO: AlphaVector = AlphaVector([0.0; K_REGIONS]);

    /// Unit intensity on one region.
    pub fn unit(region: Region) -> Self {
        let mut a = [0.0; K_REGIONS];
        a[region.index()] = 1.0;
        AlphaVector(a)
    }

    /// Rejects non-finite or out-of-range components, naming the first offender.
    pub fn checked(values: [f64; K_REGIONS]) -> Result<Self> {
        for (k, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(ALPHA_MIN..=ALPHA_MAX).contains(&v) {
                return Err(Error::OutOfBounds {
                    field: format!("alpha[{k}]"),
                    message: format!("{v} is outside [{ALPHA_MIN}, {ALPHA_MAX}] ({})", Region::ALL[k]),
                });
            }
        }
        Ok(AlphaVector(values))
    }

    /// Projects onto `[-0.5, 1.5]^6`; non-finite entries become 0.
    pub fn clamped(values: [f64; K_REGIONS]) -> Self {
        AlphaVector(values.map(|v| if v.is_finite() { v.clamp(ALPHA_MIN, ALPHA_MAX) } else { 0.0 }))
    }

    pub fn as_array(&self) -> &[f64; K_REGIONS] {
        &self.0
    }
}

/// `w_src + sum_k alpha_k v_k`. Zero intensities contribute nothing, so a zero
/// vector returns `w_src` bit for bit.
pub fn combine(w_src: &LatentCode, basis: &AxisBasis, alpha: &[f64; K_REGIONS]) -> Result<LatentCode> {
    let mut out = w_src.clone();
    for (v, &a) in basis.axes().iter().zip(alpha) {
        w_src.check_shape(v)?;
        if a == 0.0 {
            continue;
        }
        for (o, x) in out.as_mut_slice().iter_mut().zip(v.as_slice()) {
            *o += a * x;
        }
    }
    Ok(out)
}
