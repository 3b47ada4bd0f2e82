//! Landmark index sets for each facial region and the left/right correspondence.
//!
//! "Left" and "right" refer to image sides throughout: the left lists hold the
//! landmarks with the smaller x coordinate on a frontal face.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::landmarks::N_LANDMARKS;

pub const TABLE_VERSION: u32 = 1;

/// Paired left/right index lists; `right[i]` is the mirror counterpart of `left[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidePair {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable", into = "RawTable")]
pub struct RegionIndexTable {
    pub eyebrow: SidePair,
    pub eye: SidePair,
    pub furrow: SidePair,
    /// Landmarks around each mouth corner (corner itself first).
    pub mouth: SidePair,
    pub mouth_corners: [usize; 2],
    pub outer_brow: [usize; 2],
    pub nose_tip: usize,
    /// Mirror pairs as `[left, right]`, sorted by the left index.
    pairs: Vec<[usize; 2]>,
    /// `correspondence[i]` is the mirror counterpart of landmark `i`; midline
    /// landmarks map to themselves.
    correspondence: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RawTable {
    version: u32,
    eyebrow: SidePair,
    eye: SidePair,
    furrow: SidePair,
    mouth: SidePair,
    mouth_corners: [usize; 2],
    outer_brow: [usize; 2],
    nose_tip: usize,
    /// Every non-midline landmark appears in exactly one pair.
    pairs: Vec<[usize; 2]>,
}

impl TryFrom<RawTable> for RegionIndexTable {
    type Error = Error;

    fn try_from(raw: RawTable) -> Result<Self> {
        if raw.version != TABLE_VERSION {
            return Err(Error::Format(format!(
                "unsupported region table version {}",
                raw.version
            )));
        }
        let mut correspondence: Vec<usize> = (0..N_LANDMARKS).collect();
        let mut seen = vec![false; N_LANDMARKS];
        for &[a, b] in &raw.pairs {
            for i in [a, b] {
                if i >= N_LANDMARKS {
                    return Err(Error::InvalidData(format!("landmark index {i} out of range")));
                }
                if seen[i] {
                    return Err(Error::InvalidData(format!(
                        "landmark {i} appears in more than one pair"
                    )));
                }
                seen[i] = true;
            }
            if a == b {
                return Err(Error::InvalidData(format!("landmark {a} paired with itself")));
            }
            correspondence[a] = b;
            correspondence[b] = a;
        }
        let mut pairs = raw.pairs;
        pairs.sort_unstable();
        let table = RegionIndexTable {
            eyebrow: raw.eyebrow,
            eye: raw.eye,
            furrow: raw.furrow,
            mouth: raw.mouth,
            mouth_corners: raw.mouth_corners,
            outer_brow: raw.outer_brow,
            nose_tip: raw.nose_tip,
            pairs,
            correspondence,
        };
        table.validate()?;
        Ok(table)
    }
}

impl From<RegionIndexTable> for RawTable {
    fn from(t: RegionIndexTable) -> Self {
        let pairs = t.pairs;
        RawTable {
            version: TABLE_VERSION,
            eyebrow: t.eyebrow,
            eye: t.eye,
            furrow: t.furrow,
            mouth: t.mouth,
            mouth_corners: t.mouth_corners,
            outer_brow: t.outer_brow,
            nose_tip: t.nose_tip,
            pairs,
        }
    }
}

// Face-mesh indices. Furrow indices and their counterparts follow the
// nasolabial set used for the furrow metric.
const EYEBROW_LEFT: [usize; 10] = [70, 63, 105, 66, 107, 46, 53, 52, 65, 55];
const EYEBROW_RIGHT: [usize; 10] = [300, 293, 334, 296, 336, 276, 283, 282, 295, 285];
const EYE_LEFT: [usize; 16] = [
    33, 7, 163, 144, 145, 153, 154, 155, 133, 173, 157, 158, 159, 160, 161, 246,
];
const EYE_RIGHT: [usize; 16] = [
    263, 249, 390, 373, 374, 380, 381, 382, 362, 398, 384, 385, 386, 387, 388, 466,
];
const FURROW_LEFT: [usize; 8] = [202, 212, 216, 206, 203, 129, 209, 126];
const FURROW_RIGHT: [usize; 8] = [422, 432, 436, 426, 423, 358, 429, 355];
const MOUTH_LEFT: [usize; 5] = [61, 146, 91, 185, 40];
const MOUTH_RIGHT: [usize; 5] = [291, 375, 321, 409, 270];
/// Landmarks on the vertical midline of the face.
pub const MIDLINE: [usize; 28] = [
    0, 1, 2, 4, 5, 6, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 94, 151, 152, 164, 168, 175,
    195, 197, 199, 200,
];

impl Default for RegionIndexTable {
    /// Standard face-mesh contour sets for brows, eyes and mouth corners. The
    /// remaining non-midline landmarks are paired in ascending index order.
    fn default() -> Self {
        let named: [(&[usize], &[usize]); 4] = [
            (&EYEBROW_LEFT, &EYEBROW_RIGHT),
            (&EYE_LEFT, &EYE_RIGHT),
            (&FURROW_LEFT, &FURROW_RIGHT),
            (&MOUTH_LEFT, &MOUTH_RIGHT),
        ];
        let mut correspondence: Vec<usize> = (0..N_LANDMARKS).collect();
        let mut pairs = Vec::new();
        let mut used = vec![false; N_LANDMARKS];
        for &m in &MIDLINE {
            used[m] = true;
        }
        for (l, r) in named {
            for (&a, &b) in l.iter().zip(r) {
                pairs.push([a, b]);
                used[a] = true;
                used[b] = true;
            }
        }
        let rest: Vec<usize> = (0..N_LANDMARKS).filter(|&i| !used[i]).collect();
        for pair in rest.chunks(2) {
            pairs.push([pair[0], pair[1]]);
        }
        pairs.sort_unstable();
        for &[a, b] in &pairs {
            correspondence[a] = b;
            correspondence[b] = a;
        }
        let table = RegionIndexTable {
            eyebrow: SidePair { left: EYEBROW_LEFT.to_vec(), right: EYEBROW_RIGHT.to_vec() },
            eye: SidePair { left: EYE_LEFT.to_vec(), right: EYE_RIGHT.to_vec() },
            furrow: SidePair { left: FURROW_LEFT.to_vec(), right: FURROW_RIGHT.to_vec() },
            mouth: SidePair { left: MOUTH_LEFT.to_vec(), right: MOUTH_RIGHT.to_vec() },
            mouth_corners: [61, 291],
            outer_brow: [70, 300],
            nose_tip: 4,
            pairs,
            correspondence,
        };
        debug_assert!(table.validate().is_ok());
        table
    }
}

impl RegionIndexTable {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("region table serializes")
    }

    pub fn counterpart(&self, index: usize) -> usize {
        self.correspondence[index]
    }

    pub fn correspondence(&self) -> &[usize] {
        &self.correspondence
    }

    pub fn is_midline(&self, index: usize) -> bool {
        self.correspondence[index] == index
    }

    /// Mirror pairs as `[left, right]`, sorted by the left index.
    pub fn pairs(&self) -> &[[usize; 2]] {
        &self.pairs
    }

    /// Indices of the left member of every mirror pair.
    pub fn left_half(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p[0]).collect()
    }

    /// Eye contour centroids stand in for the pupils.
    pub fn eye_contours(&self) -> (&[usize], &[usize]) {
        (&self.eye.left, &self.eye.right)
    }

    pub fn validate(&self) -> Result<()> {
        if self.correspondence.len() != N_LANDMARKS {
            return Err(Error::shape(N_LANDMARKS, self.correspondence.len()));
        }
        for (i, &j) in self.correspondence.iter().enumerate() {
            if j >= N_LANDMARKS || self.correspondence[j] != i {
                return Err(Error::InvalidData(format!(
                    "correspondence is not an involution at landmark {i}"
                )));
            }
        }
        let regions = [
            ("eyebrow", &self.eyebrow),
            ("eye", &self.eye),
            ("furrow", &self.furrow),
            ("mouth", &self.mouth),
        ];
        for (name, sp) in regions {
            if sp.left.len() != sp.right.len() {
                return Err(Error::InvalidData(format!(
                    "{name}: left and right lists differ in length"
                )));
            }
            if sp.left.len() < 2 {
                return Err(Error::InvalidData(format!("{name}: needs at least two landmarks")));
            }
            for (&l, &r) in sp.left.iter().zip(&sp.right) {
                if l >= N_LANDMARKS || r >= N_LANDMARKS {
                    return Err(Error::InvalidData(format!("{name}: index out of range")));
                }
                if self.correspondence[l] != r || l == r {
                    return Err(Error::InvalidData(format!(
                        "{name}: {l} and {r} are not mirror counterparts"
                    )));
                }
                if self.pairs.binary_search(&[l, r]).is_err() {
                    return Err(Error::InvalidData(format!(
                        "{name}: pair ({l}, {r}) is listed right-to-left"
                    )));
                }
            }
        }
        for (name, [l, r]) in [("mouth_corners", self.mouth_corners), ("outer_brow", self.outer_brow)] {
            if l >= N_LANDMARKS || r >= N_LANDMARKS || self.correspondence[l] != r || l == r {
                return Err(Error::InvalidData(format!("{name}: {l} and {r} are not counterparts")));
            }
        }
        if self.nose_tip >= N_LANDMARKS {
            return Err(Error::InvalidData("nose_tip out of range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_is_valid_involution() {
        let t = RegionIndexTable::default();
        t.validate().unwrap();
        let midline = (0..N_LANDMARKS).filter(|&i| t.is_midline(i)).count();
        assert_eq!(midline, MIDLINE.len());
        assert_eq!(t.pairs().len(), (N_LANDMARKS - MIDLINE.len()) / 2);
        assert_eq!(t.counterpart(202), 422);
        assert_eq!(t.counterpart(126), 355);
    }

    #[test]
    fn json_round_trip_and_shipped_file() {
        let t = RegionIndexTable::default();
        let back = RegionIndexTable::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let shipped = RegionIndexTable::from_json(include_str!("../../data/region_table.json")).unwrap();
        assert_eq!(shipped, t);
    }

    #[test]
    fn rejects_broken_correspondence() {
        let t = RegionIndexTable::default();
        let mut value = serde_json::to_value(&t).unwrap();
        value["eyebrow"]["right"][0] = serde_json::json!(301);
        let err = serde_json::from_value::<RegionIndexTable>(value).unwrap_err();
        assert!(err.to_string().contains("eyebrow"));

        let mut value = serde_json::to_value(&t).unwrap();
        value["pairs"][0] = serde_json::json!([70, 70]);
        assert!(serde_json::from_value::<RegionIndexTable>(value).is_err());

        let mut value = serde_json::to_value(&t).unwrap();
        value["nose_tip"] = serde_json::json!(900);
        assert!(serde_json::from_value::<RegionIndexTable>(value).is_err());
    }
}
