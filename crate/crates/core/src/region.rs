use serde::{Deserialize, Serialize};

use crate::geometry::RegionIndexTable;

/// Number of editable regions.
pub const K_REGIONS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "left")]
    Left,
    #[serde(rename = "right")]
    Right,
}

/// The six editable regions, in axis order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "brow_L")]
    BrowLeft,
    #[serde(rename = "brow_R")]
    BrowRight,
    #[serde(rename = "eye_L")]
    EyeLeft,
    #[serde(rename = "eye_R")]
    EyeRight,
    #[serde(rename = "mouth_L")]
    MouthLeft,
    #[serde(rename = "mouth_R")]
    MouthRight,
}

impl Region {
    pub const ALL: [Region; K_REGIONS] = [
        Region::BrowLeft,
        Region::BrowRight,
        Region::EyeLeft,
        Region::EyeRight,
        Region::MouthLeft,
        Region::MouthRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn side(self) -> Side {
        match self {
            Region::BrowLeft | Region::EyeLeft | Region::MouthLeft => Side::Left,
            _ => Side::Right,
        }
    }

    pub fn mirror(self) -> Region {
        Region::ALL[self.index() ^ 1]
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::BrowLeft => "brow_L",
            Region::BrowRight => "brow_R",
            Region::EyeLeft => "eye_L",
            Region::EyeRight => "eye_R",
            Region::MouthLeft => "mouth_L",
            Region::MouthRight => "mouth_R",
        }
    }

    /// Landmarks an edit of this region is meant to move. Mouth regions include
    /// the nasolabial furrow on the same side.
    pub fn landmarks(self, table: &RegionIndexTable) -> Vec<usize> {
        let pick = |sp: &crate::geometry::SidePair| match self.side() {
            Side::Left => sp.left.clone(),
            Side::Right => sp.right.clone(),
        };
        match self {
            Region::BrowLeft | Region::BrowRight => pick(&table.eyebrow),
            Region::EyeLeft | Region::EyeRight => pick(&table.eye),
            Region::MouthLeft | Region::MouthRight => {
                let mut v = pick(&table.mouth);
                v.extend(pick(&table.furrow));
                v
            }
        }
    }

    /// Metric slots (in `MetricVector` order) that read this region's landmarks.
    pub fn metric_slots(self) -> &'static [usize] {
        match self {
            Region::BrowLeft | Region::BrowRight => &[0, 3, 5],
            Region::EyeLeft | Region::EyeRight => &[1, 5],
            Region::MouthLeft | Region::MouthRight => &[2, 4, 5],
        }
    }

    /// The metric slot that summarizes this region's asymmetry.
    pub fn primary_metric(self) -> usize {
        match self {
            Region::BrowLeft | Region::BrowRight => 0,
            Region::EyeLeft | Region::EyeRight => 1,
            Region::MouthLeft | Region::MouthRight => 4,
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
