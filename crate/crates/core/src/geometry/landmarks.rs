use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::SimilarityTransform;

/// Number of points in a face-mesh landmark configuration.
pub const N_LANDMARKS: usize = 468;
/// Side length of the square canonical frame.
pub const CANONICAL_SIZE: u32 = 256;

pub type Point = [f64; 2];

/// 468 face-mesh points in pixel coordinates of a `width x height` frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLandmarkSet", into = "RawLandmarkSet")]
pub struct LandmarkSet {
    frame: [u32; 2],
    points: Vec<Point>,
}

#[derive(Serialize, Deserialize)]
struct RawLandmarkSet {
    frame: [u32; 2],
    points: Vec<Point>,
}

impl TryFrom<RawLandmarkSet> for LandmarkSet {
    type Error = Error;

    fn try_from(raw: RawLandmarkSet) -> Result<Self> {
        LandmarkSet::new(raw.points, raw.frame)
    }
}

impl From<LandmarkSet> for RawLandmarkSet {
    fn from(set: LandmarkSet) -> Self {
        RawLandmarkSet {
            frame: set.frame,
            points: set.points,
        }
    }
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>, frame: [u32; 2]) -> Result<Self> {
        if points.len() != N_LANDMARKS {
            return Err(Error::shape(
                format!("{N_LANDMARKS} landmarks"),
                format!("{} landmarks", points.len()),
            ));
        }
        if frame[0] == 0 || frame[1] == 0 {
            return Err(Error::InvalidData(format!(
                "frame size must be positive, got {}x{}",
                frame[0], frame[1]
            )));
        }
        if let Some(i) = points
            .iter()
            .position(|p| !p[0].is_finite() || !p[1].is_finite())
        {
            return Err(Error::InvalidData(format!("landmark {i} is not finite")));
        }
        Ok(LandmarkSet { frame, points })
    }

    /// A landmark set in the canonical 256x256 frame.
    pub fn canonical(points: Vec<Point>) -> Result<Self> {
        Self::new(points, [CANONICAL_SIZE, CANONICAL_SIZE])
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, index: usize) -> Point {
        self.points[index]
    }

    pub fn frame(&self) -> [u32; 2] {
        self.frame
    }

    pub fn is_canonical_frame(&self) -> bool {
        self.frame == [CANONICAL_SIZE, CANONICAL_SIZE]
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    /// Applies `transform` to every point, keeping the frame.
    pub fn transformed(&self, transform: &SimilarityTransform) -> Result<Self> {
        let points = self.points.iter().map(|p| transform.apply(*p)).collect();
        Self::new(points, self.frame)
    }

    /// Centroid of the listed landmarks.
    pub fn centroid_of(&self, indices: &[usize]) -> Point {
        centroid(indices.iter().map(|&i| self.points[i]))
    }

    /// Largest per-landmark Euclidean distance to `other`.
    pub fn max_distance(&self, other: &LandmarkSet) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| distance(*a, *b))
            .fold(0.0, f64::max)
    }
}

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn centroid<I: IntoIterator<Item = Point>>(points: I) -> Point {
    let mut sum = [0.0, 0.0];
    let mut n = 0usize;
    for p in points {
        sum[0] += p[0];
        sum[1] += p[1];
        n += 1;
    }
    if n == 0 {
        return sum;
    }
    [sum[0] / n as f64, sum[1] / n as f64]
}

/// Landmarks expressed in the canonical frame after similarity alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalLandmarks {
    pub points: Vec<Point>,
    /// Inter-pupillary distance in canonical units.
    pub ipd: f64,
    /// Transform that took the input landmarks into the canonical frame.
    pub transform: SimilarityTransform,
}

impl CanonicalLandmarks {
    pub fn to_landmark_set(&self) -> Result<LandmarkSet> {
        LandmarkSet::canonical(self.points.clone())
    }
}
