use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::landmarks::{centroid, Point};

/// `p -> scale * R(rotation) * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    /// Counter-clockwise angle in radians, normalized to (-pi, pi].
    pub rotation: f64,
    pub scale: f64,
    pub translation: [f64; 2],
}

fn wrap_angle(theta: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

fn rotate(theta: f64, p: Point) -> Point {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        rotation: 0.0,
        scale: 1.0,
        translation: [0.0, 0.0],
    };

    pub fn new(rotation: f64, scale: f64, translation: [f64; 2]) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidData(format!("scale must be positive, got {scale}")));
        }
        if !rotation.is_finite() || !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::InvalidData("non-finite similarity parameters".into()));
        }
        Ok(SimilarityTransform {
            rotation: wrap_angle(rotation),
            scale,
            translation,
        })
    }

    /// Rotation by `theta` about `center`.
    pub fn rotation_about(theta: f64, center: Point) -> Self {
        let r = rotate(theta, center);
        SimilarityTransform {
            rotation: wrap_angle(theta),
            scale: 1.0,
            translation: [center[0] - r[0], center[1] - r[1]],
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let r = rotate(self.rotation, p);
        [
            self.scale * r[0] + self.translation[0],
            self.scale * r[1] + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> Self {
        let inv_scale = 1.0 / self.scale;
        let t = rotate(-self.rotation, self.translation);
        SimilarityTransform {
            rotation: wrap_angle(-self.rotation),
            scale: inv_scale,
            translation: [-inv_scale * t[0], -inv_scale * t[1]],
        }
    }

    /// The transform that applies `self` first, then `next`.
    pub fn then(&self, next: &SimilarityTransform) -> Self {
        let t = next.apply(self.translation);
        SimilarityTransform {
            rotation: wrap_angle(self.rotation + next.rotation),
            scale: self.scale * next.scale,
            translation: t,
        }
    }
}

/// Least-squares similarity transform taking `src` onto `dst` (2-D Umeyama).
pub fn fit_similarity(src: &[Point], dst: &[Point]) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::shape(
            format!("{} anchor points", dst.len()),
            format!("{} anchor points", src.len()),
        ));
    }
    if src.len() < 2 {
        return Err(Error::DegenerateConfiguration(
            "at least two anchor points are required".into(),
        ));
    }
    let mu_s = centroid(src.iter().copied());
    let mu_d = centroid(dst.iter().copied());
    let mut var_s = 0.0;
    let mut var_d = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let s = [s[0] - mu_s[0], s[1] - mu_s[1]];
        let d = [d[0] - mu_d[0], d[1] - mu_d[1]];
        var_s += s[0] * s[0] + s[1] * s[1];
        var_d += d[0] * d[0] + d[1] * d[1];
        a += d[0] * s[0] + d[1] * s[1];
        b += d[1] * s[0] - d[0] * s[1];
    }
    let tiny = |var: f64, mu: Point| var <= 1e-20 * (1.0 + mu[0] * mu[0] + mu[1] * mu[1]);
    if tiny(var_s, mu_s) {
        return Err(Error::DegenerateConfiguration(
            "source anchors are coincident".into(),
        ));
    }
    if tiny(var_d, mu_d) {
        return Err(Error::DegenerateConfiguration(
            "template anchors are coincident".into(),
        ));
    }
    let rotation = b.atan2(a);
    let scale = a.hypot(b) / var_s;
    let r = rotate(rotation, mu_s);
    let translation = [mu_d[0] - scale * r[0], mu_d[1] - scale * r[1]];
    SimilarityTransform::new(rotation, scale, translation)
}
