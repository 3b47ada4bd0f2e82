//! Rigid (rotation + translation) Procrustes residuals between 2-D point lists.

use crate::error::{Error, Result};
use crate::geometry::landmarks::{centroid, Point};

/// RMS residual between `x` and `y` after removing both centroids and applying
/// the rotation that best maps `y` onto `x`. Scale is left alone.
pub fn procrustes_distance(x: &[Point], y: &[Point]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(
            format!("{} points", x.len()),
            format!("{} points", y.len()),
        ));
    }
    if x.len() < 2 {
        return Err(Error::InvalidData(
            "procrustes distance needs at least two points".into(),
        ));
    }
    let cx = centroid(x.iter().copied());
    let cy = centroid(y.iter().copied());
    let mut a = 0.0;
    let mut b = 0.0;
    for (p, q) in x.iter().zip(y) {
        let p = [p[0] - cx[0], p[1] - cx[1]];
        let q = [q[0] - cy[0], q[1] - cy[1]];
        a += p[0] * q[0] + p[1] * q[1];
        b += p[1] * q[0] - p[0] * q[1];
    }
    // Residuals are summed explicitly; the closed form |x|^2 + |y|^2 - 2 sqrt(a^2 + b^2)
    // cancels catastrophically for near-identical shapes.
    let (s, c) = b.atan2(a).sin_cos();
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(p, q)| {
            let p = [p[0] - cx[0], p[1] - cx[1]];
            let q = [q[0] - cy[0], q[1] - cy[1]];
            let rq = [c * q[0] - s * q[1], s * q[0] + c * q[1]];
            (p[0] - rq[0]).powi(2) + (p[1] - rq[1]).powi(2)
        })
        .sum();
    Ok((sse / x.len() as f64).sqrt())
}
