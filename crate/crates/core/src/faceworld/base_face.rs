//! Parametric mirror-symmetric face in the canonical frame.

use std::f64::consts::PI;

use crate::geometry::{LandmarkSet, Point, RegionIndexTable, CANONICAL_SIZE, N_LANDMARKS};
use crate::region::Region;

/// Dilation applied to region bounding boxes when deriving default ROIs.
pub const ROI_DILATION: f64 = 8.0;
/// Extra clearance between filler landmarks and any default ROI.
const FILLER_CLEARANCE: f64 = 10.0;
const MIDLINE_X: f64 = CANONICAL_SIZE as f64 / 2.0;

/// Axis-aligned box `[x0, y0, x1, y1]` around the given landmarks, grown by `pad`.
pub fn bounding_rect(points: &[Point], indices: &[usize], pad: f64) -> [f64; 4] {
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &i in indices {
        let p = points[i];
        r[0] = r[0].min(p[0]);
        r[1] = r[1].min(p[1]);
        r[2] = r[2].max(p[0]);
        r[3] = r[3].max(p[1]);
    }
    [r[0] - pad, r[1] - pad, r[2] + pad, r[3] + pad]
}

fn mirror_x(p: Point) -> Point {
    [2.0 * MIDLINE_X - p[0], p[1]]
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn brow(n: usize) -> Vec<Point> {
    let upper = n.div_ceil(2);
    let lower = n - upper;
    let arch = |t: f64| 84.0 - 8.0 * (PI * (0.1 + 0.75 * t)).sin();
    let mut out = Vec::with_capacity(n);
    for i in 0..upper {
        let t = if upper > 1 { i as f64 / (upper - 1) as f64 } else { 0.5 };
        out.push([lerp(72.0, 110.0, t), arch(t)]);
    }
    for i in 0..lower {
        let t = if lower > 1 { i as f64 / (lower - 1) as f64 } else { 0.5 };
        out.push([lerp(74.0, 110.0, t), arch(t) + 5.0]);
    }
    out
}

/// Outer corner first, then the lower lid to the inner corner, then the upper lid.
fn eye(n: usize) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let phi = PI - i as f64 * 2.0 * PI / n as f64;
            [96.0 + 14.0 * phi.cos(), 112.0 + 6.0 * phi.sin()]
        })
        .collect()
}

/// Lower end first, ending beside the nose wing.
fn furrow(n: usize) -> Vec<Point> {
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.5 };
            let x = lerp(90.0, 112.0, t) - 3.0 * (PI * t).sin();
            [x, lerp(184.0, 142.0, t)]
        })
        .collect()
}

/// Corner first, then the lower lip points, then the upper lip points.
fn mouth(n: usize) -> Vec<Point> {
    let mut out = vec![[100.0, 178.0]];
    let rest = n.saturating_sub(1);
    let lower = rest.div_ceil(2);
    let upper = rest - lower;
    for k in 0..lower {
        let t = (k + 1) as f64 / lower as f64;
        out.push([100.0 + 10.0 * t, 178.0 + 3.0 + 5.0 * t]);
    }
    for k in 0..upper {
        let t = (k + 1) as f64 / upper as f64;
        out.push([100.0 + 10.0 * t, 178.0 - 2.0 - 5.0 * t]);
    }
    out
}

fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

fn inside(rect: &[f64; 4], p: Point, pad: f64) -> bool {
    p[0] >= rect[0] - pad && p[0] <= rect[2] + pad && p[1] >= rect[1] - pad && p[1] <= rect[3] + pad
}

/// Builds the symmetric base face for `table`. Named regions follow fixed
/// parametric curves on the image-left side; every right landmark is the
/// reflection of its counterpart about `x = 128`.
pub fn synthetic_base_face(table: &RegionIndexTable) -> LandmarkSet {
    let mut points = vec![[f64::NAN, f64::NAN]; N_LANDMARKS];
    let place = |idx: &[usize], pos: Vec<Point>, points: &mut [Point]| {
        for (&i, p) in idx.iter().zip(pos) {
            points[i] = p;
            points[table.counterpart(i)] = mirror_x(p);
        }
    };
    place(&table.eyebrow.left, brow(table.eyebrow.left.len()), &mut points);
    place(&table.eye.left, eye(table.eye.left.len()), &mut points);
    place(&table.furrow.left, furrow(table.furrow.left.len()), &mut points);
    place(&table.mouth.left, mouth(table.mouth.left.len()), &mut points);

    let midline: Vec<usize> = (0..N_LANDMARKS)
        .filter(|&i| table.is_midline(i) && i != table.nose_tip)
        .collect();
    points[table.nose_tip] = [MIDLINE_X, 150.0];
    let m = midline.len().max(2) as f64;
    for (j, &i) in midline.iter().enumerate() {
        points[i] = [MIDLINE_X, 24.0 + j as f64 * 222.0 / (m - 1.0)];
    }

    let rects: Vec<[f64; 4]> = Region::ALL
        .iter()
        .map(|r| bounding_rect(&points, &r.landmarks(table), ROI_DILATION))
        .collect();
    let fillers: Vec<[usize; 2]> = table
        .pairs()
        .iter()
        .copied()
        .filter(|&[l, _]| points[l][0].is_nan())
        .collect();
    let mut k = 0usize;
    for [l, r] in fillers {
        let p = loop {
            k += 1;
            let p = [lerp(36.0, MIDLINE_X - 4.0, halton(k, 2)), lerp(20.0, 250.0, halton(k, 3))];
            let ex = (p[0] - MIDLINE_X) / 94.0;
            let ey = (p[1] - 136.0) / 114.0;
            if ex * ex + ey * ey <= 1.0 && !rects.iter().any(|q| inside(q, p, FILLER_CLEARANCE)) {
                break p;
            }
        };
        points[l] = p;
        points[r] = mirror_x(p);
    }
    LandmarkSet::canonical(points).expect("base face is complete and finite")
}
