use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::TrainingCase;
use crate::axes::{combine, AlphaVector, AxisBasis, ALPHA_MAX, ALPHA_MIN};
use crate::error::{Error, Result};
use crate::faceworld::{AffineResponse, Generator, LatentCode};
use crate::geometry::{face_metrics, MetricVector, RegionIndexTable, N_METRICS};
use crate::region::K_REGIONS;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    /// Central-difference half width.
    pub h: f64,
    pub step_tol: f64,
    pub max_iter: usize,
    /// Trust radius: largest change of any intensity in one iteration.
    pub max_step: f64,
    /// Relative Levenberg-Marquardt damping of the preconditioner.
    pub damping: f64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { h: 1e-3, step_tol: 1e-5, max_iter: 500, max_step: 0.25, damping: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub alpha: AlphaVector,
    pub objective: f64,
    pub objective_at_zero: f64,
    pub iterations: usize,
}

/// Metrics of the face synthesized at a given intensity vector.
struct Synthesizer<'a, G: Generator + ?Sized> {
    world: &'a G,
    table: &'a RegionIndexTable,
    w_src: &'a LatentCode,
    basis: &'a AxisBasis,
    affine: Option<AffineResponse>,
}

impl<'a, G: Generator + ?Sized> Synthesizer<'a, G> {
    fn new(world: &'a G, table: &'a RegionIndexTable, w_src: &'a LatentCode, basis: &'a AxisBasis) -> Self {
        let dirs: Vec<&LatentCode> = basis.axes().iter().collect();
        let affine = world.affine_response(w_src, &dirs);
        Synthesizer { world, table, w_src, basis, affine }
    }

    fn metrics(&self, alpha: &[f64; K_REGIONS]) -> Result<MetricVector> {
        let face = match &self.affine {
            Some(a) => a.synthesize(alpha)?,
            None => self.world.decode(&combine(self.w_src, self.basis, alpha)?)?,
        };
        face_metrics(&face, self.table)
    }
}

fn sq_error(m: &MetricVector, target: &[f64; N_METRICS]) -> f64 {
    m.to_array().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `||metrics(decode(combine(w_src, basis, alpha))) - m_post||^2`.
pub fn metric_objective<G: Generator + ?Sized>(
    case: &TrainingCase,
    alpha: &[f64; K_REGIONS],
    world: &G,
    table: &RegionIndexTable,
) -> Result<f64> {
    let s = Synthesizer::new(world, table, &case.w_src, &case.basis);
    Ok(sq_error(&s.metrics(alpha)?, &case.m_post.to_array()))
}

pub fn calibrate_alpha<G: Generator + ?Sized>(
    case: &TrainingCase,
    world: &G,
    table: &RegionIndexTable,
) -> Result<Calibration> {
    calibrate_alpha_with(case, world, table, &CalibrationOptions::default())
}

/// Attaches `alpha_gt` to every case; returns the per-case calibrations.
pub fn calibrate_cases<G: Generator + ?Sized>(
    cases: &mut [TrainingCase],
    world: &G,
    table: &RegionIndexTable,
    opts: &CalibrationOptions,
) -> Result<Vec<Calibration>> {
    let mut out = Vec::with_capacity(cases.len());
    for case in cases.iter_mut() {
        let c = calibrate_alpha_with(case, world, table, opts)?;
        case.alpha_gt = Some(c.alpha);
        out.push(c);
    }
    Ok(out)
}

/// Projected finite-difference descent from `alpha = 0`. The gradient
/// `2 J^T r` comes from a central-difference Jacobian `J` of the metrics and is
/// preconditioned by the damped Gauss-Newton matrix `J^T J + damping *
/// diag(J^T J)`. Steps are capped at `max_step` and accepted under an Armijo
/// backtracking rule, so the objective never rises.
pub fn calibrate_alpha_with<G: Generator + ?Sized>(
    case: &TrainingCase,
    world: &G,
    table: &RegionIndexTable,
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    if !case.m_post.to_array().iter().all(|v| v.is_finite()) {
        return Err(Error::CalibrationDiverged("target metrics are not finite".into()));
    }
    let synth = Synthesizer::new(world, table, &case.w_src, &case.basis);
    let target = case.m_post.to_array();
    let evaluate = |a: &[f64; K_REGIONS]| -> Result<([f64; N_METRICS], f64)> {
        let m = synth.metrics(a)?;
        let f = sq_error(&m, &target);
        if f.is_finite() {
            Ok((m.to_array(), f))
        } else {
            Err(Error::CalibrationDiverged(format!("objective is not finite at alpha {a:?}")))
        }
    };
    let mut alpha = [0.0; K_REGIONS];
    let (mut m, mut f) = evaluate(&alpha)?;
    let f0 = f;
    let mut iterations = 0;
    while iterations < opts.max_iter && f > 0.0 {
        iterations += 1;
        let mut jac = DMatrix::<f64>::zeros(N_METRICS, K_REGIONS);
        for k in 0..K_REGIONS {
            let mut up = alpha;
            let mut down = alpha;
            up[k] = (alpha[k] + opts.h).min(ALPHA_MAX);
            down[k] = (alpha[k] - opts.h).max(ALPHA_MIN);
            let width = up[k] - down[k];
            let (mp, mm) = (evaluate(&up)?.0, evaluate(&down)?.0);
            for i in 0..N_METRICS {
                jac[(i, k)] = (mp[i] - mm[i]) / width;
            }
        }
        let resid = DVector::from_iterator(N_METRICS, (0..N_METRICS).map(|i| m[i] - target[i]));
        let grad = 2.0 * jac.transpose() * &resid;
        let mut normal = jac.transpose() * &jac;
        let scale = normal.diagonal().max();
        if !(scale > 0.0) {
            break;
        }
        for k in 0..K_REGIONS {
            normal[(k, k)] += opts.damping * normal[(k, k)] + 1e-12 * scale;
        }
        let Some(chol) = normal.cholesky() else { break };
        let mut dir: Vec<f64> = (-0.5 * chol.solve(&grad)).iter().copied().collect();
        // the metrics are absolute values, so each pair has a mirrored second
        // basin; bounded steps keep the descent in the one nearest zero
        let longest = dir.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
        if longest > opts.max_step {
            dir.iter_mut().for_each(|d| *d *= opts.max_step / longest);
        }

        let mut t = 1.0;
        let mut accepted = None;
        while t >= 1e-10 {
            let mut cand = alpha;
            for k in 0..K_REGIONS {
                cand[k] = (alpha[k] + t * dir[k]).clamp(ALPHA_MIN, ALPHA_MAX);
            }
            let decrease: f64 = (0..K_REGIONS).map(|k| grad[k] * (cand[k] - alpha[k])).sum();
            let (mc, fc) = evaluate(&cand)?;
            if fc <= f + 1e-4 * decrease && fc <= f {
                accepted = Some((cand, mc, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, mc, fc)) = accepted else { break };
        let step = (0..K_REGIONS).map(|k| (cand[k] - alpha[k]).abs()).fold(0.0, f64::max);
        alpha = cand;
        m = mc;
        f = fc;
        if step < opts.step_tol {
            break;
        }
    }
    Ok(Calibration { alpha: AlphaVector(alpha), objective: f, objective_at_zero: f0, iterations })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::face_metrics;
    use crate::region::Region;
    use crate::testutil::{cases, fixture};

    fn planted(case: &TrainingCase, alpha: &[f64; K_REGIONS]) -> TrainingCase {
        let f = fixture();
        let face = f.world.decode(&crate::axes::combine(&case.w_src, &case.basis, alpha).unwrap()).unwrap();
        TrainingCase { m_post: face_metrics(&face, &f.table).unwrap(), ..case.clone() }
    }

    #[test]
    fn unchanged_face_calibrates_to_zero() {
        let f = fixture();
        for case in cases(3, 2, 11) {
            let c = calibrate_alpha(&planted(&case, &[0.0; K_REGIONS]), &f.world, &f.table).unwrap();
            assert!(c.alpha.0.iter().all(|a| a.abs() <= 0.02), "{:?}", c.alpha);
            assert!(c.objective <= c.objective_at_zero);
        }
    }

    #[test]
    fn planted_alpha_objective_collapses_and_pair_sums_are_recovered() {
        let f = fixture();
        let pool = cases(10, 5, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (s, case) in pool.iter().enumerate() {
            let star: [f64; K_REGIONS] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let c = calibrate_alpha(&planted(case, &star), &f.world, &f.table).unwrap();
            assert!(c.objective <= 1e-4 * c.objective_at_zero, "seed {s}: {} vs {}", c.objective, c.objective_at_zero);
            for (l, r) in [(Region::BrowLeft, Region::BrowRight), (Region::EyeLeft, Region::EyeRight)] {
                let got = c.alpha.0[l.index()] + c.alpha.0[r.index()];
                let want = star[l.index()] + star[r.index()];
                assert!((got - want).abs() <= 0.05, "seed {s} {l}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn objective_never_rises_and_case_batch_is_annotated() {
        let f = fixture();
        let mut batch = cases(2, 2, 13);
        let cals = calibrate_cases(&mut batch, &f.world, &f.table, &CalibrationOptions::default()).unwrap();
        for (c, case) in cals.iter().zip(&batch) {
            assert!(c.objective <= c.objective_at_zero);
            assert_eq!(case.alpha_gt, Some(c.alpha));
            let direct = metric_objective(case, &c.alpha.0, &f.world, &f.table).unwrap();
            assert!((direct - c.objective).abs() <= 1e-12 * (1.0 + c.objective));
        }
    }

    #[test]
    fn non_finite_target_diverges() {
        let f = fixture();
        let mut case = cases(1, 1, 14).remove(0);
        case.m_post.furrow = f64::NAN;
        assert!(matches!(calibrate_alpha(&case, &f.world, &f.table), Err(Error::CalibrationDiverged(_))));
    }
}
