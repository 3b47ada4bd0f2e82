use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::approach::{features, predict_alpha};
use super::{DoseVector, J_MUSCLES};
use crate::axes::AlphaVector;
use crate::error::{Error, Result};
use crate::gbm::GbmModel;
use crate::geometry::MetricVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseOptions {
    /// Total number of starting doses, including zero and `seeds`.
    pub starts: usize,
    pub seed: u64,
    /// Starts that receive pattern search, best first.
    pub refine_top: usize,
    pub max_evals_per_start: usize,
    /// Initial pattern step as a fraction of each bound.
    pub initial_step: f64,
    /// Search on a start stops once every step is below this fraction of its bound.
    pub min_step: f64,
    /// Candidate doses tried before random starts (training or current doses).
    pub seeds: Vec<DoseVector>,
    /// Best refined doses that then receive exact coordinate sweeps.
    #[serde(default = "default_polish_top")]
    pub polish_top: usize,
    /// Upper limit on full sweeps over all muscles per polished dose.
    #[serde(default = "default_max_sweeps")]
    pub max_sweeps: usize,
}

fn default_polish_top() -> usize {
    4
}

fn default_max_sweeps() -> usize {
    16
}

impl Default for InverseOptions {
    fn default() -> Self {
        InverseOptions {
            starts: 64,
            seed: 0,
            refine_top: 64,
            max_evals_per_start: 200,
            initial_step: 0.25,
            min_step: 1e-3,
            seeds: Vec::new(),
            polish_top: default_polish_top(),
            max_sweeps: default_max_sweeps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InverseResult {
    pub dose: DoseVector,
    /// Euclidean distance between the predicted and requested intensities.
    pub residual: f64,
    pub evaluations: usize,
    /// Index of the start the returned dose descends from.
    pub start: usize,
}

struct Search<'a> {
    model: &'a GbmModel,
    m_src: &'a MetricVector,
    target: &'a AlphaVector,
    evaluations: usize,
}

impl Search<'_> {
    fn distance(&self, a: &AlphaVector) -> f64 {
        a.0.iter().zip(&self.target.0).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    }

    fn residual(&mut self, u: &[f64]) -> Result<f64> {
        self.evaluations += 1;
        let a = predict_alpha(&DoseVector(u.to_vec()), self.m_src, self.model)?;
        Ok(self.distance(&a))
    }
}

/// Tree outputs cached at the current input. A single-coordinate move only
/// re-traverses the trees that split on that coordinate; sums run in the same
/// order as `GbmModel::predict`, so results are bitwise identical to it.
struct Incremental<'a> {
    model: &'a GbmModel,
    x: Vec<f64>,
    outputs: Vec<Vec<f64>>,
    scratch: Vec<Vec<f64>>,
    /// `uses[f]` lists the `(target, stage)` trees that split on feature `f`.
    uses: Vec<Vec<(usize, usize)>>,
}

impl<'a> Incremental<'a> {
    fn new(model: &'a GbmModel, x: Vec<f64>) -> Self {
        let mut uses = vec![Vec::new(); model.n_features];
        for (t, stages) in model.trees.iter().enumerate() {
            for (s, tree) in stages.iter().enumerate() {
                let mut feats: Vec<usize> = tree.feature.iter().filter(|f| **f >= 0).map(|f| *f as usize).collect();
                feats.sort_unstable();
                feats.dedup();
                for f in feats {
                    uses[f].push((t, s));
                }
            }
        }
        let outputs: Vec<Vec<f64>> =
            model.trees.iter().map(|stages| stages.iter().map(|tree| tree.predict(&x)).collect()).collect();
        Incremental { model, x, scratch: outputs.clone(), outputs, uses }
    }

    fn alpha(&self, outputs: &[Vec<f64>]) -> AlphaVector {
        let lr = self.model.config.learning_rate;
        AlphaVector::clamped(std::array::from_fn(|t| {
            let mut f = self.model.base_prediction[t];
            for v in &outputs[t] {
                f += lr * v;
            }
            f
        }))
    }

    /// Intensities with feature `j` set to `v`; `commit` keeps the move.
    fn probe(&mut self, j: usize, v: f64) -> AlphaVector {
        let old = self.x[j];
        self.x[j] = v;
        for &(t, s) in &self.uses[j] {
            self.scratch[t][s] = self.model.trees[t][s].predict(&self.x);
        }
        let a = self.alpha(&self.scratch);
        self.x[j] = old;
        a
    }

    fn commit(&mut self, j: usize, v: f64) {
        self.x[j] = v;
        for &(t, s) in &self.uses[j] {
            self.outputs[t][s] = self.scratch[t][s];
        }
    }

    fn discard(&mut self, j: usize) {
        for &(t, s) in &self.uses[j] {
            self.scratch[t][s] = self.outputs[t][s];
        }
    }
}

/// One representative dose per interval between consecutive split
/// thresholds of each muscle, inside `[0, bound]`. The model is constant on
/// each interval, so a sweep over this grid is an exact line search.
fn breakpoint_grid(model: &GbmModel, bounds: &[f64]) -> Vec<Vec<f64>> {
    let mut cuts: Vec<Vec<f64>> = bounds.iter().map(|b| vec![0.0, *b]).collect();
    for tree in model.trees.iter().flatten() {
        for (f, t) in tree.feature.iter().zip(&tree.threshold) {
            if *f >= 0 && (*f as usize) < J_MUSCLES && *t > 0.0 && *t < bounds[*f as usize] {
                cuts[*f as usize].push(*t);
            }
        }
    }
    cuts.into_iter()
        .map(|mut c| {
            c.sort_by(f64::total_cmp);
            c.dedup();
            let mut grid = vec![c[0]];
            grid.extend(c.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
            grid.push(c[c.len() - 1]);
            grid
        })
        .collect()
}

/// Derivative-free search for a dose whose predicted intensities match
/// `alpha_target`: multi-start candidates, coordinate pattern search from the
/// best starts, then exact coordinate sweeps on the best refined doses. Ties
/// resolve to the lowest start index.
pub fn invert_dose(
    alpha_target: &AlphaVector,
    m_src: &MetricVector,
    model: &GbmModel,
    bounds: &[f64],
    opts: &InverseOptions,
) -> Result<InverseResult> {
    if bounds.len() != J_MUSCLES {
        return Err(Error::shape(J_MUSCLES, bounds.len()));
    }
    if bounds.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
        return Err(Error::InvalidData("dose bounds must be positive and finite".into()));
    }
    let mut search = Search { model, m_src, target: alpha_target, evaluations: 0 };

    let mut starts: Vec<Vec<f64>> = vec![vec![0.0; J_MUSCLES]];
    for s in &opts.seeds {
        if s.0.len() != J_MUSCLES {
            return Err(Error::shape(J_MUSCLES, s.0.len()));
        }
        starts.push(s.0.iter().zip(bounds).map(|(v, b)| v.clamp(0.0, *b)).collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    while starts.len() < opts.starts {
        starts.push(bounds.iter().map(|b| rng.random_range(0.0..=*b)).collect());
    }
    let mut scored = Vec::with_capacity(starts.len());
    for (i, s) in starts.iter().enumerate() {
        scored.push((search.residual(s)?, i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut refined: Vec<(f64, usize, Vec<f64>)> = Vec::new();
    for &(r0, i) in scored.iter().take(opts.refine_top.max(1)) {
        let mut u = starts[i].clone();
        let mut r = r0;
        let mut inc = Incremental::new(model, features(&DoseVector(u.clone()), m_src)?);
        let mut step: Vec<f64> = bounds.iter().map(|b| opts.initial_step * b).collect();
        let budget = search.evaluations + opts.max_evals_per_start;
        'outer: while search.evaluations < budget && r > 0.0 && opts.refine_top > 0 {
            let mut improved = false;
            for j in 0..J_MUSCLES {
                for sign in [1.0, -1.0] {
                    let v = (u[j] + sign * step[j]).clamp(0.0, bounds[j]);
                    if v == u[j] {
                        continue;
                    }
                    search.evaluations += 1;
                    let rc = search.distance(&inc.probe(j, v));
                    if rc < r {
                        inc.commit(j, v);
                        u[j] = v;
                        r = rc;
                        improved = true;
                        break;
                    }
                    inc.discard(j);
                    if search.evaluations >= budget {
                        break 'outer;
                    }
                }
            }
            if !improved {
                for s in &mut step {
                    *s *= 0.5;
                }
                if step.iter().zip(bounds).all(|(s, b)| *s < opts.min_step * b) {
                    break;
                }
            }
        }
        refined.push((r, i, u));
        if r == 0.0 {
            break;
        }
    }
    refined.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let grid = breakpoint_grid(model, bounds);
    for entry in refined.iter_mut().take(opts.polish_top) {
        let (r, _, u) = entry;
        let mut inc = Incremental::new(model, features(&DoseVector(u.clone()), m_src)?);
        for _ in 0..opts.max_sweeps {
            if *r == 0.0 {
                break;
            }
            let mut improved = false;
            for j in 0..J_MUSCLES {
                let mut best: Option<(f64, f64)> = None;
                for &v in &grid[j] {
                    if v == u[j] {
                        continue;
                    }
                    search.evaluations += 1;
                    let rc = search.distance(&inc.probe(j, v));
                    inc.discard(j);
                    if rc < best.map_or(*r, |b| b.0) {
                        best = Some((rc, v));
                    }
                }
                if let Some((rc, v)) = best {
                    inc.probe(j, v);
                    inc.commit(j, v);
                    u[j] = v;
                    *r = rc;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
    }
    let (best_r, best_i, best_u) = refined
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("at least one start is refined");
    Ok(InverseResult { dose: DoseVector(best_u), residual: best_r, evaluations: search.evaluations, start: best_i })
}
