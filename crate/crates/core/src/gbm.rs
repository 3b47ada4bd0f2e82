//! Gradient-boosted regression trees with squared-error loss. Multi-output
//! models are independent per-target ensembles.

use std::io::Read;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub subsample: f64,
    pub seed: u64,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            n_trees: 200,
            max_depth: 3,
            learning_rate: 0.05,
            min_samples_leaf: 2,
            subsample: 1.0,
            seed: 0,
        }
    }
}

impl GbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_leaf == 0 {
            return Err(Error::InvalidData(
                "n_trees, max_depth and min_samples_leaf must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::InvalidData(format!("learning_rate {} outside (0, 1]", self.learning_rate)));
        }
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::InvalidData(format!("subsample {} outside (0, 1]", self.subsample)));
        }
        Ok(())
    }
}

/// Flattened binary tree. Node `i` is a leaf when `feature[i] < 0`; otherwise
/// samples with `x[feature] <= threshold` go to `left[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    pub value: Vec<f64>,
}

impl Tree {
    fn leaf_index(&self, x: &[f64]) -> usize {
        let mut i = 0;
        while self.feature[i] >= 0 {
            i = if x[self.feature[i] as usize] <= self.threshold[i] {
                self.left[i] as usize
            } else {
                self.right[i] as usize
            };
        }
        i
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.value[self.leaf_index(x)]
    }

    pub fn n_nodes(&self) -> usize {
        self.feature.len()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            if t.feature[i] < 0 {
                0
            } else {
                1 + go(t, t.left[i] as usize).max(go(t, t.right[i] as usize))
            }
        }
        go(self, 0)
    }

    /// Half-open box `(lo, hi]` per feature containing every input that reaches
    /// the same leaf as `x`.
    pub fn cell(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); x.len()];
        let mut i = 0;
        while self.feature[i] >= 0 {
            let f = self.feature[i] as usize;
            let t = self.threshold[i];
            if x[f] <= t {
                bounds[f].1 = bounds[f].1.min(t);
                i = self.left[i] as usize;
            } else {
                bounds[f].0 = bounds[f].0.max(t);
                i = self.right[i] as usize;
            }
        }
        bounds
    }

    fn validate(&self, n_features: usize) -> Result<()> {
        let n = self.feature.len();
        if n == 0
            || [self.threshold.len(), self.left.len(), self.right.len(), self.value.len()]
                .iter()
                .any(|&l| l != n)
        {
            return Err(Error::Format("tree arrays have inconsistent lengths".into()));
        }
        for i in 0..n {
            if self.feature[i] >= 0 {
                let (l, r) = (self.left[i] as usize, self.right[i] as usize);
                // children always follow their parent, so traversal terminates
                if self.feature[i] as usize >= n_features || l <= i || r <= i || l >= n || r >= n {
                    return Err(Error::Format(format!("tree node {i} is malformed")));
                }
            }
            if (self.feature[i] >= 0 && !self.threshold[i].is_finite()) || !self.value[i].is_finite() {
                return Err(Error::Format(format!("tree node {i} holds a non-finite value")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmModel {
    pub config: GbmConfig,
    pub n_features: usize,
    pub n_targets: usize,
    pub base_prediction: Vec<f64>,
    /// `trees[target][stage]`.
    pub trees: Vec<Vec<Tree>>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    #[serde(flatten)]
    model: GbmModel,
}

/// Training MSE per target, before the first stage and after every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub mse: Vec<Vec<f64>>,
}

fn check_matrix(name: &str, m: &[Vec<f64>]) -> Result<usize> {
    let width = m.first().map_or(0, Vec::len);
    for (i, row) in m.iter().enumerate() {
        if row.len() != width {
            return Err(Error::shape(format!("{name} rows of width {width}"), format!("row {i} of width {}", row.len())));
        }
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!("{name}[{i}][{j}] is not finite")));
        }
    }
    Ok(width)
}

/// Mean that returns the common value exactly when all entries agree.
fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let first = it.next().unwrap_or(0.0);
    if it.all(|v| v == first) {
        return first;
    }
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    /// Sample indices sorted by each feature, ties by index.
    order: &'a [Vec<usize>],
    cfg: &'a GbmConfig,
    residual: &'a [f64],
    tree: Tree,
}

impl TreeBuilder<'_> {
    fn best_split(&self, member: &[bool], count: usize) -> Option<Split> {
        let msl = self.cfg.min_samples_leaf;
        if count < 2 * msl {
            return None;
        }
        let total: f64 = (0..self.x.len()).filter(|&i| member[i]).map(|i| self.residual[i]).sum();
        let parent = total * total / count as f64;
        let mut best: Option<Split> = None;
        for (f, order) in self.order.iter().enumerate() {
            let mut left_sum = 0.0;
            let mut left_n = 0usize;
            let mut prev: Option<usize> = None;
            for &i in order.iter().filter(|&&i| member[i]) {
                if let Some(p) = prev {
                    let (a, b) = (self.x[p][f], self.x[i][f]);
                    if a < b && left_n >= msl && count - left_n >= msl {
                        let right_sum = total - left_sum;
                        let gain = left_sum * left_sum / left_n as f64
                            + right_sum * right_sum / (count - left_n) as f64
                            - parent;
                        if gain > 0.0 && best.as_ref().map_or(true, |s| gain > s.gain) {
                            let mid = a + (b - a) / 2.0;
                            let threshold = if mid < b { mid } else { a };
                            best = Some(Split { feature: f, threshold, gain });
                        }
                    }
                }
                left_sum += self.residual[i];
                left_n += 1;
                prev = Some(i);
            }
        }
        best
    }

    fn push_leaf(&mut self) -> usize {
        self.tree.feature.push(-1);
        self.tree.threshold.push(0.0);
        self.tree.left.push(0);
        self.tree.right.push(0);
        self.tree.value.push(0.0);
        self.tree.feature.len() - 1
    }

    fn grow(&mut self, member: Vec<bool>, depth: usize) -> usize {
        let node = self.push_leaf();
        let count = member.iter().filter(|&&m| m).count();
        if depth >= self.cfg.max_depth {
            return node;
        }
        let Some(split) = self.best_split(&member, count) else {
            return node;
        };
        let (mut l, mut r) = (vec![false; member.len()], vec![false; member.len()]);
        for (i, &m) in member.iter().enumerate() {
            if m {
                if self.x[i][split.feature] <= split.threshold {
                    l[i] = true;
                } else {
                    r[i] = true;
                }
            }
        }
        self.tree.feature[node] = split.feature as i32;
        self.tree.threshold[node] = split.threshold;
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.tree.left[node] = left as u32;
        self.tree.right[node] = right as u32;
        node
    }
}

/// Fits one tree to `residual` on the rows flagged in `member`, then sets each
/// leaf to the mean residual of all training rows routed to it.
fn fit_tree(x: &[Vec<f64>], order: &[Vec<usize>], residual: &[f64], member: Vec<bool>, cfg: &GbmConfig) -> Tree {
    let empty = Tree { feature: vec![], threshold: vec![], left: vec![], right: vec![], value: vec![] };
    let mut b = TreeBuilder { x, order, cfg, residual, tree: empty };
    b.grow(member, 0);
    let mut tree = b.tree;
    let mut sums = vec![(0.0, 0usize, true, f64::NAN); tree.n_nodes()];
    for (i, row) in x.iter().enumerate() {
        let leaf = tree.leaf_index(row);
        let s = &mut sums[leaf];
        if s.1 == 0 {
            s.3 = residual[i];
        }
        s.2 &= residual[i] == s.3;
        s.0 += residual[i];
        s.1 += 1;
    }
    for (node, (sum, n, same, first)) in sums.into_iter().enumerate() {
        if tree.feature[node] < 0 && n > 0 {
            tree.value[node] = if same { first } else { sum / n as f64 };
        }
    }
    tree
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64
}

pub fn train(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &GbmConfig) -> Result<GbmModel> {
    Ok(train_traced(x, y, cfg)?.0)
}

/// Stage-wise boosting; also returns the per-stage training MSE.
pub fn train_traced(x: &[Vec<f64>], y: &[Vec<f64>], cfg: &GbmConfig) -> Result<(GbmModel, TrainingTrace)> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} target rows", x.len()), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("gradient boosting needs at least 2 samples, got {n}")));
    }
    let p = check_matrix("X", x)?;
    let q = check_matrix("Y", y)?;
    if p == 0 || q == 0 {
        return Err(Error::InvalidData("feature and target matrices must have columns".into()));
    }
    let order: Vec<Vec<usize>> = (0..p)
        .map(|f| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let n_sub = ((cfg.subsample * n as f64).floor() as usize).clamp(1, n);
    let mut base_prediction = Vec::with_capacity(q);
    let mut trees = Vec::with_capacity(q);
    let mut trace = Vec::with_capacity(q);
    for t in 0..q {
        let target: Vec<f64> = y.iter().map(|row| row[t]).collect();
        let base = mean(target.iter().copied());
        let mut pred = vec![base; n];
        let mut curve = vec![mse(&pred, &target)];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(t as u64 + 1)));
        let mut stages = Vec::with_capacity(cfg.n_trees);
        for _ in 0..cfg.n_trees {
            let residual: Vec<f64> = target.iter().zip(&pred).map(|(a, b)| a - b).collect();
            let member = if n_sub == n {
                vec![true; n]
            } else {
                let mut m = vec![false; n];
                for i in sample(&mut rng, n, n_sub) {
                    m[i] = true;
                }
                m
            };
            let tree = fit_tree(x, &order, &residual, member, cfg);
            for (i, row) in x.iter().enumerate() {
                pred[i] += cfg.learning_rate * tree.predict(row);
            }
            curve.push(mse(&pred, &target));
            stages.push(tree);
        }
        base_prediction.push(base);
        trees.push(stages);
        trace.push(curve);
    }
    let model = GbmModel { config: cfg.clone(), n_features: p, n_targets: q, base_prediction, trees };
    Ok((model, TrainingTrace { mse: trace }))
}

impl GbmModel {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::shape(self.n_features, x.len()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("prediction input is not finite".into()));
        }
        Ok(self
            .base_prediction
            .iter()
            .zip(&self.trees)
            .map(|(&base, stages)| {
                let mut f = base;
                for tree in stages {
                    f += self.config.learning_rate * tree.predict(x);
                }
                f
            })
            .collect())
    }

    pub fn save(&self) -> Vec<u8> {
        let file = ModelFile { version: MODEL_VERSION, model: self.clone() };
        serde_json::to_vec(&file).expect("model serializes")
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| Error::Format(e.to_string()))?;
        let version = value.get("version").and_then(|v| v.as_u64());
        if version != Some(MODEL_VERSION as u64) {
            return Err(Error::Format(format!("model version {version:?} is not supported (expected {MODEL_VERSION})")));
        }
        let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
        let m = file.model;
        m.config.validate().map_err(|e| Error::Format(e.to_string()))?;
        if m.base_prediction.len() != m.n_targets || m.trees.len() != m.n_targets {
            return Err(Error::Format("target count does not match the stored ensembles".into()));
        }
        for stages in &m.trees {
            for tree in stages {
                tree.validate(m.n_features)?;
            }
        }
        Ok(m)
    }
}

/// Feature and target columns read from a headed CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub target_names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

/// Reads a CSV whose header names every column; columns listed in `targets`
/// become targets and the rest features, both in file order.
pub fn read_csv<R: Read>(reader: R, targets: &[&str]) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::ingest("line 1", e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    for t in targets {
        if !headers.iter().any(|h| h == t) {
            return Err(Error::ingest("line 1", format!("target column '{t}' is missing")));
        }
    }
    let is_target: Vec<bool> = headers.iter().map(|h| targets.contains(&h.as_str())).collect();
    let mut ds = Dataset {
        feature_names: headers.iter().zip(&is_target).filter(|(_, t)| !**t).map(|(h, _)| h.clone()).collect(),
        target_names: headers.iter().zip(&is_target).filter(|(_, t)| **t).map(|(h, _)| h.clone()).collect(),
        x: Vec::new(),
        y: Vec::new(),
    };
    for (r, record) in rdr.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| Error::ingest(format!("line {line}"), e.to_string()))?;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::ingest(format!("line {line}, column '{}'", headers[c]), format!("'{field}' is not a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::ingest(format!("line {line}, column '{}'", headers[c]), "value is not finite"));
            }
            if is_target[c] {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
        ds.x.push(xs);
        ds.y.push(ys);
    }
    Ok(ds)
}
