use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{synthetic_base_face, AffineResponse, Generator, LatentCode};
use crate::error::{Error, Result};
use crate::geometry::{LandmarkSet, Point, RegionIndexTable, N_LANDMARKS};
use crate::region::{Region, Side, K_REGIONS};

pub const WORLD_VERSION: u32 = 1;
/// Latent columns dedicated to each region.
pub const REGION_BLOCK: usize = 12;
/// Singular value of every dedicated block before coupling is added.
const BLOCK_GAIN: f64 = 4.0;
/// Standard deviation of patient and expression latent entries.
pub const LATENT_SCALE: f64 = 0.3;
/// Length scale (canonical px) of the off-region coupling falloff.
const COUPLING_WIDTH: f64 = 12.0;
const OBS_DIM: usize = 2 * N_LANDMARKS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub seed: u64,
    pub latent_rows: usize,
    pub latent_cols: usize,
    /// Off-region coupling strength.
    pub epsilon: f64,
    pub noise_sigma: f64,
    /// Ridge weight toward the mean code.
    pub lambda: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            latent_rows: 4,
            latent_cols: 32,
            epsilon: 0.02,
            noise_sigma: 0.0,
            lambda: 1e-6,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.latent_rows * self.latent_cols;
        if !(0.0..=0.2).contains(&self.epsilon) {
            return Err(Error::InvalidData(format!("epsilon {} outside [0, 0.2]", self.epsilon)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidData("noise_sigma must be finite and non-negative".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidData("lambda must be finite and non-negative".into()));
        }
        if n < K_REGIONS * REGION_BLOCK || (n - K_REGIONS * REGION_BLOCK) % 2 != 0 {
            return Err(Error::InvalidData(format!(
                "latent size {n} must be at least {} and leave an even remainder",
                K_REGIONS * REGION_BLOCK
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub lambda: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone)]
pub struct Refinement {
    pub code: LatentCode,
    /// Objective at the start and after every step taken.
    pub objectives: Vec<f64>,
}

/// Affine landmark world: `decode(w) = clamp(base + M * vec(w))`.
///
/// Region `k` owns latent columns `[12k, 12k + 12)`; the remainder is grouped
/// in mirror pairs that move only landmarks outside every region. The map is
/// mirror-equivariant: reflecting a face corresponds to a fixed permutation of
/// latent entries.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    config: WorldConfig,
    base_face: LandmarkSet,
    mixing: DMatrix<f64>,
    gram: DMatrix<f64>,
    normal: Cholesky<f64, Dyn>,
    mirror_perm: Vec<usize>,
    fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct MixingJson {
    rows: usize,
    cols: usize,
    /// Row-major.
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct WorldJson {
    version: u32,
    config: WorldConfig,
    base_face: LandmarkSet,
    mirror_perm: Vec<usize>,
    mixing: MixingJson,
}

/// Reflects a displacement field about a vertical axis and reorders it by the
/// left/right correspondence.
fn reflect_field(col: &[f64], table: &RegionIndexTable) -> Vec<f64> {
    let mut out = vec![0.0; OBS_DIM];
    for i in 0..N_LANDMARKS {
        let j = table.counterpart(i);
        out[2 * i] = -col[2 * j];
        out[2 * i + 1] = col[2 * j + 1];
    }
    out
}

/// Orthonormal columns spanning a random `cols`-dimensional subspace of the
/// rows, optionally orthogonal to translations of point groups.
fn random_orthonormal(rng: &mut ChaCha8Rng, points: usize, cols: usize, zero_mean: bool) -> Result<DMatrix<f64>> {
    let rows = 2 * points;
    let capacity = if zero_mean { rows - 2 } else { rows };
    if cols > capacity {
        return Err(Error::DegenerateConfiguration(format!(
            "{cols} latent directions do not fit into {capacity} landmark coordinates"
        )));
    }
    let mut g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    if zero_mean {
        for c in 0..cols {
            for axis in 0..2 {
                let mean = (0..points).map(|p| g[(2 * p + axis, c)]).sum::<f64>() / points as f64;
                for p in 0..points {
                    g[(2 * p + axis, c)] -= mean;
                }
            }
        }
    }
    Ok(g.qr().q())
}

fn sq_dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl SyntheticWorld {
    pub fn generate(config: WorldConfig, table: &RegionIndexTable) -> Result<Self> {
        config.validate()?;
        table.validate()?;
        let n = config.latent_rows * config.latent_cols;
        let base_face = synthetic_base_face(table);
        let base = base_face.points();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut mixing = DMatrix::<f64>::zeros(OBS_DIM, n);
        let mut mirror_perm: Vec<usize> = (0..n).collect();

        for region in Region::ALL.into_iter().filter(|r| r.side() == Side::Left) {
            let idx = region.landmarks(table);
            let zero_mean = matches!(region, Region::EyeLeft);
            let q = random_orthonormal(&mut rng, idx.len(), REGION_BLOCK, zero_mean)?;
            let in_region = |i: usize| idx.contains(&i);
            // nearest region landmark and its falloff for every other landmark
            let coupling: Vec<Option<(usize, f64)>> = (0..N_LANDMARKS)
                .map(|i| {
                    if in_region(i) {
                        return None;
                    }
                    let (slot, d2) = idx
                        .iter()
                        .enumerate()
                        .map(|(s, &j)| (s, sq_dist(base[i], base[j])))
                        .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
                    Some((slot, (-d2 / (2.0 * COUPLING_WIDTH * COUPLING_WIDTH)).exp()))
                })
                .collect();
            let left0 = region.index() * REGION_BLOCK;
            let right0 = region.mirror().index() * REGION_BLOCK;
            for c in 0..REGION_BLOCK {
                let mut col = vec![0.0; OBS_DIM];
                for (s, &i) in idx.iter().enumerate() {
                    col[2 * i] = BLOCK_GAIN * q[(2 * s, c)];
                    col[2 * i + 1] = BLOCK_GAIN * q[(2 * s + 1, c)];
                }
                for (i, cpl) in coupling.iter().enumerate() {
                    if let Some((s, g)) = *cpl {
                        let j = idx[s];
                        col[2 * i] = config.epsilon * g * col[2 * j];
                        col[2 * i + 1] = config.epsilon * g * col[2 * j + 1];
                    }
                }
                let mirrored = reflect_field(&col, table);
                mixing.set_column(left0 + c, &DVector::from_vec(col));
                mixing.set_column(right0 + c, &DVector::from_vec(mirrored));
                mirror_perm[left0 + c] = right0 + c;
                mirror_perm[right0 + c] = left0 + c;
            }
        }

        let mut in_roi = vec![false; N_LANDMARKS];
        for r in Region::ALL {
            for i in r.landmarks(table) {
                in_roi[i] = true;
            }
        }
        let free: Vec<usize> = table.left_half().into_iter().filter(|&i| !in_roi[i]).collect();
        let pairs = (n - K_REGIONS * REGION_BLOCK) / 2;
        if pairs > 0 {
            let q = random_orthonormal(&mut rng, free.len(), pairs, false)?;
            for p in 0..pairs {
                let mut col = vec![0.0; OBS_DIM];
                for (s, &i) in free.iter().enumerate() {
                    col[2 * i] = BLOCK_GAIN * q[(2 * s, p)];
                    col[2 * i + 1] = BLOCK_GAIN * q[(2 * s + 1, p)];
                }
                let mirrored = reflect_field(&col, table);
                let a = K_REGIONS * REGION_BLOCK + 2 * p;
                mixing.set_column(a, &DVector::from_vec(col));
                mixing.set_column(a + 1, &DVector::from_vec(mirrored));
                mirror_perm[a] = a + 1;
                mirror_perm[a + 1] = a;
            }
        }
        Self::assemble(config, base_face, mixing, mirror_perm)
    }

    fn assemble(config: WorldConfig, base_face: LandmarkSet, mixing: DMatrix<f64>, mirror_perm: Vec<usize>) -> Result<Self> {
        let n = mixing.ncols();
        let gram = mixing.transpose() * &mixing;
        let max_diag = (0..n).map(|i| gram[(i, i)]).fold(0.0, f64::max);
        let rank_ok = Cholesky::new(gram.clone()).is_some_and(|c| {
            let l = c.l_dirty();
            (0..n).all(|i| l[(i, i)] * l[(i, i)] > 1e-10 * max_diag)
        });
        if !rank_ok {
            return Err(Error::DegenerateConfiguration("mixing map is column-rank deficient".into()));
        }
        let mut regularized = gram.clone();
        for i in 0..n {
            regularized[(i, i)] += config.lambda;
        }
        let normal = Cholesky::new(regularized)
            .ok_or_else(|| Error::DegenerateConfiguration("normal equations are singular".into()))?;
        let mut world = SyntheticWorld {
            config,
            base_face,
            mixing,
            gram,
            normal,
            mirror_perm,
            fingerprint: String::new(),
        };
        world.fingerprint = hex(&Sha256::digest(world.to_json().as_bytes()));
        Ok(world)
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn base_face(&self) -> &LandmarkSet {
        &self.base_face
    }

    /// `936 x n` map from the row-major latent to interleaved `(x, y)` offsets.
    pub fn mixing(&self) -> &DMatrix<f64> {
        &self.mixing
    }

    /// SHA-256 of the serialized world.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Latent columns owned by `region`.
    pub fn block(region: Region) -> std::ops::Range<usize> {
        let s = region.index() * REGION_BLOCK;
        s..s + REGION_BLOCK
    }

    /// Latent counterpart of reflecting the decoded face.
    pub fn mirror_latent(&self, w: &LatentCode) -> Result<LatentCode> {
        self.check(w)?;
        let src = w.as_slice();
        let values = self.mirror_perm.iter().map(|&j| src[j]).collect();
        LatentCode::from_vec(self.config.latent_rows, self.config.latent_cols, values)
    }

    /// Draws a latent code with independent `N(0, 0.3^2)` entries.
    pub fn sample_code<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentCode {
        let normal = Normal::new(0.0, LATENT_SCALE).expect("valid scale");
        let (r, c) = self.latent_shape();
        let values = (0..r * c).map(|_| normal.sample(rng)).collect();
        LatentCode::from_vec(r, c, values).expect("finite samples")
    }

    /// Decodes and adds isotropic observation noise of `noise_sigma`.
    pub fn observe<R: Rng + ?Sized>(&self, w: &LatentCode, rng: &mut R) -> Result<LandmarkSet> {
        self.observe_with(w, self.config.noise_sigma, rng)
    }

    /// Decodes and adds isotropic noise of `sigma`, clamped to the frame. No
    /// random numbers are drawn when `sigma == 0`.
    pub fn observe_with<R: Rng + ?Sized>(&self, w: &LatentCode, sigma: f64, rng: &mut R) -> Result<LandmarkSet> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidData(format!("noise sigma {sigma} must be finite and non-negative")));
        }
        let face = self.decode(w)?;
        if sigma == 0.0 {
            return Ok(face);
        }
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        let [fw, fh] = face.frame();
        let pts = face
            .points()
            .iter()
            .map(|p| {
                let x = p[0] + normal.sample(rng);
                let y = p[1] + normal.sample(rng);
                [x.clamp(0.0, fw as f64), y.clamp(0.0, fh as f64)]
            })
            .collect();
        LandmarkSet::new(pts, face.frame())
    }

    fn check(&self, w: &LatentCode) -> Result<()> {
        let shape = self.latent_shape();
        if w.shape() != shape {
            return Err(Error::shape(
                format!("{}x{}", shape.0, shape.1),
                format!("{}x{}", w.shape().0, w.shape().1),
            ));
        }
        Ok(())
    }

    fn check_obs(&self, obs: &LandmarkSet) -> Result<()> {
        if obs.frame() != self.base_face.frame() {
            return Err(Error::shape(
                format!("frame {:?}", self.base_face.frame()),
                format!("frame {:?}", obs.frame()),
            ));
        }
        Ok(())
    }

    /// Unclamped offsets `M * vec(w)`.
    fn offsets(&self, w: &[f64]) -> DVector<f64> {
        &self.mixing * DVector::from_column_slice(w)
    }

    /// `obs - base` as an interleaved vector.
    fn residual_target(&self, obs: &LandmarkSet) -> DVector<f64> {
        DVector::from_iterator(
            OBS_DIM,
            obs.points()
                .iter()
                .zip(self.base_face.points())
                .flat_map(|(o, b)| [o[0] - b[0], o[1] - b[1]]),
        )
    }

    fn points_from_offsets(&self, d: &DVector<f64>) -> Vec<Point> {
        self.base_face
            .points()
            .iter()
            .enumerate()
            .map(|(i, b)| [b[0] + d[2 * i], b[1] + d[2 * i + 1]])
            .collect()
    }

    /// Weighted ridge inversion with exact line search along preconditioned
    /// descent directions. The preconditioner is exact for uniform weights.
    pub fn refine_with(
        &self,
        w0: &LatentCode,
        obs: &LandmarkSet,
        weights: &[f64],
        opts: RefineOptions,
    ) -> Result<Refinement> {
        self.check(w0)?;
        self.check_obs(obs)?;
        if weights.len() != N_LANDMARKS {
            return Err(Error::shape(N_LANDMARKS, weights.len()));
        }
        if weights.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidData("refine weights must be finite and non-negative".into()));
        }
        if !(opts.lambda >= 0.0 && opts.lambda.is_finite()) {
            return Err(Error::InvalidData("lambda must be finite and non-negative".into()));
        }
        let n = w0.as_slice().len();
        let target = self.residual_target(obs);
        let wv = DVector::from_iterator(OBS_DIM, weights.iter().flat_map(|&v| [v, v]));
        let objective = |w: &DVector<f64>| {
            let r = &self.mixing * w - &target;
            r.component_mul(&r).dot(&wv) + opts.lambda * w.norm_squared()
        };
        let mean_weight = weights.iter().sum::<f64>() / N_LANDMARKS as f64;
        let mut precond = &self.gram * mean_weight;
        for i in 0..n {
            precond[(i, i)] += opts.lambda.max(1e-12 * (1.0 + mean_weight));
        }
        let precond = Cholesky::new(precond)
            .ok_or_else(|| Error::DegenerateConfiguration("refine preconditioner is singular".into()))?;

        let mut w = DVector::from_column_slice(w0.as_slice());
        let mut objectives = vec![objective(&w)];
        for _ in 0..opts.max_steps {
            let r = &self.mixing * &w - &target;
            let grad = (self.mixing.tr_mul(&r.component_mul(&wv)) + &w * opts.lambda) * 2.0;
            let dir = -precond.solve(&grad);
            let slope = grad.dot(&dir);
            if !(slope < 0.0) {
                break;
            }
            let md = &self.mixing * &dir;
            let curvature = 2.0 * (md.component_mul(&md).dot(&wv) + opts.lambda * dir.norm_squared());
            if !(curvature > 0.0) {
                break;
            }
            let t = -slope / curvature;
            let next = &w + &dir * t;
            let f = objective(&next);
            let last = *objectives.last().expect("non-empty");
            if !(f <= last) {
                break;
            }
            w = next;
            objectives.push(f);
            if last - f <= 1e-15 * last.abs().max(1e-300) {
                break;
            }
        }
        let (r, c) = self.latent_shape();
        Ok(Refinement { code: LatentCode::from_vec(r, c, w.as_slice().to_vec())?, objectives })
    }

    pub fn to_json(&self) -> String {
        let m = &self.mixing;
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().copied());
        }
        let doc = WorldJson {
            version: WORLD_VERSION,
            config: self.config.clone(),
            base_face: self.base_face.clone(),
            mirror_perm: self.mirror_perm.clone(),
            mixing: MixingJson { rows: m.nrows(), cols: m.ncols(), data },
        };
        serde_json::to_string(&doc).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WorldJson = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if doc.version != WORLD_VERSION {
            return Err(Error::Format(format!(
                "world version {} is not supported (expected {WORLD_VERSION})",
                doc.version
            )));
        }
        doc.config.validate()?;
        let n = doc.config.latent_rows * doc.config.latent_cols;
        let MixingJson { rows, cols, data } = doc.mixing;
        if rows != OBS_DIM || cols != n || data.len() != rows * cols {
            return Err(Error::Format("mixing map does not match the declared shape".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("mixing map contains non-finite entries".into()));
        }
        let mut perm_seen = vec![false; n];
        if doc.mirror_perm.len() != n
            || doc.mirror_perm.iter().any(|&j| j >= n || std::mem::replace(&mut perm_seen[j], true))
        {
            return Err(Error::Format("mirror permutation is invalid".into()));
        }
        let mixing = DMatrix::from_row_slice(rows, cols, &data);
        Self::assemble(doc.config, doc.base_face, mixing, doc.mirror_perm)
    }
}

impl Generator for SyntheticWorld {
    fn latent_shape(&self) -> (usize, usize) {
        (self.config.latent_rows, self.config.latent_cols)
    }

    fn mean_code(&self) -> LatentCode {
        LatentCode::zeros(self.config.latent_rows, self.config.latent_cols)
    }

    fn decode(&self, w: &LatentCode) -> Result<LandmarkSet> {
        self.check(w)?;
        let d = self.offsets(w.as_slice());
        let [fw, fh] = self.base_face.frame();
        let pts = self
            .points_from_offsets(&d)
            .into_iter()
            .map(|p| [p[0].clamp(0.0, fw as f64), p[1].clamp(0.0, fh as f64)])
            .collect();
        LandmarkSet::new(pts, self.base_face.frame())
    }

    fn encode(&self, obs: &LandmarkSet) -> Result<LatentCode> {
        self.check_obs(obs)?;
        let rhs = self.mixing.tr_mul(&self.residual_target(obs));
        let w = self.normal.solve(&rhs);
        let (r, c) = self.latent_shape();
        LatentCode::from_vec(r, c, w.as_slice().to_vec())
    }

    fn refine(&self, w0: &LatentCode, obs: &LandmarkSet, weights: &[f64]) -> Result<LatentCode> {
        let opts = RefineOptions { lambda: self.config.lambda, max_steps: 30 };
        Ok(self.refine_with(w0, obs, weights, opts)?.code)
    }

    fn affine_response(&self, origin: &LatentCode, directions: &[&LatentCode]) -> Option<AffineResponse> {
        if self.check(origin).is_err() || directions.iter().any(|d| self.check(d).is_err()) {
            return None;
        }
        let base = self.points_from_offsets(&self.offsets(origin.as_slice()));
        let fields = directions
            .iter()
            .map(|d| {
                let v = self.offsets(d.as_slice());
                (0..N_LANDMARKS).map(|i| [v[2 * i], v[2 * i + 1]]).collect()
            })
            .collect();
        Some(AffineResponse { frame: self.base_face.frame(), origin: base, fields })
    }
}
