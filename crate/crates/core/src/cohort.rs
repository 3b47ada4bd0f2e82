//! Synthetic cohorts with a known dose response, patient-level splits, and
//! validated patient record files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::axes::{combine, patient_basis, AlphaVector, AxisBasis, RoiMask};
use crate::doseresponse::{default_bounds, DoseVector, MuscleMap, TrainingCase, J_MUSCLES};
use crate::error::{Error, Result};
use crate::faceworld::{to_canonical, Generator, LatentCode, SyntheticWorld};
use crate::geometry::{face_metrics, LandmarkSet, MetricVector, RegionIndexTable, N_LANDMARKS};
use crate::region::{Region, K_REGIONS};

pub const RECORD_VERSION: u32 = 1;
pub const TRUTH_VERSION: u32 = 1;

/// Standardized expression sequence, neutral first.
pub const EXPRESSIONS: [&str; 8] = [
    "neutral",
    "brow_raise",
    "gentle_eye_closure",
    "tight_eye_closure",
    "symmetric_smile",
    "strong_smile",
    "lip_pucker",
    "phonation",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub expression: String,
    pub phase: Phase,
    pub timestamp: DateTime<Utc>,
    pub landmarks: LandmarkSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub sessions: Vec<Session>,
    pub dose: DoseVector,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl PatientRecord {
    /// First session of the given phase and expression.
    pub fn session(&self, phase: Phase, expression: &str) -> Option<&Session> {
        self.sessions.iter().find(|s| s.phase == phase && s.expression == expression)
    }

    pub fn has_phase(&self, phase: Phase) -> bool {
        self.sessions.iter().any(|s| s.phase == phase)
    }

    /// Record with every post-phase session removed.
    pub fn without_post(&self) -> PatientRecord {
        PatientRecord {
            sessions: self.sessions.iter().filter(|s| s.phase == Phase::Pre).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serializes");
        v.as_object_mut().expect("object").insert("version".into(), RECORD_VERSION.into());
        serde_json::to_string(&v).expect("record serializes")
    }

    /// Parses and validates one record; `location` prefixes diagnostics.
    pub fn from_json(text: &str, location: &str, bounds: &[f64]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::ingest(format!("{location}:{}:{}", e.line(), e.column()), e.to_string()))?;
        validate_record_value(&value, location, bounds)
    }
}

fn field<'a>(v: &'a serde_json::Value, key: &str, loc: &str) -> Result<&'a serde_json::Value> {
    v.get(key).ok_or_else(|| Error::ingest(loc, format!("missing field '{key}'")))
}

fn validate_record_value(v: &serde_json::Value, loc: &str, bounds: &[f64]) -> Result<PatientRecord> {
    let version = field(v, "version", loc)?.as_u64();
    if version != Some(RECORD_VERSION as u64) {
        return Err(Error::ingest(format!("{loc}: version"), format!("unsupported record version {version:?}")));
    }
    let patient_id = field(v, "patient_id", loc)?
        .as_str()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::ingest(format!("{loc}: patient_id"), "must be a non-empty string"))?
        .to_string();
    let muscles = MuscleMap::default();
    let dose_v = field(v, "dose", loc)?
        .as_array()
        .ok_or_else(|| Error::ingest(format!("{loc}: dose"), "must be an array"))?;
    if dose_v.len() != J_MUSCLES {
        return Err(Error::ingest(
            format!("{loc}: dose"),
            format!("expected {J_MUSCLES} muscle doses, got {}", dose_v.len()),
        ));
    }
    let mut dose = Vec::with_capacity(J_MUSCLES);
    for (j, d) in dose_v.iter().enumerate() {
        let at = format!("{loc}: dose[{j}] ({})", muscles.labels[j]);
        let d = d.as_f64().ok_or_else(|| Error::ingest(&at, "not a number"))?;
        if d < 0.0 {
            return Err(Error::ingest(at, format!("negative dose {d} for muscle {j}")));
        }
        if d > bounds[j] {
            return Err(Error::ingest(at, format!("dose {d} exceeds the bound {} for muscle {j}", bounds[j])));
        }
        dose.push(d);
    }
    let metadata = match v.get("metadata") {
        None | Some(serde_json::Value::Null) => BTreeMap::new(),
        Some(m) => serde_json::from_value(m.clone())
            .map_err(|e| Error::ingest(format!("{loc}: metadata"), e.to_string()))?,
    };
    let sessions_v = field(v, "sessions", loc)?
        .as_array()
        .ok_or_else(|| Error::ingest(format!("{loc}: sessions"), "must be an array"))?;
    let mut sessions = Vec::with_capacity(sessions_v.len());
    for (i, s) in sessions_v.iter().enumerate() {
        let sloc = format!("{loc}: sessions[{i}]");
        let expression = field(s, "expression", &sloc)?
            .as_str()
            .ok_or_else(|| Error::ingest(&sloc, "expression must be a string"))?
            .to_string();
        let sloc = format!("{sloc} ({expression})");
        let phase: Phase = serde_json::from_value(field(s, "phase", &sloc)?.clone())
            .map_err(|_| Error::ingest(&sloc, "phase must be \"pre\" or \"post\""))?;
        let timestamp: DateTime<Utc> = serde_json::from_value(field(s, "timestamp", &sloc)?.clone())
            .map_err(|e| Error::ingest(&sloc, format!("bad timestamp: {e}")))?;
        let lm = field(s, "landmarks", &sloc)?;
        let n = field(lm, "points", &sloc)?.as_array().map(|a| a.len());
        if n != Some(N_LANDMARKS) {
            return Err(Error::ingest(
                format!("{sloc}: landmarks"),
                format!("expected {N_LANDMARKS} points, got {}", n.map_or("none".into(), |n| n.to_string())),
            ));
        }
        let landmarks: LandmarkSet = serde_json::from_value(lm.clone())
            .map_err(|e| Error::ingest(format!("{sloc}: landmarks"), e.to_string()))?;
        sessions.push(Session { expression, phase, timestamp, landmarks });
    }
    if !sessions.iter().any(|s| s.phase == Phase::Pre) {
        return Err(Error::ingest(format!("{loc}: sessions"), "at least one pre-phase session is required"));
    }
    let last_pre = sessions.iter().filter(|s| s.phase == Phase::Pre).map(|s| s.timestamp).max();
    if let Some((i, s)) = sessions
        .iter()
        .enumerate()
        .find(|(_, s)| s.phase == Phase::Post && Some(s.timestamp) <= last_pre)
    {
        return Err(Error::ingest(
            format!("{loc}: sessions[{i}] ({})", s.expression),
            "post-phase session is not later than every pre-phase session",
        ));
    }
    Ok(PatientRecord { patient_id, sessions, dose: DoseVector(dose), metadata })
}

/// Reads one record file or every `*.json` file of a directory, in name order.
pub fn ingest(path: &Path) -> Result<Vec<PatientRecord>> {
    ingest_with_bounds(path, &default_bounds())
}

pub fn ingest_with_bounds(path: &Path, bounds: &[f64]) -> Result<Vec<PatientRecord>> {
    let files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut v: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let loc = f.display().to_string();
        let text = std::fs::read_to_string(&f).map_err(|e| Error::ingest(&loc, e.to_string()))?;
        let rec = PatientRecord::from_json(&text, &loc, bounds)?;
        if !seen.insert(rec.patient_id.clone()) {
            return Err(Error::ingest(loc, format!("duplicate patient_id '{}'", rec.patient_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Writes one `<patient_id>.json` file per record.
pub fn export(records: &[PatientRecord], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in records {
        std::fs::write(dir.join(format!("{}.json", r.patient_id)), r.to_json())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub images_per_patient: usize,
    pub seed: u64,
    /// Multiplier on the spread of patient latent codes.
    pub asymmetry_scale: f64,
    /// `6 x 22` region-aligned dose gains.
    pub gain: Vec<Vec<f64>>,
    /// Saturation constant of `alpha = 1 - exp(-c * A u)`.
    pub saturation: f64,
    /// Landmark observation noise in pixels; the world's own noise setting is not used.
    pub noise_sigma: f64,
    /// Probability that a given region is treated.
    pub treat_probability: f64,
    /// Fraction of patients receiving no dose at all.
    pub anchor_fraction: f64,
    pub bounds: Vec<f64>,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            n_patients: 46,
            images_per_patient: 8,
            seed: 0,
            asymmetry_scale: 1.0,
            gain: default_gain(&MuscleMap::default()),
            saturation: 0.25,
            noise_sigma: 0.0,
            treat_probability: 0.6,
            anchor_fraction: 0.1,
            bounds: default_bounds(),
        }
    }
}

/// Gains ramping from 0.6x to 1.4x across each region's muscles, summing to 0.8.
pub fn default_gain(muscles: &MuscleMap) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; J_MUSCLES]; K_REGIONS];
    for r in Region::ALL {
        let js = muscles.muscles_of(r);
        let n = js.len() as f64;
        for (m, &j) in js.iter().enumerate() {
            let ramp = if js.len() > 1 { m as f64 / (n - 1.0) } else { 0.5 };
            a[r.index()][j] = 0.8 / n * (0.6 + 0.8 * ramp);
        }
    }
    a
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.images_per_patient == 0 || self.images_per_patient > EXPRESSIONS.len() {
            return Err(Error::InvalidData(format!(
                "need at least one patient and 1..={} images per patient",
                EXPRESSIONS.len()
            )));
        }
        if !(self.saturation > 0.0) || !(self.noise_sigma >= 0.0) || !(self.asymmetry_scale >= 0.0) {
            return Err(Error::InvalidData("saturation must be positive; noise and scale non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.treat_probability) || !(0.0..=1.0).contains(&self.anchor_fraction) {
            return Err(Error::InvalidData("probabilities must lie in [0, 1]".into()));
        }
        if self.bounds.len() != J_MUSCLES || self.bounds.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::InvalidData("dose bounds must be 22 positive values".into()));
        }
        let muscles = MuscleMap::default();
        if self.gain.len() != K_REGIONS || self.gain.iter().any(|row| row.len() != J_MUSCLES) {
            return Err(Error::InvalidData("gain must be a 6 x 22 matrix".into()));
        }
        for (r, row) in self.gain.iter().enumerate() {
            for (j, &g) in row.iter().enumerate() {
                let own = muscles.regions[j].index() == r;
                if !g.is_finite() || g < 0.0 || (!own && g != 0.0) {
                    return Err(Error::InvalidData(format!(
                        "gain[{r}][{j}] must be non-negative and zero outside the muscle's region"
                    )));
                }
            }
        }
        Ok(())
    }

    /// `1 - exp(-c * A u)` per region.
    pub fn response(&self, u: &DoseVector) -> AlphaVector {
        AlphaVector(std::array::from_fn(|r| {
            let drive: f64 = self.gain[r].iter().zip(&u.0).map(|(a, x)| a * x).sum();
            1.0 - (-self.saturation * drive).exp()
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionTruth {
    pub expression: String,
    pub latent: LatentCode,
    pub basis: AxisBasis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub alpha_true: AlphaVector,
    pub expressions: Vec<ExpressionTruth>,
}

/// Hidden ground truth of a synthetic cohort. Only the evaluator reads it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SealedTruth {
    pub version: u32,
    pub seed: u64,
    pub saturation: f64,
    pub gain: Vec<Vec<f64>>,
    pub world: String,
    pub patients: Vec<PatientTruth>,
}

impl SealedTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("truth serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: SealedTruth = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if t.version != TRUTH_VERSION {
            return Err(Error::Format(format!("truth version {} is not supported", t.version)));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    pub truth: SealedTruth,
}

/// Regions activated by each expression with their relative strength.
fn expression_profile(expression: &str) -> &'static [(Region, f64)] {
    use Region::*;
    match expression {
        "brow_raise" => &[(BrowLeft, 1.5), (BrowRight, 1.5)],
        "gentle_eye_closure" => &[(EyeLeft, 0.8), (EyeRight, 0.8)],
        "tight_eye_closure" => &[(EyeLeft, 1.5), (EyeRight, 1.5), (BrowLeft, 0.5), (BrowRight, 0.5)],
        "symmetric_smile" => &[(MouthLeft, 1.2), (MouthRight, 1.2)],
        "strong_smile" => &[(MouthLeft, 1.8), (MouthRight, 1.8), (EyeLeft, 0.4), (EyeRight, 0.4)],
        "lip_pucker" => &[(MouthLeft, 1.0), (MouthRight, 1.0)],
        "phonation" => &[(MouthLeft, 0.7), (MouthRight, 0.7)],
        _ => &[],
    }
}

/// Mirror-symmetric latent offset shared by all patients for one expression.
fn expression_offset(world: &SyntheticWorld, expression: &str, rng: &mut ChaCha8Rng) -> Result<LatentCode> {
    let raw = world.sample_code(rng);
    let sym = LatentCode::midpoint(&raw, &world.mirror_latent(&raw)?)?;
    let mut out = world.mean_code();
    for &(region, strength) in expression_profile(expression) {
        for c in SyntheticWorld::block(region) {
            out.as_mut_slice()[c] = strength * sym.as_slice()[c];
        }
    }
    Ok(out)
}

fn sample_dose(cfg: &CohortConfig, muscles: &MuscleMap, anchor: bool, rng: &mut ChaCha8Rng) -> DoseVector {
    let mut u = vec![0.0; J_MUSCLES];
    for r in Region::ALL {
        let treated = rng.random::<f64>() < cfg.treat_probability;
        let intensity = rng.random_range(0.2..1.0);
        for j in muscles.muscles_of(r) {
            let profile = rng.random_range(0.5..1.0);
            if treated && !anchor {
                u[j] = (intensity * profile * cfg.bounds[j] * 100.0).round() / 100.0;
            }
        }
    }
    DoseVector(u)
}

fn base_time() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2024, 1, 8, 9, 0, 0).single().expect("valid date")
}

/// Generates records and sealed truth. Post faces are
/// `decode(combine(w_e, basis_e, alpha_true)) + noise`, with `basis_e` found on
/// the noiseless pre face.
pub fn generate_cohort(
    cfg: &CohortConfig,
    world: &SyntheticWorld,
    table: &RegionIndexTable,
    masks: &[RoiMask],
) -> Result<Cohort> {
    cfg.validate()?;
    let muscles = MuscleMap::default();
    let mut expr_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e4e4_0000_0001);
    let expressions = &EXPRESSIONS[..cfg.images_per_patient];
    let offsets: Vec<LatentCode> = expressions
        .iter()
        .map(|e| expression_offset(world, e, &mut expr_rng))
        .collect::<Result<_>>()?;
    let width = (cfg.n_patients.max(2) - 1).to_string().len().max(3);
    let mut records = Vec::with_capacity(cfg.n_patients);
    let mut truths = Vec::with_capacity(cfg.n_patients);
    for p in 0..cfg.n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(p as u64 + 1));
        let patient_id = format!("P{p:0width$}");
        let mut w_pat = world.sample_code(&mut rng);
        for v in w_pat.as_mut_slice() {
            *v *= cfg.asymmetry_scale;
        }
        let anchor = rng.random::<f64>() < cfg.anchor_fraction;
        let dose = sample_dose(cfg, &muscles, anchor, &mut rng);
        let alpha_true = cfg.response(&dose);
        let day0 = base_time() + Duration::days(p as i64);
        let mut sessions = Vec::with_capacity(2 * expressions.len());
        let mut posts = Vec::with_capacity(expressions.len());
        let mut expr_truth = Vec::with_capacity(expressions.len());
        for (e, (name, offset)) in expressions.iter().zip(&offsets).enumerate() {
            let mut w_e = w_pat.clone();
            for (v, (o, jitter)) in w_e
                .as_mut_slice()
                .iter_mut()
                .zip(offset.as_slice().iter().zip(world.sample_code(&mut rng).as_slice()))
            {
                // patient-specific, asymmetric share of the expression
                let active = *o != 0.0;
                *v += o + if active { 0.5 * jitter } else { 0.0 };
            }
            let clean = world.decode(&w_e)?;
            let basis = patient_basis(&patient_id, world.fingerprint(), &clean, masks, world, table)?;
            let pre = world.observe_with(&w_e, cfg.noise_sigma, &mut rng)?;
            let post = world.observe_with(&combine(&w_e, &basis, &alpha_true.0)?, cfg.noise_sigma, &mut rng)?;
            let minutes = Duration::minutes(5 * e as i64);
            sessions.push(Session {
                expression: name.to_string(),
                phase: Phase::Pre,
                timestamp: day0 + minutes,
                landmarks: pre,
            });
            posts.push(Session {
                expression: name.to_string(),
                phase: Phase::Post,
                timestamp: day0 + Duration::days(14) + minutes,
                landmarks: post,
            });
            expr_truth.push(ExpressionTruth { expression: name.to_string(), latent: w_e, basis });
        }
        sessions.extend(posts);
        let mut metadata = BTreeMap::new();
        metadata.insert("source".to_string(), "synthetic".to_string());
        records.push(PatientRecord { patient_id: patient_id.clone(), sessions, dose, metadata });
        truths.push(PatientTruth { patient_id, alpha_true, expressions: expr_truth });
    }
    let truth = SealedTruth {
        version: TRUTH_VERSION,
        seed: cfg.seed,
        saturation: cfg.saturation,
        gain: cfg.gain.clone(),
        world: world.fingerprint().to_string(),
        patients: truths,
    };
    Ok(Cohort { records, truth })
}

/// Partitions patient ids at random into `round(ratio * n)` training and the
/// rest test, with at least one patient on each side.
pub fn split_by_patient(records: &[PatientRecord], ratio: f64, seed: u64) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>)> {
    let mut ids: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::InsufficientData(format!("splitting needs at least 2 patients, got {}", ids.len())));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidData(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((ratio * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let train_ids: BTreeSet<&str> = ids[..n_train].iter().copied().collect();
    let (train, test) = records.iter().cloned().partition(|r| train_ids.contains(r.patient_id.as_str()));
    Ok((train, test))
}

/// Source-side latent state of one face.
#[derive(Debug, Clone)]
pub struct SourceState {
    pub src_face: LandmarkSet,
    pub w_src: LatentCode,
    pub basis: AxisBasis,
    pub m_src: MetricVector,
}

pub fn source_state<G: Generator + ?Sized>(
    patient_id: &str,
    face: &LandmarkSet,
    world: &G,
    world_id: &str,
    table: &RegionIndexTable,
    masks: &[RoiMask],
) -> Result<SourceState> {
    let src_face = to_canonical(face, table)?;
    let w_src = world.encode(&src_face)?;
    let basis = patient_basis(patient_id, world_id, &src_face, masks, world, table)?;
    let m_src = face_metrics(&src_face, table)?;
    Ok(SourceState { src_face, w_src, basis, m_src })
}

/// One case per expression that has both a pre and a post session.
pub fn training_cases<G: Generator + ?Sized>(
    records: &[PatientRecord],
    world: &G,
    world_id: &str,
    table: &RegionIndexTable,
    masks: &[RoiMask],
) -> Result<Vec<TrainingCase>> {
    let mut cases = Vec::new();
    for r in records {
        let mut seen = BTreeSet::new();
        for s in r.sessions.iter().filter(|s| s.phase == Phase::Pre) {
            if !seen.insert(s.expression.as_str()) {
                continue;
            }
            let Some(post) = r.session(Phase::Post, &s.expression) else { continue };
            let src = source_state(&r.patient_id, &s.landmarks, world, world_id, table, masks)?;
            cases.push(TrainingCase {
                patient_id: r.patient_id.clone(),
                expression: s.expression.clone(),
                src_face: src.src_face,
                w_src: src.w_src,
                basis: src.basis,
                m_src: src.m_src,
                m_post: face_metrics(&post.landmarks, table)?,
                u: r.dose.clone(),
                alpha_gt: None,
            });
        }
    }
    Ok(cases)
}
