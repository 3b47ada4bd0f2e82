//! Held-out scoring on relative metric change, the Approach A / B comparison,
//! shuffled-dose controls, and the side-by-side comparison report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::axes::RoiMask;
use crate::cohort::{source_state, split_by_patient, training_cases, PatientRecord, Phase, SourceState};
use crate::doseresponse::{
    calibrate_cases, predict_delta_b, predict_post_a, train_approach_a, train_approach_b, BTrainingReport,
    CalibrationOptions, DoseVector, TrainingCase, EPS_DIV,
};
use crate::error::{Error, Result};
use crate::faceworld::Generator;
use crate::gbm::{GbmConfig, GbmModel};
use crate::geometry::{face_metrics, MetricVector, RegionIndexTable, N_METRICS};

pub const REPORT_VERSION: u32 = 1;

/// Metric slots measured as landmark distances (all but the mouth angle).
pub const DISTANCE_BASED: [usize; 5] = [0, 1, 2, 3, 5];

/// A statistic that may be undefined on degenerate data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stat {
    Value(f64),
    /// Zero variance on either side.
    Undefined,
    NegInfinity,
}

impl Stat {
    pub fn value(&self) -> Option<f64> {
        match self {
            Stat::Value(v) => Some(*v),
            _ => None,
        }
    }

    fn render(&self, decimals: usize) -> String {
        match self {
            Stat::Value(v) => format!("{v:.decimals$}"),
            Stat::Undefined => "nan".into(),
            Stat::NegInfinity => "-inf".into(),
        }
    }
}

impl Serialize for Stat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Stat::Value(v) => s.serialize_f64(*v),
            Stat::Undefined => s.serialize_str("nan"),
            Stat::NegInfinity => s.serialize_str("-inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Stat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Flag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Stat::Value(v)),
            Raw::Flag(f) if f == "nan" => Ok(Stat::Undefined),
            Raw::Flag(f) if f == "-inf" => Ok(Stat::NegInfinity),
            Raw::Flag(f) => Err(serde::de::Error::custom(format!("unknown statistic flag '{f}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub n: usize,
    pub mae: f64,
    pub r2: Stat,
    pub pearson: Stat,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// MAE, R^2 about the true mean, and Pearson r of one metric column.
pub fn score_column(pred: &[f64], truth: &[f64]) -> Result<MetricScore> {
    if pred.len() != truth.len() {
        return Err(Error::shape(truth.len(), pred.len()));
    }
    if truth.len() < 2 {
        return Err(Error::InsufficientData(format!("scoring needs at least 2 pairs, got {}", truth.len())));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(Error::InvalidData("scores need finite predictions and truths".into()));
    }
    let n = truth.len();
    let mae = pred.iter().zip(truth).map(|(p, t)| (t - p).abs()).sum::<f64>() / n as f64;
    let mt = mean(truth);
    let mp = mean(pred);
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (t - p) * (t - p)).sum();
    let sst: f64 = truth.iter().map(|t| (t - mt) * (t - mt)).sum();
    let r2 = if sst > 0.0 {
        Stat::Value(1.0 - sse / sst)
    } else if sse == 0.0 {
        Stat::Value(0.0)
    } else {
        Stat::NegInfinity
    };
    let spp: f64 = pred.iter().map(|p| (p - mp) * (p - mp)).sum();
    let spt: f64 = pred.iter().zip(truth).map(|(p, t)| (p - mp) * (t - mt)).sum();
    let pearson = if sst > 0.0 && spp > 0.0 {
        Stat::Value((spt / (spp.sqrt() * sst.sqrt())).clamp(-1.0, 1.0))
    } else {
        Stat::Undefined
    };
    Ok(MetricScore { n, mae, r2, pearson })
}

/// Per-metric scores over paired 6-vectors of relative change.
pub fn score(pred_dm: &[[f64; N_METRICS]], true_dm: &[[f64; N_METRICS]]) -> Result<Vec<MetricScore>> {
    if pred_dm.len() != true_dm.len() {
        return Err(Error::shape(true_dm.len(), pred_dm.len()));
    }
    (0..N_METRICS)
        .map(|k| {
            let p: Vec<f64> = pred_dm.iter().map(|v| v[k]).collect();
            let t: Vec<f64> = true_dm.iter().map(|v| v[k]).collect();
            score_column(&p, &t)
        })
        .collect()
}

/// `(m - m_src) / m_src` with components below `EPS_DIV` left out.
pub fn relative_change(m_src: &MetricVector, m: &MetricVector) -> [Option<f64>; N_METRICS] {
    let (s, m) = (m_src.to_array(), m.to_array());
    std::array::from_fn(|k| (s[k].abs() >= EPS_DIV).then(|| (m[k] - s[k]) / s[k]))
}

/// Shared pipeline context.
pub struct Pipeline<'a, G: Generator + ?Sized> {
    pub world: &'a G,
    pub world_id: &'a str,
    pub table: &'a RegionIndexTable,
    pub masks: &'a [RoiMask],
}

/// Pre-treatment inputs of one held-out case. Holds no post-treatment data.
#[derive(Debug, Clone)]
pub struct TestInput {
    pub patient_id: String,
    pub expression: String,
    pub u: DoseVector,
    pub state: SourceState,
}

/// Builds prediction inputs from records stripped of every post session.
pub fn test_inputs<G: Generator + ?Sized>(records: &[PatientRecord], ctx: &Pipeline<G>) -> Result<Vec<TestInput>> {
    let mut out = Vec::new();
    for r in records {
        let pre_only = r.without_post();
        let mut seen = BTreeSet::new();
        for s in &pre_only.sessions {
            if !seen.insert(s.expression.clone()) || r.session(Phase::Post, &s.expression).is_none() {
                continue;
            }
            let state = source_state(&r.patient_id, &s.landmarks, ctx.world, ctx.world_id, ctx.table, ctx.masks)?;
            out.push(TestInput {
                patient_id: r.patient_id.clone(),
                expression: s.expression.clone(),
                u: r.dose.clone(),
                state,
            });
        }
    }
    Ok(out)
}

/// Post-treatment metrics keyed by (patient, expression); read only by scoring.
pub fn test_truth(records: &[PatientRecord], table: &RegionIndexTable) -> Result<BTreeMap<(String, String), MetricVector>> {
    let mut out = BTreeMap::new();
    for r in records {
        for s in r.sessions.iter().filter(|s| s.phase == Phase::Post) {
            let key = (r.patient_id.clone(), s.expression.clone());
            if !out.contains_key(&key) {
                out.insert(key, face_metrics(&s.landmarks, table)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePrediction {
    pub patient_id: String,
    pub expression: String,
    pub m_src: [f64; N_METRICS],
    pub dm_true: [Option<f64>; N_METRICS],
    pub dm_a: Option<[Option<f64>; N_METRICS]>,
    pub dm_b: Option<[f64; N_METRICS]>,
}

/// Relative-change predictions of whichever models are present.
pub fn predict_cases<G: Generator + ?Sized>(
    inputs: &[TestInput],
    truth: &BTreeMap<(String, String), MetricVector>,
    model_a: Option<&GbmModel>,
    model_b: Option<&GbmModel>,
    ctx: &Pipeline<G>,
) -> Result<Vec<CasePrediction>> {
    inputs
        .iter()
        .map(|inp| {
            let s = &inp.state;
            let dm_a = model_a
                .map(|m| {
                    let post = predict_post_a(&inp.u, &s.m_src, &s.w_src, &s.basis, m, ctx.world, ctx.table)?;
                    Ok::<_, Error>(relative_change(&s.m_src, &post.metrics))
                })
                .transpose()?;
            let dm_b = model_b.map(|m| predict_delta_b(&inp.u, &s.m_src, m)).transpose()?;
            let key = (inp.patient_id.clone(), inp.expression.clone());
            let post = truth.get(&key).ok_or_else(|| {
                Error::InvalidData(format!("no post-treatment truth for {} / {}", key.0, key.1))
            })?;
            Ok(CasePrediction {
                patient_id: inp.patient_id.clone(),
                expression: inp.expression.clone(),
                m_src: s.m_src.to_array(),
                dm_true: relative_change(&s.m_src, post),
                dm_a,
                dm_b,
            })
        })
        .collect()
}

fn column(preds: &[CasePrediction], k: usize, approach: char) -> (Vec<f64>, Vec<f64>) {
    let mut p = Vec::with_capacity(preds.len());
    let mut t = Vec::with_capacity(preds.len());
    for c in preds {
        let guess = match approach {
            'a' => c.dm_a.and_then(|v| v[k]),
            _ => c.dm_b.map(|v| v[k]),
        };
        if let (Some(g), Some(truth)) = (guess, c.dm_true[k]) {
            p.push(g);
            t.push(truth);
        }
    }
    (p, t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub key: String,
    pub distance_based: bool,
    pub a: Option<MetricScore>,
    pub b: Option<MetricScore>,
}

/// Mean held-out Pearson r of models trained on dose-permuted data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    pub replicates: usize,
    /// Whether each replicate draws a fresh patient split.
    pub resplit: bool,
    pub mean_pearson_a: [Option<f64>; N_METRICS],
    pub mean_pearson_b: [Option<f64>; N_METRICS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub n_train_patients: Option<usize>,
    pub n_test_patients: usize,
    pub n_test: usize,
    pub approach_a: bool,
    pub approach_b: bool,
    pub rows: Vec<ReportRow>,
    pub shuffled_control: Option<ControlReport>,
}

fn score_rows(preds: &[CasePrediction], has_a: bool, has_b: bool) -> Result<Vec<ReportRow>> {
    (0..N_METRICS)
        .map(|k| {
            let get = |present: bool, approach: char| -> Result<Option<MetricScore>> {
                if !present {
                    return Ok(None);
                }
                let (p, t) = column(preds, k, approach);
                score_column(&p, &t).map(Some)
            };
            Ok(ReportRow {
                metric: MetricVector::LABELS[k].to_string(),
                key: MetricVector::KEYS[k].to_string(),
                distance_based: DISTANCE_BASED.contains(&k),
                a: get(has_a, 'a')?,
                b: get(has_b, 'b')?,
            })
        })
        .collect()
}

/// SHA-256 of the serialized configuration and the input records.
pub fn config_hash<C: Serialize>(cfg: &C, train: &[PatientRecord], test: &[PatientRecord], world_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    h.update(world_id.as_bytes());
    for (tag, records) in [(b'T', train), (b'E', test)] {
        for r in records {
            h.update([tag]);
            h.update(r.to_json().as_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn patient_ids(records: &[PatientRecord]) -> BTreeSet<&str> {
    records.iter().map(|r| r.patient_id.as_str()).collect()
}

/// Scores already-trained models on held-out records; either model may be absent.
pub fn evaluate_models<G: Generator + ?Sized>(
    test: &[PatientRecord],
    model_a: Option<&GbmModel>,
    model_b: Option<&GbmModel>,
    seed: u64,
    ctx: &Pipeline<G>,
) -> Result<(EvalReport, Vec<CasePrediction>)> {
    if model_a.is_none() && model_b.is_none() {
        return Err(Error::InvalidData("evaluation needs at least one trained model".into()));
    }
    let inputs = test_inputs(test, ctx)?;
    let truth = test_truth(test, ctx.table)?;
    let preds = predict_cases(&inputs, &truth, model_a, model_b, ctx)?;
    let rows = score_rows(&preds, model_a.is_some(), model_b.is_some())?;
    let hash_cfg = (seed, model_a, model_b);
    let report = EvalReport {
        version: REPORT_VERSION,
        config_hash: config_hash(&hash_cfg, &[], test, ctx.world_id),
        seed,
        n_train_patients: None,
        n_test_patients: patient_ids(test).len(),
        n_test: preds.len(),
        approach_a: model_a.is_some(),
        approach_b: model_b.is_some(),
        rows,
        shuffled_control: None,
    };
    Ok((report, preds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonConfig {
    pub gbm_a: GbmConfig,
    pub gbm_b: GbmConfig,
    pub calibration: CalibrationOptions,
    /// Dose permutations averaged by the shuffled control; 0 skips it.
    pub shuffles: usize,
    pub seed: u64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        ComparisonConfig {
            gbm_a: GbmConfig::default(),
            gbm_b: GbmConfig::default(),
            calibration: CalibrationOptions::default(),
            shuffles: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: EvalReport,
    pub predictions: Vec<CasePrediction>,
    pub model_a: GbmModel,
    pub model_b: GbmModel,
    pub b_report: BTrainingReport,
}

fn check_disjoint(train: &[PatientRecord], test: &[PatientRecord]) -> Result<()> {
    let train_ids = patient_ids(train);
    if let Some(id) = patient_ids(test).into_iter().find(|id| train_ids.contains(id)) {
        return Err(Error::InvalidData(format!("patient '{id}' appears in both the training and the test split")));
    }
    Ok(())
}

/// Every case handed to training must belong to a training patient.
fn guard_training_inputs(cases: &[TrainingCase], train_ids: &BTreeSet<&str>) -> Result<()> {
    match cases.iter().find(|c| !train_ids.contains(c.patient_id.as_str())) {
        Some(c) => Err(Error::InvalidData(format!("training input includes non-training patient '{}'", c.patient_id))),
        None => Ok(()),
    }
}

/// Reassigns doses among the training patients by a seeded permutation.
fn shuffle_doses(cases: &[TrainingCase], seed: u64) -> Vec<TrainingCase> {
    let mut dose: BTreeMap<&str, &DoseVector> = BTreeMap::new();
    for c in cases {
        dose.entry(c.patient_id.as_str()).or_insert(&c.u);
    }
    let ids: Vec<&str> = dose.keys().copied().collect();
    let mut perm = ids.clone();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let map: BTreeMap<&str, &str> = ids.into_iter().zip(perm).collect();
    cases
        .iter()
        .map(|c| TrainingCase { u: dose[map[c.patient_id.as_str()]].clone(), ..c.clone() })
        .collect()
}

type PearsonPair = ([Option<f64>; N_METRICS], [Option<f64>; N_METRICS]);

fn shuffled_pearson<G: Generator + ?Sized>(
    calibrated_train: &[TrainingCase],
    inputs: &[TestInput],
    truth: &BTreeMap<(String, String), MetricVector>,
    cfg: &ComparisonConfig,
    perm_seed: u64,
    ctx: &Pipeline<G>,
) -> Result<PearsonPair> {
    let shuffled = shuffle_doses(calibrated_train, perm_seed);
    let a = train_approach_a(&shuffled, &cfg.gbm_a)?;
    let (b, _) = train_approach_b(&shuffled, &cfg.gbm_b)?;
    let preds = predict_cases(inputs, truth, Some(&a), Some(&b), ctx)?;
    let rows = score_rows(&preds, true, true)?;
    let pick = |f: fn(&ReportRow) -> Option<MetricScore>| -> [Option<f64>; N_METRICS] {
        std::array::from_fn(|k| f(&rows[k]).and_then(|s| s.pearson.value()))
    };
    Ok((pick(|r| r.a), pick(|r| r.b)))
}

fn average(samples: &[PearsonPair]) -> ([Option<f64>; N_METRICS], [Option<f64>; N_METRICS]) {
    let avg = |pick: fn(&PearsonPair) -> &[Option<f64>; N_METRICS]| -> [Option<f64>; N_METRICS] {
        std::array::from_fn(|k| {
            let v: Vec<f64> = samples.iter().filter_map(|s| pick(s)[k]).collect();
            (!v.is_empty()).then(|| mean(&v))
        })
    };
    (avg(|s| &s.0), avg(|s| &s.1))
}

/// Trains both approaches on `train`, scores them on `test`, and averages a
/// shuffled-dose control over `cfg.shuffles` permutations of the training doses.
pub fn run_comparison<G: Generator + ?Sized>(
    train: &[PatientRecord],
    test: &[PatientRecord],
    cfg: &ComparisonConfig,
    ctx: &Pipeline<G>,
) -> Result<Comparison> {
    check_disjoint(train, test)?;
    let train_ids = patient_ids(train);
    let mut cases = training_cases(train, ctx.world, ctx.world_id, ctx.table, ctx.masks)?;
    guard_training_inputs(&cases, &train_ids)?;
    calibrate_cases(&mut cases, ctx.world, ctx.table, &cfg.calibration)?;
    let model_a = train_approach_a(&cases, &cfg.gbm_a)?;
    let (model_b, b_report) = train_approach_b(&cases, &cfg.gbm_b)?;

    let inputs = test_inputs(test, ctx)?;
    let truth = test_truth(test, ctx.table)?;
    let predictions = predict_cases(&inputs, &truth, Some(&model_a), Some(&model_b), ctx)?;
    let rows = score_rows(&predictions, true, true)?;

    let shuffled_control = if cfg.shuffles > 0 {
        let samples = (0..cfg.shuffles as u64)
            .map(|s| shuffled_pearson(&cases, &inputs, &truth, cfg, cfg.seed.wrapping_add(s), ctx))
            .collect::<Result<Vec<_>>>()?;
        let (a, b) = average(&samples);
        Some(ControlReport { replicates: cfg.shuffles, resplit: false, mean_pearson_a: a, mean_pearson_b: b })
    } else {
        None
    };
    let report = EvalReport {
        version: REPORT_VERSION,
        config_hash: config_hash(cfg, train, test, ctx.world_id),
        seed: cfg.seed,
        n_train_patients: Some(train_ids.len()),
        n_test_patients: patient_ids(test).len(),
        n_test: predictions.len(),
        approach_a: true,
        approach_b: true,
        rows,
        shuffled_control,
    };
    Ok(Comparison { report, predictions, model_a, model_b, b_report })
}

/// Shuffled-dose control averaged over `replicates` fresh patient splits,
/// each with its own dose permutation. Each case is calibrated once; a
/// replicate trains only on the cases of its own training patients.
pub fn resplit_control<G: Generator + ?Sized>(
    records: &[PatientRecord],
    ratio: f64,
    replicates: usize,
    cfg: &ComparisonConfig,
    ctx: &Pipeline<G>,
) -> Result<ControlReport> {
    let mut cache: BTreeMap<(String, String), TrainingCase> = BTreeMap::new();
    let mut samples = Vec::with_capacity(replicates);
    for rep in 0..replicates as u64 {
        let seed = cfg.seed.wrapping_add(rep);
        let (train, test) = split_by_patient(records, ratio, seed)?;
        let mut cases = Vec::new();
        for c in training_cases(&train, ctx.world, ctx.world_id, ctx.table, ctx.masks)? {
            let key = (c.patient_id.clone(), c.expression.clone());
            if !cache.contains_key(&key) {
                let mut one = [c];
                calibrate_cases(&mut one, ctx.world, ctx.table, &cfg.calibration)?;
                let [c] = one;
                cache.insert(key.clone(), c);
            }
            cases.push(cache[&key].clone());
        }
        guard_training_inputs(&cases, &patient_ids(&train))?;
        let inputs = test_inputs(&test, ctx)?;
        let truth = test_truth(&test, ctx.table)?;
        samples.push(shuffled_pearson(&cases, &inputs, &truth, cfg, seed, ctx)?);
    }
    let (a, b) = average(&samples);
    Ok(ControlReport { replicates, resplit: true, mean_pearson_a: a, mean_pearson_b: b })
}

fn pair(a: Option<String>, b: Option<String>) -> String {
    format!("A {} / B {}", a.as_deref().unwrap_or("n/a"), b.as_deref().unwrap_or("n/a"))
}

/// Plain-text table: one row per metric with MAE (raw and x100), R^2 and r for A and B.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Approach A (Generative) vs. Approach B (Direct)");
    let train = report.n_train_patients.map_or("n/a".to_string(), |n| n.to_string());
    let _ = writeln!(
        out,
        "seed {} | train patients {} | test patients {} | test cases {} | config {}",
        report.seed, train, report.n_test_patients, report.n_test, report.config_hash
    );
    for (present, name) in [(report.approach_a, "A"), (report.approach_b, "B")] {
        if !present {
            let _ = writeln!(out, "Approach {name}: absent (no trained model)");
        }
    }
    let _ = writeln!(out, "Metric | MAE | MAE x100 | R² | r");
    for row in &report.rows {
        let f = |s: Option<MetricScore>, g: &dyn Fn(MetricScore) -> String| s.map(g);
        let _ = writeln!(
            out,
            "{} | MAE {} | MAE x100 {} | R² {} | r {}",
            row.metric,
            pair(f(row.a, &|s| format!("{:.4}", s.mae)), f(row.b, &|s| format!("{:.4}", s.mae))),
            pair(f(row.a, &|s| format!("{:.2}", 100.0 * s.mae)), f(row.b, &|s| format!("{:.2}", 100.0 * s.mae))),
            pair(f(row.a, &|s| s.r2.render(2)), f(row.b, &|s| s.r2.render(2))),
            pair(f(row.a, &|s| s.pearson.render(2)), f(row.b, &|s| s.pearson.render(2))),
        );
    }
    if let Some(c) = &report.shuffled_control {
        let kind = if c.resplit { "fresh splits" } else { "dose permutations" };
        let _ = writeln!(out, "Shuffled-dose control (mean r over {} {kind})", c.replicates);
        for k in 0..N_METRICS {
            let fmt = |v: Option<f64>| Some(v.map_or("nan".to_string(), |v| format!("{v:.2}")));
            let _ = writeln!(
                out,
                "{} | r {}",
                MetricVector::LABELS[k],
                pair(fmt(c.mean_pearson_a[k]), fmt(c.mean_pearson_b[k]))
            );
        }
    }
    out
}

pub fn report_to_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn report_from_json(text: &str) -> Result<EvalReport> {
    let r: EvalReport = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    if r.version != REPORT_VERSION {
        return Err(Error::Format(format!("report version {} is not supported", r.version)));
    }
    Ok(r)
}

/// One CSV line per case and metric.
pub fn predictions_csv(preds: &[CasePrediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
    w.write_record(["patient_id", "expression", "metric", "m_src", "dm_true", "dm_a", "dm_b"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for c in preds {
        for k in 0..N_METRICS {
            w.write_record([
                c.patient_id.as_str(),
                c.expression.as_str(),
                MetricVector::KEYS[k],
                &format!("{:?}", c.m_src[k]),
                &opt(c.dm_true[k]),
                &opt(c.dm_a.and_then(|v| v[k])),
                &opt(c.dm_b.map(|v| v[k])),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
