//! `latentdose` command-line pipeline. Stages exchange data only through files
//! under one data directory; each run leaves `manifests/<subcommand>.json`.

pub mod manifest;

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use latentdose_core::cohort::{generate_cohort, ingest_with_bounds, source_state, split_by_patient, SourceState};
use latentdose_core::doseresponse::{
    calibrate_cases, cases_from_json, cases_to_json, default_bounds, invert_dose, predict_alpha, predict_post_a,
    predict_post_b, simulate_alpha, train_approach_a, train_approach_b, CalibrationOptions, InverseOptions,
    J_MUSCLES,
};
use latentdose_core::evaluation::{
    evaluate_models, predictions_csv, render_text, report_to_json, resplit_control, run_comparison,
    ComparisonConfig, Pipeline,
};
use latentdose_core::{
    face_metrics, AlphaVector, CohortConfig, DoseVector, GbmConfig, GbmModel, LandmarkSet, PatientRecord, Phase,
    RegionIndexTable, RoiMask, SyntheticWorld, TrainingCase, WorldConfig, K_REGIONS, N_METRICS,
};
use latentdose_service::feedback::read_log;
use latentdose_service::layout::{load_masks, load_model, load_table, DataDir};
use latentdose_service::session::PlanningSession;
use latentdose_service::ServiceConfig;
use serde::Serialize;

use crate::manifest::Run;

/// Version stamped on every JSON artifact written by the tool.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "latentdose", version, about = "Dose-response planning over facial landmark asymmetry")]
pub struct Cli {
    /// Root of every artifact; nothing is written outside it.
    #[arg(long, global = true, env = "LATENTDOSE_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with sealed ground truth and a patient split.
    CohortGen(CohortGenArgs),
    /// Validate patient record files and copy them into the data directory.
    Ingest(IngestArgs),
    /// Measure the six asymmetry metrics of a landmark file or records.
    Metrics(MetricsArgs),
    /// Discover a patient's per-region latent axes.
    Axes(AxesArgs),
    /// Build training cases and fit their intensities by analysis-by-synthesis.
    Calibrate(CalibrateArgs),
    /// Fit the Approach A or Approach B dose-response model.
    Train(TrainArgs),
    /// Score the trained models on held-out patients.
    Evaluate(EvaluateArgs),
    /// Predict the outcome of a dose for one patient.
    Simulate(SimulateArgs),
    /// Find a dose that reproduces target intensities for one patient.
    Invert(InvertArgs),
    /// Run the HTTP planning service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Approach {
    A,
    B,
}

#[derive(Debug, Args, Serialize)]
pub struct CohortGenArgs {
    #[arg(long, default_value_t = 46)]
    pub patients: usize,
    /// Expressions recorded per patient, before and after treatment.
    #[arg(long, default_value_t = 8)]
    pub per_patient: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Landmark observation noise in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub anchor_fraction: f64,
    /// Seed of the synthetic world, used only when `world.json` is absent.
    #[arg(long, default_value_t = 0)]
    pub world_seed: u64,
    /// Share of patients in `splits/train`; the rest go to `splits/test`.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    /// Replace existing records and splits.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    /// Record file or directory of record files.
    pub source: PathBuf,
    /// Destination directory, relative to the data directory.
    #[arg(long, default_value = "records")]
    pub dest: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    /// Landmark set file, record file, or directory of record files.
    pub input: PathBuf,
    /// Output file, relative to the data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PatientArgs {
    #[arg(long)]
    pub patient: String,
    /// Defaults to the patient's first pre-treatment expression.
    #[arg(long)]
    pub expression: Option<String>,
    #[arg(long, default_value = "records")]
    pub records_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AxesArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub patient: PatientArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long, default_value = "splits/train")]
    pub records_dir: PathBuf,
    /// Case file, relative to the data directory.
    #[arg(long, default_value = "cases/train.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub approach: Approach,
    /// Calibrated case file; when absent cases are built from `--records-dir`.
    #[arg(long)]
    pub cases: Option<PathBuf>,
    #[arg(long, default_value = "splits/train")]
    pub records_dir: PathBuf,
    /// Also train on accepted clinician feedback from the service's log.
    #[arg(long)]
    pub with_feedback: bool,
    #[arg(long, default_value_t = GbmConfig::default().n_trees)]
    pub trees: usize,
    #[arg(long, default_value_t = GbmConfig::default().max_depth)]
    pub depth: usize,
    #[arg(long, default_value_t = GbmConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = GbmConfig::default().seed)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Train both approaches here and run the shuffled-dose control. Without
    /// it, the models under `models/` are scored and missing ones flagged.
    #[arg(long)]
    pub train_dir: Option<PathBuf>,
    #[arg(long, default_value = "splits/test")]
    pub test_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dose permutations of the shuffled control on the fixed split.
    #[arg(long, default_value_t = 8)]
    pub shuffles: usize,
    /// When positive, the control instead averages this many fresh patient splits.
    #[arg(long, default_value_t = 0)]
    pub resplit: usize,
    /// Base name of the files written under `reports/`.
    #[arg(long, default_value = "evaluation")]
    pub report: String,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub patient: PatientArgs,
    /// 22 per-muscle doses in Units, comma separated.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub dose: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct InvertArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub patient: PatientArgs,
    /// Six target intensities in [0, 1], comma separated, in region order.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub alpha: Vec<f64>,
    #[arg(long, default_value_t = InverseOptions::default().starts)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// Listen address; defaults to `LATENTDOSE_BIND` or 127.0.0.1:8080.
    #[arg(long)]
    pub bind: Option<String>,
    /// Approach A model file; defaults to `models/approach_a.json`.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

/// World, geometry and directory shared by the pipeline stages.
struct Ctx {
    dir: DataDir,
    table: RegionIndexTable,
    world: SyntheticWorld,
    world_id: String,
    masks: Vec<RoiMask>,
}

impl Ctx {
    fn pipeline(&self) -> Pipeline<'_, SyntheticWorld> {
        Pipeline { world: &self.world, world_id: &self.world_id, table: &self.table, masks: &self.masks }
    }
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))
}

/// Loads the world, region table and ROI masks, hashing whichever files exist.
fn context(dir: &DataDir, run: &mut Run) -> Result<Ctx> {
    for p in [dir.world(), dir.region_table(), dir.rois()] {
        if p.exists() {
            run.input(&p)?;
        }
    }
    let table = load_table(dir).context("region table")?;
    let world = if dir.world().exists() {
        SyntheticWorld::from_json(&read_text(&dir.world())?).with_context(|| format!("{}", dir.world().display()))?
    } else {
        SyntheticWorld::generate(WorldConfig::default(), &table)?
    };
    let masks = load_masks(dir, &world, &table).context("ROI masks")?;
    Ok(Ctx { world_id: world.fingerprint().to_string(), dir: dir.clone(), table, world, masks })
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s.into_bytes()
}

fn read_records(dir: &DataDir, p: &Path, run: &mut Run) -> Result<Vec<PatientRecord>> {
    let path = dir.resolve(p);
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    run.input(&path)?;
    let records = ingest_with_bounds(&path, &default_bounds())?;
    if records.is_empty() {
        bail!("{} holds no record files", path.display());
    }
    Ok(records)
}

fn json_files(dir: &Path) -> Vec<PathBuf> {
    let Ok(rd) = std::fs::read_dir(dir) else { return Vec::new() };
    let mut v: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    v
}

fn model_file(dir: &DataDir, approach: Approach) -> PathBuf {
    match approach {
        Approach::A => dir.model_a(),
        Approach::B => dir.model_b(),
    }
}

fn model_rel(approach: Approach) -> &'static str {
    match approach {
        Approach::A => "models/approach_a.json",
        Approach::B => "models/approach_b.json",
    }
}

fn n_targets(approach: Approach) -> usize {
    match approach {
        Approach::A => K_REGIONS,
        Approach::B => N_METRICS,
    }
}

fn optional_model(dir: &DataDir, approach: Approach, run: &mut Run) -> Result<Option<GbmModel>> {
    let p = model_file(dir, approach);
    if !p.exists() {
        return Ok(None);
    }
    run.input(&p)?;
    Ok(Some(load_model(&p, n_targets(approach))?))
}

fn required_model(dir: &DataDir, approach: Approach, run: &mut Run) -> Result<GbmModel> {
    let name = match approach {
        Approach::A => "a",
        Approach::B => "b",
    };
    optional_model(dir, approach, run)?.ok_or_else(|| {
        anyhow!(
            "{} not found; run `latentdose train --approach {name}` first",
            model_file(dir, approach).display()
        )
    })
}

pub fn run(cli: Cli) -> Result<()> {
    let dir = DataDir::new(&cli.data_dir);
    match cli.command {
        Command::CohortGen(a) => cohort_gen(&dir, &a),
        Command::Ingest(a) => ingest(&dir, &a),
        Command::Metrics(a) => metrics(&dir, &a),
        Command::Axes(a) => axes(&dir, &a),
        Command::Calibrate(a) => calibrate(&dir, &a),
        Command::Train(a) => train(&dir, &a),
        Command::Evaluate(a) => evaluate(&dir, &a),
        Command::Simulate(a) => simulate(&dir, &a),
        Command::Invert(a) => invert(&dir, &a),
        Command::Serve(a) => serve(&dir, &a),
    }
}

fn args_value<T: Serialize>(a: &T) -> serde_json::Value {
    serde_json::to_value(a).expect("arguments serialize")
}

fn cohort_gen(dir: &DataDir, a: &CohortGenArgs) -> Result<()> {
    let mut run = Run::new(dir.root(), "cohort-gen", args_value(a), Some(a.seed));
    let targets = [dir.records(), dir.root().join("splits/train"), dir.root().join("splits/test")];
    let existing: Vec<PathBuf> = targets.iter().flat_map(|d| json_files(d)).collect();
    if !existing.is_empty() {
        if !a.force {
            bail!("{} already holds records; pass --force to replace them", dir.records().display());
        }
        for p in existing {
            std::fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
        }
    }
    let table = load_table(dir)?;
    let world = if dir.world().exists() {
        run.input(&dir.world())?;
        SyntheticWorld::from_json(&read_text(&dir.world())?)?
    } else {
        let w = SyntheticWorld::generate(WorldConfig { seed: a.world_seed, ..WorldConfig::default() }, &table)?;
        run.write("world.json", w.to_json().as_bytes())?;
        w
    };
    let masks = load_masks(dir, &world, &table)?;
    let cfg = CohortConfig {
        n_patients: a.patients,
        images_per_patient: a.per_patient,
        seed: a.seed,
        noise_sigma: a.noise,
        anchor_fraction: a.anchor_fraction,
        ..CohortConfig::default()
    };
    let cohort = generate_cohort(&cfg, &world, &table, &masks)?;
    for r in &cohort.records {
        run.write(format!("records/{}.json", r.patient_id), r.to_json().as_bytes())?;
    }
    run.write("sealed/truth.json", cohort.truth.to_json().as_bytes())?;
    let (train, test) = split_by_patient(&cohort.records, a.split, a.seed)?;
    for (name, part) in [("train", &train), ("test", &test)] {
        for r in part.iter() {
            run.write(format!("splits/{name}/{}.json", r.patient_id), r.to_json().as_bytes())?;
        }
    }
    run.finish()?;
    println!(
        "{} patients x {} expressions -> {} (train {}, test {}), sealed truth in {}",
        cohort.records.len(),
        a.per_patient,
        dir.records().display(),
        train.len(),
        test.len(),
        dir.sealed_truth().display()
    );
    Ok(())
}

fn ingest(dir: &DataDir, a: &IngestArgs) -> Result<()> {
    let mut run = Run::new(dir.root(), "ingest", args_value(a), None);
    let dest = run.path(&a.dest)?;
    let records = read_records(dir, &a.source, &mut run)?;
    for r in &records {
        let target = dest.join(format!("{}.json", r.patient_id));
        if target.exists() && read_text(&target)? != r.to_json() {
            bail!("{} already exists with different content", target.display());
        }
    }
    for r in &records {
        run.write(a.dest.join(format!("{}.json", r.patient_id)), r.to_json().as_bytes())?;
    }
    run.finish()?;
    println!("ingested {} records into {}", records.len(), dest.display());
    Ok(())
}

#[derive(Serialize)]
struct MeasuredFace {
    #[serde(skip_serializing_if = "Option::is_none")]
    patient_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expression: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase: Option<Phase>,
    metrics: latentdose_core::MetricVector,
}

#[derive(Serialize)]
struct MetricsFile {
    version: u32,
    faces: Vec<MeasuredFace>,
}

fn metrics(dir: &DataDir, a: &MetricsArgs) -> Result<()> {
    let mut run = Run::new(dir.root(), "metrics", args_value(a), None);
    let table = load_table(dir)?;
    let input = dir.resolve(&a.input);
    let landmarks: Option<LandmarkSet> = if input.is_file() {
        serde_json::from_str::<serde_json::Value>(&read_text(&input)?)
            .ok()
            .filter(|v| v.get("points").is_some())
            .map(|v| serde_json::from_value(v).with_context(|| format!("{}: invalid landmark set", input.display())))
            .transpose()?
    } else {
        None
    };
    let faces = match landmarks {
        Some(l) => {
            run.input(&input)?;
            vec![MeasuredFace { patient_id: None, expression: None, phase: None, metrics: face_metrics(&l, &table)? }]
        }
        None => {
            let records = read_records(dir, &a.input, &mut run)?;
            let mut out = Vec::new();
            for r in &records {
                for s in &r.sessions {
                    out.push(MeasuredFace {
                        patient_id: Some(r.patient_id.clone()),
                        expression: Some(s.expression.clone()),
                        phase: Some(s.phase),
                        metrics: face_metrics(&s.landmarks, &table)?,
                    });
                }
            }
            out
        }
    };
    let stem = input.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("metrics/{stem}.json")));
    let bytes = to_json(&MetricsFile { version: ARTIFACT_VERSION, faces });
    run.set_name(format!("metrics-{stem}"));
    let path = run.write(&out, &bytes)?;
    run.finish()?;
    print!("{}", String::from_utf8_lossy(&bytes));
    eprintln!("wrote {}", path.display());
    Ok(())
}

/// The patient's record and the source state of the chosen pre-treatment face.
fn patient_state(ctx: &Ctx, p: &PatientArgs, run: &mut Run) -> Result<(PatientRecord, String, SourceState)> {
    let rel = p.records_dir.join(format!("{}.json", p.patient));
    let path = ctx.dir.resolve(&rel);
    if !path.exists() {
        bail!("no record for patient '{}' at {}", p.patient, path.display());
    }
    let mut records = read_records(&ctx.dir, &rel, run)?;
    let record = records.remove(0);
    let pre = record
        .sessions
        .iter()
        .find(|s| s.phase == Phase::Pre && p.expression.as_deref().map_or(true, |e| s.expression == e))
        .ok_or_else(|| {
            anyhow!(
                "patient '{}' has no pre-treatment session{}",
                p.patient,
                p.expression.as_deref().map_or(String::new(), |e| format!(" for expression '{e}'"))
            )
        })?;
    let expression = pre.expression.clone();
    let state = source_state(&record.patient_id, &pre.landmarks, &ctx.world, &ctx.world_id, &ctx.table, &ctx.masks)?;
    Ok((record, expression, state))
}

#[derive(Serialize)]
struct AxesFile<'a> {
    version: u32,
    patient_id: &'a str,
    expression: &'a str,
    world: &'a str,
    m_src: latentdose_core::MetricVector,
    w_src: &'a latentdose_core::LatentCode,
    basis: &'a latentdose_core::AxisBasis,
}

fn axes(dir: &DataDir, a: &AxesArgs) -> Result<()> {
    let mut run = Run::new(dir.root(), "axes", args_value(a), None);
    let ctx = context(dir, &mut run)?;
    let (record, expression, state) = patient_state(&ctx, &a.patient, &mut run)?;
    let file = AxesFile {
        version: ARTIFACT_VERSION,
        patient_id: &record.patient_id,
        expression: &expression,
        world: &ctx.world_id,
        m_src: state.m_src,
        w_src: &state.w_src,
        basis: &state.basis,
    };
    run.set_name(format!("axes-{}_{expression}", record.patient_id));
    let path = run.write(format!("axes/{}_{expression}.json", record.patient_id), &to_json(&file))?;
    run.finish()?;
    println!("{} axes for {} / {expression} -> {}", K_REGIONS, record.patient_id, path.display());
    Ok(())
}

fn build_cases(ctx: &Ctx, records_dir: &Path, run: &mut Run) -> Result<Vec<TrainingCase>> {
    let records = read_records(&ctx.dir, records_dir, run)?;
    let cases = latentdose_core::cohort::training_cases(&records, &ctx.world, &ctx.world_id, &ctx.table, &ctx.masks)?;
    if cases.is_empty() {
        bail!("{} has no patient with matching pre and post sessions", ctx.dir.resolve(records_dir).display());
    }
    Ok(cases)
}

fn calibrate(dir: &DataDir, a: &CalibrateArgs) -> Result<()> {
    let mut run = Run::new(dir.root(), "calibrate", args_value(a), None);
    let ctx = context(dir, &mut run)?;
    let mut cases = build_cases(&ctx, &a.records_dir, &mut run)?;
    let fits = calibrate_cases(&mut cases, &ctx.world, &ctx.table, &CalibrationOptions::default())?;
    let path = run.write(&a.out, cases_to_json(&cases).as_bytes())?;
    run.finish()?;
    let reduced = fits.iter().filter(|f| f.objective <= f.objective_at_zero).count();
    let worst = fits.iter().map(|f| f.objective).fold(0.0, f64::max);
    println!(
        "calibrated {} cases ({reduced} at or below the zero-intensity objective, worst objective {worst:.3e}) -> {}",
        cases.len(),
        path.display()
    );
    Ok(())
}

/// Cases from accepted feedback: the session's source state paired with the
/// administered dose and the observed outcome.
fn feedback_cases(dir: &DataDir, run: &mut Run) -> Result<Vec<TrainingCase>> {
    let log = dir.feedback_log();
    if !log.exists() {
        bail!("{} does not exist; no feedback to train on", log.display());
    }
    run.input(&log)?;
    let mut cases = Vec::new();
    for fb in read_log(&log)?.into_iter().filter(|f| f.accepted) {
        let sp = dir.session(&fb.session_id);
        run.input(&sp)?;
        let session: PlanningSession =
            serde_json::from_str(&read_text(&sp)?).with_context(|| format!("parsing {}", sp.display()))?;
        cases.push(TrainingCase {
            patient_id: session.patient_id,
            expression: session.expression,
            src_face: session.src_face,
            w_src: session.w_src,
            basis: session.basis,
            m_src: session.m_src,
            m_post: fb.outcome,
            u: fb.u_new,
            alpha_gt: None,
        });
    }
    Ok(cases)
}

#[derive(Serialize)]
struct BReportFile<'a> {
    version: u32,
    report: &'a latentdose_core::doseresponse::BTrainingReport,
}

fn train(dir: &DataDir, a: &TrainArgs) -> Result<()> {
    let suffix = match a.approach {
        Approach::A => "a",
        Approach::B => "b",
    };
    let mut run = Run::new(dir.root(), "train", args_value(a), Some(a.seed));
    run.set_name(format!("train-{suffix}"));
    let ctx = context(dir, &mut run)?;
    let mut cases = match &a.cases {
        Some(p) => {
            let path = dir.resolve(p);
            run.input(&path)?;
            cases_from_json(&read_text(&path)?).with_context(|| format!("{}", path.display()))?
        }
        None => build_cases(&ctx, &a.records_dir, &mut run)?,
    };
    if a.with_feedback {
        cases.extend(feedback_cases(dir, &mut run)?);
    }
    let cfg = GbmConfig {
        n_trees: a.trees,
        max_depth: a.depth,
        learning_rate: a.learning_rate,
        seed: a.seed,
        ..GbmConfig::default()
    };
    let (model, summary) = match a.approach {
        Approach::A => {
            let mut todo: Vec<TrainingCase> = cases.iter().filter(|c| c.alpha_gt.is_none()).cloned().collect();
            if !todo.is_empty() {
                calibrate_cases(&mut todo, &ctx.world, &ctx.table, &CalibrationOptions::default())?;
                let mut fitted = todo.into_iter();
                for c in cases.iter_mut().filter(|c| c.alpha_gt.is_none()) {
                    *c = fitted.next().expect("one fit per uncalibrated case");
                }
            }
            (train_approach_a(&cases, &cfg)?, format!("{} cases", cases.len()))
        }
        Approach::B => {
            let (model, report) = train_approach_b(&cases, &cfg)?;
            run.write("models/approach_b.report.json", &to_json(&BReportFile { version: ARTIFACT_VERSION, report: &report }))?;
            (model, format!("{} cases, {} exclusions", cases.len(), report.excluded.len()))
        }
    };
    let path = run.write(model_rel(a.approach), &model.save())?;
    run.finish()?;
    println!("trained approach {:?} on {summary} -> {}", a.approach, path.display());
    Ok(())
}

fn evaluate(dir: &DataDir, a: &EvaluateArgs) -> Result<()> {
    if a.report.is_empty() || a.report.contains(['/', '\\']) || a.report.starts_with('.') {
        bail!("--report must be a plain file name, got '{}'", a.report);
    }
    let mut run = Run::new(dir.root(), "evaluate", args_value(a), Some(a.seed));
    run.set_name(format!("evaluate-{}", a.report));
    let ctx = context(dir, &mut run)?;
    let test = read_records(dir, &a.test_dir, &mut run)?;
    let (report, preds) = match &a.train_dir {
        Some(train_dir) => {
            let train = read_records(dir, train_dir, &mut run)?;
            let cfg = ComparisonConfig { seed: a.seed, shuffles: if a.resplit > 0 { 0 } else { a.shuffles }, ..ComparisonConfig::default() };
            let mut cmp = run_comparison(&train, &test, &cfg, &ctx.pipeline())?;
            if a.resplit > 0 {
                let ratio = train.len() as f64 / (train.len() + test.len()) as f64;
                let all: Vec<PatientRecord> = train.iter().chain(&test).cloned().collect();
                cmp.report.shuffled_control = Some(resplit_control(&all, ratio, a.resplit, &cfg, &ctx.pipeline())?);
            }
            (cmp.report, cmp.predictions)
        }
        None => {
            let model_a = optional_model(dir, Approach::A, &mut run)?;
            let model_b = optional_model(dir, Approach::B, &mut run)?;
            if model_a.is_none() && model_b.is_none() {
                bail!(
                    "no trained model under {}; run `latentdose train --approach a|b` or pass --train-dir",
                    dir.models().display()
                );
            }
            evaluate_models(&test, model_a.as_ref(), model_b.as_ref(), a.seed, &ctx.pipeline())?
        }
    };
    let text = render_text(&report);
    run.write(format!("reports/{}.txt", a.report), text.as_bytes())?;
    let mut json = report_to_json(&report);
    json.push('\n');
    run.write(format!("reports/{}.json", a.report), json.as_bytes())?;
    run.write(format!("reports/{}.predictions.csv", a.report), predictions_csv(&preds)?.as_bytes())?;
    run.finish()?;
    print!("{text}");
    Ok(())
}

fn parse_dose(values: &[f64]) -> Result<DoseVector> {
    if values.len() != J_MUSCLES {
        bail!("--dose needs {J_MUSCLES} comma-separated values, got {}", values.len());
    }
    Ok(DoseVector::checked(values.to_vec(), &default_bounds())?)
}

#[derive(Serialize)]
struct SimulationFile {
    version: u32,
    patient_id: String,
    expression: String,
    dose: DoseVector,
    m_src: latentdose_core::MetricVector,
    approach_a: Option<latentdose_core::doseresponse::PostPrediction>,
    approach_b: Option<latentdose_core::MetricVector>,
}

fn simulate(dir: &DataDir, a: &SimulateArgs) -> Result<()> {
    let dose = parse_dose(&a.dose)?;
    let mut run = Run::new(dir.root(), "simulate", args_value(a), None);
    let ctx = context(dir, &mut run)?;
    let model_a = optional_model(dir, Approach::A, &mut run)?;
    let model_b = optional_model(dir, Approach::B, &mut run)?;
    if model_a.is_none() && model_b.is_none() {
        bail!("no trained model under {}; run `latentdose train` first", dir.models().display());
    }
    let (record, expression, s) = patient_state(&ctx, &a.patient, &mut run)?;
    let post_a = model_a
        .as_ref()
        .map(|m| predict_post_a(&dose, &s.m_src, &s.w_src, &s.basis, m, &ctx.world, &ctx.table))
        .transpose()?;
    let post_b = model_b.as_ref().map(|m| predict_post_b(&dose, &s.m_src, m)).transpose()?;
    let file = SimulationFile {
        version: ARTIFACT_VERSION,
        patient_id: record.patient_id.clone(),
        expression: expression.clone(),
        dose,
        m_src: s.m_src,
        approach_a: post_a.clone(),
        approach_b: post_b,
    };
    run.set_name(format!("simulate-{}_{expression}", record.patient_id));
    let path = run.write(format!("simulations/{}_{expression}.json", record.patient_id), &to_json(&file))?;
    run.finish()?;
    println!("source  {}", metric_line(&s.m_src));
    if let Some(p) = &post_a {
        println!("alpha   {}", fmt_values(&p.alpha.0));
        println!("A       {}", metric_line(&p.metrics));
    }
    if let Some(m) = &post_b {
        println!("B       {}", metric_line(m));
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn fmt_values(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ")
}

fn metric_line(m: &latentdose_core::MetricVector) -> String {
    fmt_values(&m.to_array())
}

#[derive(Serialize)]
struct InversionFile {
    version: u32,
    patient_id: String,
    expression: String,
    target_alpha: AlphaVector,
    dose: DoseVector,
    residual: f64,
    evaluations: usize,
    achieved_alpha: AlphaVector,
    target_metrics: latentdose_core::MetricVector,
    achieved_metrics: latentdose_core::MetricVector,
}

fn invert(dir: &DataDir, a: &InvertArgs) -> Result<()> {
    let target: [f64; K_REGIONS] = a
        .alpha
        .clone()
        .try_into()
        .map_err(|v: Vec<f64>| anyhow!("--alpha needs {K_REGIONS} comma-separated values, got {}", v.len()))?;
    if let Some((k, v)) = target.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        bail!("--alpha[{k}] = {v} is outside [0, 1]");
    }
    let target = AlphaVector(target);
    let mut run = Run::new(dir.root(), "invert", args_value(a), Some(a.seed));
    let ctx = context(dir, &mut run)?;
    let model = required_model(dir, Approach::A, &mut run)?;
    let (record, expression, s) = patient_state(&ctx, &a.patient, &mut run)?;
    let opts = InverseOptions { starts: a.starts, seed: a.seed, seeds: vec![record.dose.clone()], ..InverseOptions::default() };
    let inv = invert_dose(&target, &s.m_src, &model, &default_bounds(), &opts)?;
    let achieved = predict_alpha(&inv.dose, &s.m_src, &model)?;
    let want = simulate_alpha(target, &s.w_src, &s.basis, &ctx.world, &ctx.table)?;
    let got = simulate_alpha(achieved, &s.w_src, &s.basis, &ctx.world, &ctx.table)?;
    let file = InversionFile {
        version: ARTIFACT_VERSION,
        patient_id: record.patient_id.clone(),
        expression: expression.clone(),
        target_alpha: target,
        dose: inv.dose.clone(),
        residual: inv.residual,
        evaluations: inv.evaluations,
        achieved_alpha: achieved,
        target_metrics: want.metrics,
        achieved_metrics: got.metrics,
    };
    run.set_name(format!("invert-{}_{expression}", record.patient_id));
    let path = run.write(format!("inversions/{}_{expression}.json", record.patient_id), &to_json(&file))?;
    run.finish()?;
    println!("dose     {}", fmt_values(inv.dose.as_slice()));
    println!("alpha    {}", fmt_values(&achieved.0));
    println!("residual {:.4e}", inv.residual);
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn serve(dir: &DataDir, a: &ServeArgs) -> Result<()> {
    let mut cfg = ServiceConfig::from_env().map_err(|e| anyhow!(e))?;
    cfg.data_dir = dir.root().to_path_buf();
    if let Some(b) = &a.bind {
        cfg.bind = b.parse().with_context(|| format!("--bind {b}"))?;
    }
    if let Some(m) = &a.model {
        cfg.model_path = Some(m.clone());
    }
    let mut run = Run::new(dir.root(), "serve", args_value(a), None);
    for p in [dir.world(), dir.region_table(), dir.rois()] {
        if p.exists() {
            run.input(&p)?;
        }
    }
    let model = cfg.model_path.as_ref().map_or(dir.model_a(), |m| dir.resolve(m));
    if model.exists() {
        run.input(&model)?;
    }
    run.finish()?;
    eprintln!("serving {} on http://{}", dir.root().display(), cfg.bind);
    let rt = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    rt.block_on(latentdose_service::serve(cfg)).map_err(|e| anyhow!(e))
}
