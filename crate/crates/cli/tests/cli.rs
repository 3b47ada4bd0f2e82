use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentdose_cli::manifest::read_manifest;
use latentdose_core::cohort::ingest;
use latentdose_core::evaluation::report_from_json;
use latentdose_core::{DoseVector, SealedTruth};
use latentdose_service::feedback::{FeedbackLog, FeedbackRecord, FEEDBACK_VERSION};
use latentdose_service::layout::{DataDir, Engine};
use latentdose_service::session::PlanningSession;

/// Temporary workspace whose only child should ever be `data/`.
struct Sandbox {
    root: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Sandbox { root: tempfile::tempdir().unwrap() }
    }

    fn data(&self) -> PathBuf {
        self.root.path().join("data")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_latentdose"))
            .current_dir(self.root.path())
            .env_remove("LATENTDOSE_DATA_DIR")
            .arg("--data-dir")
            .arg(self.data())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stderr),
            String::from_utf8_lossy(&out.stdout)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.data().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    /// Every top-level entry of the sandbox root.
    fn root_entries(&self) -> BTreeSet<String> {
        std::fs::read_dir(self.root.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect()
    }
}

fn count_json(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count()
}

fn small_cohort(s: &Sandbox) {
    s.ok(&["cohort-gen", "--patients", "12", "--per-patient", "3", "--seed", "7"]);
}

#[test]
fn cohort_gen_writes_one_file_per_patient_and_sealed_truth() {
    let s = Sandbox::new();
    s.ok(&["cohort-gen", "--patients", "46", "--per-patient", "8", "--seed", "7"]);
    assert_eq!(count_json(&s.data().join("records")), 46);
    let truth = SealedTruth::from_json(std::str::from_utf8(&s.read("sealed/truth.json")).unwrap()).unwrap();
    assert_eq!((truth.seed, truth.patients.len()), (7, 46));
    assert_eq!(count_json(&s.data().join("splits/train")), 37);
    assert_eq!(count_json(&s.data().join("splits/test")), 9);
    let records = ingest(&s.data().join("records")).unwrap();
    assert!(records.iter().all(|r| r.sessions.len() == 16));
    // sealed truth is never part of a record
    assert!(!String::from_utf8(s.read("records/P000.json")).unwrap().contains("alpha_true"));
}

#[test]
fn every_run_is_reproducible_from_its_manifest() {
    let (a, b) = (Sandbox::new(), Sandbox::new());
    for s in [&a, &b] {
        small_cohort(s);
        s.ok(&["train", "--approach", "b", "--trees", "30"]);
    }
    for name in ["cohort-gen", "train-b"] {
        let (ma, mb) = (
            read_manifest(&a.data().join(format!("manifests/{name}.json"))).unwrap(),
            read_manifest(&b.data().join(format!("manifests/{name}.json"))).unwrap(),
        );
        assert_eq!(ma, mb, "{name}");
        assert!(!ma.outputs.is_empty());
        for f in &ma.outputs {
            assert_eq!(a.read(&f.path), b.read(&f.path), "{}", f.path);
        }
    }
    let m = read_manifest(&a.data().join("manifests/train-b.json")).unwrap();
    assert_eq!(m.seed, Some(0));
    assert_eq!(m.args["trees"], 30);
    assert!(m.inputs.iter().any(|f| f.path.starts_with("splits/train/")));
    assert!(m.outputs.iter().any(|f| f.path == "models/approach_b.json"));

    // replaying the recorded arguments over the recorded inputs gives the recorded outputs
    a.ok(&["cohort-gen", "--patients", "12", "--per-patient", "3", "--seed", "7", "--force"]);
    let again = read_manifest(&a.data().join("manifests/cohort-gen.json")).unwrap();
    let before = read_manifest(&b.data().join("manifests/cohort-gen.json")).unwrap();
    let generated = |m: &latentdose_cli::manifest::Manifest| -> Vec<_> {
        m.outputs.iter().filter(|f| f.path != "world.json").cloned().collect()
    };
    assert_eq!(generated(&again), generated(&before));
    assert!(again.inputs.iter().any(|f| f.path == "world.json"));
}

#[test]
fn evaluate_twice_is_byte_identical_and_has_the_table_layout() {
    let s = Sandbox::new();
    small_cohort(&s);
    let args = ["evaluate", "--train-dir", "splits/train", "--test-dir", "splits/test", "--shuffles", "1", "--seed", "3"];
    let first = s.ok(&args);
    let files: Vec<Vec<u8>> = ["reports/evaluation.txt", "reports/evaluation.json", "reports/evaluation.predictions.csv"]
        .iter()
        .map(|f| s.read(f))
        .collect();
    let second = s.ok(&args);
    assert_eq!(first, second);
    for (f, before) in ["reports/evaluation.txt", "reports/evaluation.json", "reports/evaluation.predictions.csv"]
        .iter()
        .zip(&files)
    {
        assert_eq!(&s.read(f), before, "{f}");
    }
    let report = report_from_json(std::str::from_utf8(&files[1]).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 6);
    assert!(report.rows.iter().all(|r| r.a.is_some() && r.b.is_some()));
    assert_eq!(report.seed, 3);
    assert!(report.shuffled_control.is_some());
    let text = String::from_utf8(files[0].clone()).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| l.contains("| MAE A ")).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("Eyebrows Asym. | MAE A "));
    assert!(!text.contains("absent"));
}

#[test]
fn partial_pipeline_flags_the_missing_approach() {
    let s = Sandbox::new();
    small_cohort(&s);
    let err = s.fails(&["evaluate"]);
    assert!(err.contains("no trained model") && err.contains("train"), "{err}");
    s.ok(&["train", "--approach", "b", "--trees", "30"]);
    let text = s.ok(&["evaluate"]);
    assert!(text.contains("Approach A: absent (no trained model)"), "{text}");
    assert!(text.contains("MAE A n/a / B "));
    let report = report_from_json(std::str::from_utf8(&s.read("reports/evaluation.json")).unwrap()).unwrap();
    assert!(!report.approach_a && report.approach_b);
    assert!(report.rows.iter().all(|r| r.a.is_none() && r.b.is_some()));
    assert!(report.shuffled_control.is_none());
}

#[test]
fn stage_commands_write_versioned_artifacts_inside_the_data_dir() {
    let s = Sandbox::new();
    small_cohort(&s);
    s.ok(&["calibrate", "--out", "cases/train.json"]);
    s.ok(&["train", "--approach", "a", "--cases", "cases/train.json", "--trees", "30"]);
    s.ok(&["train", "--approach", "b", "--cases", "cases/train.json", "--trees", "30"]);
    s.ok(&["evaluate", "--report", "fixed"]);
    let dose = vec!["2"; 22].join(",");
    s.ok(&["simulate", "--patient", "P007", "--dose", &dose]);
    s.ok(&["invert", "--patient", "P007", "--alpha", "0.2,0.2,0,0,0.4,0.4", "--starts", "8"]);
    s.ok(&["axes", "--patient", "P001", "--expression", "brow_raise"]);
    s.ok(&["metrics", "records/P001.json"]);
    s.ok(&["ingest", "records", "--dest", "copy"]);
    assert_eq!(count_json(&s.data().join("copy")), 12);

    for (file, key) in [
        ("simulations/P007_neutral.json", "approach_a"),
        ("inversions/P007_neutral.json", "dose"),
        ("axes/P001_brow_raise.json", "basis"),
        ("metrics/P001.json", "faces"),
        ("models/approach_b.report.json", "report"),
    ] {
        let v: serde_json::Value = serde_json::from_slice(&s.read(file)).unwrap();
        assert_eq!(v["version"], 1, "{file}");
        assert!(!v[key].is_null(), "{file}: {key}");
    }
    let inv: serde_json::Value = serde_json::from_slice(&s.read("inversions/P007_neutral.json")).unwrap();
    let dose: Vec<f64> = serde_json::from_value(inv["dose"].clone()).unwrap();
    let bounds = latentdose_core::doseresponse::default_bounds();
    assert!(dose.iter().zip(&bounds).all(|(u, b)| (0.0..=*b).contains(u)));

    let manifests: BTreeSet<String> = std::fs::read_dir(s.data().join("manifests"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    for m in [
        "cohort-gen.json",
        "calibrate.json",
        "train-a.json",
        "train-b.json",
        "evaluate-fixed.json",
        "simulate-P007_neutral.json",
        "invert-P007_neutral.json",
        "axes-P001_brow_raise.json",
        "metrics-P001.json",
        "ingest.json",
    ] {
        assert!(manifests.contains(m), "missing manifest {m}: {manifests:?}");
    }
    assert_eq!(s.root_entries(), BTreeSet::from(["data".to_string()]));
}

#[test]
fn failures_exit_nonzero_with_an_actionable_message() {
    let s = Sandbox::new();
    let out = s.run(&["evaluate", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let err = s.fails(&["metrics", "missing.json"]);
    assert!(err.contains("missing.json") && err.contains("does not exist"), "{err}");

    small_cohort(&s);
    let err = s.fails(&["cohort-gen", "--patients", "4", "--per-patient", "1"]);
    assert!(err.contains("--force"), "{err}");

    let mut rec: serde_json::Value = serde_json::from_slice(&s.read("records/P001.json")).unwrap();
    rec["version"] = 9.into();
    let bad = s.root.path().join("bad.json");
    std::fs::write(&bad, rec.to_string()).unwrap();
    let err = s.fails(&["ingest", bad.to_str().unwrap()]);
    assert!(err.contains("bad.json") && err.contains("version"), "{err}");
    std::fs::remove_file(&bad).unwrap();

    let err = s.fails(&["ingest", "records", "--dest", "../escape"]);
    assert!(err.contains("inside the data directory"), "{err}");
    let err = s.fails(&["evaluate", "--report", "../x"]);
    assert!(err.contains("plain file name"), "{err}");
    let err = s.fails(&["invert", "--patient", "P001", "--alpha", "0.1,0.1"]);
    assert!(err.contains("6 comma-separated"), "{err}");
    let err = s.fails(&["invert", "--patient", "P001", "--alpha", "0,0,0,0,0,2"]);
    assert!(err.contains("outside [0, 1]"), "{err}");
    let err = s.fails(&["invert", "--patient", "P001", "--alpha", "0,0,0,0,0,0"]);
    assert!(err.contains("train --approach a"), "{err}");
    let err = s.fails(&["axes", "--patient", "P999"]);
    assert!(err.contains("P999"), "{err}");
    assert_eq!(s.root_entries(), BTreeSet::from(["data".to_string()]));
}

#[test]
fn retraining_consumes_accepted_feedback() {
    let s = Sandbox::new();
    small_cohort(&s);
    let base = s.ok(&["train", "--approach", "a", "--trees", "20"]);
    assert!(base.contains("on 30 cases"), "{base}");

    let dir = DataDir::new(s.data());
    let engine = Engine::load(&dir, None).unwrap();
    let record = ingest(&dir.record("P000")).unwrap().remove(0);
    let now = chrono::Utc::now();
    let session = PlanningSession::create("s-1".into(), &record, None, record.dose.clone(), &engine, now).unwrap();
    std::fs::create_dir_all(dir.sessions()).unwrap();
    std::fs::write(dir.session("s-1"), serde_json::to_string(&session).unwrap()).unwrap();
    let mut log = FeedbackLog::open(&dir.feedback_log()).unwrap();
    for (id, accepted) in [("f1", true), ("f2", false), ("f3", true)] {
        log.append(FeedbackRecord {
            version: FEEDBACK_VERSION,
            id: id.into(),
            session_id: "s-1".into(),
            u_new: DoseVector(vec![1.0; 22]),
            outcome: session.m_src,
            accepted,
            note: None,
            timestamp: now,
            received: now,
            late: false,
        })
        .unwrap();
    }
    let out = s.ok(&["train", "--approach", "a", "--trees", "20", "--with-feedback"]);
    assert!(out.contains("on 32 cases"), "{out}");
    let m = read_manifest(&s.data().join("manifests/train-a.json")).unwrap();
    assert!(m.inputs.iter().any(|f| f.path == "feedback/feedback.jsonl"));
    assert!(m.inputs.iter().any(|f| f.path == "sessions/s-1.json"));
}

#[test]
fn relative_data_dir_resolves_once() {
    let sb = Sandbox::new();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_latentdose"))
            .current_dir(sb.root.path())
            .env("LATENTDOSE_DATA_DIR", "data")
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["cohort-gen", "--patients", "6", "--per-patient", "2", "--seed", "3"]);
    run(&["calibrate", "--records-dir", "splits/train", "--out", "cases/train.json"]);
    run(&["train", "--approach", "a", "--cases", "cases/train.json"]);
    run(&["axes", "--patient", "P000"]);
    run(&["simulate", "--patient", "P000", "--dose", &["1"; 22].join(",")]);
    run(&["invert", "--patient", "P000", "--alpha", "0.1,0.1,0,0,0.2,0.2"]);
    for dir in ["axes", "simulations", "inversions"] {
        assert_eq!(count_json(&sb.data().join(dir)), 1, "{dir}");
    }
    assert_eq!(sb.root_entries(), BTreeSet::from(["data".to_string()]));
}
