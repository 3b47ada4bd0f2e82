use latentdose_core::axes::default_rois;
use latentdose_core::cohort::{generate_cohort, split_by_patient, Cohort};
use latentdose_core::evaluation::{
    evaluate_models, predictions_csv, render_text, report_from_json, report_to_json, run_comparison,
    ComparisonConfig, Pipeline, DISTANCE_BASED,
};
use latentdose_core::{
    CohortConfig, Error, GbmConfig, RegionIndexTable, RoiMask, SyntheticWorld, WorldConfig, N_METRICS,
};
use std::sync::OnceLock;

struct Fixture {
    table: RegionIndexTable,
    world: SyntheticWorld,
    masks: Vec<RoiMask>,
    cohort: Cohort,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let table = RegionIndexTable::default();
        let world = SyntheticWorld::generate(WorldConfig::default(), &table).unwrap();
        let masks = default_rois(world.base_face(), &table);
        let cfg = CohortConfig { n_patients: 12, images_per_patient: 3, seed: 5, ..CohortConfig::default() };
        let cohort = generate_cohort(&cfg, &world, &table, &masks).unwrap();
        Fixture { table, world, masks, cohort }
    })
}

fn ctx(f: &Fixture) -> Pipeline<'_, SyntheticWorld> {
    Pipeline { world: &f.world, world_id: f.world.fingerprint(), table: &f.table, masks: &f.masks }
}

fn small_config() -> ComparisonConfig {
    let gbm = GbmConfig { n_trees: 40, ..GbmConfig::default() };
    ComparisonConfig { gbm_a: gbm.clone(), gbm_b: gbm, shuffles: 2, ..ComparisonConfig::default() }
}

#[test]
fn comparison_is_deterministic_and_well_formed() {
    let f = fixture();
    let (train, test) = split_by_patient(&f.cohort.records, 0.75, 0).unwrap();
    assert_eq!((train.len(), test.len()), (9, 3));
    let first = run_comparison(&train, &test, &small_config(), &ctx(f)).unwrap();
    let second = run_comparison(&train, &test, &small_config(), &ctx(f)).unwrap();
    assert_eq!(report_to_json(&first.report), report_to_json(&second.report));
    assert_eq!(predictions_csv(&first.predictions).unwrap(), predictions_csv(&second.predictions).unwrap());

    let r = &first.report;
    assert_eq!(r.rows.len(), N_METRICS);
    assert_eq!(r.n_train_patients, Some(9));
    assert_eq!(r.n_test_patients, 3);
    assert_eq!(r.n_test, 9);
    for (k, row) in r.rows.iter().enumerate() {
        assert_eq!(row.distance_based, DISTANCE_BASED.contains(&k));
        let (a, b) = (row.a.unwrap(), row.b.unwrap());
        assert!(a.mae.is_finite() && b.mae.is_finite());
    }
    let control = r.shuffled_control.as_ref().unwrap();
    assert_eq!(control.replicates, 2);
    assert!(!control.resplit);

    let back = report_from_json(&report_to_json(r)).unwrap();
    assert_eq!(&back, r);
    let text = render_text(r);
    assert!(text.contains("Eyebrows Asym."));
    assert!(!text.contains("absent"));

    let csv = predictions_csv(&first.predictions).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9 * N_METRICS);
}

#[test]
fn overlapping_splits_are_rejected() {
    let f = fixture();
    let (train, mut test) = split_by_patient(&f.cohort.records, 0.75, 0).unwrap();
    test.push(train[0].clone());
    let err = run_comparison(&train, &test, &small_config(), &ctx(f)).unwrap_err();
    assert!(matches!(err, Error::InvalidData(ref m) if m.contains(&train[0].patient_id)), "{err}");
}

#[test]
fn partial_evaluation_flags_the_missing_approach() {
    let f = fixture();
    let (train, test) = split_by_patient(&f.cohort.records, 0.75, 1).unwrap();
    let cfg = ComparisonConfig { shuffles: 0, ..small_config() };
    let full = run_comparison(&train, &test, &cfg, &ctx(f)).unwrap();
    assert!(full.report.shuffled_control.is_none());

    let (report, preds) = evaluate_models(&test, None, Some(&full.model_b), 1, &ctx(f)).unwrap();
    assert!(!report.approach_a && report.approach_b);
    assert!(report.rows.iter().all(|r| r.a.is_none() && r.b.is_some()));
    assert!(preds.iter().all(|p| p.dm_a.is_none()));
    // B predictions do not depend on whether A is present
    for (p, q) in preds.iter().zip(&full.predictions) {
        assert_eq!(p.dm_b, q.dm_b);
        assert_eq!(p.dm_true, q.dm_true);
    }
    assert!(render_text(&report).contains("Approach A: absent (no trained model)"));
    assert!(evaluate_models(&test, None, None, 1, &ctx(f)).is_err());
}
