//! Shared fixture for the benchmarks: a small calibrated cohort and the
//! Approach A model trained on it.

use latentdose_core::axes::default_rois;
use latentdose_core::cohort::{generate_cohort, training_cases};
use latentdose_core::doseresponse::{calibrate_cases, train_approach_a, CalibrationOptions};
use latentdose_core::{
    CohortConfig, GbmConfig, GbmModel, RegionIndexTable, RoiMask, SyntheticWorld, TrainingCase, WorldConfig,
};

pub struct Bench {
    pub table: RegionIndexTable,
    pub world: SyntheticWorld,
    pub masks: Vec<RoiMask>,
    /// Calibrated, so every case carries `alpha_gt`.
    pub cases: Vec<TrainingCase>,
    pub model_a: GbmModel,
}

impl Bench {
    pub fn new(patients: usize, images: usize) -> Self {
        let table = RegionIndexTable::default();
        let world = SyntheticWorld::generate(WorldConfig::default(), &table).expect("default world");
        let masks = default_rois(world.base_face(), &table);
        let cfg = CohortConfig { n_patients: patients, images_per_patient: images, seed: 11, ..CohortConfig::default() };
        let cohort = generate_cohort(&cfg, &world, &table, &masks).expect("cohort");
        let mut cases = training_cases(&cohort.records, &world, world.fingerprint(), &table, &masks).expect("cases");
        calibrate_cases(&mut cases, &world, &table, &CalibrationOptions::default()).expect("calibration");
        let model_a = train_approach_a(&cases, &GbmConfig::default()).expect("model");
        Bench { table, world, masks, cases, model_a }
    }
}
