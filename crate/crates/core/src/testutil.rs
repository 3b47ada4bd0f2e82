//! Shared fixtures for unit tests.

use std::sync::OnceLock;

use crate::axes::{default_rois, RoiMask};
use crate::cohort::{generate_cohort, training_cases, Cohort, CohortConfig};
use crate::doseresponse::TrainingCase;
use crate::faceworld::{SyntheticWorld, WorldConfig};
use crate::geometry::RegionIndexTable;

pub struct Fixture {
    pub table: RegionIndexTable,
    pub world: SyntheticWorld,
    pub masks: Vec<RoiMask>,
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let table = RegionIndexTable::default();
        let world = SyntheticWorld::generate(WorldConfig::default(), &table).unwrap();
        let masks = default_rois(world.base_face(), &table);
        Fixture { table, world, masks }
    })
}

pub fn small_config(n: usize, images: usize, seed: u64) -> CohortConfig {
    CohortConfig { n_patients: n, images_per_patient: images, seed, ..CohortConfig::default() }
}

pub fn cohort(cfg: &CohortConfig) -> Cohort {
    let f = fixture();
    generate_cohort(cfg, &f.world, &f.table, &f.masks).unwrap()
}

/// Uncalibrated cases of a small noiseless cohort.
pub fn cases(n: usize, images: usize, seed: u64) -> Vec<TrainingCase> {
    let f = fixture();
    let c = cohort(&small_config(n, images, seed));
    training_cases(&c.records, &f.world, f.world.fingerprint(), &f.table, &f.masks).unwrap()
}
