//! Data directory layout shared by the service and the command-line tool, and
//! the immutable engine state loaded from it.

use std::path::{Path, PathBuf};

use latentdose_core::axes::{default_rois, rois_from_json};
use latentdose_core::doseresponse::{default_bounds, InverseOptions, N_FEATURES};
use latentdose_core::{Error, GbmModel, RegionIndexTable, Result, RoiMask, SyntheticWorld, WorldConfig, K_REGIONS};

/// Paths under one data directory. Nothing is ever written outside `root`.
#[derive(Debug, Clone)]
pub struct DataDir {
    root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn world(&self) -> PathBuf {
        self.root.join("world.json")
    }

    /// Optional region index table override.
    pub fn region_table(&self) -> PathBuf {
        self.root.join("region_table.json")
    }

    /// Optional ROI rectangle override.
    pub fn rois(&self) -> PathBuf {
        self.root.join("rois.json")
    }

    pub fn records(&self) -> PathBuf {
        self.root.join("records")
    }

    pub fn record(&self, patient_id: &str) -> PathBuf {
        self.records().join(format!("{patient_id}.json"))
    }

    pub fn sealed_truth(&self) -> PathBuf {
        self.root.join("sealed").join("truth.json")
    }

    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }

    pub fn model_a(&self) -> PathBuf {
        self.models().join("approach_a.json")
    }

    pub fn model_b(&self) -> PathBuf {
        self.models().join("approach_b.json")
    }

    pub fn sessions(&self) -> PathBuf {
        self.root.join("sessions")
    }

    pub fn session(&self, session_id: &str) -> PathBuf {
        self.sessions().join(format!("{session_id}.json"))
    }

    pub fn feedback_log(&self) -> PathBuf {
        self.root.join("feedback").join("feedback.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    /// Resolves a user-supplied relative path against the root.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// Writes through a temporary sibling and a rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// World, geometry configuration and the optional Approach A model. Shared
/// read-only by every request.
pub struct Engine {
    pub world: SyntheticWorld,
    pub world_id: String,
    pub table: RegionIndexTable,
    pub masks: Vec<RoiMask>,
    pub model_a: Option<GbmModel>,
    pub bounds: Vec<f64>,
    pub inverse: InverseOptions,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn load_table(dir: &DataDir) -> Result<RegionIndexTable> {
    let p = dir.region_table();
    if p.exists() {
        RegionIndexTable::from_json(&read(&p)?)
    } else {
        Ok(RegionIndexTable::default())
    }
}

/// `world.json` when present, otherwise the default synthetic world.
pub fn load_world(dir: &DataDir, table: &RegionIndexTable) -> Result<SyntheticWorld> {
    let p = dir.world();
    if p.exists() {
        SyntheticWorld::from_json(&read(&p)?)
    } else {
        SyntheticWorld::generate(WorldConfig::default(), table)
    }
}

pub fn load_masks(dir: &DataDir, world: &SyntheticWorld, table: &RegionIndexTable) -> Result<Vec<RoiMask>> {
    let p = dir.rois();
    if p.exists() {
        rois_from_json(&read(&p)?)
    } else {
        Ok(default_rois(world.base_face(), table))
    }
}

/// Loads a model file and checks its feature and target counts.
pub fn load_model(path: &Path, n_targets: usize) -> Result<GbmModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let m = GbmModel::load(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if m.n_features != N_FEATURES || m.n_targets != n_targets {
        return Err(Error::Format(format!(
            "{}: model has {} features and {} targets, expected {N_FEATURES} and {n_targets}",
            path.display(),
            m.n_features,
            m.n_targets
        )));
    }
    Ok(m)
}

impl Engine {
    /// `model_path` must exist when given; otherwise `models/approach_a.json`
    /// is used if present and sessions are refused without it.
    pub fn load(dir: &DataDir, model_path: Option<&Path>) -> Result<Engine> {
        let table = load_table(dir)?;
        let world = load_world(dir, &table)?;
        let masks = load_masks(dir, &world, &table)?;
        let model_a = match model_path {
            Some(p) => Some(load_model(&dir.resolve(p), K_REGIONS)?),
            None if dir.model_a().exists() => Some(load_model(&dir.model_a(), K_REGIONS)?),
            None => None,
        };
        Ok(Engine {
            world_id: world.fingerprint().to_string(),
            world,
            table,
            masks,
            model_a,
            bounds: default_bounds(),
            inverse: InverseOptions::default(),
        })
    }
}
