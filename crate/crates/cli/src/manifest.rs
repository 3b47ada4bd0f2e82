//! Run manifests and the write guard that keeps every output under the data
//! directory.

use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use latentdose_service::layout::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Relative to the data directory when inside it.
    pub path: String,
    pub sha256: String,
}

/// Everything needed to repeat a run. Carries no timestamps, so identical
/// runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub tool: String,
    pub tool_version: String,
    pub subcommand: String,
    pub args: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Rejects absolute paths and any `..` component.
pub fn check_relative(p: &Path) -> Result<()> {
    if p.as_os_str().is_empty() {
        bail!("empty output path");
    }
    for c in p.components() {
        match c {
            Component::Normal(_) | Component::CurDir => {}
            _ => bail!("output path '{}' must stay inside the data directory (relative, no '..')", p.display()),
        }
    }
    Ok(())
}

/// One subcommand invocation: records hashed inputs and outputs and refuses
/// writes outside `root`.
pub struct Run {
    root: PathBuf,
    subcommand: String,
    /// File stem under `manifests/`; defaults to the subcommand.
    name: String,
    args: serde_json::Value,
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl Run {
    pub fn new(root: &Path, subcommand: &str, args: serde_json::Value, seed: Option<u64>) -> Self {
        Run {
            root: root.to_path_buf(),
            subcommand: subcommand.into(),
            name: subcommand.into(),
            args,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Distinguishes runs of one subcommand that produce different artifacts.
    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    fn display(&self, p: &Path) -> String {
        let shown = p.strip_prefix(&self.root).unwrap_or(p);
        shown.to_string_lossy().replace('\\', "/")
    }

    /// Hashes a file, or every regular file below a directory in name order.
    pub fn input(&mut self, p: &Path) -> Result<()> {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for e in entries {
                self.input(&e)?;
            }
            return Ok(());
        }
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let entry = FileHash { path: self.display(p), sha256: sha256_hex(&bytes) };
        if !self.inputs.contains(&entry) {
            self.inputs.push(entry);
        }
        Ok(())
    }

    pub fn path(&self, rel: &Path) -> Result<PathBuf> {
        check_relative(rel)?;
        Ok(self.root.join(rel))
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<PathBuf> {
        let rel = rel.as_ref();
        let path = self.path(rel)?;
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(FileHash { path: self.display(&path), sha256: sha256_hex(bytes) });
        Ok(path)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: MANIFEST_VERSION,
            tool: "latentdose".into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            subcommand: self.subcommand.clone(),
            args: self.args.clone(),
            seed: self.seed,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        }
    }

    /// Writes `manifests/<name>.json`.
    pub fn finish(self) -> Result<Manifest> {
        let m = self.manifest();
        check_relative(Path::new(&self.name))?;
        let path = self.root.join("manifests").join(format!("{}.json", self.name));
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        write_atomic(&path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))?;
        Ok(m)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let m: Manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if m.version != MANIFEST_VERSION {
        bail!("{}: manifest version {} is not supported", path.display(), m.version);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_outside_the_root_are_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut run = Run::new(dir.path(), "t", serde_json::Value::Null, None);
        assert!(run.write("../escape.json", b"x").is_err());
        assert!(run.write("a/../../escape.json", b"x").is_err());
        assert!(run.write("/tmp/escape.json", b"x").is_err());
        assert!(run.write("", b"x").is_err());
        assert!(!dir.path().parent().unwrap().join("escape.json").exists());
        run.write("ok/inside.json", b"x").unwrap();
        assert!(dir.path().join("ok/inside.json").exists());
    }

    #[test]
    fn manifest_lists_hashes_relative_to_the_root() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("in")).unwrap();
        std::fs::write(dir.path().join("in/b.json"), b"b").unwrap();
        std::fs::write(dir.path().join("in/a.json"), b"a").unwrap();
        let mut run = Run::new(dir.path(), "demo", serde_json::json!({"k": 1}), Some(3));
        run.input(&dir.path().join("in")).unwrap();
        run.input(&dir.path().join("in/a.json")).unwrap();
        run.write("out.txt", b"hello").unwrap();
        let m = run.finish().unwrap();
        let paths: Vec<&str> = m.inputs.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["in/a.json", "in/b.json"]);
        assert_eq!(m.outputs[0].path, "out.txt");
        assert_eq!(m.outputs[0].sha256, "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824");
        assert_eq!(read_manifest(&dir.path().join("manifests/demo.json")).unwrap(), m);
    }
}
