use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_feature_file, write_new_file, FeatureSet, Role};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub role: String,
    pub path: String,
    pub shape: Vec<usize>,
}

/// `{"experiment", "seed", "entries": [{"role", "path", "shape"}]}`.
///
/// Relative entry paths resolve against the manifest's own directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl Manifest {
    pub fn new(experiment: impl Into<String>, seed: u64) -> Self {
        Manifest {
            experiment: experiment.into(),
            seed,
            entries: Vec::new(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn push(&mut self, role: &str, path: &str, shape: &[usize]) {
        self.entries.push(ManifestEntry {
            role: role.to_string(),
            path: path.to_string(),
            shape: shape.to_vec(),
        });
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
            field: "manifest".into(),
            message: e.to_string(),
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path, overwrite: bool) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_new_file(path, text.as_bytes(), overwrite)
    }

    pub fn roles(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.role.as_str()).collect()
    }

    pub fn entry(&self, role: &str) -> Result<&ManifestEntry> {
        self.entries.iter().find(|e| e.role == role).ok_or_else(|| {
            Error::Config(format!(
                "manifest `{}` has no `{role}` entry (roles: {})",
                self.experiment,
                self.roles().join(", ")
            ))
        })
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads one role, checking the file header against the recorded shape.
    pub fn load_role(&self, role: &str) -> Result<FeatureSet> {
        let entry = self.entry(role)?;
        let path = self.resolve(entry);
        let mut fs = load_feature_file(&path)?;
        if fs.shape() != entry.shape.as_slice() {
            return Err(Error::Format {
                field: "shape".into(),
                message: format!(
                    "{} has shape {:?}, manifest records {:?}",
                    path.display(),
                    fs.shape(),
                    entry.shape
                ),
            });
        }
        fs.role = Role::from_label(role);
        fs.name = role.to_string();
        Ok(fs)
    }

    /// Loads every entry or fails as a whole.
    pub fn load_all(&self) -> Result<Vec<FeatureSet>> {
        self.entries.iter().map(|e| self.load_role(&e.role)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::save_feature_file;

    fn write_pair(dir: &Path) -> Manifest {
        let a = FeatureSet::from_matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Role::Adapted, "a").unwrap();
        save_feature_file(&a, &dir.join("a.npy"), false).unwrap();
        let mut m = Manifest::new("exp", 4);
        m.push("adapted", "a.npy", &[3, 2]);
        m.save(&dir.join("manifest.json"), false).unwrap();
        m
    }

    #[test]
    fn load_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path());
        let m = Manifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.seed, 4);
        let fs = m.load_role("adapted").unwrap();
        assert_eq!(fs.shape(), &[3, 2]);
        assert_eq!(fs.role, Role::Adapted);
    }

    #[test]
    fn every_failure_is_structured() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_pair(dir.path());
        m.base_dir = dir.path().to_path_buf();
        assert!(matches!(m.load_role("expert"), Err(Error::Config(_))));

        m.entries[0].shape = vec![3, 3];
        assert!(matches!(m.load_role("adapted"), Err(Error::Format { .. })));

        m.entries[0].path = "missing.npy".into();
        assert!(matches!(m.load_all(), Err(Error::Io { .. })));

        fs::write(dir.path().join("bad.json"), "{\"experiment\": 3}").unwrap();
        assert!(matches!(Manifest::load(&dir.path().join("bad.json")), Err(Error::Format { .. })));
    }

    #[test]
    fn json_layout() {
        let mut m = Manifest::new("e", 1);
        m.push("expert", "x.npy", &[2, 3]);
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"experiment": "e", "seed": 1, "entries": [{"role": "expert", "path": "x.npy", "shape": [2, 3]}]})
        );
    }
}
