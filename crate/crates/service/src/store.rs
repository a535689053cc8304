//! Content-addressed, append-only artifact store.
//!
//! Layout under the root:
//!
//! ```text
//! <run_id>/            one directory per run, never modified once written
//! masks/<mask_id>.gwf  uploaded masks
//! walks/<id>/          walk grid manifests
//! interps/<id>/        interpolation manifests
//! .tmp/                staging area for atomic writes
//! ```

use std::path::{Path, PathBuf};

use guidewalk_core::fieldio::encode_field;
use guidewalk_core::{Field, RunSpec, SpatialMask};
use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Run ID: hash of the canonical spec.
pub fn run_id(spec: &RunSpec) -> String {
    sha256_hex(spec.canonical_json().as_bytes())
}

pub fn is_content_id(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Store> {
        let root = root.into();
        std::fs::create_dir_all(root.join(".tmp"))
            .map_err(|e| ServiceError::runtime(format!("cannot create store at {}: {e}", root.display())))?;
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn has_run(&self, run_id: &str) -> bool {
        is_content_id(run_id) && self.run_dir(run_id).join("manifest.json").is_file()
    }

    pub fn mask_dir(&self) -> PathBuf {
        self.root.join("masks")
    }

    /// Builds a directory in staging and renames it into place. Returns
    /// `false` without calling `build` when `dest` already exists.
    pub fn commit_dir(&self, dest: &Path, build: impl FnOnce(&Path) -> Result<()>) -> Result<bool> {
        if dest.exists() {
            return Ok(false);
        }
        if let Some(parent) = dest.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let staging = tempfile::Builder::new().prefix("stage-").tempdir_in(self.root.join(".tmp"))?;
        build(staging.path())?;
        match std::fs::rename(staging.path(), dest) {
            Ok(()) => Ok(true),
            // Another writer won the race; its content is identical.
            Err(_) if dest.exists() => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    /// Stores a mask field; the ID is the hash of its file bytes.
    pub fn put_mask(&self, mask: &Field) -> Result<String> {
        SpatialMask::from_field(mask.clone())?;
        if mask.values().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(ServiceError::validation("mask values must lie in [0, 1]"));
        }
        let bytes = encode_field(mask);
        let id = sha256_hex(&bytes);
        let dir = self.mask_dir();
        std::fs::create_dir_all(&dir)?;
        let dest = dir.join(format!("{id}.gwf"));
        if !dest.exists() {
            let mut staged = tempfile::NamedTempFile::new_in(self.root.join(".tmp"))?;
            std::io::Write::write_all(&mut staged, &bytes)?;
            staged.persist(&dest).map_err(|e| ServiceError::runtime(e.to_string()))?;
        }
        Ok(id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use guidewalk_core::Shape;

    #[test]
    fn commit_is_write_once() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::open(tmp.path()).unwrap();
        let dest = store.root().join("x");
        assert!(store.commit_dir(&dest, |d| Ok(std::fs::write(d.join("a"), b"1")?)).unwrap());
        assert!(!store.commit_dir(&dest, |_| panic!("must not rebuild")).unwrap());
        assert_eq!(std::fs::read(dest.join("a")).unwrap(), b"1");
    }

    #[test]
    fn failed_build_leaves_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::open(tmp.path()).unwrap();
        let dest = store.root().join("y");
        assert!(store.commit_dir(&dest, |_| Err(ServiceError::runtime("boom"))).is_err());
        assert!(!dest.exists());
    }

    #[test]
    fn mask_ids_are_content_hashes() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::open(tmp.path()).unwrap();
        let m = Field::new(Shape::grid(1, 2).unwrap(), vec![0.0, 0.5]).unwrap();
        let a = store.put_mask(&m).unwrap();
        assert_eq!(a, store.put_mask(&m).unwrap());
        assert!(is_content_id(&a));
        let bad = Field::new(Shape::grid(1, 2).unwrap(), vec![0.0, 1.5]).unwrap();
        assert!(matches!(store.put_mask(&bad), Err(ServiceError::Validation(_))));
    }
}
