//! Seeded 80/20 train/test partition, persisted as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffle the sorted ids with `seed`; the first `floor(0.8 n)` train, the rest test.
pub fn split(ids: &[String], seed: u64) -> SplitManifest {
    let mut ids = ids.to_vec();
    ids.sort();
    ids.dedup();
    RngState::new(seed).shuffle(&mut ids);
    let n_train = ids.len() * 4 / 5;
    let test = ids.split_off(n_train);
    SplitManifest { seed, train: ids, test }
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SplitManifest = serde_json::from_str(&text)?;
        if m.train.iter().any(|id| m.test.contains(id)) {
            return Err(Error::Data(format!("{}: train and test ids overlap", path.display())));
        }
        Ok(m)
    }

    /// Reuse the manifest at `path` when present, otherwise create and persist one.
    pub fn load_or_create(path: &Path, ids: &[String], seed: u64) -> Result<Self> {
        if path.exists() {
            let m = Self::load(path)?;
            let mut known: Vec<&String> = m.train.iter().chain(&m.test).collect();
            known.sort();
            let mut have: Vec<&String> = ids.iter().collect();
            have.sort();
            if known != have {
                return Err(Error::Data(format!(
                    "{} lists a different set of samples than the dataset",
                    path.display()
                )));
            }
            return Ok(m);
        }
        let m = split(ids, seed);
        m.save(path)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{i:04}")).collect()
    }

    #[test]
    fn sizes() {
        let m = split(&ids(1695), 1);
        assert_eq!((m.train.len(), m.test.len()), (1356, 339));
        let m = split(&ids(10), 1);
        assert_eq!((m.train.len(), m.test.len()), (8, 2));
    }

    #[test]
    fn partition_and_determinism() {
        let all = ids(57);
        let a = split(&all, 9);
        assert_eq!(a, split(&all, 9));
        assert_ne!(a, split(&all, 10));
        let mut union: Vec<String> = a.train.iter().chain(&a.test).cloned().collect();
        union.sort();
        assert_eq!(union, all);
        assert!(a.train.iter().all(|t| !a.test.contains(t)));
    }

    #[test]
    fn persisted_manifest_is_reused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        let a = SplitManifest::load_or_create(&path, &ids(20), 3).unwrap();
        let b = SplitManifest::load_or_create(&path, &ids(20), 99).unwrap();
        assert_eq!(a, b);
        assert!(SplitManifest::load_or_create(&path, &ids(21), 3).is_err());
    }
}
