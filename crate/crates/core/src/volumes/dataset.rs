use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_mask, load_volume};
use super::{BinaryMask, Volume};
use crate::error::{Error, Result};

/// A volume with its label, if one is available.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub volume: Volume,
    pub mask: Option<BinaryMask>,
}

impl Case {
    pub fn id(&self) -> &str {
        &self.volume.id
    }
}

#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub labeled: Vec<(Volume, BinaryMask)>,
    pub unlabeled: Vec<Volume>,
    pub seed: u64,
}

/// Picks `ceil(fraction * n)` labeled cases by seeded shuffle; the rest lose
/// their labels.
pub fn split_dataset(cases: Vec<(Volume, BinaryMask)>, labeled_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if cases.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must be in (0, 1], got {labeled_fraction}"
        )));
    }
    let mut ids = HashSet::new();
    for (v, _) in &cases {
        if !ids.insert(v.id.clone()) {
            return Err(Error::Contract(format!("duplicate case id {}", v.id)));
        }
    }
    let n = cases.len();
    // guard against 0.2 * 10 = 2.0000000000000004 rounding up to 3
    let n_labeled = ((labeled_fraction * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let chosen: HashSet<usize> = order[..n_labeled.min(n)].iter().copied().collect();

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (i, (v, m)) in cases.into_iter().enumerate() {
        if chosen.contains(&i) {
            labeled.push((v, m));
        } else {
            unlabeled.push(v);
        }
    }
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        seed,
    })
}

/// One row of a dataset manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// TOML dataset manifest:
///
/// ```toml
/// [[case]]
/// id = "case_000"
/// image = "case_000_img.mtv"
/// mask = "case_000_mask.mtv"
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, rename = "case")]
    pub cases: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = HashSet::new();
        for c in &m.cases {
            if !seen.insert(&c.id) {
                return Err(Error::Config(format!("{}: duplicate case id {}", path.display(), c.id)));
            }
        }
        Ok(m)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks that every referenced file exists.
    pub fn check_paths(&self) -> Result<()> {
        for c in &self.cases {
            let img = self.resolve(&c.image);
            if !img.exists() {
                return Err(Error::Config(format!("case {}: missing image {}", c.id, img.display())));
            }
            if let Some(m) = &c.mask {
                let m = self.resolve(m);
                if !m.exists() {
                    return Err(Error::Config(format!("case {}: missing mask {}", c.id, m.display())));
                }
            }
        }
        Ok(())
    }

    /// Loads every case; the manifest id overrides the file stem.
    pub fn load(&self) -> Result<Vec<Case>> {
        self.cases
            .iter()
            .map(|c| {
                let mut volume = load_volume(self.resolve(&c.image))?;
                volume.id = c.id.clone();
                let mask = c.mask.as_ref().map(|m| load_mask(self.resolve(m))).transpose()?;
                if let Some(m) = &mask {
                    if m.shape() != volume.shape() {
                        return Err(Error::Shape(format!(
                            "case {}: mask {:?} vs image {:?}",
                            c.id,
                            m.shape(),
                            volume.shape()
                        )));
                    }
                }
                Ok(Case { volume, mask })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;

    use super::*;

    fn cases(n: usize) -> Vec<(Volume, BinaryMask)> {
        (0..n)
            .map(|i| {
                let v = Volume::new(format!("c{i}"), Array3::from_elem((4, 4, 4), i as f64), [1.0; 3]).unwrap();
                (v, BinaryMask::zeros([4, 4, 4]))
            })
            .collect()
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset(cases(10), 0.2, 7).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len()), (2, 8));
        let s = split_dataset(cases(10), 0.1, 7).unwrap();
        assert_eq!((s.labeled.len(), s.unlabeled.len()), (1, 9));
        let s = split_dataset(cases(10), 1.0, 7).unwrap();
        assert!(s.unlabeled.is_empty());
        let s = split_dataset(cases(7), 0.5, 7).unwrap();
        assert_eq!(s.labeled.len(), 4);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let ids = |s: &DatasetSplit| s.labeled.iter().map(|(v, _)| v.id.clone()).collect::<Vec<_>>();
        let a = split_dataset(cases(20), 0.3, 11).unwrap();
        let b = split_dataset(cases(20), 0.3, 11).unwrap();
        assert_eq!(ids(&a), ids(&b));
        let labeled: HashSet<_> = ids(&a).into_iter().collect();
        assert!(a.unlabeled.iter().all(|v| !labeled.contains(&v.id)));
        assert_eq!(a.labeled.len() + a.unlabeled.len(), 20);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_dataset(vec![], 0.5, 0), Err(Error::EmptyDataset)));
        assert!(split_dataset(cases(3), 0.0, 0).is_err());
        assert!(split_dataset(cases(3), 1.5, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            cases: vec![
                ManifestEntry {
                    id: "a".into(),
                    image: "a.mtv".into(),
                    mask: Some("a_mask.mtv".into()),
                },
                ManifestEntry {
                    id: "b".into(),
                    image: "b.mtv".into(),
                    mask: None,
                },
            ],
            base_dir: PathBuf::new(),
        };
        let p = dir.path().join("manifest.toml");
        m.write(&p).unwrap();
        let back = Manifest::read(&p).unwrap();
        assert_eq!(back.cases, m.cases);
        assert_eq!(back.base_dir, dir.path());
        assert!(back.check_paths().is_err());
    }
}
