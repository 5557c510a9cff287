//! Dataset ingestion, disjoint class splits, and episodic task sampling.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image_io::Image;
use crate::rng::rng_from_seed;

/// One source image, with any cached generated variants attached later by the
/// generation-cache builder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Path relative to the dataset root.
    pub rel_path: PathBuf,
    /// Cached generated-variant paths, relative to the cache root.
    pub variants: Vec<PathBuf>,
    /// Serialized tuned latent for this image, if cached.
    pub latent: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: String,
    pub images: Vec<ImageRecord>,
}

/// Index over one split of a dataset: a set of classes, each with its images.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
}

impl DatasetIndex {
    pub fn class_ids(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.id.as_str()).collect()
    }

    pub fn image_count(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &ImageRecord)> {
        self.classes
            .iter()
            .flat_map(|c| c.images.iter().map(move |r| (c.id.as_str(), r)))
    }

    pub fn load_image(&self, record: &ImageRecord) -> Result<Image> {
        Image::load_png(&self.root.join(&record.rel_path))
    }

    /// Attach cached variant paths to a record, identified by relative path.
    pub fn set_variants(&mut self, rel_path: &Path, variants: Vec<PathBuf>, latent: PathBuf) {
        for class in &mut self.classes {
            for rec in &mut class.images {
                if rec.rel_path == rel_path {
                    rec.variants = variants;
                    rec.latent = Some(latent);
                    return;
                }
            }
        }
    }
}

/// Pairwise-disjoint class partition covering the whole dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub base_classes: Vec<String>,
    pub val_classes: Vec<String>,
    pub novel_classes: Vec<String>,
}

impl SplitSpec {
    /// Parse a split file with three named sections of class IDs:
    ///
    /// ```text
    /// [base]
    /// class_00
    /// [val]
    /// class_01
    /// [novel]
    /// class_02
    /// ```
    pub fn parse(text: &str) -> Result<SplitSpec> {
        let mut sections: [Vec<String>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut current: Option<usize> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[base]" => current = Some(0),
                "[val]" => current = Some(1),
                "[novel]" => current = Some(2),
                _ => match current {
                    Some(i) => sections[i].push(line.to_string()),
                    None => {
                        return Err(Error::SplitValidation(format!(
                            "line {}: class id `{line}` before any section header",
                            lineno + 1
                        )))
                    }
                },
            }
        }
        let [base_classes, val_classes, novel_classes] = sections;
        let spec = SplitSpec {
            base_classes,
            val_classes,
            novel_classes,
        };
        spec.validate_internal()?;
        Ok(spec)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, ids) in [
            ("base", &self.base_classes),
            ("val", &self.val_classes),
            ("novel", &self.novel_classes),
        ] {
            let _ = writeln!(out, "[{name}]");
            for id in ids {
                let _ = writeln!(out, "{id}");
            }
        }
        out
    }

    fn validate_internal(&self) -> Result<()> {
        for (name, ids) in [
            ("base", &self.base_classes),
            ("val", &self.val_classes),
            ("novel", &self.novel_classes),
        ] {
            if ids.is_empty() {
                return Err(Error::SplitValidation(format!("empty {name} partition")));
            }
            let set: BTreeSet<&String> = ids.iter().collect();
            if set.len() != ids.len() {
                return Err(Error::SplitValidation(format!(
                    "duplicate class id within {name} partition"
                )));
            }
        }
        let base: BTreeSet<&String> = self.base_classes.iter().collect();
        let val: BTreeSet<&String> = self.val_classes.iter().collect();
        let novel: BTreeSet<&String> = self.novel_classes.iter().collect();
        for (a, b, names) in [
            (&base, &val, "base/val"),
            (&base, &novel, "base/novel"),
            (&val, &novel, "val/novel"),
        ] {
            if let Some(id) = a.intersection(b).next() {
                return Err(Error::SplitValidation(format!(
                    "class `{id}` appears in both {names}"
                )));
            }
        }
        Ok(())
    }

    /// Check that the partition covers exactly `all_classes`.
    pub fn validate_against(&self, all_classes: &BTreeSet<String>) -> Result<()> {
        self.validate_internal()?;
        let mut union: BTreeSet<String> = BTreeSet::new();
        union.extend(self.base_classes.iter().cloned());
        union.extend(self.val_classes.iter().cloned());
        union.extend(self.novel_classes.iter().cloned());
        if let Some(missing) = union.difference(all_classes).next() {
            return Err(Error::SplitValidation(format!(
                "split names class `{missing}` not present in the dataset"
            )));
        }
        if let Some(extra) = all_classes.difference(&union).next() {
            return Err(Error::SplitValidation(format!(
                "dataset class `{extra}` not assigned to any partition"
            )));
        }
        Ok(())
    }
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Load a dataset root (one directory per class) against a split file,
/// producing one index per partition.
pub fn load_dataset(root: &Path, split_file: &Path) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    let text = std::fs::read_to_string(split_file).map_err(|e| Error::io(split_file, e))?;
    let spec = SplitSpec::parse(&text)?;
    load_dataset_with_spec(root, &spec)
}

pub fn load_dataset_with_spec(
    root: &Path,
    spec: &SplitSpec,
) -> Result<(DatasetIndex, DatasetIndex, DatasetIndex)> {
    let mut all_classes = BTreeSet::new();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            all_classes.insert(entry.file_name().to_string_lossy().to_string());
        }
    }
    spec.validate_against(&all_classes)?;

    let build = |ids: &[String]| -> Result<DatasetIndex> {
        let mut classes = Vec::new();
        for id in ids {
            let dir = root.join(id);
            if !dir.is_dir() {
                return Err(Error::Ingestion {
                    class: id.clone(),
                    reason: format!("missing class directory {}", dir.display()),
                });
            }
            let mut images = Vec::new();
            let mut names: Vec<String> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok())
                .filter(|e| {
                    e.path()
                        .extension()
                        .and_then(|x| x.to_str())
                        .map(|x| IMAGE_EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                        .unwrap_or(false)
                })
                .map(|e| e.file_name().to_string_lossy().to_string())
                .collect();
            names.sort();
            names.dedup();
            for name in names {
                images.push(ImageRecord {
                    rel_path: PathBuf::from(id).join(&name),
                    variants: Vec::new(),
                    latent: None,
                });
            }
            if images.is_empty() {
                return Err(Error::Ingestion {
                    class: id.clone(),
                    reason: "class directory contains no images".to_string(),
                });
            }
            classes.push(ClassEntry {
                id: id.clone(),
                images,
            });
        }
        Ok(DatasetIndex {
            root: root.to_path_buf(),
            classes,
        })
    };

    Ok((
        build(&spec.base_classes)?,
        build(&spec.val_classes)?,
        build(&spec.novel_classes)?,
    ))
}

/// One entry of an episode: the image record, its global class id, and its
/// episode-local label in `0..n`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeItem {
    pub record: ImageRecord,
    pub class_id: String,
    pub label: usize,
}

/// One n-way-m-shot task with q queries per class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub n: usize,
    pub m: usize,
    pub q: usize,
    /// Global class ids in local-label order (provenance record).
    pub class_ids: Vec<String>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    /// Check all structural invariants; returns a description of the first
    /// violation, if any.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        if self.support.len() != self.n * self.m {
            return Err(format!("|S|={} != n*m={}", self.support.len(), self.n * self.m));
        }
        if self.query.len() != self.n * self.q {
            return Err(format!("|Q|={} != n*q={}", self.query.len(), self.n * self.q));
        }
        for label in 0..self.n {
            let s = self.support.iter().filter(|i| i.label == label).count();
            if s != self.m {
                return Err(format!("label {label} has {s} support entries, want {}", self.m));
            }
            let q = self.query.iter().filter(|i| i.label == label).count();
            if q != self.q {
                return Err(format!("label {label} has {q} query entries, want {}", self.q));
            }
        }
        for s in &self.support {
            if self.query.iter().any(|qi| qi.record.rel_path == s.record.rel_path) {
                return Err(format!(
                    "image {} appears in both support and query",
                    s.record.rel_path.display()
                ));
            }
        }
        for item in self.support.iter().chain(self.query.iter()) {
            if self.class_ids.get(item.label).map(String::as_str) != Some(item.class_id.as_str()) {
                return Err(format!(
                    "label {} does not map to class {}",
                    item.label, item.class_id
                ));
            }
        }
        Ok(())
    }

    /// Structured-text manifest for reproducibility records.
    pub fn manifest(&self) -> String {
        serde_json::to_string_pretty(self).expect("episode serializes")
    }
}

/// Sample one episode. Deterministic given the seed. Classes sampled into the
/// episode are relabeled `0..n` in sampling order.
pub fn sample_episode(index: &DatasetIndex, n: usize, m: usize, q: usize, seed: u64) -> Result<Episode> {
    if index.classes.len() < n {
        return Err(Error::Sampling(format!(
            "need {n} classes, index has {}",
            index.classes.len()
        )));
    }
    let need = m + q;
    let mut rng = rng_from_seed(seed);
    let mut class_order: Vec<usize> = (0..index.classes.len()).collect();
    class_order.shuffle(&mut rng);

    let mut class_ids = Vec::with_capacity(n);
    let mut support = Vec::with_capacity(n * m);
    let mut query = Vec::with_capacity(n * q);
    for (label, &ci) in class_order.iter().take(n).enumerate() {
        let class = &index.classes[ci];
        if class.images.len() < need {
            return Err(Error::Sampling(format!(
                "class `{}` has {} images, need m+q={need}",
                class.id,
                class.images.len()
            )));
        }
        let mut img_order: Vec<usize> = (0..class.images.len()).collect();
        img_order.shuffle(&mut rng);
        class_ids.push(class.id.clone());
        for (k, &ii) in img_order.iter().take(need).enumerate() {
            let item = EpisodeItem {
                record: class.images[ii].clone(),
                class_id: class.id.clone(),
                label,
            };
            if k < m {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    let episode = Episode {
        n,
        m,
        q,
        class_ids,
        support,
        query,
    };
    debug_assert!(episode.check_invariants().is_ok());
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_index(n_classes: usize, per_class: usize) -> DatasetIndex {
        let classes = (0..n_classes)
            .map(|c| ClassEntry {
                id: format!("class_{c:02}"),
                images: (0..per_class)
                    .map(|i| ImageRecord {
                        rel_path: PathBuf::from(format!("class_{c:02}/img_{i:03}.png")),
                        variants: Vec::new(),
                        latent: None,
                    })
                    .collect(),
            })
            .collect();
        DatasetIndex {
            root: PathBuf::from("/nonexistent"),
            classes,
        }
    }

    #[test]
    fn split_disjointness_is_enforced() {
        let text = "[base]\nc42\nc1\n[val]\nc2\n[novel]\nc42\n";
        let err = SplitSpec::parse(text).unwrap_err();
        assert!(err.to_string().contains("c42"));
    }

    #[test]
    fn empty_partition_rejected() {
        let text = "[base]\nc1\n[val]\nc2\n[novel]\n";
        assert!(SplitSpec::parse(text).is_err());
    }

    #[test]
    fn split_round_trip() {
        let text = "[base]\na\nb\n[val]\nc\n[novel]\nd\n";
        let spec = SplitSpec::parse(text).unwrap();
        let spec2 = SplitSpec::parse(&spec.render()).unwrap();
        assert_eq!(spec.base_classes, spec2.base_classes);
        assert_eq!(spec.novel_classes, spec2.novel_classes);
    }

    #[test]
    fn episode_counts_5way_1shot() {
        let index = toy_index(10, 20);
        let ep = sample_episode(&index, 5, 1, 16, 7).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 80);
        ep.check_invariants().unwrap();
    }

    #[test]
    fn episode_counts_5way_5shot() {
        let index = toy_index(10, 25);
        let ep = sample_episode(&index, 5, 5, 16, 7).unwrap();
        assert_eq!(ep.support.len(), 25);
        assert_eq!(ep.query.len(), 80);
        ep.check_invariants().unwrap();
    }

    #[test]
    fn sampling_is_deterministic() {
        let index = toy_index(8, 10);
        let a = sample_episode(&index, 5, 1, 3, 99).unwrap();
        let b = sample_episode(&index, 5, 1, 3, 99).unwrap();
        assert_eq!(a.manifest(), b.manifest());
        let c = sample_episode(&index, 5, 1, 3, 100).unwrap();
        assert_ne!(a.manifest(), c.manifest());
    }

    #[test]
    fn sampling_errors_carry_counts() {
        let index = toy_index(3, 10);
        let err = sample_episode(&index, 5, 1, 3, 0).unwrap_err();
        assert!(err.to_string().contains('3'));
        let index = toy_index(5, 4);
        let err = sample_episode(&index, 5, 1, 16, 0).unwrap_err();
        assert!(err.to_string().contains('4'));
    }

    #[test]
    fn invariants_hold_over_many_episodes() {
        let index = toy_index(12, 8);
        for seed in 0..1000 {
            let ep = sample_episode(&index, 5, 1, 4, seed).unwrap();
            ep.check_invariants().unwrap();
        }
    }

    #[test]
    fn sampling_covers_all_classes_eventually() {
        let index = toy_index(20, 6);
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for seed in 0..10_000 {
            let ep = sample_episode(&index, 5, 1, 2, seed).unwrap();
            seen.extend(ep.class_ids.iter().cloned());
            if seen.len() == 20 {
                break;
            }
        }
        assert_eq!(seen.len(), 20, "some class never sampled in 10k episodes");
    }
}
