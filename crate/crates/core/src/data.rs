//! Dataset layouts and manifests.
//!
//! * paired: `input/` and `reference/` with matching file stems
//! * mos: `images/` and `scores.csv` with `image,mos` columns
//! * noref: image files directly under the root, or under `images/`

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::{image_id, list_images, write_atomic};
use crate::parallel::Parallelism;
use crate::perception::MosSample;
use crate::trainer::TrainingPair;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCORES_FILE: &str = "scores.csv";
/// Default train share: 800 of 890 pairs.
pub const DEFAULT_TRAIN_FRACTION: (usize, usize) = (800, 890);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Paired,
    Mos,
    Noref,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Self::Paired),
            "mos" => Ok(Self::Mos),
            "noref" => Ok(Self::Noref),
            other => Err(Error::InvalidArgument(format!("unknown dataset kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub input_path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reference_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub raw_mos: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub kind: DatasetKind,
    pub root: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mos_max: Option<f64>,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOptions {
    pub seed: u64,
    /// Train share as `numerator / denominator`.
    pub train_fraction: (usize, usize),
    /// Declared maximum raw opinion score (mos layout only).
    pub mos_max: Option<f64>,
    pub parallelism: Parallelism,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            mos_max: None,
            parallelism: Parallelism::default(),
        }
    }
}

/// Train count for `n` items, rounded half up.
pub fn train_count(n: usize, fraction: (usize, usize)) -> usize {
    ((n * fraction.0 * 2 + fraction.1) / (fraction.1 * 2)).min(n)
}

fn unique_ids(files: &[PathBuf]) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for f in files {
        if let Some(prev) = map.insert(image_id(f), f.clone()) {
            return Err(Error::Dataset(format!(
                "duplicate id `{}` ({} and {})",
                image_id(f),
                prev.display(),
                f.display()
            )));
        }
    }
    Ok(map)
}

fn read_scores(path: &Path) -> Result<BTreeMap<String, f64>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let bad = || Error::Dataset(format!("{} row {}: expected `image,mos`", path.display(), line + 2));
        let name = rec.get(0).ok_or_else(bad)?.trim();
        let score: f64 = rec.get(1).ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let id = image_id(Path::new(name));
        if out.insert(id.clone(), score).is_some() {
            return Err(Error::Dataset(format!("duplicate score for `{id}`")));
        }
    }
    Ok(out)
}

fn check_readable(entries: &[ManifestEntry], parallelism: Parallelism) -> Result<()> {
    parallelism
        .try_map(entries, |e| -> Result<()> {
            for p in std::iter::once(&e.input_path).chain(e.reference_path.as_ref()) {
                image::image_dimensions(p).map_err(|err| Error::Image {
                    path: p.clone(),
                    message: err.to_string(),
                })?;
            }
            Ok(())
        })
        .map(|_| ())
}

pub fn ingest_dataset(root: &Path, kind: DatasetKind, options: &IngestOptions) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let mut mos_max = None;
    let entries: Vec<ManifestEntry> = match kind {
        DatasetKind::Paired => {
            let inputs = unique_ids(&list_images(&root.join("input"))?)?;
            let refs = unique_ids(&list_images(&root.join("reference"))?)?;
            let missing: Vec<&String> = inputs.keys().filter(|k| !refs.contains_key(*k)).collect();
            let orphan: Vec<&String> = refs.keys().filter(|k| !inputs.contains_key(*k)).collect();
            if !missing.is_empty() || !orphan.is_empty() {
                return Err(Error::Dataset(format!(
                    "missing counterparts: inputs without reference {missing:?}, references without input {orphan:?}"
                )));
            }
            inputs
                .into_iter()
                .map(|(id, p)| ManifestEntry {
                    reference_path: Some(refs[&id].clone()),
                    id,
                    input_path: p,
                    raw_mos: None,
                    mos: None,
                })
                .collect()
        }
        DatasetKind::Mos => {
            let max = options
                .mos_max
                .ok_or_else(|| Error::config("mos_max", "the mos layout needs a declared maximum score"))?;
            if !(max > 0.0 && max.is_finite()) {
                return Err(Error::config("mos_max", "must be positive"));
            }
            mos_max = Some(max);
            let images = unique_ids(&list_images(&root.join("images"))?)?;
            let scores = read_scores(&root.join(SCORES_FILE))?;
            let unscored: Vec<&String> = images.keys().filter(|k| !scores.contains_key(*k)).collect();
            let orphan: Vec<&String> = scores.keys().filter(|k| !images.contains_key(*k)).collect();
            if !unscored.is_empty() || !orphan.is_empty() {
                return Err(Error::Dataset(format!(
                    "score table mismatch: images without score {unscored:?}, scores without image {orphan:?}"
                )));
            }
            images
                .into_iter()
                .map(|(id, p)| {
                    let raw = scores[&id];
                    let norm = raw / max;
                    if !(0.0..=1.0).contains(&norm) {
                        return Err(Error::Dataset(format!(
                            "score {raw} of `{id}` exceeds the declared maximum {max}"
                        )));
                    }
                    Ok(ManifestEntry {
                        id,
                        input_path: p,
                        reference_path: None,
                        raw_mos: Some(raw),
                        mos: Some(norm),
                    })
                })
                .collect::<Result<_>>()?
        }
        DatasetKind::Noref => {
            let sub = root.join("images");
            let dir = if sub.is_dir() { sub } else { root.to_path_buf() };
            unique_ids(&list_images(&dir)?)?
                .into_iter()
                .map(|(id, p)| ManifestEntry {
                    id,
                    input_path: p,
                    reference_path: None,
                    raw_mos: None,
                    mos: None,
                })
                .collect()
        }
    };
    if entries.is_empty() {
        return Err(Error::Dataset(format!("no images found under {}", root.display())));
    }
    check_readable(&entries, options.parallelism)?;

    let mut ids: Vec<String> = entries.iter().map(|e| e.id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(options.seed));
    let n_train = train_count(ids.len(), options.train_fraction);
    let mut train_ids = ids[..n_train].to_vec();
    let mut test_ids = ids[n_train..].to_vec();
    train_ids.sort();
    test_ids.sort();
    Ok(DatasetManifest {
        kind,
        root: root.to_path_buf(),
        mos_max,
        seed: options.seed,
        entries,
        split: Split { train_ids, test_ids },
    })
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id `{}`", e.id)));
            }
            match self.kind {
                DatasetKind::Paired if e.reference_path.is_none() => {
                    return Err(Error::Dataset(format!("paired entry `{}` lacks a reference", e.id)))
                }
                DatasetKind::Mos if !e.mos.is_some_and(|m| (0.0..=1.0).contains(&m)) => {
                    return Err(Error::Dataset(format!("entry `{}` lacks a normalized score", e.id)))
                }
                _ => {}
            }
        }
        let train: HashSet<&str> = self.split.train_ids.iter().map(String::as_str).collect();
        let test: HashSet<&str> = self.split.test_ids.iter().map(String::as_str).collect();
        if !train.is_disjoint(&test) {
            return Err(Error::Dataset("train and test splits overlap".into()));
        }
        let union: HashSet<&str> = train.union(&test).copied().collect();
        if union != seen {
            return Err(Error::Dataset("splits do not cover the entries exactly".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self).expect("manifest is serializable"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn entry(&self, id: &str) -> Result<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Dataset(format!("unknown id `{id}`")))
    }

    fn select(&self, ids: Option<&[String]>) -> Vec<&ManifestEntry> {
        match ids {
            Some(ids) => self.entries.iter().filter(|e| ids.contains(&e.id)).collect(),
            None => self.entries.iter().collect(),
        }
    }

    /// Load training pairs; `None` selects every entry.
    pub fn load_pairs(&self, ids: Option<&[String]>, parallelism: Parallelism) -> Result<Vec<TrainingPair>> {
        let sel = self.select(ids);
        parallelism.try_map(&sel, |e| {
            let reference = e
                .reference_path
                .as_ref()
                .ok_or_else(|| Error::Dataset(format!("`{}` has no reference", e.id)))?;
            Ok(TrainingPair {
                id: e.id.clone(),
                input: ImageTensor::load(&e.input_path)?,
                reference: ImageTensor::load(reference)?,
            })
        })
    }

    pub fn load_mos(&self, ids: Option<&[String]>, parallelism: Parallelism) -> Result<Vec<MosSample>> {
        let sel = self.select(ids);
        parallelism.try_map(&sel, |e| {
            let mos = e
                .mos
                .ok_or_else(|| Error::Dataset(format!("`{}` has no opinion score", e.id)))?;
            MosSample::new(ImageTensor::load(&e.input_path)?, mos)
        })
    }

    pub fn load_inputs(&self, ids: Option<&[String]>, parallelism: Parallelism) -> Result<Vec<(String, ImageTensor)>> {
        let sel = self.select(ids);
        parallelism.try_map(&sel, |e| Ok((e.id.clone(), ImageTensor::load(&e.input_path)?)))
    }
}
