//! Negative sets: the input itself as the easy negative plus one restored
//! image per generator. Generated negatives are always snapped to 8-bit
//! levels, so results are identical whether or not they pass through the cache.

pub mod classical;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use classical::{
    dark_channel, dark_channel_prior, histogram_equalize, ibla_restore, underwater_dcp, DcpParams,
    IblaParams, Restored,
};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::parallel::Parallelism;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum GeneratorSpec {
    He,
    Dcp(DcpParams),
    Udcp(DcpParams),
    Ibla(IblaParams),
    /// Images produced elsewhere, read from `<dir>/<image-id>.png`.
    /// Without `dir`, the directory is `<cache_dir>/<name>`.
    Precomputed { name: String, dir: Option<PathBuf> },
}

impl GeneratorSpec {
    /// Short name used in provenance, cache paths and logs.
    pub fn name(&self) -> &str {
        match self {
            Self::He => "he",
            Self::Dcp(_) => "dcp",
            Self::Udcp(_) => "udcp",
            Self::Ibla(_) => "ibla",
            Self::Precomputed { name, .. } => name,
        }
    }

    /// First 16 hex digits of the SHA-256 of this generator's JSON form.
    pub fn params_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec is serializable");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn is_precomputed(&self) -> bool {
        matches!(self, Self::Precomputed { .. })
    }

    /// The specs of the full six-negative configuration.
    pub fn default_set() -> Vec<Self> {
        vec![
            Self::Udcp(DcpParams::default()),
            Self::Ibla(IblaParams::default()),
            Self::Dcp(DcpParams::default()),
            Self::He,
            Self::Precomputed {
                name: "funie".into(),
                dir: None,
            },
            Self::Precomputed {
                name: "usuir".into(),
                dir: None,
            },
        ]
    }

    /// Run a classical generator; precomputed specs have nothing to run.
    pub fn generate(&self, image: &ImageTensor) -> Result<ImageTensor> {
        let out = match self {
            Self::He => histogram_equalize(image),
            Self::Dcp(p) => dark_channel_prior(image, p).image,
            Self::Udcp(p) => underwater_dcp(image, p).image,
            Self::Ibla(p) => ibla_restore(image, p).image,
            Self::Precomputed { name, .. } => {
                return Err(Error::Generator {
                    spec: name.clone(),
                    message: "precomputed negatives are read from disk, not generated".into(),
                })
            }
        };
        if !out.is_finite() {
            return Err(Error::Generator {
                spec: self.to_string(),
                message: "produced non-finite pixels".into(),
            });
        }
        Ok(out.quantize_u8())
    }
}

impl fmt::Display for GeneratorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Precomputed { name, dir: Some(d) } => write!(f, "precomputed:{name}={}", d.display()),
            Self::Precomputed { name, dir: None } => write!(f, "precomputed:{name}"),
            other => f.write_str(other.name()),
        }
    }
}

/// Parses `he`, `dcp`, `udcp`, `ibla`, `precomputed:<name>` or
/// `precomputed:<name>=<dir>`; classical methods take default parameters.
impl FromStr for GeneratorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "he" => Ok(Self::He),
            "dcp" => Ok(Self::Dcp(DcpParams::default())),
            "udcp" => Ok(Self::Udcp(DcpParams::default())),
            "ibla" => Ok(Self::Ibla(IblaParams::default())),
            other => {
                let rest = other.strip_prefix("precomputed:").ok_or_else(|| {
                    Error::InvalidArgument(format!("unknown negative generator `{other}`"))
                })?;
                let (name, dir) = match rest.split_once('=') {
                    Some((n, d)) => (n, Some(PathBuf::from(d))),
                    None => (rest, None),
                };
                if name.is_empty() || name.contains(['/', '\\']) {
                    return Err(Error::InvalidArgument(format!(
                        "bad precomputed negative name `{name}`"
                    )));
                }
                Ok(Self::Precomputed {
                    name: name.to_string(),
                    dir,
                })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub easy: ImageTensor,
    pub non_easy: Vec<ImageTensor>,
    pub provenance: Vec<String>,
}

impl NegativeSet {
    pub fn z(&self) -> usize {
        self.non_easy.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.non_easy.len() != self.provenance.len() {
            return Err(Error::Dataset("negative count differs from provenance count".into()));
        }
        let mut seen = HashSet::new();
        for (img, name) in self.non_easy.iter().zip(&self.provenance) {
            if !seen.insert(name) {
                return Err(Error::Dataset(format!("duplicate negative provenance `{name}`")));
            }
            self.easy.ensure_same_shape(img)?;
            if !img.in_unit_range() {
                return Err(Error::Dataset(format!("negative `{name}` leaves [0,1]")));
            }
        }
        Ok(())
    }
}

/// Builds negative sets with an optional on-disk cache.
#[derive(Debug)]
pub struct NegativeBuilder {
    specs: Vec<GeneratorSpec>,
    cache_dir: Option<PathBuf>,
    generated: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl NegativeBuilder {
    pub fn new(specs: Vec<GeneratorSpec>, cache_dir: Option<PathBuf>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidArgument("at least one negative generator is required".into()));
        }
        let mut seen = HashSet::new();
        for s in &specs {
            if !seen.insert(s.name().to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "negative generator `{}` listed twice",
                    s.name()
                )));
            }
            if let GeneratorSpec::Precomputed { name, dir: None } = s {
                if cache_dir.is_none() {
                    return Err(Error::InvalidArgument(format!(
                        "precomputed negatives `{name}` need a directory or a cache dir"
                    )));
                }
            }
        }
        Ok(Self {
            specs,
            cache_dir,
            generated: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        })
    }

    pub fn specs(&self) -> &[GeneratorSpec] {
        &self.specs
    }

    /// Number of generator invocations so far.
    pub fn generated(&self) -> usize {
        self.generated.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::Relaxed)
    }

    /// Where the negative of `spec` for `id` lives on disk, if anywhere.
    pub fn path_for(&self, spec: &GeneratorSpec, id: &str) -> Option<PathBuf> {
        match spec {
            GeneratorSpec::Precomputed { name, dir } => Some(
                dir.clone()
                    .or_else(|| self.cache_dir.as_ref().map(|c| c.join(name)))?
                    .join(format!("{id}.png")),
            ),
            _ => self.cache_dir.as_ref().map(|c| {
                c.join(spec.name())
                    .join(spec.params_hash())
                    .join(format!("{id}.png"))
            }),
        }
    }

    fn one(&self, spec: &GeneratorSpec, id: &str, image: &ImageTensor) -> Result<ImageTensor> {
        let path = self.path_for(spec, id);
        let wrap = |e: Error| Error::Generator {
            spec: spec.to_string(),
            message: e.to_string(),
        };
        if spec.is_precomputed() {
            let path = path.expect("precomputed path resolved at construction");
            if !path.exists() {
                return Err(Error::Generator {
                    spec: spec.to_string(),
                    message: format!("missing precomputed file {}", path.display()),
                });
            }
            let img = ImageTensor::load(&path).map_err(wrap)?;
            image.ensure_same_shape(&img).map_err(wrap)?;
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(img);
        }
        if let Some(p) = &path {
            if p.exists() {
                let img = ImageTensor::load(p).map_err(wrap)?;
                if img.same_shape(image) {
                    self.cache_hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(img);
                }
                log::warn!("cached negative {} has the wrong size; regenerating", p.display());
            }
        }
        let img = spec.generate(image).map_err(|e| match e {
            Error::Generator { .. } => e,
            other => wrap(other),
        })?;
        self.generated.fetch_add(1, Ordering::Relaxed);
        if let Some(p) = &path {
            img.save_png(p)?;
        }
        Ok(img)
    }

    pub fn build(&self, id: &str, image: &ImageTensor) -> Result<NegativeSet> {
        let non_easy = self
            .specs
            .iter()
            .map(|s| self.one(s, id, image))
            .collect::<Result<Vec<_>>>()?;
        let set = NegativeSet {
            easy: image.clone(),
            non_easy,
            provenance: self.specs.iter().map(|s| s.name().to_string()).collect(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Build sets for many images, in parallel across images.
    pub fn build_all(
        &self,
        images: &[(String, ImageTensor)],
        parallelism: Parallelism,
    ) -> Result<BTreeMap<String, NegativeSet>> {
        let sets = parallelism.try_map(images, |(id, img)| self.build(id, img))?;
        Ok(images.iter().map(|(id, _)| id.clone()).zip(sets).collect())
    }
}

/// One-shot convenience over [`NegativeBuilder`].
pub fn build_negative_set(
    id: &str,
    image: &ImageTensor,
    specs: &[GeneratorSpec],
    cache_dir: Option<&Path>,
) -> Result<NegativeSet> {
    NegativeBuilder::new(specs.to_vec(), cache_dir.map(Path::to_path_buf))?.build(id, image)
}
