//! Image quality metrics and the per-dataset report.

pub mod correlation;
pub mod noref;
pub mod reference;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use correlation::{average_ranks, plcc, srocc};
pub use noref::{uciqe, uiqm};
pub use reference::{mse, psnr, ssim, PSNR_CAP_DB};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::{image_id, list_images, write_atomic};
use crate::parallel::Parallelism;
use crate::perception::PerceptionModel;

/// One image's scores. Full-reference fields are present iff a reference exists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uciqe: f64,
    pub uiqm: f64,
    pub clip_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub uciqe: f64,
    pub uiqm: f64,
    pub clip_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub summary: MetricSummary,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    pub fn from_rows(rows: Vec<MetricRow>) -> Self {
        let n = rows.len();
        let mean = |f: &dyn Fn(&MetricRow) -> f64| {
            if n == 0 {
                0.0
            } else {
                rows.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let summary = MetricSummary {
            count: n,
            psnr: mean_of(rows.iter().map(|r| r.psnr)),
            ssim: mean_of(rows.iter().map(|r| r.ssim)),
            uciqe: mean(&|r| r.uciqe),
            uiqm: mean(&|r| r.uiqm),
            clip_score: mean_of(rows.iter().map(|r| r.clip_score)),
        };
        Self { rows, summary }
    }

    /// CSV with one row per image; optional columns are omitted when no row has them.
    pub fn to_csv(&self) -> Result<String> {
        let has_ref = self.rows.iter().any(|r| r.psnr.is_some());
        let has_clip = self.rows.iter().any(|r| r.clip_score.is_some());
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["id"];
        if has_ref {
            header.extend(["psnr", "ssim"]);
        }
        header.extend(["uciqe", "uiqm"]);
        if has_clip {
            header.push("clip_score");
        }
        let csv_err = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.id.clone()];
            if has_ref {
                rec.extend([fmt(r.psnr), fmt(r.ssim)]);
            }
            rec.extend([fmt(Some(r.uciqe)), fmt(Some(r.uiqm))]);
            if has_clip {
                rec.push(fmt(r.clip_score));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidArgument(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `path` as CSV and a `.json` summary beside it.
    pub fn write(&self, path: &Path) -> Result<PathBuf> {
        write_atomic(path, self.to_csv()?.as_bytes())?;
        let summary_path = path.with_extension("json");
        let json = serde_json::to_vec_pretty(&self.summary).expect("summary is serializable");
        write_atomic(&summary_path, &json)?;
        Ok(summary_path)
    }
}

/// Score one image against an optional reference.
pub fn score_image(
    id: &str,
    image: &ImageTensor,
    reference: Option<&ImageTensor>,
    perception: Option<&PerceptionModel>,
) -> Result<MetricRow> {
    let (psnr, ssim) = match reference {
        Some(r) => (Some(psnr(image, r)?), Some(ssim(image, r)?)),
        None => (None, None),
    };
    let clip_score = match perception {
        Some(p) => Some(100.0 * p.score(image)?.s_out),
        None => None,
    };
    Ok(MetricRow {
        id: id.to_string(),
        psnr,
        ssim,
        uciqe: uciqe(image),
        uiqm: uiqm(image),
        clip_score,
    })
}

/// Evaluate every image in `images`, matching references by file stem.
pub fn evaluate_dataset(
    images: &Path,
    references: Option<&Path>,
    perception: Option<&PerceptionModel>,
    parallelism: Parallelism,
) -> Result<MetricReport> {
    let files = list_images(images)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images in {}", images.display())));
    }
    let refs: Option<BTreeMap<String, PathBuf>> = match references {
        Some(dir) => {
            let map: BTreeMap<String, PathBuf> = list_images(dir)?
                .into_iter()
                .map(|p| (image_id(&p), p))
                .collect();
            let ids: Vec<String> = files.iter().map(|p| image_id(p)).collect();
            let missing: Vec<&String> = ids.iter().filter(|id| !map.contains_key(*id)).collect();
            let extra: Vec<&String> = map.keys().filter(|k| !ids.contains(k)).collect();
            if !missing.is_empty() || !extra.is_empty() {
                return Err(Error::Dataset(format!(
                    "unmatched references: images without reference {missing:?}, references without image {extra:?}"
                )));
            }
            Some(map)
        }
        None => None,
    };
    let rows = parallelism.try_map(&files, |path| {
        let id = image_id(path);
        let image = ImageTensor::load(path)?;
        let reference = match &refs {
            Some(m) => Some(ImageTensor::load(&m[&id])?),
            None => None,
        };
        score_image(&id, &image, reference.as_ref(), perception)
    })?;
    Ok(MetricReport::from_rows(rows))
}
