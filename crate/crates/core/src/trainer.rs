//! Enhancement-network training under the composite loss.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::enhancer::{forward_padded, save_enhancer, Enhancer, ReferenceCnnConfig};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::io::write_atomic;
use crate::losses::{
    classify_scores, composite_loss, BatchTargets, CrConfig, CurriculumLog, CurriculumWeights,
    LossContext, LossReport, LossWeights,
};
use crate::negatives::NegativeSet;
use crate::optim::{cosine_lr, Adam};
use crate::perception::PerceptionModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumMode {
    /// Reclassify every negative at each batch from the current crop scores.
    PerBatch,
    /// Classify once per epoch from full-image scores.
    PerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UieTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Square crop side; smaller sources are upscaled first.
    pub crop: usize,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub loss: LossWeights,
    pub cr: CrConfig,
    pub enable_clip: bool,
    pub enable_cr: bool,
    pub curriculum: CurriculumMode,
    pub enhancer: ReferenceCnnConfig,
    /// Save a checkpoint every this many epochs; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for UieTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            batch_size: 16,
            lr: 0.001,
            crop: 256,
            horizontal_flip: true,
            vertical_flip: false,
            loss: LossWeights::default(),
            cr: CrConfig::default(),
            enable_clip: true,
            enable_cr: true,
            curriculum: CurriculumMode::PerBatch,
            enhancer: ReferenceCnnConfig::default(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl UieTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("uie.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("uie.batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("uie.lr", "must be a positive finite number"));
        }
        if self.crop == 0 {
            return Err(Error::config("uie.crop", "must be at least 1"));
        }
        self.loss.validate()?;
        self.cr.validate()
    }

    pub fn needs_negatives(&self) -> bool {
        self.enable_cr && self.loss.lambda2 > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: String,
    pub input: ImageTensor,
    pub reference: ImageTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub ids: Vec<String>,
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub l1: f64,
    pub l_clip: f64,
    pub l_cr: f64,
    pub l_total: f64,
    pub lr_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRunRecord {
    pub seed: u64,
    pub config: UieTrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
    pub curriculum: CurriculumLog,
}

impl TrainingRunRecord {
    /// Mean total loss per epoch, in order.
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.l_total).collect()
    }
}

/// Optional side outputs of a run.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Checkpoints and the line-delimited step log go here.
    pub out_dir: Option<PathBuf>,
    pub observer: Option<&'a mut dyn FnMut(&StepRecord)>,
}

/// Crop window and flips applied identically to every image of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub top: usize,
    pub left: usize,
    pub hflip: bool,
    pub vflip: bool,
}

/// Upscale so both sides reach `crop`, keeping the aspect ratio.
pub fn fit_for_crop(image: &ImageTensor, crop: usize) -> ImageTensor {
    let (h, w) = image.dims();
    if h >= crop && w >= crop {
        return image.clone();
    }
    let s = (crop as f64 / h as f64).max(crop as f64 / w as f64);
    let nh = ((h as f64 * s).ceil() as usize).max(crop);
    let nw = ((w as f64 * s).ceil() as usize).max(crop);
    image.resize_bilinear(nh, nw)
}

impl Augmentation {
    pub fn sample(rng: &mut ChaCha8Rng, dims: (usize, usize), crop: usize, cfg: &UieTrainConfig) -> Self {
        let top = rng.gen_range(0..=dims.0 - crop);
        let left = rng.gen_range(0..=dims.1 - crop);
        let hflip = cfg.horizontal_flip && rng.gen_bool(0.5);
        let vflip = cfg.vertical_flip && rng.gen_bool(0.5);
        Self {
            top,
            left,
            hflip,
            vflip,
        }
    }

    pub fn apply(&self, image: &ImageTensor, crop: usize) -> Result<ImageTensor> {
        let mut out = fit_for_crop(image, crop).crop(self.top, self.left, crop, crop)?;
        if self.hflip {
            out = out.flip_horizontal();
        }
        if self.vflip {
            out = out.flip_vertical();
        }
        Ok(out)
    }
}

fn snapshot(vars: &[candle_core::Var]) -> Result<Vec<Tensor>> {
    Ok(vars.iter().map(|v| v.as_tensor().copy()).collect::<candle_core::Result<_>>()?)
}

fn restore(vars: &[candle_core::Var], saved: &[Tensor]) -> Result<()> {
    for (v, t) in vars.iter().zip(saved) {
        v.set(t)?;
    }
    Ok(())
}

fn check_inputs(
    pairs: &[TrainingPair],
    negatives: &BTreeMap<String, NegativeSet>,
    config: &UieTrainConfig,
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no training pairs".into()));
    }
    let mut ids = std::collections::HashSet::new();
    for p in pairs {
        if !ids.insert(&p.id) {
            return Err(Error::Dataset(format!("duplicate training id `{}`", p.id)));
        }
        p.input.ensure_same_shape(&p.reference)?;
        if !config.needs_negatives() {
            continue;
        }
        let set = negatives
            .get(&p.id)
            .ok_or_else(|| Error::Dataset(format!("no negative set for `{}`", p.id)))?;
        if set.z() != config.cr.z {
            return Err(Error::Dataset(format!(
                "`{}` has {} negatives, configuration expects {}",
                p.id,
                set.z(),
                config.cr.z
            )));
        }
        set.validate()?;
        p.input.ensure_same_shape(&set.non_easy[0])?;
    }
    Ok(())
}

fn score_full(perception: &PerceptionModel, images: &[&ImageTensor]) -> Result<Vec<f64>> {
    images
        .iter()
        .map(|img| perception.score(img).map(|s| s.s_out))
        .collect()
}

/// Train `enhancer` in place; perception and feature backbones stay frozen.
pub fn train_enhancer(
    pairs: &[TrainingPair],
    negatives: &BTreeMap<String, NegativeSet>,
    perception: &PerceptionModel,
    enhancer: &dyn Enhancer,
    config: &UieTrainConfig,
    mut options: TrainOptions<'_>,
) -> Result<TrainingRunRecord> {
    config.validate()?;
    check_inputs(pairs, negatives, config)?;
    let started = Instant::now();
    let backbones = &perception.backbones;
    let (dtype, device) = (backbones.dtype, backbones.device.clone());
    let ctx = LossContext {
        perception,
        features: backbones.features.as_ref(),
        weights: config.loss,
        cr: config.cr.clone(),
        enable_clip: config.enable_clip,
        enable_cr: config.enable_cr,
    };
    let use_cr = ctx.cr_active();

    let vars = enhancer.vars();
    let mut opt = Adam::new(vars.clone(), config.lr)?;
    let steps_per_epoch = pairs.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut record = TrainingRunRecord {
        seed: config.seed,
        config: config.clone(),
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        wall_clock_secs: 0.0,
        curriculum: CurriculumLog::default(),
    };
    let run_config = serde_json::to_value(config).expect("config is serializable");
    let mut log_lines = String::new();

    // Full-image negative scores for the per-epoch curriculum.
    let full_negative_scores: BTreeMap<&str, Vec<f64>> =
        if use_cr && config.curriculum == CurriculumMode::PerEpoch {
            pairs
                .iter()
                .map(|p| {
                    let set = &negatives[&p.id];
                    let imgs: Vec<&ImageTensor> = set.non_easy.iter().collect();
                    Ok((p.id.as_str(), score_full(perception, &imgs)?))
                })
                .collect::<Result<_>>()?
        } else {
            BTreeMap::new()
        };

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut last_good = snapshot(&vars)?;
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let epoch_curriculum: Option<BTreeMap<&str, CurriculumWeights>> =
            if use_cr && config.curriculum == CurriculumMode::PerEpoch {
                let mut map = BTreeMap::new();
                for p in pairs {
                    let x = p.input.to_tensor(dtype, &device)?;
                    let y = forward_padded(enhancer, &x)?.detach();
                    let s = perception.score_tensor(&y)?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0];
                    let w = classify_scores(s, &full_negative_scores[p.id.as_str()], config.cr.gamma, config.cr.flip_comparison)?;
                    map.insert(p.id.as_str(), w);
                }
                Some(map)
            } else {
                None
            };

        let mut sums = [0.0f64; 4];
        let mut lr = config.lr;
        for chunk in order.chunks(config.batch_size) {
            let mut inputs = Vec::new();
            let mut refs = Vec::new();
            let mut negs: Vec<Vec<ImageTensor>> = vec![Vec::new(); if use_cr { config.cr.z } else { 0 }];
            for &i in chunk {
                let p = &pairs[i];
                let fitted = fit_for_crop(&p.input, config.crop).dims();
                let aug = Augmentation::sample(&mut rng, fitted, config.crop, config);
                inputs.push(aug.apply(&p.input, config.crop)?);
                refs.push(aug.apply(&p.reference, config.crop)?);
                if use_cr {
                    for (q, n) in negatives[&p.id].non_easy.iter().enumerate() {
                        negs[q].push(aug.apply(n, config.crop)?);
                    }
                }
            }
            let stack = |v: &[ImageTensor]| {
                let r: Vec<&ImageTensor> = v.iter().collect();
                ImageTensor::stack(&r, dtype, &device)
            };
            let x = stack(&inputs)?;
            let y = stack(&refs)?;
            let neg_t: Vec<Tensor> = negs.iter().map(|v| stack(v)).collect::<Result<_>>()?;

            let reference_scores = if ctx.clip_active() {
                perception.score_tensor(&y)?.to_dtype(DType::F64)?.to_vec1::<f64>()?
            } else {
                vec![0.0; chunk.len()]
            };
            let mut negative_scores = vec![Vec::new(); chunk.len()];
            if use_cr && epoch_curriculum.is_none() {
                for n in &neg_t {
                    let s = perception.score_tensor(n)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
                    for (b, v) in s.into_iter().enumerate() {
                        negative_scores[b].push(v);
                    }
                }
            }
            let fixed: Option<Vec<CurriculumWeights>> = epoch_curriculum
                .as_ref()
                .map(|m| chunk.iter().map(|&i| m[pairs[i].id.as_str()].clone()).collect());

            lr = cosine_lr(config.lr, global_step, total_steps);
            opt.set_lr(lr);
            let anchor = forward_padded(enhancer, &x)?;
            let targets = BatchTargets {
                input: &x,
                reference: &y,
                negatives: &neg_t,
                reference_scores: &reference_scores,
                negative_scores: &negative_scores,
            };
            let (loss, report) = match composite_loss(&anchor, &targets, &ctx, fixed.as_deref()) {
                Ok(v) => v,
                Err(Error::NonFinite(msg)) => {
                    restore(&vars, &last_good)?;
                    let mut detail = format!("{msg} at epoch {epoch}, step {global_step}");
                    if let Some(dir) = &options.out_dir {
                        let path = dir.join("last_good.ckpt");
                        save_enhancer(enhancer, &path, run_config.clone())?;
                        detail.push_str(&format!("; last good parameters saved to {}", path.display()));
                    }
                    return Err(Error::NonFinite(detail));
                }
                Err(e) => return Err(e),
            };
            last_good = snapshot(&vars)?;
            let grads = loss.backward()?;
            opt.step(&grads)?;

            let ids: Vec<String> = chunk.iter().map(|&i| pairs[i].id.clone()).collect();
            for (id, w) in ids.iter().zip(&report.weights) {
                for (q, weight) in w.per_negative.iter().enumerate() {
                    let name = &negatives[id].provenance[q];
                    record.curriculum.record(format!("{id}/{name}"), *weight);
                }
            }
            for (s, v) in sums.iter_mut().zip([report.l1, report.l_clip, report.l_cr, report.l_total]) {
                *s += v;
            }
            let step = StepRecord {
                epoch,
                step: global_step,
                lr,
                ids,
                report,
            };
            if options.out_dir.is_some() {
                log_lines.push_str(&serde_json::to_string(&step).expect("record is serializable"));
                log_lines.push('\n');
            }
            if let Some(obs) = options.observer.as_mut() {
                obs(&step);
            }
            global_step += 1;
        }

        let n = steps_per_epoch as f64;
        let er = EpochRecord {
            epoch,
            steps: steps_per_epoch,
            l1: sums[0] / n,
            l_clip: sums[1] / n,
            l_cr: sums[2] / n,
            l_total: sums[3] / n,
            lr_end: lr,
        };
        log::info!(
            "epoch {epoch}: total {:.5} (l1 {:.5}, clip {:.5}, cr {:.5})",
            er.l_total,
            er.l1,
            er.l_clip,
            er.l_cr
        );
        record.epochs.push(er);

        if let Some(dir) = &options.out_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("epoch_{:04}.ckpt", epoch + 1));
                save_enhancer(enhancer, &path, run_config.clone())?;
                record.checkpoints.push(path);
            }
        }
    }

    record.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(dir) = &options.out_dir {
        let path = dir.join("final.ckpt");
        save_enhancer(enhancer, &path, run_config)?;
        record.checkpoints.push(path);
        write_atomic(&dir.join("train_log.jsonl"), log_lines.as_bytes())?;
        let json = serde_json::to_vec_pretty(&record).expect("record is serializable");
        write_atomic(&dir.join("run_record.json"), &json)?;
    }
    Ok(record)
}

/// Read a run record written by [`train_enhancer`].
pub fn load_run_record(path: &Path) -> Result<TrainingRunRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}
