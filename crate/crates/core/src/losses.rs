//! Training losses: pixel L1, the perception hinge, curriculum-weighted
//! contrastive regularization, and their weighted sum.
//!
//! Each loss has a scalar form over plain values and a batched tensor form
//! used by the trainer. The tensor forms reduce per sample first and then
//! average over the batch, so a batch of one matches the scalar form.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{validate_layer_ids, FeatureExtractor};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::perception::{PerceptionModel, PerceptionScore};

pub const DEFAULT_LAYER_IDS: [usize; 5] = [1, 3, 5, 9, 13];
pub const DEFAULT_XI: [f64; 5] = [1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeClass {
    Hard,
    VeryHard,
}

/// Per-negative weights for one anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumWeights {
    pub gamma: f64,
    pub z: usize,
    pub per_negative: Vec<f64>,
    pub easy_weight: f64,
    pub classes: Vec<NegativeClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrConfig {
    pub layer_ids: Vec<usize>,
    pub xi: Vec<f64>,
    pub gamma: f64,
    pub z: usize,
    /// Reverse the hard/very-hard comparison.
    pub flip_comparison: bool,
    /// Added to every denominator when set; otherwise a zero denominator is an error.
    pub epsilon: Option<f64>,
}

impl Default for CrConfig {
    fn default() -> Self {
        Self {
            layer_ids: DEFAULT_LAYER_IDS.to_vec(),
            xi: DEFAULT_XI.to_vec(),
            gamma: 0.25,
            z: 6,
            flip_comparison: false,
            epsilon: None,
        }
    }
}

impl CrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.xi.len() != self.layer_ids.len() {
            return Err(Error::config(
                "cr.xi",
                format!(
                    "needs one weight per layer ({} layers, {} weights)",
                    self.layer_ids.len(),
                    self.xi.len()
                ),
            ));
        }
        if self.xi.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::config("cr.xi", "weights must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("cr.gamma", "must lie in [0, 1)"));
        }
        if self.z == 0 {
            return Err(Error::config("cr.z", "must be at least 1"));
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::config("cr.epsilon", "must be positive when set"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.025,
            lambda2: 0.1,
            alpha: 0.975,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("loss.alpha", format!("{} is outside [0, 1]", self.alpha)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite()) {
            return Err(Error::config("loss.lambda1", "must be non-negative"));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::config("loss.lambda2", "must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub l_clip: f64,
    pub l_cr: f64,
    pub l_total: f64,
    /// One entry per sample; empty when the regularizer is off.
    pub weights: Vec<CurriculumWeights>,
}

pub fn pixel_l1(enhanced: &ImageTensor, reference: &ImageTensor) -> Result<f64> {
    enhanced.ensure_same_shape(reference)?;
    let d = enhanced.data();
    Ok(d.iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / d.len() as f64)
}

pub fn clip_perception_loss(enhanced: PerceptionScore, reference: PerceptionScore, alpha: f64) -> f64 {
    hinge(enhanced.s_out, reference.s_out, alpha)
}

pub fn hinge(s_enhanced: f64, s_reference: f64, alpha: f64) -> f64 {
    ((1.0 - s_enhanced) - alpha * (1.0 - s_reference)).max(0.0)
}

/// `true` when the negative counts as hard (weight `1+γ`).
pub fn is_hard(s_anchor: f64, s_negative: f64, flip: bool) -> bool {
    if flip {
        s_anchor < s_negative
    } else {
        s_anchor > s_negative
    }
}

pub fn classify_negatives(
    enhanced: PerceptionScore,
    negatives: &[PerceptionScore],
    gamma: f64,
    flip: bool,
) -> Result<CurriculumWeights> {
    let scores: Vec<f64> = negatives.iter().map(|s| s.s_out).collect();
    classify_scores(enhanced.s_out, &scores, gamma, flip)
}

pub fn classify_scores(s_anchor: f64, negatives: &[f64], gamma: f64, flip: bool) -> Result<CurriculumWeights> {
    if negatives.is_empty() {
        return Err(Error::InvalidArgument("no non-easy negatives to classify".into()));
    }
    let classes: Vec<NegativeClass> = negatives
        .iter()
        .map(|&s| {
            if is_hard(s_anchor, s, flip) {
                NegativeClass::Hard
            } else {
                NegativeClass::VeryHard
            }
        })
        .collect();
    let per_negative = classes
        .iter()
        .map(|c| match c {
            NegativeClass::Hard => 1.0 + gamma,
            NegativeClass::VeryHard => 1.0 - gamma,
        })
        .collect();
    Ok(CurriculumWeights {
        gamma,
        z: negatives.len(),
        per_negative,
        easy_weight: negatives.len() as f64,
        classes,
    })
}

/// The regularizer over precomputed per-layer feature distances.
///
/// `positive[i]` is the anchor-positive distance at layer `i`,
/// `negatives[q][i]` the anchor-to-negative-`q` distance and `easy[i]` the
/// anchor-to-input distance.
pub fn cr_from_distances(
    positive: &[f64],
    negatives: &[Vec<f64>],
    easy: &[f64],
    weights: &CurriculumWeights,
    xi: &[f64],
    epsilon: Option<f64>,
) -> Result<f64> {
    if negatives.len() != weights.per_negative.len() {
        return Err(Error::InvalidArgument(format!(
            "{} negatives but {} weights",
            negatives.len(),
            weights.per_negative.len()
        )));
    }
    let mut total = 0.0;
    for (i, &x) in xi.iter().enumerate() {
        let mut denom = weights.easy_weight * easy[i];
        for (q, w) in weights.per_negative.iter().enumerate() {
            denom += w * negatives[q][i];
        }
        if let Some(e) = epsilon {
            denom += e;
        } else if denom == 0.0 {
            return Err(Error::DegenerateBatch(format!(
                "zero contrastive denominator at layer position {i}"
            )));
        }
        total += x * positive[i] / denom;
    }
    Ok(total)
}

/// Mean absolute difference per sample: `(B, ...)` pair to `(B)`.
fn l1_per_sample(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.flatten_from(1)?.mean(1)?)
}

/// Regularizer for single images, extracting features with `extractor`.
#[allow(clippy::too_many_arguments)]
pub fn contrastive_regularization(
    anchor: &ImageTensor,
    positive: &ImageTensor,
    easy_negative: &ImageTensor,
    non_easy: &[ImageTensor],
    weights: &CurriculumWeights,
    cfg: &CrConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    cfg.validate()?;
    validate_layer_ids(&cfg.layer_ids, extractor.depth())?;
    if non_easy.len() != cfg.z {
        return Err(Error::InvalidArgument(format!(
            "expected {} non-easy negatives, got {}",
            cfg.z,
            non_easy.len()
        )));
    }
    let mut all = vec![anchor, positive, easy_negative];
    all.extend(non_easy.iter());
    for img in &all[1..] {
        anchor.ensure_same_shape(img)?;
    }
    let batch = ImageTensor::stack(&all, DType::F64, &candle_core::Device::Cpu)?;
    let feats = extractor.extract(&batch, &cfg.layer_ids)?;
    let mut pos = Vec::new();
    let mut easy = Vec::new();
    let mut negs = vec![Vec::new(); cfg.z];
    for f in &feats {
        let a = f.narrow(0, 0, 1)?;
        let d = |k: usize| -> Result<f64> {
            Ok(l1_per_sample(&a, &f.narrow(0, k, 1)?)?
                .to_dtype(DType::F64)?
                .to_vec1::<f64>()?[0])
        };
        pos.push(d(1)?);
        easy.push(d(2)?);
        for (q, n) in negs.iter_mut().enumerate() {
            n.push(d(3 + q)?);
        }
    }
    cr_from_distances(&pos, &negs, &easy, weights, &cfg.xi, cfg.epsilon)
}

pub fn total_loss(l1: f64, l_clip: f64, l_cr: f64, w: &LossWeights) -> f64 {
    l1 + w.lambda1 * l_clip + w.lambda2 * l_cr
}

/// Fixed inputs of one training batch, all `(B, 3, H, W)` on the same device.
pub struct BatchTargets<'a> {
    pub input: &'a Tensor,
    pub reference: &'a Tensor,
    /// One tensor per non-easy negative.
    pub negatives: &'a [Tensor],
    /// `s_out` of each reference, length `B`.
    pub reference_scores: &'a [f64],
    /// `s_out` of each negative per sample, `B × z`.
    pub negative_scores: &'a [Vec<f64>],
}

/// Frozen models and settings shared by every batch.
pub struct LossContext<'a> {
    pub perception: &'a PerceptionModel,
    pub features: &'a dyn FeatureExtractor,
    pub weights: LossWeights,
    pub cr: CrConfig,
    pub enable_clip: bool,
    pub enable_cr: bool,
}

impl LossContext<'_> {
    pub fn clip_active(&self) -> bool {
        self.enable_clip && self.weights.lambda1 > 0.0
    }

    pub fn cr_active(&self) -> bool {
        self.enable_cr && self.weights.lambda2 > 0.0
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Differentiable batch loss for `anchor` with a per-sample report.
///
/// `fixed_curriculum` replaces per-batch classification with preassigned
/// weights. Disabled terms are not evaluated and contribute no gradient.
pub fn composite_loss(
    anchor: &Tensor,
    targets: &BatchTargets<'_>,
    ctx: &LossContext<'_>,
    fixed_curriculum: Option<&[CurriculumWeights]>,
) -> Result<(Tensor, LossReport)> {
    let b = anchor.dims()[0];
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let dtype = anchor.dtype();
    let device = anchor.device().clone();
    let l1 = (anchor - targets.reference.detach())?.abs()?.mean_all()?;
    let mut total = l1.clone();
    let mut report = LossReport {
        l1: scalar(&l1)?,
        l_clip: 0.0,
        l_cr: 0.0,
        l_total: 0.0,
        weights: Vec::new(),
    };

    let need_scores = ctx.clip_active() || (ctx.cr_active() && fixed_curriculum.is_none());
    let anchor_scores = if need_scores {
        Some(ctx.perception.score_tensor(anchor)?)
    } else {
        None
    };

    if ctx.clip_active() {
        let s = anchor_scores.as_ref().expect("scores computed");
        let s_ref = Tensor::from_slice(targets.reference_scores, b, &device)?.to_dtype(dtype)?;
        let target = ((s_ref.affine(-1.0, 1.0)?) * ctx.weights.alpha)?;
        let clip = s.affine(-1.0, 1.0)?.sub(&target)?.relu()?.mean_all()?;
        report.l_clip = scalar(&clip)?;
        total = (total + (clip * ctx.weights.lambda1)?)?;
    }

    if ctx.cr_active() {
        let z = targets.negatives.len();
        if z != ctx.cr.z {
            return Err(Error::InvalidArgument(format!(
                "configured for {} negatives, batch has {z}",
                ctx.cr.z
            )));
        }
        let weights: Vec<CurriculumWeights> = match fixed_curriculum {
            Some(w) => w.to_vec(),
            None => {
                let s: Vec<f64> = anchor_scores
                    .as_ref()
                    .expect("scores computed")
                    .to_dtype(DType::F64)?
                    .to_vec1()?;
                s.iter()
                    .zip(targets.negative_scores)
                    .map(|(&a, n)| classify_scores(a, n, ctx.cr.gamma, ctx.cr.flip_comparison))
                    .collect::<Result<_>>()?
            }
        };
        if weights.len() != b {
            return Err(Error::InvalidArgument(format!(
                "{} curriculum entries for a batch of {b}",
                weights.len()
            )));
        }
        let cr = cr_tensor(anchor, targets, &weights, &ctx.cr, ctx.features)?;
        report.l_cr = scalar(&cr)?;
        report.weights = weights;
        total = (total + (cr * ctx.weights.lambda2)?)?;
    }

    report.l_total = scalar(&total)?;
    if !report.l_total.is_finite() {
        return Err(Error::NonFinite(format!("total loss is {}", report.l_total)));
    }
    Ok((total, report))
}

/// Batched regularizer; gradients flow into `anchor` only.
pub fn cr_tensor(
    anchor: &Tensor,
    targets: &BatchTargets<'_>,
    weights: &[CurriculumWeights],
    cfg: &CrConfig,
    extractor: &dyn FeatureExtractor,
) -> Result<Tensor> {
    validate_layer_ids(&cfg.layer_ids, extractor.depth())?;
    let b = anchor.dims()[0];
    let dtype = anchor.dtype();
    let device = anchor.device().clone();
    let z = targets.negatives.len();

    let detached = |t: &Tensor| -> Result<Vec<Tensor>> {
        Ok(extractor
            .extract(&t.detach(), &cfg.layer_ids)?
            .into_iter()
            .map(|f| f.detach())
            .collect())
    };
    let fa = extractor.extract(anchor, &cfg.layer_ids)?;
    let fp = detached(targets.reference)?;
    let fe = detached(targets.input)?;
    let fn_: Vec<Vec<Tensor>> = targets.negatives.iter().map(detached).collect::<Result<_>>()?;

    let w: Vec<f64> = weights.iter().flat_map(|c| c.per_negative.clone()).collect();
    if w.len() != b * z {
        return Err(Error::InvalidArgument("curriculum weights do not match negatives".into()));
    }
    let w = Tensor::from_vec(w, (b, z), &device)?.to_dtype(dtype)?;
    let easy_w: Vec<f64> = weights.iter().map(|c| c.easy_weight).collect();
    let easy_w = Tensor::from_vec(easy_w, b, &device)?.to_dtype(dtype)?;

    let mut per_sample = Tensor::zeros(b, dtype, &device)?;
    for (i, &xi) in cfg.xi.iter().enumerate() {
        let num = l1_per_sample(&fa[i], &fp[i])?;
        let mut den = l1_per_sample(&fa[i], &fe[i])?.mul(&easy_w)?;
        for (q, fq) in fn_.iter().enumerate() {
            let d = l1_per_sample(&fa[i], &fq[i])?;
            den = (den + d.mul(&w.narrow(1, q, 1)?.squeeze(1)?)?)?;
        }
        match cfg.epsilon {
            Some(e) => den = (den + e)?,
            None => {
                let vals: Vec<f64> = den.to_dtype(DType::F64)?.to_vec1()?;
                if vals.iter().any(|&v| v == 0.0) {
                    return Err(Error::DegenerateBatch(format!(
                        "zero contrastive denominator at layer {}",
                        cfg.layer_ids[i]
                    )));
                }
            }
        }
        per_sample = (per_sample + (num.div(&den)? * xi)?)?;
    }
    Ok(per_sample.mean_all()?)
}

/// Weight history per `(sample, negative)` key, in logging order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurriculumLog {
    pub history: BTreeMap<String, Vec<f64>>,
}

impl CurriculumLog {
    pub fn record(&mut self, key: impl Into<String>, weight: f64) {
        self.history.entry(key.into()).or_default().push(weight);
    }

    /// Indices at which the logged weight changed, with `(before, after)`.
    pub fn transitions(&self, key: &str) -> Vec<(usize, f64, f64)> {
        self.history
            .get(key)
            .map(|h| {
                h.windows(2)
                    .enumerate()
                    .filter(|(_, w)| w[0] != w[1])
                    .map(|(i, w)| (i + 1, w[0], w[1]))
                    .collect()
            })
            .unwrap_or_default()
    }
}
