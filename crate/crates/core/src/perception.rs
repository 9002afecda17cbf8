//! The prompt-pair perception model.
//!
//! An image is scored by its cosine similarity to a learnable "clear" and a
//! learnable "turbid" prompt; the two similarities are softmaxed and the first
//! coordinate is the quality score in (0,1). Prompts are learned in
//! token-embedding space against normalized opinion scores.

use std::path::Path;

use candle_core::{DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{cosine_rows, BackboneConfig, Backbones};
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::metrics::correlation::{plcc, srocc};
use crate::optim::{sigmoid, Sgd};
use crate::parallel::Parallelism;

pub const POSITIVE_PROMPT: &str = "Clear Underwater photo.";
pub const NEGATIVE_PROMPT: &str = "Turbid Underwater photo.";

/// Learnable positive/negative token-embedding matrices, `(N_p, W)` and
/// `(N_n, W)`. The two sentences may tokenize to different lengths.
#[derive(Debug, Clone)]
pub struct PromptPair {
    pub positive: Tensor,
    pub negative: Tensor,
}

impl PromptPair {
    /// Tokenize and embed the two sentences with the backbone's own table.
    pub fn from_text(backbones: &Backbones, positive: &str, negative: &str) -> Result<Self> {
        let p = backbones.text.embed_text(positive)?;
        let n = backbones.text.embed_text(negative)?;
        let pair = Self {
            positive: p,
            negative: n,
        };
        pair.validate(backbones.text.token_width())?;
        Ok(pair)
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        for t in [&self.positive, &self.negative] {
            let dims = t.dims();
            if dims.len() != 2 || dims[0] == 0 || dims[1] != width {
                return Err(Error::Shape(format!(
                    "prompt tokens must be (N, {width}) with N >= 1, got {dims:?}"
                )));
            }
            let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("prompt token embeddings".into()));
            }
        }
        Ok(())
    }

    pub fn to_vecs(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            self.positive.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
            self.negative.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
        ))
    }
}

/// Softmaxed similarity pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerceptionScore {
    pub s_out: f64,
    pub s_p: f64,
    pub s_n: f64,
}

impl PerceptionScore {
    /// `s_out = e^{s_p/T} / (e^{s_p/T} + e^{s_n/T})`, evaluated as a logistic of the difference.
    pub fn from_similarities(s_p: f64, s_n: f64, temperature: f64) -> Self {
        let d = (s_p - s_n) / temperature;
        Self {
            s_out: 1.0 / (1.0 + (-d).exp()),
            s_p,
            s_n,
        }
    }

    /// A bare score with no similarity breakdown.
    pub fn from_s_out(s_out: f64) -> Self {
        Self {
            s_out,
            s_p: f64::NAN,
            s_n: f64::NAN,
        }
    }
}

/// An image with its opinion score normalized to [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct MosSample {
    pub image: ImageTensor,
    pub s_mos: f64,
}

impl MosSample {
    pub fn new(image: ImageTensor, s_mos: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s_mos) {
            return Err(Error::Dataset(format!(
                "normalized MOS must lie in [0,1], got {s_mos}"
            )));
        }
        Ok(Self { image, s_mos })
    }

    /// Normalize a raw score by the dataset's declared maximum.
    pub fn from_raw(image: ImageTensor, raw: f64, max_score: f64) -> Result<Self> {
        if max_score <= 0.0 {
            return Err(Error::Dataset("declared MOS maximum must be positive".into()));
        }
        Self::new(image, raw / max_score)
    }
}

/// Prompt-learning hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub iterations: usize,
    /// Softmax temperature on the similarity pair; 1 is the plain softmax.
    pub temperature: f64,
    pub log_every: usize,
    pub seed: u64,
    pub positive_prompt: String,
    pub negative_prompt: String,
}

impl Default for QaTrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            batch_size: 64,
            iterations: 100_000,
            temperature: 1.0,
            log_every: 100,
            seed: 0,
            positive_prompt: POSITIVE_PROMPT.into(),
            negative_prompt: NEGATIVE_PROMPT.into(),
        }
    }
}

impl QaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("qa.lr", "must be a positive finite number"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("qa.batch_size", "must be at least 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("qa.temperature", "must be positive"));
        }
        if self.log_every == 0 {
            return Err(Error::config("qa.log_every", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QaLogEntry {
    pub iteration: usize,
    pub loss: f64,
}

/// Learned prompts bound to the frozen backbones they were learned with.
#[derive(Debug, Clone)]
pub struct PerceptionModel {
    pub prompts: PromptPair,
    pub backbones: Backbones,
    pub temperature: f64,
    pub iteration: usize,
    /// Declared raw-MOS maximum of the training data, if known.
    pub mos_scale: Option<f64>,
}

impl PerceptionModel {
    /// Untrained model initialized from the default antonym pair.
    pub fn new(backbones: Backbones) -> Result<Self> {
        Self::with_prompts(backbones, POSITIVE_PROMPT, NEGATIVE_PROMPT, 1.0)
    }

    pub fn with_prompts(
        backbones: Backbones,
        positive: &str,
        negative: &str,
        temperature: f64,
    ) -> Result<Self> {
        let prompts = PromptPair::from_text(&backbones, positive, negative)?;
        Ok(Self {
            prompts,
            backbones,
            temperature,
            iteration: 0,
            mos_scale: None,
        })
    }

    pub fn from_parts(backbones: Backbones, prompts: PromptPair, temperature: f64) -> Result<Self> {
        prompts.validate(backbones.text.token_width())?;
        Ok(Self {
            prompts,
            backbones,
            temperature,
            iteration: 0,
            mos_scale: None,
        })
    }

    /// Unnormalized text embeddings of both prompts, each `(D)`.
    pub fn text_embeddings(&self) -> Result<(Tensor, Tensor)> {
        Ok((
            self.backbones.text.encode(&self.prompts.positive)?,
            self.backbones.text.encode(&self.prompts.negative)?,
        ))
    }

    /// Differentiable `(s_p, s_n)` for an image batch, each `(B)`.
    pub fn similarity_tensors(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let emb = self.backbones.image.encode(images)?;
        let (tp, tn) = self.text_embeddings()?;
        Ok((cosine_rows(&emb, &tp)?, cosine_rows(&emb, &tn)?))
    }

    /// Differentiable `s_out` for an image batch, shape `(B)`.
    pub fn score_tensor(&self, images: &Tensor) -> Result<Tensor> {
        let (sp, sn) = self.similarity_tensors(images)?;
        s_out_tensor(&sp, &sn, self.temperature)
    }

    pub fn similarity_scores(&self, image: &ImageTensor) -> Result<(f64, f64)> {
        let t = image.to_tensor(self.backbones.dtype, &self.backbones.device)?;
        let (sp, sn) = self.similarity_tensors(&t)?;
        Ok((scalar0(&sp)?, scalar0(&sn)?))
    }

    pub fn score(&self, image: &ImageTensor) -> Result<PerceptionScore> {
        let (sp, sn) = self.similarity_scores(image)?;
        Ok(PerceptionScore::from_similarities(sp, sn, self.temperature))
    }

    /// Scores for a batch of same-shape images in one forward pass.
    pub fn score_batch(&self, images: &[&ImageTensor]) -> Result<Vec<PerceptionScore>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let t = ImageTensor::stack(images, self.backbones.dtype, &self.backbones.device)?;
        let (sp, sn) = self.similarity_tensors(&t)?;
        let sp: Vec<f64> = sp.to_dtype(DType::F64)?.to_vec1()?;
        let sn: Vec<f64> = sn.to_dtype(DType::F64)?.to_vec1()?;
        Ok(sp
            .into_iter()
            .zip(sn)
            .map(|(p, n)| PerceptionScore::from_similarities(p, n, self.temperature))
            .collect())
    }

    /// Mean squared error between predicted scores and normalized MOS.
    pub fn prompt_loss(&self, batch: &[MosSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for s in batch {
            let d = s.s_mos - self.score(&s.image)?.s_out;
            total += d * d;
        }
        Ok(total / batch.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "backbone": self.backbones.config,
            "temperature": self.temperature,
            "iteration": self.iteration,
            "mos_scale": self.mos_scale,
            "preprocessing": self.backbones.image.preprocessing(),
            "backbone_digest": self.backbones.weights_digest()?,
        });
        Checkpoint {
            kind: "perception".into(),
            meta,
            tensors: vec![
                NamedTensor::from_tensor("prompt.positive", &self.prompts.positive)?,
                NamedTensor::from_tensor("prompt.negative", &self.prompts.negative)?,
            ],
        }
        .save(path)
    }

    /// Load prompts and rebuild the backbones recorded in the checkpoint.
    pub fn load(path: &Path, dtype: DType) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind("perception")?;
        let meta = &ckpt.meta;
        let cfg: BackboneConfig = serde_json::from_value(meta["backbone"].clone())
            .map_err(|e| Error::Checkpoint(format!("backbone descriptor: {e}")))?;
        let backbones = Backbones::load(&cfg, dtype)?;
        let recorded = meta["backbone_digest"].as_str().unwrap_or_default();
        if recorded != backbones.weights_digest()? {
            return Err(Error::Checkpoint(
                "backbone weights differ from those the prompts were learned with".into(),
            ));
        }
        let prompts = PromptPair {
            positive: ckpt.tensor("prompt.positive")?.to_tensor(dtype, &backbones.device)?,
            negative: ckpt.tensor("prompt.negative")?.to_tensor(dtype, &backbones.device)?,
        };
        let mut model = Self::from_parts(backbones, prompts, meta["temperature"].as_f64().unwrap_or(1.0))?;
        model.iteration = meta["iteration"].as_u64().unwrap_or(0) as usize;
        model.mos_scale = meta["mos_scale"].as_f64();
        Ok(model)
    }
}

fn scalar0(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.get(0)?.to_scalar::<f64>()?)
}

/// Softmax of `(s_p, s_n)` at the first coordinate, elementwise.
pub fn s_out_tensor(s_p: &Tensor, s_n: &Tensor, temperature: f64) -> Result<Tensor> {
    sigmoid(&((s_p - s_n)? / temperature)?)
}

/// Result of prompt learning.
#[derive(Debug, Clone)]
pub struct QaTrainOutcome {
    pub model: PerceptionModel,
    pub log: Vec<QaLogEntry>,
}

/// Learn the prompt pair with plain SGD on mean squared error against MOS.
///
/// Image embeddings are computed once up front since the image tower is frozen;
/// batches cycle through reshuffled epochs, so datasets smaller than the batch
/// size are revisited within one step.
pub fn train_perception_model(
    dataset: &[MosSample],
    config: &QaTrainConfig,
    backbones: &Backbones,
    parallelism: Parallelism,
) -> Result<QaTrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("prompt learning needs at least one sample".into()));
    }
    let init = PerceptionModel::with_prompts(
        backbones.clone(),
        &config.positive_prompt,
        &config.negative_prompt,
        config.temperature,
    )?;
    if config.iterations == 0 {
        return Ok(QaTrainOutcome {
            model: init,
            log: Vec::new(),
        });
    }

    let embeddings = parallelism.try_map(dataset, |s| -> Result<Vec<f64>> {
        let t = s.image.to_tensor(backbones.dtype, &backbones.device)?;
        Ok(backbones
            .image
            .encode(&t)?
            .squeeze(0)?
            .to_dtype(DType::F64)?
            .to_vec1()?)
    })?;
    let dim = backbones.image.embed_dim();
    let flat: Vec<f64> = embeddings.into_iter().flatten().collect();
    let image_emb = Tensor::from_vec(flat, (dataset.len(), dim), &backbones.device)?
        .to_dtype(backbones.dtype)?;
    let targets: Vec<f64> = dataset.iter().map(|s| s.s_mos).collect();

    let positive = Var::from_tensor(&init.prompts.positive)?;
    let negative = Var::from_tensor(&init.prompts.negative)?;
    let mut opt = Sgd::new(vec![positive.clone(), negative.clone()], config.lr);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<u32> = Vec::new();
    let mut log = Vec::new();

    for iteration in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if order.is_empty() {
                order = (0..dataset.len() as u32).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().unwrap());
        }
        let idx = Tensor::from_vec(batch.clone(), batch.len(), &backbones.device)?;
        let emb = image_emb.index_select(&idx, 0)?;
        let tp = backbones.text.encode(positive.as_tensor())?;
        let tn = backbones.text.encode(negative.as_tensor())?;
        let s_out = s_out_tensor(&cosine_rows(&emb, &tp)?, &cosine_rows(&emb, &tn)?, config.temperature)?;
        let target: Vec<f64> = batch.iter().map(|&i| targets[i as usize]).collect();
        let target = Tensor::from_vec(target, batch.len(), &backbones.device)?.to_dtype(backbones.dtype)?;
        let loss = (target - s_out)?.sqr()?.mean_all()?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "prompt loss is {value} at iteration {iteration}"
            )));
        }
        if iteration % config.log_every == 0 {
            log.push(QaLogEntry {
                iteration,
                loss: value,
            });
        }
        let grads = loss.backward()?;
        opt.step(&grads)?;
    }

    let prompts = PromptPair {
        positive: positive.as_tensor().detach(),
        negative: negative.as_tensor().detach(),
    };
    let mut model = PerceptionModel::from_parts(backbones.clone(), prompts, config.temperature)?;
    model.iteration = config.iterations;
    let final_loss = model.prompt_loss(dataset)?;
    log.push(QaLogEntry {
        iteration: config.iterations,
        loss: final_loss,
    });
    Ok(QaTrainOutcome { model, log })
}

/// PLCC and SROCC between predicted scores and MOS over a test set.
pub fn evaluate_perception_model(
    model: &PerceptionModel,
    test: &[MosSample],
    parallelism: Parallelism,
) -> Result<(f64, f64)> {
    if test.len() < 3 {
        return Err(Error::Dataset(format!(
            "correlation needs at least 3 samples, got {}",
            test.len()
        )));
    }
    let predicted = parallelism.try_map(test, |s| model.score(&s.image).map(|p| p.s_out))?;
    let labels: Vec<f64> = test.iter().map(|s| s.s_mos).collect();
    Ok((plcc(&predicted, &labels)?, srocc(&predicted, &labels)?))
}
