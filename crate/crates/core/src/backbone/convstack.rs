//! VGG-style convolution stacks: the pretrained VGG-19 feature extractor and
//! its seeded stub stand-in share one forward implementation.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stub::normal_vec;
use super::{check_image_batch, digest_tensors, validate_layer_ids, FeatureExtractor};
use crate::error::{Error, Result};

/// How extractor layer ids are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerIndexing {
    /// Id `k` is the activated output of the k-th convolution (1..=16 for VGG-19).
    Conv,
    /// Id `k` is the output of the k-th module of the flat conv/act/pool sequence.
    Module,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Padding {
    Zero,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug)]
enum Stage {
    Conv { weight: Tensor, bias: Tensor },
    Act,
    Pool,
}

const VGG19_LAYOUT: &[usize] = &[
    64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512, 0,
];
const STUB_LAYOUT: &[usize] = &[
    8, 8, 0, 16, 16, 0, 16, 16, 16, 16, 0, 32, 32, 32, 32, 0, 32, 32, 32, 32, 0,
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug)]
pub struct ConvStack {
    stages: Vec<Stage>,
    padding: Padding,
    activation: Activation,
    pool: PoolKind,
    input_norm: Option<(Tensor, Tensor)>,
    indexing: LayerIndexing,
    dtype: DType,
}

impl ConvStack {
    /// Seeded random stack with the VGG-19 layer pattern at reduced width.
    /// Replicate padding keeps constant inputs constant at every layer.
    pub fn stub(
        seed: u64,
        indexing: LayerIndexing,
        linear: bool,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf3a7_5eed);
        let mut stages = Vec::new();
        let mut cin = 3;
        for &c in STUB_LAYOUT {
            if c == 0 {
                stages.push(Stage::Pool);
                continue;
            }
            let fan_in = (cin * 9) as f64;
            let gain = if linear { 1.0 } else { 1.6 };
            let w = normal_vec(&mut rng, c * cin * 9, gain / fan_in.sqrt());
            let b = normal_vec(&mut rng, c, 0.05);
            stages.push(Stage::Conv {
                weight: Tensor::from_vec(w, (c, cin, 3, 3), device)?.to_dtype(dtype)?,
                bias: Tensor::from_vec(b, (1, c, 1, 1), device)?.to_dtype(dtype)?,
            });
            stages.push(Stage::Act);
            cin = c;
        }
        Ok(Self {
            stages,
            padding: Padding::Replicate,
            activation: if linear {
                Activation::Identity
            } else {
                Activation::Tanh
            },
            pool: PoolKind::Avg,
            input_norm: None,
            indexing,
            dtype,
        })
    }

    /// torchvision-layout VGG-19 (`features.{i}.weight` / `features.{i}.bias`)
    /// from a `.safetensors` file, or a directory holding `vgg19.safetensors`.
    pub fn vgg19(path: &Path, indexing: LayerIndexing, dtype: DType, device: &Device) -> Result<Self> {
        let file = resolve_weights_file(path, &["vgg19.safetensors", "model.safetensors"])?;
        let tensors = candle_core::safetensors::load(&file, device)?;
        let mut stages = Vec::new();
        let mut module = 0usize;
        let mut cin = 3;
        for &c in VGG19_LAYOUT {
            if c == 0 {
                stages.push(Stage::Pool);
                module += 1;
                continue;
            }
            let get = |suffix: &str| -> Result<Tensor> {
                let key = format!("features.{module}.{suffix}");
                tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{key}`", file.display())))
            };
            let weight = get("weight")?.to_dtype(dtype)?;
            if weight.dims() != [c, cin, 3, 3] {
                return Err(Error::Checkpoint(format!(
                    "features.{module}.weight has shape {:?}, expected {:?}",
                    weight.dims(),
                    [c, cin, 3, 3]
                )));
            }
            let bias = get("bias")?.to_dtype(dtype)?.reshape((1, c, 1, 1))?;
            stages.push(Stage::Conv { weight, bias });
            stages.push(Stage::Act);
            module += 2;
            cin = c;
        }
        let mean = Tensor::from_slice(&IMAGENET_MEAN, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        let std = Tensor::from_slice(&IMAGENET_STD, (1, 3, 1, 1), device)?.to_dtype(dtype)?;
        Ok(Self {
            stages,
            padding: Padding::Zero,
            activation: Activation::Relu,
            pool: PoolKind::Max,
            input_norm: Some((mean, std)),
            indexing,
            dtype,
        })
    }

    fn conv_count(&self) -> usize {
        self.stages
            .iter()
            .filter(|s| matches!(s, Stage::Conv { .. }))
            .count()
    }

    /// Stage index whose output is layer `id`.
    fn stage_for(&self, id: usize) -> usize {
        match self.indexing {
            LayerIndexing::Module => id - 1,
            LayerIndexing::Conv => {
                let mut seen = 0;
                for (i, s) in self.stages.iter().enumerate() {
                    if matches!(s, Stage::Conv { .. }) {
                        seen += 1;
                        if seen == id {
                            return i + 1;
                        }
                    }
                }
                unreachable!("layer id validated against depth")
            }
        }
    }

    fn apply(&self, stage: &Stage, x: Tensor) -> Result<Tensor> {
        Ok(match stage {
            Stage::Conv { weight, bias } => {
                let y = match self.padding {
                    Padding::Zero => x.conv2d(weight, 1, 1, 1, 1)?,
                    Padding::Replicate => pad_replicate(&x)?.conv2d(weight, 0, 1, 1, 1)?,
                };
                y.broadcast_add(bias)?
            }
            Stage::Act => match self.activation {
                Activation::Relu => x.relu()?,
                Activation::Tanh => x.tanh()?,
                Activation::Identity => x,
            },
            Stage::Pool => {
                let (_, _, h, w) = x.dims4()?;
                // maps already at 1 pixel are passed through
                if h < 2 || w < 2 {
                    x
                } else {
                    match self.pool {
                        PoolKind::Max => x.max_pool2d(2)?,
                        PoolKind::Avg => x.avg_pool2d(2)?,
                    }
                }
            }
        })
    }
}

fn pad_replicate(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = Tensor::cat(&[x.narrow(2, 0, 1)?, x.clone(), x.narrow(2, h - 1, 1)?], 2)?;
    Ok(Tensor::cat(&[x.narrow(3, 0, 1)?, x.clone(), x.narrow(3, w - 1, 1)?], 3)?)
}

pub(crate) fn resolve_weights_file(path: &Path, candidates: &[&str]) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    candidates
        .iter()
        .map(|c| path.join(c))
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::CheckpointMissing(format!(
                "{} (looked for {})",
                path.display(),
                candidates.join(", ")
            ))
        })
}

impl FeatureExtractor for ConvStack {
    fn depth(&self) -> usize {
        match self.indexing {
            LayerIndexing::Conv => self.conv_count(),
            LayerIndexing::Module => self.stages.len(),
        }
    }

    fn extract(&self, images: &Tensor, layer_ids: &[usize]) -> Result<Vec<Tensor>> {
        check_image_batch(images)?;
        validate_layer_ids(layer_ids, self.depth())?;
        let Some(&last) = layer_ids.last() else {
            return Ok(Vec::new());
        };
        let wanted: Vec<usize> = layer_ids.iter().map(|&id| self.stage_for(id)).collect();
        let stop = self.stage_for(last);
        let mut x = images.to_dtype(self.dtype)?;
        if let Some((mean, std)) = &self.input_norm {
            x = x.broadcast_sub(mean)?.broadcast_div(std)?;
        }
        let mut out = Vec::with_capacity(layer_ids.len());
        for (i, stage) in self.stages.iter().enumerate().take(stop + 1) {
            x = self.apply(stage, x)?;
            if wanted.contains(&i) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }

    fn weights_digest(&self) -> Result<String> {
        let tensors: Vec<&Tensor> = self
            .stages
            .iter()
            .flat_map(|s| match s {
                Stage::Conv { weight, bias } => vec![weight, bias],
                _ => vec![],
            })
            .collect();
        digest_tensors(tensors)
    }
}
