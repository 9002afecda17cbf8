//! Frozen encoder adapters: image encoder, text encoder and multi-layer feature
//! extractor behind object-safe traits, with seeded stub implementations that
//! need no pretrained weights.

mod clip;
mod convstack;
pub(crate) mod stub;
pub mod tokenizer;

use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use clip::{
    write_random_clip_checkpoint, ClipTextEncoder, ClipVariant, ClipVisionEncoder, TowerConfig,
};
pub use convstack::{ConvStack, LayerIndexing};
pub use stub::{StubImageEncoder, StubTextEncoder, STUB_EMBED_DIM, STUB_POOL_GRID};

/// Maps `(B,3,H,W)` pixels in [0,1] to `(B,D)` embeddings (not normalized).
pub trait ImageEncoder: Send + Sync {
    fn embed_dim(&self) -> usize;
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    /// Human-readable description of the resize/normalization applied to inputs.
    fn preprocessing(&self) -> String;
    fn weights_digest(&self) -> Result<String>;
}

/// Maps an `(N, W)` token-embedding matrix to a `D`-vector.
pub trait TextEncoder: Send + Sync {
    /// Width `W` of one token embedding.
    fn token_width(&self) -> usize;
    fn embed_dim(&self) -> usize;
    /// Tokenize `text` and look up its token embeddings, shape `(N, W)`.
    fn embed_text(&self, text: &str) -> Result<Tensor>;
    fn encode(&self, tokens: &Tensor) -> Result<Tensor>;
    fn weights_digest(&self) -> Result<String>;
}

/// Hidden activations of a convolutional stack at selected layers.
pub trait FeatureExtractor: Send + Sync {
    /// Largest addressable layer id (ids are 1-based).
    fn depth(&self) -> usize;
    fn extract(&self, images: &Tensor, layer_ids: &[usize]) -> Result<Vec<Tensor>>;
    fn weights_digest(&self) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding {
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

impl ImageEmbedding {
    pub fn normalized(&self) -> Vec<f64> {
        l2_normalized(&self.vector)
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

impl TextEmbedding {
    pub fn normalized(&self) -> Vec<f64> {
        l2_normalized(&self.vector)
    }

    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

/// Per-layer feature maps, ordered as `layer_ids`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub features: Vec<Tensor>,
    pub layer_ids: Vec<usize>,
}

impl FeaturePyramid {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Real,
    Stub,
}

/// Descriptor of one frozen backbone: which implementation and where its weights live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneHandle {
    pub kind: BackboneKind,
    /// Checkpoint locator for `kind = real` (a directory or `.safetensors` file).
    pub weights_ref: Option<PathBuf>,
    pub seed: u64,
    pub frozen: bool,
}

impl Default for BackboneHandle {
    fn default() -> Self {
        Self::stub(0)
    }
}

impl BackboneHandle {
    pub fn stub(seed: u64) -> Self {
        Self {
            kind: BackboneKind::Stub,
            weights_ref: None,
            seed,
            frozen: true,
        }
    }

    pub fn real(weights_ref: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackboneKind::Real,
            weights_ref: Some(weights_ref.into()),
            seed: 0,
            frozen: true,
        }
    }

    fn weights_path(&self) -> Result<PathBuf> {
        let p = self
            .weights_ref
            .clone()
            .ok_or_else(|| Error::CheckpointMissing("real backbone requires `weights_ref`".into()))?;
        if !p.exists() {
            return Err(Error::CheckpointMissing(p.display().to_string()));
        }
        Ok(p)
    }
}

/// Which backbones a run uses: one for the vision-language scorer, one for the feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub clip: BackboneHandle,
    pub features: BackboneHandle,
    pub layer_indexing: LayerIndexing,
    /// Stub-only: use identity activations in the feature stack.
    pub linear_stub_features: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            clip: BackboneHandle::stub(0),
            features: BackboneHandle::stub(1),
            layer_indexing: LayerIndexing::Conv,
            linear_stub_features: false,
        }
    }
}

impl BackboneConfig {
    pub fn stub(seed: u64) -> Self {
        Self {
            clip: BackboneHandle::stub(seed),
            features: BackboneHandle::stub(seed.wrapping_add(1)),
            ..Self::default()
        }
    }
}

/// Loaded, shareable backbones.
#[derive(Clone)]
pub struct Backbones {
    pub image: Arc<dyn ImageEncoder>,
    pub text: Arc<dyn TextEncoder>,
    pub features: Arc<dyn FeatureExtractor>,
    pub config: BackboneConfig,
    pub dtype: DType,
    pub device: Device,
}

impl std::fmt::Debug for Backbones {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backbones")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl Backbones {
    pub fn load(config: &BackboneConfig, dtype: DType) -> Result<Self> {
        if !config.clip.frozen || !config.features.frozen {
            return Err(Error::config(
                "backbone.frozen",
                "pretrained backbones are never trained; `frozen` must be true",
            ));
        }
        let device = default_device();
        let (image, text): (Arc<dyn ImageEncoder>, Arc<dyn TextEncoder>) = match config.clip.kind {
            BackboneKind::Stub => (
                Arc::new(StubImageEncoder::new(config.clip.seed, STUB_EMBED_DIM, dtype, &device)?),
                Arc::new(StubTextEncoder::new(config.clip.seed, STUB_EMBED_DIM, STUB_EMBED_DIM, dtype, &device)?),
            ),
            BackboneKind::Real => {
                let path = config.clip.weights_path()?;
                let (v, t) = clip::load_clip(&path, dtype, &device)?;
                (Arc::new(v), Arc::new(t))
            }
        };
        let features: Arc<dyn FeatureExtractor> = match config.features.kind {
            BackboneKind::Stub => Arc::new(ConvStack::stub(
                config.features.seed,
                config.layer_indexing,
                config.linear_stub_features,
                dtype,
                &device,
            )?),
            BackboneKind::Real => {
                let path = config.features.weights_path()?;
                Arc::new(ConvStack::vgg19(&path, config.layer_indexing, dtype, &device)?)
            }
        };
        Ok(Self {
            image,
            text,
            features,
            config: config.clone(),
            dtype,
            device,
        })
    }

    pub fn stub(seed: u64, dtype: DType) -> Result<Self> {
        Self::load(&BackboneConfig::stub(seed), dtype)
    }

    /// Combined digest of every frozen weight tensor.
    pub fn weights_digest(&self) -> Result<String> {
        Ok(format!(
            "{}:{}:{}",
            self.image.weights_digest()?,
            self.text.weights_digest()?,
            self.features.weights_digest()?
        ))
    }
}

fn check_image_batch(images: &Tensor) -> Result<()> {
    let dims = images.dims();
    if dims.len() != 4 || dims[1] != 3 {
        return Err(Error::Shape(format!(
            "expected (B,3,H,W) image batch, got {dims:?}"
        )));
    }
    Ok(())
}

/// Compute device for all tensors; CPU only.
pub fn default_device() -> Device {
    Device::Cpu
}

pub fn encode_image(image: &ImageTensor, backbones: &Backbones) -> Result<ImageEmbedding> {
    let t = image.to_tensor(backbones.dtype, &backbones.device)?;
    let e = backbones.image.encode(&t)?;
    let vector = e.squeeze(0)?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(ImageEmbedding { vector })
}

/// Encode a prompt pair's token matrices.
pub fn encode_prompts(
    positive: &Tensor,
    negative: &Tensor,
    backbones: &Backbones,
) -> Result<(TextEmbedding, TextEmbedding)> {
    let enc = |t: &Tensor| -> Result<TextEmbedding> {
        let v = backbones.text.encode(t)?.to_dtype(DType::F64)?.to_vec1()?;
        Ok(TextEmbedding { vector: v })
    };
    Ok((enc(positive)?, enc(negative)?))
}

pub fn extract_features(
    image: &ImageTensor,
    layer_ids: &[usize],
    backbones: &Backbones,
) -> Result<FeaturePyramid> {
    let t = image.to_tensor(backbones.dtype, &backbones.device)?;
    let features = backbones.features.extract(&t, layer_ids)?;
    Ok(FeaturePyramid {
        features,
        layer_ids: layer_ids.to_vec(),
    })
}

/// Layer ids must be strictly ascending and within `1..=depth`.
pub fn validate_layer_ids(layer_ids: &[usize], depth: usize) -> Result<()> {
    for w in layer_ids.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::InvalidArgument(format!(
                "layer ids must be strictly ascending, got {layer_ids:?}"
            )));
        }
    }
    for &index in layer_ids {
        if index == 0 || index > depth {
            return Err(Error::LayerOutOfRange { index, depth });
        }
    }
    Ok(())
}

/// Row-wise cosine similarity of `(B,D)` against `(D)`, shape `(B)`.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = a.broadcast_mul(&b.unsqueeze(0)?)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum_all()?.sqrt()?;
    let denom = na.broadcast_mul(&nb)?.maximum(1e-12)?;
    Ok(dot.div(&denom)?)
}

/// Linear area-resampling operator from `len` samples to `out` cells, shape `(out, len)`.
pub(crate) fn area_matrix(len: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * len];
    let scale = len as f64 / out as f64;
    for j in 0..out {
        let lo = j as f64 * scale;
        let hi = (j + 1) as f64 * scale;
        let first = lo.floor() as usize;
        let last = (hi.ceil() as usize).min(len);
        for i in first..last {
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            m[j * len + i] = overlap / scale;
        }
    }
    m
}

/// Linear bilinear-resampling operator (half-pixel centers), shape `(out, len)`.
pub(crate) fn bilinear_matrix(len: usize, out: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * len];
    let scale = len as f64 / out as f64;
    for j in 0..out {
        let p = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        let f = p - i0 as f64;
        m[j * len + i0] += 1.0 - f;
        m[j * len + i1] += f;
    }
    m
}

/// Apply separable operators `rows (OH,H)` and `cols (OW,W)` to `(B,C,H,W)`.
pub(crate) fn resample(x: &Tensor, rows: &[f64], cols: &[f64], out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let r = Tensor::from_slice(rows, (out_h, h), x.device())?.to_dtype(x.dtype())?;
    let c = Tensor::from_slice(cols, (out_w, w), x.device())?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    let y = x.contiguous()?.broadcast_matmul(&c)?;
    Ok(r.broadcast_matmul(&y)?)
}

pub(crate) fn digest_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for t in tensors {
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        // single precision so the digest does not depend on the load dtype
        let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(&h.finalize()[..16]))
}
