//! Pretrained CLIP (ViT image tower + causal text transformer) loaded from
//! Hugging Face–layout safetensors. The text tower takes token *embeddings*
//! rather than ids so that prompts can be optimized in embedding space.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::convstack::resolve_weights_file;
use super::stub::normal_vec;
use super::tokenizer::BpeTokenizer;
use super::{bilinear_matrix, check_image_batch, digest_tensors, resample, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};

const CLIP_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
const CLIP_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerConfig {
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_attention_heads: usize,
    pub num_hidden_layers: usize,
    #[serde(default)]
    pub image_size: usize,
    #[serde(default)]
    pub patch_size: usize,
    #[serde(default)]
    pub max_position_embeddings: usize,
    #[serde(default)]
    pub vocab_size: usize,
}

/// Architecture hyper-parameters, read from the checkpoint's `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipVariant {
    pub text_config: TowerConfig,
    pub vision_config: TowerConfig,
    pub projection_dim: usize,
}

impl ClipVariant {
    /// ViT-B/32 with a 512-wide text tower.
    pub fn vit_b_32() -> Self {
        Self {
            text_config: TowerConfig {
                hidden_size: 512,
                intermediate_size: 2048,
                num_attention_heads: 8,
                num_hidden_layers: 12,
                image_size: 0,
                patch_size: 0,
                max_position_embeddings: 77,
                vocab_size: 49408,
            },
            vision_config: TowerConfig {
                hidden_size: 768,
                intermediate_size: 3072,
                num_attention_heads: 12,
                num_hidden_layers: 12,
                image_size: 224,
                patch_size: 32,
                max_position_embeddings: 0,
                vocab_size: 0,
            },
            projection_dim: 512,
        }
    }
}

struct Weights<'a> {
    map: &'a HashMap<String, Tensor>,
    dtype: DType,
}

impl Weights<'_> {
    fn get(&self, key: &str) -> Result<Tensor> {
        self.map
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?
            .to_dtype(self.dtype)
            .map_err(Into::into)
    }
}

#[derive(Debug)]
struct Linear {
    weight_t: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    fn load(w: &Weights, prefix: &str, bias: bool) -> Result<Self> {
        Ok(Self {
            weight_t: w.get(&format!("{prefix}.weight"))?.t()?.contiguous()?,
            bias: if bias {
                Some(w.get(&format!("{prefix}.bias"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight_t)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.weight_t];
        v.extend(self.bias.as_ref());
        v
    }
}

#[derive(Debug)]
struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn load(w: &Weights, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: w.get(&format!("{prefix}.weight"))?,
            bias: w.get(&format!("{prefix}.bias"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

#[derive(Debug)]
struct Block {
    ln1: LayerNorm,
    ln2: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn load(w: &Weights, prefix: &str, heads: usize) -> Result<Self> {
        let l = |n: &str| Linear::load(w, &format!("{prefix}.{n}"), true);
        Ok(Self {
            ln1: LayerNorm::load(w, &format!("{prefix}.layer_norm1"))?,
            ln2: LayerNorm::load(w, &format!("{prefix}.layer_norm2"))?,
            q: l("self_attn.q_proj")?,
            k: l("self_attn.k_proj")?,
            v: l("self_attn.v_proj")?,
            out: l("self_attn.out_proj")?,
            fc1: l("mlp.fc1")?,
            fc2: l("mlp.fc2")?,
            heads,
        })
    }

    fn attention(&self, x: &Tensor, causal: bool) -> Result<Tensor> {
        let (b, t, c) = x.dims3()?;
        let hd = c / self.heads;
        let split = |y: Tensor| -> Result<Tensor> {
            Ok(y.reshape((b, t, self.heads, hd))?.transpose(1, 2)?.contiguous()?)
        };
        let q = (split(self.q.forward(x)?)? * (hd as f64).powf(-0.5))?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = q.matmul(&k.t()?.contiguous()?)?;
        if causal {
            let mask: Vec<f64> = (0..t)
                .flat_map(|i| (0..t).map(move |j| if j > i { f64::NEG_INFINITY } else { 0.0 }))
                .collect();
            let mask = Tensor::from_vec(mask, (t, t), x.device())?.to_dtype(x.dtype())?;
            scores = scores.broadcast_add(&mask)?;
        }
        let attn = softmax_last(&scores)?.matmul(&v)?;
        let merged = attn.transpose(1, 2)?.contiguous()?.reshape((b, t, c))?;
        self.out.forward(&merged)
    }

    fn forward(&self, x: &Tensor, causal: bool) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln1.forward(x)?, causal)?)?;
        let h = self.fc1.forward(&self.ln2.forward(&x)?)?;
        // quick_gelu
        let h = (&h * crate::optim::sigmoid(&(&h * 1.702)?)?)?;
        Ok((x + self.fc2.forward(&h)?)?)
    }

    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.ln1.weight, &self.ln1.bias, &self.ln2.weight, &self.ln2.bias];
        for l in [&self.q, &self.k, &self.v, &self.out, &self.fc1, &self.fc2] {
            v.extend(l.tensors());
        }
        v
    }
}

#[derive(Debug)]
pub struct ClipVisionEncoder {
    patch: Tensor,
    class_embedding: Tensor,
    positions: Tensor,
    pre_ln: LayerNorm,
    blocks: Vec<Block>,
    post_ln: LayerNorm,
    projection: Linear,
    mean: Tensor,
    std: Tensor,
    image_size: usize,
    patch_size: usize,
    dim: usize,
    dtype: DType,
}

impl ClipVisionEncoder {
    fn load(w: &Weights, cfg: &ClipVariant, device: &Device) -> Result<Self> {
        let vc = &cfg.vision_config;
        let blocks = (0..vc.num_hidden_layers)
            .map(|i| Block::load(w, &format!("vision_model.encoder.layers.{i}"), vc.num_attention_heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch: w.get("vision_model.embeddings.patch_embedding.weight")?,
            class_embedding: w.get("vision_model.embeddings.class_embedding")?,
            positions: w.get("vision_model.embeddings.position_embedding.weight")?,
            pre_ln: LayerNorm::load(w, "vision_model.pre_layrnorm")?,
            blocks,
            post_ln: LayerNorm::load(w, "vision_model.post_layernorm")?,
            projection: Linear::load(w, "visual_projection", false)?,
            mean: Tensor::from_slice(&CLIP_MEAN, (1, 3, 1, 1), device)?.to_dtype(w.dtype)?,
            std: Tensor::from_slice(&CLIP_STD, (1, 3, 1, 1), device)?.to_dtype(w.dtype)?,
            image_size: vc.image_size,
            patch_size: vc.patch_size,
            dim: cfg.projection_dim,
            dtype: w.dtype,
        })
    }

    /// Shorter side to `image_size`, centre crop, CLIP mean/std normalization.
    fn preprocess(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        let s = self.image_size;
        let (rh, rw) = if h <= w {
            (s, ((w as f64) * s as f64 / h as f64).round().max(s as f64) as usize)
        } else {
            (((h as f64) * s as f64 / w as f64).round().max(s as f64) as usize, s)
        };
        let mut x = images.to_dtype(self.dtype)?;
        if (rh, rw) != (h, w) {
            x = resample(&x, &bilinear_matrix(h, rh), &bilinear_matrix(w, rw), rh, rw)?;
        }
        let x = x.narrow(2, (rh - s) / 2, s)?.narrow(3, (rw - s) / 2, s)?;
        Ok(x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?)
    }
}

impl ImageEncoder for ClipVisionEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        check_image_batch(images)?;
        let x = self.preprocess(images)?;
        let b = x.dims()[0];
        let p = x.conv2d(&self.patch, 0, self.patch_size, 1, 1)?;
        let (_, c, gh, gw) = p.dims4()?;
        let tokens = p.reshape((b, c, gh * gw))?.transpose(1, 2)?;
        let cls = self.class_embedding.reshape((1, 1, c))?.broadcast_as((b, 1, c))?;
        let mut x = Tensor::cat(&[cls, tokens], 1)?.broadcast_add(&self.positions.unsqueeze(0)?)?;
        x = self.pre_ln.forward(&x)?;
        for blk in &self.blocks {
            x = blk.forward(&x, false)?;
        }
        let pooled = self.post_ln.forward(&x.i((.., 0, ..))?)?;
        self.projection.forward(&pooled)
    }

    fn preprocessing(&self) -> String {
        format!(
            "clip: bilinear shorter-side resize to {s}, centre crop {s}x{s}, mean {CLIP_MEAN:?} std {CLIP_STD:?}",
            s = self.image_size
        )
    }

    fn weights_digest(&self) -> Result<String> {
        let mut t = vec![&self.patch, &self.class_embedding, &self.positions];
        t.extend([&self.pre_ln.weight, &self.pre_ln.bias, &self.post_ln.weight, &self.post_ln.bias]);
        for b in &self.blocks {
            t.extend(b.tensors());
        }
        t.extend(self.projection.tensors());
        digest_tensors(t)
    }
}

#[derive(Debug)]
pub struct ClipTextEncoder {
    tokenizer: BpeTokenizer,
    token_table: Tensor,
    positions: Tensor,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    projection: Linear,
    width: usize,
    dim: usize,
    dtype: DType,
}

impl ClipTextEncoder {
    fn load(w: &Weights, cfg: &ClipVariant, tokenizer: BpeTokenizer) -> Result<Self> {
        let tc = &cfg.text_config;
        let blocks = (0..tc.num_hidden_layers)
            .map(|i| Block::load(w, &format!("text_model.encoder.layers.{i}"), tc.num_attention_heads))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tokenizer,
            token_table: w.get("text_model.embeddings.token_embedding.weight")?,
            positions: w.get("text_model.embeddings.position_embedding.weight")?,
            blocks,
            final_ln: LayerNorm::load(w, "text_model.final_layer_norm")?,
            projection: Linear::load(w, "text_projection", false)?,
            width: tc.hidden_size,
            dim: cfg.projection_dim,
            dtype: w.dtype,
        })
    }
}

impl TextEncoder for ClipTextEncoder {
    fn token_width(&self) -> usize {
        self.width
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Tensor> {
        let ids = self.tokenizer.encode(text)?;
        let n = ids.len();
        let idx = Tensor::from_vec(ids, n, self.token_table.device())?;
        Ok(self.token_table.index_select(&idx, 0)?)
    }

    /// The sequence is taken to end with the end-of-text token; its final hidden
    /// state is the sentence embedding, so padding beyond it is irrelevant under
    /// the causal mask.
    fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        let (n, width) = tokens.dims2()?;
        let max = self.positions.dims()[0];
        if width != self.width || n == 0 || n > max {
            return Err(Error::Shape(format!(
                "prompt tokens must be (N<={max}, {}), got ({n}, {width})",
                self.width
            )));
        }
        let mut x = tokens
            .to_dtype(self.dtype)?
            .broadcast_add(&self.positions.narrow(0, 0, n)?)?
            .unsqueeze(0)?;
        for blk in &self.blocks {
            x = blk.forward(&x, true)?;
        }
        let x = self.final_ln.forward(&x)?;
        let eot = x.i((0, n - 1))?.unsqueeze(0)?;
        Ok(self.projection.forward(&eot)?.squeeze(0)?)
    }

    fn weights_digest(&self) -> Result<String> {
        let mut t = vec![&self.token_table, &self.positions, &self.final_ln.weight, &self.final_ln.bias];
        for b in &self.blocks {
            t.extend(b.tensors());
        }
        t.extend(self.projection.tensors());
        digest_tensors(t)
    }
}

/// Load both towers from a directory with `model.safetensors`, `config.json`,
/// `vocab.json` and `merges.txt`.
pub(crate) fn load_clip(
    dir: &Path,
    dtype: DType,
    device: &Device,
) -> Result<(ClipVisionEncoder, ClipTextEncoder)> {
    let file = resolve_weights_file(dir, &["model.safetensors"])?;
    let root = file.parent().unwrap_or(dir);
    let cfg_path = root.join("config.json");
    let cfg = if cfg_path.is_file() {
        let raw = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        serde_json::from_str(&raw)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", cfg_path.display())))?
    } else {
        ClipVariant::vit_b_32()
    };
    let tokenizer = BpeTokenizer::from_dir(root)?;
    let map = candle_core::safetensors::load(&file, device)?;
    let w = Weights { map: &map, dtype };
    Ok((
        ClipVisionEncoder::load(&w, &cfg, device)?,
        ClipTextEncoder::load(&w, &cfg, tokenizer)?,
    ))
}

/// Write a randomly initialized checkpoint directory for `variant`, with a
/// character-level vocabulary. Used to exercise the loading path without
/// downloading pretrained weights.
pub fn write_random_clip_checkpoint(dir: &Path, variant: &ClipVariant, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut vocab: HashMap<String, u32> = HashMap::new();
    let symbols: Vec<String> = ('a'..='z')
        .chain(['.', ','])
        .flat_map(|c| [c.to_string(), format!("{c}</w>")])
        .collect();
    for s in symbols {
        let id = vocab.len() as u32;
        vocab.insert(s, id);
    }
    let n = vocab.len() as u32;
    vocab.insert("<|startoftext|>".into(), n);
    vocab.insert("<|endoftext|>".into(), n + 1);
    let mut variant = variant.clone();
    variant.text_config.vocab_size = vocab.len();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = Device::Cpu;
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    let mut put = |name: String, shape: &[usize], std: f64, rng: &mut ChaCha8Rng| -> Result<()> {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = normal_vec(rng, numel, std).into_iter().map(|v| v as f32).collect();
        tensors.insert(name, Tensor::from_vec(data, shape, &dev)?);
        Ok(())
    };
    let tower = |prefix: &str, tc: &TowerConfig, put: &mut dyn FnMut(String, &[usize], f64, &mut ChaCha8Rng) -> Result<()>, rng: &mut ChaCha8Rng| -> Result<()> {
        let h = tc.hidden_size;
        for i in 0..tc.num_hidden_layers {
            let p = format!("{prefix}.encoder.layers.{i}");
            for ln in ["layer_norm1", "layer_norm2"] {
                put(format!("{p}.{ln}.weight"), &[h], 0.02, rng)?;
                put(format!("{p}.{ln}.bias"), &[h], 0.02, rng)?;
            }
            for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                put(format!("{p}.self_attn.{proj}.weight"), &[h, h], 1.0 / (h as f64).sqrt(), rng)?;
                put(format!("{p}.self_attn.{proj}.bias"), &[h], 0.02, rng)?;
            }
            put(format!("{p}.mlp.fc1.weight"), &[tc.intermediate_size, h], 1.0 / (h as f64).sqrt(), rng)?;
            put(format!("{p}.mlp.fc1.bias"), &[tc.intermediate_size], 0.02, rng)?;
            put(format!("{p}.mlp.fc2.weight"), &[h, tc.intermediate_size], 1.0 / (tc.intermediate_size as f64).sqrt(), rng)?;
            put(format!("{p}.mlp.fc2.bias"), &[h], 0.02, rng)?;
        }
        Ok(())
    };
    let vc = variant.vision_config.clone();
    let tc = variant.text_config.clone();
    tower("vision_model", &vc, &mut put, &mut rng)?;
    tower("text_model", &tc, &mut put, &mut rng)?;
    let grid = vc.image_size / vc.patch_size;
    put("vision_model.embeddings.patch_embedding.weight".into(), &[vc.hidden_size, 3, vc.patch_size, vc.patch_size], 0.02, &mut rng)?;
    put("vision_model.embeddings.class_embedding".into(), &[vc.hidden_size], 0.02, &mut rng)?;
    put("vision_model.embeddings.position_embedding.weight".into(), &[grid * grid + 1, vc.hidden_size], 0.02, &mut rng)?;
    for ln in ["vision_model.pre_layrnorm", "vision_model.post_layernorm", "text_model.final_layer_norm"] {
        let h = if ln.starts_with("text") { tc.hidden_size } else { vc.hidden_size };
        put(format!("{ln}.weight"), &[h], 0.02, &mut rng)?;
        put(format!("{ln}.bias"), &[h], 0.02, &mut rng)?;
    }
    put("visual_projection.weight".into(), &[variant.projection_dim, vc.hidden_size], 1.0 / (vc.hidden_size as f64).sqrt(), &mut rng)?;
    put("text_projection.weight".into(), &[variant.projection_dim, tc.hidden_size], 1.0 / (tc.hidden_size as f64).sqrt(), &mut rng)?;
    put("text_model.embeddings.token_embedding.weight".into(), &[tc.vocab_size, tc.hidden_size], 0.02, &mut rng)?;
    put("text_model.embeddings.position_embedding.weight".into(), &[tc.max_position_embeddings, tc.hidden_size], 0.01, &mut rng)?;

    candle_core::safetensors::save(&tensors, dir.join("model.safetensors"))?;
    let write = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("config.json", serde_json::to_string_pretty(&variant).expect("serializable"))?;
    write("vocab.json", serde_json::to_string(&vocab).expect("serializable"))?;
    write("merges.txt", "#version: 0.2\n".into())?;
    Ok(())
}
