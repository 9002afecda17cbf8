//! Enhancement networks: the pluggable interface, a small residual
//! encoder-decoder, and an adapter for externally defined networks.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::stub::normal_vec;
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::optim::sigmoid;

/// A shape-preserving image-to-image network with values in [0,1].
pub trait Enhancer: Send + Sync {
    fn architecture(&self) -> &str;
    /// `(B,3,H,W)` to `(B,3,H,W)`; `H` and `W` must be multiples of [`Enhancer::downsample_factor`].
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    fn named_vars(&self) -> Vec<(String, Var)>;
    fn downsample_factor(&self) -> usize;

    fn vars(&self) -> Vec<Var> {
        self.named_vars().into_iter().map(|(_, v)| v).collect()
    }

    /// Architecture settings needed to rebuild the network before loading weights.
    fn config_json(&self) -> serde_json::Value {
        serde_json::Value::Null
    }
}

/// Write any enhancer's parameters with its config and the run configuration.
pub fn save_enhancer(enhancer: &dyn Enhancer, path: &Path, run_config: serde_json::Value) -> Result<()> {
    let mut tensors = Vec::new();
    for (name, v) in enhancer.named_vars() {
        tensors.push(NamedTensor::from_tensor(name, v.as_tensor())?);
    }
    Checkpoint {
        kind: "enhancer".into(),
        meta: serde_json::json!({
            "architecture": enhancer.architecture(),
            "enhancer": enhancer.config_json(),
            "run_config": run_config,
        }),
        tensors,
    }
    .save(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceCnnConfig {
    pub width: usize,
    pub seed: u64,
}

impl Default for ReferenceCnnConfig {
    fn default() -> Self {
        Self { width: 16, seed: 0 }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    name: &'static str,
    weight: Var,
    bias: Var,
    stride: usize,
}

impl Conv {
    fn new(
        name: &'static str,
        cin: usize,
        cout: usize,
        stride: usize,
        zero: bool,
        rng: &mut ChaCha8Rng,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let n = cout * cin * 9;
        let w = if zero {
            vec![0.0; n]
        } else {
            normal_vec(rng, n, (2.0 / (cin * 9) as f64).sqrt() * 0.5)
        };
        let weight = Var::from_tensor(&Tensor::from_vec(w, (cout, cin, 3, 3), device)?.to_dtype(dtype)?)?;
        let bias = Var::from_tensor(&Tensor::zeros(cout, dtype, device)?)?;
        Ok(Self {
            name,
            weight,
            bias,
            stride,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), 1, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, (), 1, 1))?)?)
    }
}

fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.mul(&sigmoid(x)?)?)
}

/// Residual encoder-decoder with one stride-2 stage and a skip connection.
/// The output convolution starts at zero, so the untrained network is the identity.
#[derive(Debug, Clone)]
pub struct ReferenceCnn {
    config: ReferenceCnnConfig,
    convs: Vec<Conv>,
}

impl ReferenceCnn {
    pub fn new(config: ReferenceCnnConfig, dtype: DType, device: &Device) -> Result<Self> {
        if config.width == 0 {
            return Err(Error::config("enhancer.width", "must be at least 1"));
        }
        let w = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let convs = vec![
            Conv::new("enc1", 3, w, 1, false, &mut rng, dtype, device)?,
            Conv::new("enc2", w, 2 * w, 2, false, &mut rng, dtype, device)?,
            Conv::new("mid", 2 * w, 2 * w, 1, false, &mut rng, dtype, device)?,
            Conv::new("up", 2 * w, w, 1, false, &mut rng, dtype, device)?,
            Conv::new("fuse", 2 * w, w, 1, false, &mut rng, dtype, device)?,
            Conv::new("out", w, 3, 1, true, &mut rng, dtype, device)?,
        ];
        Ok(Self { config, convs })
    }

    pub fn config(&self) -> &ReferenceCnnConfig {
        &self.config
    }

    pub fn save(&self, path: &Path, run_config: serde_json::Value) -> Result<()> {
        save_enhancer(self, path, run_config)
    }

    /// Restore a network and the run configuration stored beside it.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Self, serde_json::Value)> {
        let ckpt = Checkpoint::load(path)?;
        ckpt.expect_kind("enhancer")?;
        let arch = ckpt.meta["architecture"].as_str().unwrap_or_default();
        if arch != "reference_cnn" {
            return Err(Error::Checkpoint(format!(
                "architecture `{arch}` cannot be restored here"
            )));
        }
        let config: ReferenceCnnConfig = serde_json::from_value(ckpt.meta["enhancer"].clone())
            .map_err(|e| Error::Checkpoint(format!("enhancer config: {e}")))?;
        let net = Self::new(config, dtype, device)?;
        for (name, var) in net.named_vars() {
            let stored = ckpt.tensor(&name)?;
            if stored.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    stored.shape,
                    var.dims()
                )));
            }
            var.set(&stored.to_tensor(dtype, device)?)?;
        }
        Ok((net, ckpt.meta["run_config"].clone()))
    }
}

impl Enhancer for ReferenceCnn {
    fn architecture(&self) -> &str {
        "reference_cnn"
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = &self.convs;
        let e1 = silu(&c[0].forward(x)?)?;
        let e2 = silu(&c[1].forward(&e1)?)?;
        let m = silu(&c[2].forward(&e2)?)?;
        let (h, w) = (e1.dims()[2], e1.dims()[3]);
        let up = silu(&c[3].forward(&m.upsample_nearest2d(h, w)?)?)?;
        let fused = silu(&c[4].forward(&Tensor::cat(&[&up, &e1], 1)?)?)?;
        let residual = c[5].forward(&fused)?;
        Ok((x + residual)?.clamp(0.0, 1.0)?)
    }

    fn named_vars(&self) -> Vec<(String, Var)> {
        self.convs
            .iter()
            .flat_map(|c| {
                [
                    (format!("{}.weight", c.name), c.weight.clone()),
                    (format!("{}.bias", c.name), c.bias.clone()),
                ]
            })
            .collect()
    }

    fn downsample_factor(&self) -> usize {
        2
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config is serializable")
    }
}

type ForwardFn = dyn Fn(&Tensor) -> Result<Tensor> + Send + Sync;

/// Wraps any differentiable function of an image batch and its parameters.
#[derive(Clone)]
pub struct ExternalEnhancer {
    name: String,
    forward: Arc<ForwardFn>,
    vars: Vec<(String, Var)>,
    factor: usize,
}

impl ExternalEnhancer {
    pub fn new(
        name: impl Into<String>,
        vars: Vec<(String, Var)>,
        downsample_factor: usize,
        forward: impl Fn(&Tensor) -> Result<Tensor> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            forward: Arc::new(forward),
            vars,
            factor: downsample_factor.max(1),
        }
    }
}

impl Enhancer for ExternalEnhancer {
    fn architecture(&self) -> &str {
        &self.name
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = (self.forward)(x)?;
        if y.dims() != x.dims() {
            return Err(Error::Shape(format!(
                "external enhancer changed shape {:?} -> {:?}",
                x.dims(),
                y.dims()
            )));
        }
        Ok(y.clamp(0.0, 1.0)?)
    }

    fn named_vars(&self) -> Vec<(String, Var)> {
        self.vars.clone()
    }

    fn downsample_factor(&self) -> usize {
        self.factor
    }
}

/// Reflect-pad the trailing edge of `dim` by `pad` samples.
fn reflect_pad_end(x: &Tensor, dim: usize, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let n = x.dims()[dim];
    let mut idx: Vec<u32> = (0..n as u32).collect();
    for k in 0..pad {
        let src = n as isize - 2 - k as isize;
        idx.push(src.clamp(0, n as isize - 1) as u32);
    }
    let len = idx.len();
    let idx = Tensor::from_vec(idx, len, x.device())?;
    Ok(x.index_select(&idx, dim)?)
}

/// Forward a batch of any size, padding to the network's stride and cropping back.
pub fn forward_padded(enhancer: &dyn Enhancer, x: &Tensor) -> Result<Tensor> {
    let (h, w) = (x.dims()[2], x.dims()[3]);
    let f = enhancer.downsample_factor();
    let (ph, pw) = ((f - h % f) % f, (f - w % f) % f);
    if ph == 0 && pw == 0 {
        return enhancer.forward(x);
    }
    let padded = reflect_pad_end(&reflect_pad_end(x, 2, ph)?, 3, pw)?;
    Ok(enhancer.forward(&padded)?.narrow(2, 0, h)?.narrow(3, 0, w)?)
}

/// Enhance one image in evaluation mode.
pub fn enhance(image: &ImageTensor, enhancer: &dyn Enhancer, dtype: DType, device: &Device) -> Result<ImageTensor> {
    let x = image.to_tensor(dtype, device)?;
    let y = forward_padded(enhancer, &x)?;
    ImageTensor::from_tensor(&y.detach())
}
