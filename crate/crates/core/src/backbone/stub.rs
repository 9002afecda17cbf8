//! Seeded random-projection encoders for weight-free runs.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tokenizer::HashTokenizer;
use super::{area_matrix, check_image_batch, digest_tensors, resample, ImageEncoder, TextEncoder};
use crate::error::{Error, Result};

pub const STUB_EMBED_DIM: usize = 512;
/// Side of the area-pooled grid the stub image encoder projects from.
pub const STUB_POOL_GRID: usize = 8;

const TOKEN_STD: f64 = 0.02;

pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Area-pool to an 8×8 grid, flatten, centre around mid-gray, then an affine projection.
#[derive(Debug)]
pub struct StubImageEncoder {
    projection: Tensor,
    bias: Tensor,
    dim: usize,
}

impl StubImageEncoder {
    pub fn new(seed: u64, dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a4e_5eed);
        let fan_in = 3 * STUB_POOL_GRID * STUB_POOL_GRID;
        let w = normal_vec(&mut rng, fan_in * dim, 1.0 / (fan_in as f64).sqrt());
        let b = normal_vec(&mut rng, dim, 0.1);
        Ok(Self {
            projection: Tensor::from_vec(w, (fan_in, dim), device)?.to_dtype(dtype)?,
            bias: Tensor::from_vec(b, dim, device)?.to_dtype(dtype)?,
            dim,
        })
    }
}

impl ImageEncoder for StubImageEncoder {
    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        check_image_batch(images)?;
        let (b, _, h, w) = images.dims4()?;
        let g = STUB_POOL_GRID;
        let x = images.to_dtype(self.projection.dtype())?;
        let pooled = resample(&x, &area_matrix(h, g), &area_matrix(w, g), g, g)?;
        let flat = (pooled.reshape((b, 3 * g * g))? - 0.5)?;
        Ok(flat.matmul(&self.projection)?.broadcast_add(&self.bias)?)
    }

    fn preprocessing(&self) -> String {
        format!("stub: raw [0,1] pixels, area-pooled to {g}x{g}", g = STUB_POOL_GRID)
    }

    fn weights_digest(&self) -> Result<String> {
        digest_tensors([&self.projection, &self.bias])
    }
}

/// Hashed-vocabulary token table; sentence embedding is the projected token mean.
#[derive(Debug)]
pub struct StubTextEncoder {
    tokenizer: HashTokenizer,
    projection: Tensor,
    seed: u64,
    width: usize,
    dim: usize,
    dtype: DType,
    device: Device,
}

impl StubTextEncoder {
    pub fn new(seed: u64, width: usize, dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_5eed);
        let w = normal_vec(&mut rng, width * dim, 1.0 / (width as f64).sqrt());
        Ok(Self {
            tokenizer: HashTokenizer::default(),
            projection: Tensor::from_vec(w, (width, dim), device)?.to_dtype(dtype)?,
            seed,
            width,
            dim,
            dtype,
            device: device.clone(),
        })
    }

    /// Deterministic embedding row for a token id.
    fn token_row(&self, id: u32) -> Vec<f64> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ id as u64);
        normal_vec(&mut rng, self.width, TOKEN_STD)
    }
}

impl TextEncoder for StubTextEncoder {
    fn token_width(&self) -> usize {
        self.width
    }

    fn embed_dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Tensor> {
        let ids = self.tokenizer.encode(text);
        let rows: Vec<f64> = ids.iter().flat_map(|&id| self.token_row(id)).collect();
        Ok(Tensor::from_vec(rows, (ids.len(), self.width), &self.device)?.to_dtype(self.dtype)?)
    }

    fn encode(&self, tokens: &Tensor) -> Result<Tensor> {
        let dims = tokens.dims();
        if dims.len() != 2 || dims[1] != self.width || dims[0] == 0 {
            return Err(Error::Shape(format!(
                "prompt tokens must be (N, {}), got {dims:?}",
                self.width
            )));
        }
        let mean = tokens.to_dtype(self.dtype)?.mean_keepdim(0)?;
        Ok(mean.matmul(&self.projection)?.squeeze(0)?)
    }

    fn weights_digest(&self) -> Result<String> {
        // the token table is a pure function of the seed; digest a fixed probe of it
        let probe = Tensor::from_vec(self.token_row(0), self.width, &self.device)?;
        digest_tensors([&self.projection, &probe])
    }
}
