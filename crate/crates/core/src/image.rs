//! H×W×3 floating-point images in [0,1] and their conversions.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// An RGB image with interleaved `f64` samples, nominally in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "expected {}x{}x3 = {} samples, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Shape("image must be non-empty".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }

    pub fn from_channels(height: usize, width: usize, planes: [&[f64]; 3]) -> Result<Self> {
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::Shape("channel planes must match height*width".into()));
        }
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            data.extend([planes[0][i], planes[1][i], planes[2][i]]);
        }
        Self::new(height, width, data)
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamp_unit(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// BT.601 luma plane.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "crop {}x{}@({},{}) outside {}x{}",
                height, width, top, left, self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |y, x, c| self.get(top + y, left + x, c)))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Self {
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let sample = |pos: f64, len: usize| -> (usize, usize, f64) {
            let p = pos.max(0.0);
            let i0 = (p.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, p - i0 as f64)
        };
        Self::from_fn(height, width, |y, x, c| {
            let (y0, y1, fy) = sample((y as f64 + 0.5) * sy - 0.5, self.height);
            let (x0, x1, fx) = sample((x as f64 + 0.5) * sx - 0.5, self.width);
            let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
            let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
            top * (1.0 - fy) + bot * fy
        })
    }

    /// Snap every sample to the nearest 8-bit level (ties to even).
    pub fn quantize_u8(&self) -> Self {
        self.map(|v| quantize_level(v) as f64 / 255.0)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize_level(v)).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        )
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, 3), device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(dtype)?
            .contiguous()?;
        Ok(t)
    }

    /// Stack same-shape images into `(B, 3, H, W)`.
    pub fn stack(images: &[&ImageTensor], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.ensure_same_shape(img)?;
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(data, (images.len(), first.height, first.width, 3), device)?
            .permute((0, 3, 1, 2))?
            .to_dtype(dtype)?
            .contiguous()?;
        Ok(t)
    }

    /// Inverse of [`ImageTensor::stack`]; accepts `(B,3,H,W)` or `(3,H,W)`.
    pub fn from_tensor_batch(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let t = match t.rank() {
            3 => t.unsqueeze(0)?,
            4 => t.clone(),
            r => return Err(Error::Shape(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (b, c, h, w) = t.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let flat: Vec<f64> = t
            .permute((0, 2, 3, 1))?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        flat.chunks_exact(h * w * 3)
            .take(b)
            .map(|chunk| ImageTensor::new(h, w, chunk.to_vec()))
            .collect()
    }

    pub fn from_tensor(t: &Tensor) -> Result<ImageTensor> {
        let mut v = Self::from_tensor_batch(t)?;
        if v.len() != 1 {
            return Err(Error::Shape(format!("expected a single image, got {}", v.len())));
        }
        Ok(v.remove(0))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        Self::from_rgb8(h as usize, w as usize, rgb.as_raw())
    }

    /// Writes an 8-bit PNG via a temp file and rename.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("pixel buffer size mismatch".into()))?;
        let mut encoded = Vec::new();
        buf.write_to(&mut std::io::Cursor::new(&mut encoded), image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        crate::io::write_atomic(path, &encoded)
    }
}

/// Round-half-even quantization of a [0,1] value to an 8-bit level.
pub fn quantize_level(v: f64) -> u8 {
    let scaled = (v.clamp(0.0, 1.0) * 255.0).round_ties_even();
    scaled as u8
}
