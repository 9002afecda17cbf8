//! Classical restoration methods used to synthesize non-easy negatives.

use serde::{Deserialize, Serialize};

use crate::image::ImageTensor;

/// A restored image plus whether the input was degenerate for the method.
#[derive(Debug, Clone, PartialEq)]
pub struct Restored {
    pub image: ImageTensor,
    pub degenerate: bool,
}

/// Per-channel equalization: level `k` maps to `cdf(k) / N` over 256 bins.
pub fn histogram_equalize(image: &ImageTensor) -> ImageTensor {
    let bytes = image.to_rgb8();
    let n = (bytes.len() / 3) as f64;
    let mut lut = [[0.0f64; 256]; 3];
    for (c, table) in lut.iter_mut().enumerate() {
        let mut hist = [0usize; 256];
        for px in bytes.chunks_exact(3) {
            hist[px[c] as usize] += 1;
        }
        let mut cum = 0usize;
        for (k, h) in hist.iter().enumerate() {
            cum += h;
            table[k] = cum as f64 / n;
        }
    }
    let data = bytes
        .iter()
        .enumerate()
        .map(|(i, &b)| lut[i % 3][b as usize])
        .collect();
    ImageTensor::new(image.height(), image.width(), data).expect("shape preserved")
}

/// Sliding min (or max) over a `patch`×`patch` window, window clipped at borders.
pub fn window_filter(plane: &[f64], h: usize, w: usize, patch: usize, max: bool) -> Vec<f64> {
    let r = patch / 2;
    let pick = |a: f64, b: f64| if max { a.max(b) } else { a.min(b) };
    let init = if max { f64::NEG_INFINITY } else { f64::INFINITY };
    let mut rows = vec![init; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = plane[y * w + lo..=y * w + hi].iter().fold(init, |a, &b| pick(a, b));
        }
    }
    let mut out = vec![init; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| rows[yy * w + x]).fold(init, pick);
        }
    }
    out
}

/// Patch minimum of the per-pixel minimum over `channels`.
pub fn dark_channel(image: &ImageTensor, channels: &[usize], patch: usize) -> Vec<f64> {
    let (h, w) = image.dims();
    let per_pixel: Vec<f64> = image
        .data()
        .chunks_exact(3)
        .map(|p| channels.iter().map(|&c| p[c]).fold(f64::INFINITY, f64::min))
        .collect();
    window_filter(&per_pixel, h, w, patch, false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcpParams {
    pub patch: usize,
    /// Fraction of brightest dark-channel pixels considered for the ambient light.
    pub top_fraction: f64,
    pub t0: f64,
    pub omega: f64,
}

impl Default for DcpParams {
    fn default() -> Self {
        Self {
            patch: 15,
            top_fraction: 0.001,
            t0: 0.1,
            omega: 0.95,
        }
    }
}

/// Ambient light: the brightest input pixel among the top dark-channel pixels.
fn ambient_light(image: &ImageTensor, dark: &[f64], channels: &[usize], top_fraction: f64) -> [f64; 3] {
    let n = dark.len();
    let k = ((n as f64 * top_fraction).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| dark[b].total_cmp(&dark[a]).then(a.cmp(&b)));
    let data = image.data();
    let intensity = |i: usize| channels.iter().map(|&c| data[i * 3 + c]).sum::<f64>();
    let best = idx[..k]
        .iter()
        .copied()
        .max_by(|&a, &b| intensity(a).total_cmp(&intensity(b)).then(b.cmp(&a)))
        .expect("k >= 1");
    [data[best * 3], data[best * 3 + 1], data[best * 3 + 2]]
}

fn dehaze(image: &ImageTensor, params: &DcpParams, channels: &[usize]) -> Restored {
    let (h, w) = image.dims();
    let dark = dark_channel(image, channels, params.patch);
    let a = ambient_light(image, &dark, channels, params.top_fraction);
    if channels.iter().all(|&c| a[c] <= 0.0) {
        log::warn!("dark channel dehazing skipped: ambient light is zero");
        return Restored {
            image: image.clone(),
            degenerate: true,
        };
    }
    let safe = a.map(|v| v.max(1e-6));
    let normalized = ImageTensor::from_fn(h, w, |y, x, c| image.get(y, x, c) / safe[c]);
    let t: Vec<f64> = dark_channel(&normalized, channels, params.patch)
        .into_iter()
        .map(|d| (1.0 - params.omega * d).max(params.t0))
        .collect();
    let out = ImageTensor::from_fn(h, w, |y, x, c| {
        ((image.get(y, x, c) - a[c]) / t[y * w + x] + a[c]).clamp(0.0, 1.0)
    });
    Restored {
        image: out,
        degenerate: false,
    }
}

pub fn dark_channel_prior(image: &ImageTensor, params: &DcpParams) -> Restored {
    dehaze(image, params, &[0, 1, 2])
}

/// Underwater variant: the prior ignores the red channel.
pub fn underwater_dcp(image: &ImageTensor, params: &DcpParams) -> Restored {
    dehaze(image, params, &[1, 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IblaParams {
    /// Gaussian window sizes of the multi-scale blurriness estimate.
    pub blur_windows: Vec<usize>,
    pub max_patch: usize,
    pub top_fraction: f64,
    pub sigmoid_slope: f64,
    pub t_floor: f64,
}

impl Default for IblaParams {
    fn default() -> Self {
        Self {
            blur_windows: vec![9, 17, 33, 65],
            max_patch: 7,
            top_fraction: 0.001,
            sigmoid_slope: 32.0,
            t_floor: 0.1,
        }
    }
}

fn gaussian_blur(plane: &[f64], h: usize, w: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as isize;
    let sigma = (window as f64 / 6.0).max(0.5);
    let k: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * plane[y * w + clampi(x as isize + d, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|d| k[(d + r) as usize] * rows[clampi(y as isize + d, h) * w + x])
                .sum();
        }
    }
    out
}

/// Min-max stretch to [0,1]; flat input maps to 0.
fn stretch(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 1e-12 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn logistic(a: f64, centre: f64, slope: f64) -> f64 {
    1.0 / (1.0 + (-slope * (a - centre)).exp())
}

/// Blurriness and light-absorption restoration.
///
/// Relative depth mixes three cues (red-channel maximum, red versus
/// green/blue maximum difference, and blurriness) with logistic weights driven
/// by the background light; per-channel transmissions follow the standard
/// wavelength attenuation ratios.
pub fn ibla_restore(image: &ImageTensor, params: &IblaParams) -> Restored {
    let (h, w) = image.dims();
    let n = h * w;
    let gray = image.luminance();

    let mut blur = vec![0.0; n];
    for &win in &params.blur_windows {
        let g = gaussian_blur(&gray, h, w, win);
        for i in 0..n {
            blur[i] += (gray[i] - g[i]).abs() / params.blur_windows.len() as f64;
        }
    }
    let blur = window_filter(&blur, h, w, params.max_patch, true);

    let red = image.channel(0);
    let gb: Vec<f64> = image
        .data()
        .chunks_exact(3)
        .map(|p| p[1].max(p[2]))
        .collect();
    let red_max = window_filter(&red, h, w, params.max_patch, true);
    let gb_max = window_filter(&gb, h, w, params.max_patch, true);
    let mip: Vec<f64> = red_max.iter().zip(&gb_max).map(|(r, g)| r - g).collect();

    let d_red: Vec<f64> = stretch(&red_max).iter().map(|v| 1.0 - v).collect();
    let d_mip: Vec<f64> = stretch(&mip).iter().map(|v| 1.0 - v).collect();
    let d_blur: Vec<f64> = stretch(&blur).iter().map(|v| 1.0 - v).collect();

    // Background light from the pixels farthest by the blurriness cue.
    let k = ((n as f64 * params.top_fraction).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| d_blur[b].total_cmp(&d_blur[a]).then(a.cmp(&b)));
    let mut bl = [0.0; 3];
    for &i in &idx[..k] {
        for (c, v) in bl.iter_mut().enumerate() {
            *v += image.data()[i * 3 + c] / k as f64;
        }
    }

    let theta_a = logistic((bl[0] + bl[1] + bl[2]) / 3.0, 0.5, params.sigmoid_slope);
    let theta_b = logistic(bl[0], 0.1, params.sigmoid_slope);
    let depth: Vec<f64> = (0..n)
        .map(|i| theta_b * (theta_a * d_red[i] + (1.0 - theta_a) * d_mip[i]) + (1.0 - theta_b) * d_blur[i])
        .collect();

    const WAVELENGTH: [f64; 3] = [620.0, 540.0, 450.0];
    let (m, i0) = (-0.00113, 1.62517);
    let safe = bl.map(|v| v.max(1e-3));
    let ratio: [f64; 3] = std::array::from_fn(|c| {
        ((safe[0] * (m * WAVELENGTH[c] + i0)) / (safe[c] * (m * WAVELENGTH[0] + i0))).clamp(0.1, 10.0)
    });

    let out = ImageTensor::from_fn(h, w, |y, x, c| {
        let t_red = (-depth[y * w + x]).exp();
        let t = t_red.powf(ratio[c]).max(params.t_floor);
        ((image.get(y, x, c) - bl[c]) / t + bl[c]).clamp(0.0, 1.0)
    });
    Restored {
        image: out,
        degenerate: false,
    }
}
