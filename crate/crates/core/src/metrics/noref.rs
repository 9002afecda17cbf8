//! No-reference underwater quality indices.
//!
//! UCIQE combines chroma spread, luminance contrast and mean saturation in
//! CIELab with L, a and b scaled by 1/100. UIQM works on the 0..255 scale
//! and combines colourfulness, Sobel-based sharpness and a PLIP contrast
//! measure over 10-pixel blocks.

use crate::image::ImageTensor;

pub const UCIQE_COEFFS: [f64; 3] = [0.4680, 0.2745, 0.2576];
pub const UIQM_COEFFS: [f64; 3] = [0.0282, 0.2953, 3.5753];
pub const UIQM_BLOCK: usize = 10;
const TRIM: f64 = 0.1;
const PLIP_K: f64 = 1026.0;

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const E: f64 = 216.0 / 24389.0;
    const K: f64 = 24389.0 / 27.0;
    if t > E {
        t.cbrt()
    } else {
        (K * t + 16.0) / 116.0
    }
}

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

/// CIELab of an sRGB pixel. The white point is the matrix image of RGB white,
/// so neutral greys have a = b = 0 up to rounding.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let mut f = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        let white: f64 = row.iter().sum();
        let v: f64 = row.iter().zip(&lin).map(|(m, c)| m * c).sum();
        f[i] = lab_f(v / white);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// UCIQE components `(chroma std, luminance contrast, mean saturation)`.
pub fn uciqe_components(image: &ImageTensor) -> (f64, f64, f64) {
    let (h, w) = image.dims();
    let n = h * w;
    let mut l = Vec::with_capacity(n);
    let mut chroma = Vec::with_capacity(n);
    let mut sat = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let [ll, a, b] = rgb_to_lab(image.pixel(y, x));
            let (ll, c) = (ll / 100.0, (a * a + b * b).sqrt() / 100.0);
            l.push(ll);
            chroma.push(c);
            sat.push(if ll > 0.0 { c / ll } else { 0.0 });
        }
    }
    l.sort_by(f64::total_cmp);
    let contrast = percentile(&l, 0.99) - percentile(&l, 0.01);
    (std_dev(&chroma), contrast, mean(&sat))
}

pub fn uciqe(image: &ImageTensor) -> f64 {
    let (sc, con, sat) = uciqe_components(image);
    UCIQE_COEFFS[0] * sc + UCIQE_COEFFS[1] * con + UCIQE_COEFFS[2] * sat
}

fn trimmed_stats(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    let t = (TRIM * k as f64).ceil() as usize;
    let kept = &v[t.min(k)..k.saturating_sub(t).max(t.min(k))];
    let mu = if kept.is_empty() { mean(&v) } else { mean(kept) };
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / k as f64;
    (mu, var)
}

/// Colourfulness from alpha-trimmed opponent-channel statistics.
pub fn uicm(image: &ImageTensor) -> f64 {
    let mut rg = Vec::new();
    let mut yb = Vec::new();
    for p in image.data().chunks_exact(3) {
        let [r, g, b] = [p[0] * 255.0, p[1] * 255.0, p[2] * 255.0];
        rg.push(r - g);
        yb.push((r + g) / 2.0 - b);
    }
    let (mrg, vrg) = trimmed_stats(rg);
    let (myb, vyb) = trimmed_stats(yb);
    -0.0268 * (mrg * mrg + myb * myb).sqrt() + 0.1586 * (vrg + vyb).sqrt()
}

/// Sobel gradient magnitude of one plane, replicate border.
fn sobel(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        plane[y * w + x]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y, x - 1)
                - at(y + 1, x - 1);
            let gy = at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1)
                - at(y - 1, x - 1)
                - 2.0 * at(y - 1, x)
                - at(y - 1, x + 1);
            out[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Visit full `UIQM_BLOCK`-sized blocks; returns the block count.
fn for_blocks(h: usize, w: usize, mut f: impl FnMut(usize, usize)) -> usize {
    let (k1, k2) = (h / UIQM_BLOCK, w / UIQM_BLOCK);
    for by in 0..k1 {
        for bx in 0..k2 {
            f(by * UIQM_BLOCK, bx * UIQM_BLOCK);
        }
    }
    k1 * k2
}

fn eme(plane: &[f64], h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    let blocks = for_blocks(h, w, |y0, x0| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in y0..y0 + UIQM_BLOCK {
            for &v in &plane[y * w + x0..y * w + x0 + UIQM_BLOCK] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        // Extremes floored at one grey level so flat blocks count as zero, not skipped.
        total += (hi.max(1.0) / lo.max(1.0)).ln();
    });
    if blocks == 0 {
        0.0
    } else {
        2.0 * total / blocks as f64
    }
}

/// Sharpness: luma-weighted EME of each channel masked by its Sobel edges.
pub fn uism(image: &ImageTensor) -> f64 {
    let (h, w) = image.dims();
    let lambdas = [0.299, 0.587, 0.114];
    (0..3)
        .map(|c| {
            let plane: Vec<f64> = image.channel(c).iter().map(|v| v * 255.0).collect();
            let edges = sobel(&plane, h, w);
            let masked: Vec<f64> = edges.iter().zip(&plane).map(|(e, p)| e * p).collect();
            lambdas[c] * eme(&masked, h, w)
        })
        .sum()
}

/// Contrast: PLIP-based log-AMEE over all channels of each block.
pub fn uiconm(image: &ImageTensor) -> f64 {
    let (h, w) = image.dims();
    let data = image.data();
    let mut total = 0.0;
    let blocks = for_blocks(h, w, |y0, x0| {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for y in y0..y0 + UIQM_BLOCK {
            for v in &data[(y * w + x0) * 3..(y * w + x0 + UIQM_BLOCK) * 3] {
                lo = lo.min(v * 255.0);
                hi = hi.max(v * 255.0);
            }
        }
        let top = PLIP_K * (hi - lo) / (PLIP_K - lo);
        let bot = hi + lo - hi * lo / PLIP_K;
        if top > 0.0 && bot > 0.0 {
            let r = top / bot;
            total += r * r.ln();
        }
    });
    if blocks == 0 {
        0.0
    } else {
        -total / blocks as f64
    }
}

pub fn uiqm(image: &ImageTensor) -> f64 {
    UIQM_COEFFS[0] * uicm(image) + UIQM_COEFFS[1] * uism(image) + UIQM_COEFFS[2] * uiconm(image)
}
