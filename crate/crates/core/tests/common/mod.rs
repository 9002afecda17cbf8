#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uie_core::trainer::TrainingPair;
use uie_core::ImageTensor;

/// 3×3 box blur with replicate borders, applied `passes` times.
pub fn box_blur(img: &ImageTensor, passes: usize) -> ImageTensor {
    let mut out = img.clone();
    for _ in 0..passes {
        let (h, w) = out.dims();
        let src = out.clone();
        out = ImageTensor::from_fn(h, w, |y, x, c| {
            let mut s = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    s += src.get(yy, xx, c);
                }
            }
            s / 9.0
        });
    }
    out
}

/// A smooth gradient with a few stripes and blobs, different per seed.
pub fn pattern(seed: u64, h: usize, w: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f1: f64 = rng.gen_range(0.15..0.5);
    let f2: f64 = rng.gen_range(0.15..0.5);
    let phase: f64 = rng.gen_range(0.0..6.28);
    let base: [f64; 3] = [rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)];
    let (cy, cx) = (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64));
    ImageTensor::from_fn(h, w, |y, x, c| {
        let (yf, xf) = (y as f64, x as f64);
        let stripes = 0.2 * (f1 * xf + f2 * yf + phase + c as f64).sin();
        let d2 = ((yf - cy).powi(2) + (xf - cx).powi(2)) / (h * w) as f64;
        let blob = 0.25 * (-8.0 * d2).exp();
        (base[c] * 0.7 + stripes + blob + 0.1 * (xf / w as f64)).clamp(0.0, 1.0)
    })
}

/// Underwater-style degradation: attenuated red, blue-green veil, blur.
pub fn degrade(clean: &ImageTensor) -> ImageTensor {
    let cast = clean.map(|v| v);
    let (h, w) = cast.dims();
    let cast = ImageTensor::from_fn(h, w, |y, x, c| {
        let v = cast.get(y, x, c);
        match c {
            0 => 0.55 * v,
            1 => 0.8 * v + 0.12,
            _ => 0.75 * v + 0.2,
        }
    });
    box_blur(&cast, 2).quantize_u8()
}

pub fn toy_pairs(n: usize, size: usize) -> Vec<TrainingPair> {
    (0..n)
        .map(|i| {
            let clean = pattern(100 + i as u64, size, size).quantize_u8();
            TrainingPair {
                id: format!("p{i:02}"),
                input: degrade(&clean),
                reference: clean,
            }
        })
        .collect()
}

/// Coloured checker whose squares line up with the stub encoder's pooling
/// cells, so blur shows up as lost contrast in the pooled grid.
pub fn ladder_base(size: usize, tint: [f64; 3]) -> ImageTensor {
    let cell = size / 8;
    ImageTensor::from_fn(size, size, |y, x, c| {
        let on = (y / cell + x / cell) % 2 == 0;
        if on { 0.85 + tint[c] * 0.5 } else { 0.15 + tint[c] }
    })
}

/// `base` at increasing blur with linearly decreasing opinion scores.
pub fn blur_ladder_of(base: &ImageTensor, levels: usize) -> Vec<(ImageTensor, f64)> {
    (0..levels)
        .map(|k| {
            let mos = 0.8 - 0.5 * k as f64 / (levels - 1) as f64;
            (box_blur(base, 2 * k), mos)
        })
        .collect()
}

pub fn blur_ladder(levels: usize) -> Vec<(ImageTensor, f64)> {
    blur_ladder_of(&ladder_base(32, [0.15, 0.05, -0.1]), levels)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageTensor {
    ImageTensor::from_fn(h, w, |_, _, _| rng.gen_range(0.1..0.9))
}
