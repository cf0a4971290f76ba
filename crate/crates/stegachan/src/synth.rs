//! Procedural photo generation for demos and self-contained test datasets.
//!
//! The generator mixes low-frequency color gradients, soft blobs, and a few
//! hard-edged shapes so the images share the broad statistics of photographs
//! (smooth regions, occasional edges, correlated channels) without shipping
//! binary assets.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imgio;
use crate::ndgrad::Tensor;

/// Deterministic `[1,side,side,3]` synthetic photo for `seed`.
pub fn generate_photo(side: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut img = vec![0.0f32; side * side * 3];

    // Base: two-stop color gradient.
    let c0: [f32; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let c1: [f32; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..side {
        for x in 0..side {
            let t = ((x as f32 * ca + y as f32 * sa) / side as f32 + 1.0) / 2.0;
            for c in 0..3 {
                img[(y * side + x) * 3 + c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    // Low-frequency waves per channel.
    for _ in 0..3 {
        let fx: f32 = rng.gen_range(0.5..3.0) / side as f32 * std::f32::consts::TAU;
        let fy: f32 = rng.gen_range(0.5..3.0) / side as f32 * std::f32::consts::TAU;
        let ph: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
        let amp: f32 = rng.gen_range(0.03..0.12);
        let ch = rng.gen_range(0..3);
        for y in 0..side {
            for x in 0..side {
                img[(y * side + x) * 3 + ch] +=
                    amp * (fx * x as f32 + fy * y as f32 + ph).sin();
            }
        }
    }

    // Soft blobs.
    for _ in 0..rng.gen_range(2..6) {
        let cx: f32 = rng.gen_range(0.0..side as f32);
        let cy: f32 = rng.gen_range(0.0..side as f32);
        let rad: f32 = rng.gen_range(side as f32 * 0.1..side as f32 * 0.45);
        let tint: [f32; 3] = [
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
        ];
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                let w = (-d2 / (rad * rad)).exp();
                for c in 0..3 {
                    img[(y * side + x) * 3 + c] += tint[c] * w;
                }
            }
        }
    }

    // A couple of hard-edged rectangles for high-frequency content.
    for _ in 0..rng.gen_range(1..4) {
        let x0 = rng.gen_range(0..side);
        let y0 = rng.gen_range(0..side);
        let w = rng.gen_range(side / 8..side / 2);
        let h = rng.gen_range(side / 8..side / 2);
        let tint: [f32; 3] = [
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.25..0.25),
            rng.gen_range(-0.25..0.25),
        ];
        for y in y0..(y0 + h).min(side) {
            for x in x0..(x0 + w).min(side) {
                for c in 0..3 {
                    img[(y * side + x) * 3 + c] += tint[c];
                }
            }
        }
    }

    // Sensor-like grain.
    for v in img.iter_mut() {
        *v += rng.gen_range(-0.015..0.015);
        *v = v.clamp(0.0, 1.0);
    }

    Tensor::from_vec(&[1, side, side, 3], img).expect("shape matches")
}

/// Writes `count` synthetic photos into `dir` as PNG files.
pub fn generate_photo_folder(dir: &Path, count: usize, side: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let img = generate_photo(side, seed.wrapping_add(i as u64));
        imgio::save_image_rgb(&dir.join(format!("photo_{:04}.png", i)), &img)?;
    }
    Ok(())
}
