//! Image file I/O and resizing between PNG bytes and `[1,H,W,C]` tensors.
//!
//! 8-bit PNG is the interchange format for all pipeline outputs (lossless;
//! JPEG corruption is modeled inside the channel, never at I/O). Dataset
//! ingestion also reads JPEG covers.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads any supported image as an RGB `[1,H,W,3]` tensor in [0, 1].
pub fn load_image_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?
        .decode()
        .map_err(|e| Error::Data(format!("cannot decode {}: {}", path.display(), e)))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::from_vec(&[1, h as usize, w as usize, 3], data)
}

/// Writes a `[1,H,W,3]` tensor as 8-bit PNG (values clamped to [0, 1]).
pub fn save_image_rgb(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[3] != 3 {
        return Err(Error::Config(format!(
            "save_image_rgb expects [1,H,W,3], got {:?}",
            s
        )));
    }
    let (h, w) = (s[1], s[2]);
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_byte(v)).collect();
    let img: RgbImage = RgbImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Config("buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Writes a `[1,H,W,1]` mask as single-channel PNG (0 or 255).
pub fn save_mask_png(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let s = mask.shape();
    if s.len() != 4 || s[0] != 1 || s[3] != 1 {
        return Err(Error::Config(format!(
            "save_mask_png expects [1,H,W,1], got {:?}",
            s
        )));
    }
    let (h, w) = (s[1], s[2]);
    let bytes: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v > 0.5 { 255u8 } else { 0 })
        .collect();
    let img: GrayImage = GrayImage::from_raw(w as u32, h as u32, bytes)
        .ok_or_else(|| Error::Config("buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Loads a PNG as a `[1,H,W,1]` mask (luma > 127 counts as on).
pub fn load_mask_png(path: &Path) -> Result<Tensor<f32>> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {}", path.display(), e)))?
        .decode()
        .map_err(|e| Error::Data(format!("cannot decode {}: {}", path.display(), e)))?;
    let gray = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => other.to_luma8(),
    };
    let (w, h) = gray.dimensions();
    let data: Vec<f32> = gray
        .as_raw()
        .iter()
        .map(|&b| if b > 127 { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(&[1, h as usize, w as usize, 1], data)
}

/// Center-crops to square and bilinearly resizes to `side x side`.
pub fn center_crop_resize(t: &Tensor<f32>, side: usize) -> Result<Tensor<f32>> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Config(format!(
            "center_crop_resize expects [1,H,W,C], got {:?}",
            s
        )));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let crop = h.min(w);
    let y0 = (h - crop) / 2;
    let x0 = (w - crop) / 2;
    let mut out = Tensor::<f32>::zeros(&[1, side, side, c]);
    let scale = crop as f64 / side as f64;
    let data = t.data();
    for oy in 0..side {
        // Map output pixel centers onto the crop (edge-aligned).
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, crop as f64 - 1.0) + y0 as f64;
        for ox in 0..side {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, crop as f64 - 1.0) + x0 as f64;
            let x_lo = sx.floor() as usize;
            let y_lo = sy.floor() as usize;
            let x_hi = (x_lo + 1).min(w - 1);
            let y_hi = (y_lo + 1).min(h - 1);
            let fx = (sx - x_lo as f64) as f32;
            let fy = (sy - y_lo as f64) as f32;
            for ch in 0..c {
                let v00 = data[(y_lo * w + x_lo) * c + ch];
                let v01 = data[(y_lo * w + x_hi) * c + ch];
                let v10 = data[(y_hi * w + x_lo) * c + ch];
                let v11 = data[(y_hi * w + x_hi) * c + ch];
                let v = (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy)
                    + (v10 * (1.0 - fx) + v11 * fx) * fy;
                out.data_mut()[(oy * side + ox) * c + ch] = v;
            }
        }
    }
    Ok(out)
}

/// Amplified residual visualization: `residual * 5 + 0.5`, clipped.
pub fn amplify_residual(residual: &Tensor<f32>) -> Tensor<f32> {
    residual.map(|v| (v * 5.0 + 0.5).clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn png_round_trip_quantizes_within_one_step() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::<f32>::from_vec(
            &[1, 9, 7, 3],
            (0..189).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image_rgb(&path, &t).unwrap();
        let back = load_image_rgb(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        // Writing the same tensor twice produces identical bytes.
        let path2 = dir.path().join("y.png");
        save_image_rgb(&path2, &t).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn mask_round_trip() {
        let mut m = Tensor::<f32>::zeros(&[1, 12, 10, 1]);
        for y in 3..9 {
            for x in 2..8 {
                m.data_mut()[y * 10 + x] = 1.0;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_mask_png(&path, &m).unwrap();
        let back = load_mask_png(&path).unwrap();
        assert_eq!(back.data(), m.data());
    }

    #[test]
    fn crop_resize_identity_when_sizes_match() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let t = Tensor::<f32>::from_vec(
            &[1, 16, 16, 3],
            (0..768).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let out = center_crop_resize(&t, 16).unwrap();
        for (a, b) in out.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Non-square source crops the long axis.
        let wide = Tensor::<f32>::filled(&[1, 8, 20, 3], 0.4);
        let out = center_crop_resize(&wide, 8).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8, 3]);
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }
}
