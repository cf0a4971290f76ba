//! Bit accuracy, image quality (PSNR, SSIM), binary-channel capacity, and
//! the strength-sweep ablation harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{AxisStrengths, ChannelConfig, ChannelGraph, CHANNEL_AXES};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;
use crate::nets::{Checkpoint, DecoderRunner, EncoderRunner};

/// Fraction of matching positions.
pub fn bit_accuracy(predicted: &[u8], truth: &[u8]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Config(format!(
            "bit_accuracy length mismatch: {} vs {}",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::Config("bit_accuracy on empty strings".into()));
    }
    let same = predicted
        .iter()
        .zip(truth)
        .filter(|(a, b)| (**a != 0) == (**b != 0))
        .count();
    Ok(same as f64 / predicted.len() as f64)
}

fn expect_same_shape(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!(
            "shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` for [0,1] images; identical images report +inf.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    expect_same_shape(a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = (*x - *y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// 601-luma grayscale of an `[1,H,W,C]` tensor (C = 1 passes through).
fn to_luma(t: &Tensor<f32>) -> Result<(Vec<f64>, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::Config(format!(
            "expected [1,H,W,C] image, got {:?}",
            s
        )));
    }
    let (h, w, c) = (s[1], s[2], s[3]);
    let d = t.data();
    let mut out = Vec::with_capacity(h * w);
    match c {
        1 => out.extend(d.iter().map(|&v| v as f64)),
        3 => {
            for pix in 0..h * w {
                out.push(
                    0.299 * d[pix * 3] as f64
                        + 0.587 * d[pix * 3 + 1] as f64
                        + 0.114 * d[pix * 3 + 2] as f64,
                );
            }
        }
        _ => return Err(Error::Config(format!("ssim supports 1 or 3 channels, got {}", c))),
    }
    Ok((out, h, w))
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, averaged over valid window positions.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    expect_same_shape(a, b)?;
    let (xa, h, w) = to_luma(a)?;
    let (xb, _, _) = to_luma(b)?;
    const WIN: usize = 11;
    if h < WIN || w < WIN {
        return Err(Error::Config(format!(
            "image {}x{} smaller than the {}-px SSIM window",
            h, w, WIN
        )));
    }
    // Normalized Gaussian window.
    let mut win = [0.0f64; WIN * WIN];
    let sigma = 1.5f64;
    let mut sum = 0.0;
    for i in 0..WIN {
        for j in 0..WIN {
            let dy = i as f64 - 5.0;
            let dx = j as f64 - 5.0;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            win[i * WIN + j] = v;
            sum += v;
        }
    }
    for v in &mut win {
        *v /= sum;
    }

    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - WIN {
        for x0 in 0..=w - WIN {
            let (mut mx, mut my) = (0.0f64, 0.0f64);
            let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..WIN {
                for j in 0..WIN {
                    let wgt = win[i * WIN + j];
                    let va = xa[(y0 + i) * w + x0 + j];
                    let vb = xb[(y0 + i) * w + x0 + j];
                    mx += wgt * va;
                    my += wgt * vb;
                    sxx += wgt * va * va;
                    syy += wgt * vb * vb;
                    sxy += wgt * va * vb;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            let v = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += v;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Binary symmetric channel capacity for accuracy `p`:
/// `C(p) = 1 + p log2 p + (1-p) log2 (1-p)`, with `0 log 0 = 0`.
pub fn channel_capacity(p: f64) -> f64 {
    let term = |x: f64| if x <= 0.0 { 0.0 } else { x * x.log2() };
    1.0 + term(p) + term(1.0 - p)
}

/// Normalized throughput: message length times capacity per pixel, scaled to
/// megapixels.
pub fn bits_per_megapixel(p: f64, message_bits: usize, n_pixels: usize) -> f64 {
    message_bits as f64 * channel_capacity(p) / n_pixels as f64 * 1e6
}

/// Nearest-rank percentile (1-based rank `ceil(p/100 * N)`).
pub fn percentile_nearest_rank(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// One evaluation trial; rows append to an immutable history log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub image_id: usize,
    pub message_bits: usize,
    pub n_pixels: usize,
    pub axis: String,
    pub strength: f64,
    pub bit_accuracy: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Aggregated accuracy for one (model, axis, strength) sweep cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub model: String,
    pub axis: String,
    pub strength: f64,
    pub mean_accuracy: f64,
    pub q25: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Strength grid, e.g. 0, 0.25, ..., 2.
    pub strengths: Vec<f64>,
    /// Axis names to sweep (subset of [`CHANNEL_AXES`]).
    pub axes: Vec<String>,
    /// (image, message) pairs per cell.
    pub trials: usize,
    pub seed: u64,
    /// Base parameter ranges; per-axis strengths are overridden per cell.
    pub channel: ChannelConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            strengths: (0..=8).map(|i| i as f64 * 0.25).collect(),
            axes: CHANNEL_AXES.iter().map(|s| s.to_string()).collect(),
            trials: 100,
            seed: 0,
            channel: ChannelConfig::default(),
        }
    }
}

fn axis_index(name: &str) -> Result<usize> {
    CHANNEL_AXES
        .iter()
        .position(|a| *a == name)
        .ok_or_else(|| Error::Config(format!("unknown channel axis '{}'", name)))
}

fn trial_bits(seed: u64, tag: u64, trial: u64, m: usize) -> Vec<u8> {
    use rand::{Rng, SeedableRng};
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&trial.to_le_bytes());
    key[24..].copy_from_slice(b"swpbits\0");
    let mut rng = rand_chacha::ChaCha8Rng::from_seed(key);
    (0..m).map(|_| rng.gen_range(0..2u8)).collect()
}

fn cell_tag(model_idx: usize, axis_idx: usize, strength: f64) -> u64 {
    (model_idx as u64) << 40 | (axis_idx as u64) << 32 | (strength * 1000.0) as u64
}

/// Runs the strength sweep: for every (model, axis, strength) cell, encodes
/// `trials` (image, message) pairs, corrupts them along the single axis, and
/// decodes. Returns the per-trial records and per-cell aggregates (mean and
/// 25th/75th nearest-rank percentiles).
pub fn ablation_sweep(
    models: &[(String, &Checkpoint)],
    images: &[Tensor<f32>],
    spec: &SweepSpec,
) -> Result<(Vec<EvalRecord>, Vec<SweepCell>)> {
    if models.is_empty() || images.is_empty() {
        return Err(Error::Config("sweep needs models and images".into()));
    }
    spec.channel.validate()?;
    for (_, ckpt) in models {
        ckpt.config.validate()?;
    }
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for (mi, _) in models.iter().enumerate() {
        for axis in &spec.axes {
            let ai = axis_index(axis)?;
            for &s in &spec.strengths {
                cells.push((mi, ai, s));
            }
        }
    }

    let results: Vec<Result<(Vec<EvalRecord>, SweepCell)>> = cells
        .par_iter()
        .map(|&(mi, ai, strength)| {
            let (label, ckpt) = &models[mi];
            let cfg = &ckpt.config;
            let mut axes = AxisStrengths::zero();
            let mut arr = axes.as_array();
            arr[ai] = strength;
            axes = AxisStrengths::from_array(arr);
            let chan_cfg = ChannelConfig {
                axis_strengths: Some(axes),
                rng_seed: spec.seed ^ cell_tag(mi, ai, strength),
                ..spec.channel.clone()
            };
            let mut encoder = EncoderRunner::new(cfg)?;
            let mut decoder = DecoderRunner::new(cfg)?;
            let mut chan = ChannelGraph::new(
                1,
                cfg.image_side,
                cfg.image_side,
                chan_cfg.max_blur_kernel(),
            )?;
            let tag = cell_tag(mi, ai, strength);
            let mut records = Vec::with_capacity(spec.trials);
            let mut accs = Vec::with_capacity(spec.trials);
            for t in 0..spec.trials {
                let image = &images[t % images.len()];
                let bits = trial_bits(spec.seed, tag, t as u64, cfg.message_bits);
                let (stego, _) = encoder.encode(&ckpt.params, image, &bits)?;
                let sample = crate::channel::sample_perturb(
                    &chan_cfg,
                    t as u64,
                    cfg.image_side,
                    cfg.image_side,
                )?;
                let corrupted = chan.apply(&stego, std::slice::from_ref(&sample))?;
                let decoded = decoder.decode_bits(&ckpt.params, &corrupted)?;
                let acc = bit_accuracy(&decoded, &bits)?;
                accs.push(acc);
                records.push(EvalRecord {
                    model: label.clone(),
                    image_id: t % images.len(),
                    message_bits: cfg.message_bits,
                    n_pixels: cfg.image_side * cfg.image_side,
                    axis: CHANNEL_AXES[ai].to_string(),
                    strength,
                    bit_accuracy: acc,
                    psnr_db: psnr(image, &stego)?,
                    ssim: ssim(image, &stego)?,
                });
            }
            accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let cell = SweepCell {
                model: label.clone(),
                axis: CHANNEL_AXES[ai].to_string(),
                strength,
                mean_accuracy: mean,
                q25: percentile_nearest_rank(&accs, 25.0),
                q75: percentile_nearest_rank(&accs, 75.0),
            };
            Ok((records, cell))
        })
        .collect();

    let mut records = Vec::new();
    let mut cells_out = Vec::new();
    for r in results {
        let (recs, cell) = r?;
        records.extend(recs);
        cells_out.push(cell);
    }
    Ok((records, cells_out))
}

/// Mean full-channel accuracy at strength 1 plus the derived bits/MP figure,
/// one row per model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapacityRow {
    pub model: String,
    pub mean_accuracy: f64,
    pub bits_per_megapixel: f64,
    pub message_bits: usize,
    pub n_pixels: usize,
}

pub fn capacity_table(
    models: &[(String, &Checkpoint)],
    images: &[Tensor<f32>],
    channel: &ChannelConfig,
    trials: usize,
    seed: u64,
) -> Result<Vec<CapacityRow>> {
    let mut rows = Vec::new();
    for (mi, (label, ckpt)) in models.iter().enumerate() {
        let cfg = &ckpt.config;
        let chan_cfg = ChannelConfig {
            strength: 1.0,
            axis_strengths: None,
            rng_seed: seed ^ (mi as u64) << 48,
            ..channel.clone()
        };
        let mut encoder = EncoderRunner::new(cfg)?;
        let mut decoder = DecoderRunner::new(cfg)?;
        let mut chan = ChannelGraph::new(
            1,
            cfg.image_side,
            cfg.image_side,
            chan_cfg.max_blur_kernel(),
        )?;
        let mut acc_sum = 0.0;
        for t in 0..trials {
            let image = &images[t % images.len()];
            let bits = trial_bits(seed, 0xca9 ^ mi as u64, t as u64, cfg.message_bits);
            let (stego, _) = encoder.encode(&ckpt.params, image, &bits)?;
            let sample = crate::channel::sample_perturb(
                &chan_cfg,
                t as u64,
                cfg.image_side,
                cfg.image_side,
            )?;
            let corrupted = chan.apply(&stego, std::slice::from_ref(&sample))?;
            let decoded = decoder.decode_bits(&ckpt.params, &corrupted)?;
            acc_sum += bit_accuracy(&decoded, &bits)?;
        }
        let p = acc_sum / trials as f64;
        rows.push(CapacityRow {
            model: label.clone(),
            mean_accuracy: p,
            bits_per_megapixel: bits_per_megapixel(
                p,
                cfg.message_bits,
                cfg.image_side * cfg.image_side,
            ),
            message_bits: cfg.message_bits,
            n_pixels: cfg.image_side * cfg.image_side,
        });
    }
    Ok(rows)
}

// --- CSV schemas (documented, versioned) ---

/// Per-trial records: one row per EvalRecord.
pub fn write_records_csv(path: &std::path::Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::from("# stegachan-sweep-records v1\n");
    out.push_str("model,image_id,message_bits,n_pixels,axis,strength,bit_accuracy,psnr_db,ssim\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.model,
            r.image_id,
            r.message_bits,
            r.n_pixels,
            r.axis,
            r.strength,
            r.bit_accuracy,
            r.psnr_db,
            r.ssim
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-cell aggregates: one row per (model, axis, strength).
pub fn write_summary_csv(path: &std::path::Path, cells: &[SweepCell]) -> Result<()> {
    let mut out = String::from("# stegachan-sweep-summary v1\n");
    out.push_str("model,axis,strength,mean_accuracy,q25,q75\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.model, c.axis, c.strength, c.mean_accuracy, c.q25, c.q75
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_capacity_csv(path: &std::path::Path, rows: &[CapacityRow]) -> Result<()> {
    let mut out = String::from("# stegachan-capacity v1\n");
    out.push_str("model,mean_accuracy,bits_per_megapixel,message_bits,n_pixels\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.model, r.mean_accuracy, r.bits_per_megapixel, r.message_bits, r.n_pixels
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bit_accuracy_cases() {
        assert_eq!(bit_accuracy(&[1, 0, 1], &[1, 0, 1]).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&[0, 1, 0], &[1, 0, 1]).unwrap(), 0.0);
        assert!(bit_accuracy(&[1], &[1, 0]).is_err());
        // Independent random strings concentrate near 0.5.
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<u8> = (0..1000).map(|_| r.gen_range(0..2)).collect();
        let b: Vec<u8> = (0..1000).map(|_| r.gen_range(0..2)).collect();
        let acc = bit_accuracy(&a, &b).unwrap();
        assert!((acc - 0.5).abs() < 0.05, "accuracy {}", acc);
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::<f32>::filled(&[1, 8, 8, 3], 0.5);
        assert!(psnr(&a, &a).unwrap().is_infinite());
        let b = Tensor::<f32>::filled(&[1, 8, 8, 3], 0.75);
        let v = psnr(&a, &b).unwrap();
        // MSE = 0.0625 -> 10 log10(16) = 12.0412
        assert!((v - 12.0412).abs() < 1e-3, "psnr {}", v);

        // Random pair matches the direct definition.
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::from_vec(
            &[1, 8, 8, 3],
            (0..192).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let y = Tensor::<f32>::from_vec(
            &[1, 8, 8, 3],
            (0..192).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        let mse: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / 192.0;
        let direct = 10.0 * (1.0 / mse).log10();
        assert!((psnr(&x, &y).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn ssim_cases() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f32>::from_vec(
            &[1, 16, 16, 3],
            (0..768).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // Inverted image scores poorly.
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 0.5);
        // Symmetry.
        let b = Tensor::<f32>::from_vec(
            &[1, 16, 16, 3],
            (0..768).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap();
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        // Window errors.
        let tiny = Tensor::<f32>::zeros(&[1, 8, 8, 3]);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn capacity_formula() {
        assert_eq!(channel_capacity(0.5), 0.0);
        assert!((channel_capacity(1.0) - 1.0).abs() < 1e-12);
        assert!((channel_capacity(0.0) - 1.0).abs() < 1e-12);
        // Direct evaluation at p = 0.65.
        let c = channel_capacity(0.65);
        assert!((c - 0.0659).abs() < 1e-3, "C(0.65) = {}", c);
        // Symmetry and range.
        for i in 0..=20 {
            let p = i as f64 / 20.0;
            let c = channel_capacity(p);
            assert!((c - channel_capacity(1.0 - p)).abs() < 1e-12);
            assert!((-1e-12..=1.0 + 1e-12).contains(&c));
        }
    }

    #[test]
    fn bits_per_megapixel_matches_published_rows() {
        // 30 bits in 128^2 at accuracy 0.65.
        let v = bits_per_megapixel(0.65, 30, 128 * 128);
        assert!((v - 125.0).abs() / 125.0 < 0.05, "bits/MP {}", v);
        // 100 bits in 400^2 at accuracy 0.99.
        let v = bits_per_megapixel(0.99, 100, 400 * 400);
        assert!((v - 571.0).abs() / 571.0 < 0.01, "bits/MP {}", v);
        // Pure-noise channel carries nothing.
        assert_eq!(bits_per_megapixel(0.5, 123, 999), 0.0);
        // Monotone in p on [0.5, 1].
        let mut prev = 0.0;
        for i in 0..=10 {
            let p = 0.5 + 0.05 * i as f64;
            let v = bits_per_megapixel(p, 100, 10000);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn percentile_convention() {
        let vals = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile_nearest_rank(&vals, 25.0), 1.0);
        assert_eq!(percentile_nearest_rank(&vals, 50.0), 2.0);
        assert_eq!(percentile_nearest_rank(&vals, 75.0), 3.0);
        assert_eq!(percentile_nearest_rank(&vals, 100.0), 4.0);
    }

    #[test]
    fn ssim_psnr_match_independent_definitions_on_many_pairs() {
        // Direct-definition PSNR plus a literal SSIM reimplementation.
        let mut r = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = Tensor::<f32>::from_vec(
                &[1, 12, 12, 1],
                (0..144).map(|_| r.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let b = Tensor::<f32>::from_vec(
                &[1, 12, 12, 1],
                (0..144).map(|_| r.gen_range(0.0..1.0)).collect(),
            )
            .unwrap();
            let mse: f64 = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / 144.0;
            assert!((psnr(&a, &b).unwrap() - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);

            let direct = reference_ssim(a.data(), b.data(), 12, 12);
            assert!((ssim(&a, &b).unwrap() - direct).abs() < 1e-6);
        }
    }

    /// Independent single-scale SSIM written from the definition.
    fn reference_ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
        let sigma = 1.5f64;
        let mut win = vec![0.0f64; 121];
        let mut s = 0.0;
        for i in 0..11 {
            for j in 0..11 {
                let v = (-(((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2))
                    / (2.0 * sigma * sigma)))
                    .exp();
                win[i * 11 + j] = v;
                s += v;
            }
        }
        for v in &mut win {
            *v /= s;
        }
        let (c1, c2) = (0.0001f64, 0.0009f64);
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - 11 {
            for x in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wv = win[i * 11 + j];
                        let va = a[(y + i) * w + x + j] as f64;
                        let vb = b[(y + i) * w + x + j] as f64;
                        mx += wv * va;
                        my += wv * vb;
                        xx += wv * va * va;
                        yy += wv * vb * vb;
                        xy += wv * va * vb;
                    }
                }
                total += ((2.0 * mx * my + c1) * (2.0 * (xy - mx * my) + c2))
                    / ((mx * mx + my * my + c1) * (xx - mx * mx + yy - my * my + c2));
                count += 1;
            }
        }
        total / count as f64
    }
}
