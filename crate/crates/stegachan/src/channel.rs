//! Differentiable display-imaging corruption pipeline.
//!
//! Stages run in a fixed order between encoder and decoder: perspective warp,
//! blur (motion or defocus), color transform, Gaussian noise, JPEG. Every
//! stage is expressed in graph ops so gradients flow back to the stego image;
//! the randomly drawn stage parameters enter through input placeholders and
//! are recorded in a [`PerturbSample`] for exact replay.
//!
//! Strength semantics: a per-axis strength in [0, 2] scales each sampled
//! parameter's deviation from its identity value linearly, with 1 matching
//! the training ranges. At strength 0 a stage is exactly the identity. JPEG
//! quality ramps 100 -> 50 -> clamped at 10.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{solve_homography, Homography};
use crate::ndgrad::{Executor, GraphBuilder, NodeRef, ParamStore, Scalar, Tensor};

/// Per-perturbation strength multipliers, each in [0, 2].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisStrengths {
    pub warp: f64,
    pub motion_blur: f64,
    pub defocus_blur: f64,
    pub color: f64,
    pub noise: f64,
    pub jpeg: f64,
}

impl AxisStrengths {
    pub fn uniform(s: f64) -> Self {
        AxisStrengths {
            warp: s,
            motion_blur: s,
            defocus_blur: s,
            color: s,
            noise: s,
            jpeg: s,
        }
    }

    pub fn zero() -> Self {
        Self::uniform(0.0)
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.warp,
            self.motion_blur,
            self.defocus_blur,
            self.color,
            self.noise,
            self.jpeg,
        ]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        AxisStrengths {
            warp: a[0],
            motion_blur: a[1],
            defocus_blur: a[2],
            color: a[3],
            noise: a[4],
            jpeg: a[5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, v) in CHANNEL_AXES.iter().zip(self.as_array()) {
            if !(0.0..=2.0).contains(&v) {
                return Err(Error::Config(format!(
                    "axis strength {} = {} outside [0, 2]",
                    axis, v
                )));
            }
        }
        Ok(())
    }
}

/// Axis names in pipeline order, used in sweep tables and logs.
pub const CHANNEL_AXES: [&str; 6] = [
    "warp",
    "motion_blur",
    "defocus_blur",
    "color",
    "noise",
    "jpeg",
];

/// Channel parameter ranges (the defaults are the training ranges) plus the
/// global strength scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// Global strength in [0, 2]; 1 = maximum seen during training.
    pub strength: f64,
    /// Per-axis overrides; `None` applies `strength` to every axis.
    pub axis_strengths: Option<AxisStrengths>,
    /// Max corner displacement as a fraction of the stamp side at strength 1.
    pub corner_jitter_frac: f64,
    /// Motion blur width range in pixels at strength 1.
    pub motion_blur_width: (f64, f64),
    /// Defocus Gaussian sigma range in pixels at strength 1.
    pub defocus_sigma: (f64, f64),
    /// Hue offset bound per channel at strength 1.
    pub hue_offset: f64,
    /// Desaturation interpolation factor range (within [0, 1]).
    pub desaturation: (f64, f64),
    /// Contrast multiplier range at strength 1.
    pub contrast: (f64, f64),
    /// Brightness offset bound at strength 1.
    pub brightness: f64,
    /// Noise sigma upper bound at strength 1.
    pub noise_sigma_max: f64,
    /// JPEG quality range at strength 1.
    pub jpeg_quality: (f64, f64),
    pub rng_seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            strength: 1.0,
            axis_strengths: None,
            corner_jitter_frac: 0.10,
            motion_blur_width: (3.0, 7.0),
            defocus_sigma: (1.0, 3.0),
            hue_offset: 0.1,
            desaturation: (0.0, 1.0),
            contrast: (0.5, 1.5),
            brightness: 0.3,
            noise_sigma_max: 0.2,
            jpeg_quality: (50.0, 100.0),
            rng_seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn with_strength(s: f64) -> Self {
        ChannelConfig {
            strength: s,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.strength) {
            return Err(Error::Config(format!(
                "strength {} outside [0, 2]",
                self.strength
            )));
        }
        if let Some(a) = &self.axis_strengths {
            a.validate()?;
        }
        if !(0.0..0.5).contains(&self.corner_jitter_frac) {
            return Err(Error::Config(
                "corner_jitter_frac must be in [0, 0.5)".into(),
            ));
        }
        let ranges = [
            ("motion_blur_width", self.motion_blur_width, 1.0),
            ("defocus_sigma", self.defocus_sigma, 0.0),
            ("desaturation", self.desaturation, 0.0),
            ("contrast", self.contrast, 0.0),
            ("jpeg_quality", self.jpeg_quality, 1.0),
        ];
        for (name, (lo, hi), min) in ranges {
            if !lo.is_finite() || !hi.is_finite() || lo > hi || lo < min {
                return Err(Error::Config(format!(
                    "bad {} range ({}, {})",
                    name, lo, hi
                )));
            }
        }
        if self.desaturation.1 > 1.0 {
            return Err(Error::Config("desaturation factor cannot exceed 1".into()));
        }
        if self.jpeg_quality.1 > 100.0 {
            return Err(Error::Config("jpeg quality cannot exceed 100".into()));
        }
        if self.hue_offset < 0.0 || self.brightness < 0.0 || self.noise_sigma_max < 0.0 {
            return Err(Error::Config("bounds must be non-negative".into()));
        }
        Ok(())
    }

    pub fn strengths(&self) -> AxisStrengths {
        self.axis_strengths
            .unwrap_or(AxisStrengths::uniform(self.strength))
    }

    /// Largest blur kernel any sample drawn from this config can need; graphs
    /// are sized to it and smaller kernels are zero-embedded.
    pub fn max_blur_kernel(&self) -> usize {
        let s = self.strengths();
        let w_hi = 1.0 + (self.motion_blur_width.1 - 1.0) * s.motion_blur;
        let motion_k = round_odd(w_hi).max(1);
        let sigma_hi = self.defocus_sigma.1 * s.defocus_blur;
        let defocus_k = if sigma_hi > 1e-9 {
            2 * (3.0 * sigma_hi).ceil() as usize + 1
        } else {
            1
        };
        motion_k.max(defocus_k)
    }
}

/// Round to the nearest odd integer >= 1.
fn round_odd(w: f64) -> usize {
    let w = w.max(1.0);
    let f = w.floor() as usize;
    let floor_odd = if f % 2 == 1 { f } else { f.saturating_sub(1).max(1) };
    let c = w.ceil() as usize;
    let ceil_odd = if c % 2 == 1 { c } else { c + 1 };
    if w - floor_odd as f64 <= ceil_odd as f64 - w {
        floor_odd
    } else {
        ceil_odd
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BlurSample {
    Identity,
    Motion { width: usize, angle: f64 },
    Defocus { sigma: f64 },
}

/// The concrete values drawn for one image; fully determines the channel
/// output and serializes for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbSample {
    /// Per-corner (dx, dy) displacements of the image frame corners.
    pub corner_shift: [[f64; 2]; 4],
    pub blur: BlurSample,
    pub hue: [f64; 3],
    pub desaturation: f64,
    pub contrast: f64,
    pub brightness: f64,
    pub noise_sigma: f64,
    /// Seed regenerating the i.i.d. noise field.
    pub noise_key: u64,
    /// `None` disables the JPEG stage (exact identity).
    pub jpeg_quality: Option<f64>,
}

impl PerturbSample {
    pub fn identity() -> Self {
        PerturbSample {
            corner_shift: [[0.0, 0.0]; 4],
            blur: BlurSample::Identity,
            hue: [0.0; 3],
            desaturation: 0.0,
            contrast: 1.0,
            brightness: 0.0,
            noise_sigma: 0.0,
            noise_key: 0,
            jpeg_quality: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .corner_shift
            .iter()
            .flatten()
            .chain(self.hue.iter())
            .chain([
                &self.desaturation,
                &self.contrast,
                &self.brightness,
                &self.noise_sigma,
            ])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("perturb sample has non-finite fields".into()));
        }
        match self.blur {
            BlurSample::Identity => {}
            BlurSample::Motion { width, angle } => {
                if width == 0 || width % 2 == 0 || width > 255 || !angle.is_finite() {
                    return Err(Error::Config("bad motion blur sample".into()));
                }
            }
            BlurSample::Defocus { sigma } => {
                if !sigma.is_finite() || !(0.0..=32.0).contains(&sigma) {
                    return Err(Error::Config("bad defocus blur sample".into()));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.desaturation) {
            return Err(Error::Config("desaturation outside [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 || self.noise_sigma > 1.0 {
            return Err(Error::Config("noise sigma outside [0, 1]".into()));
        }
        if let Some(q) = self.jpeg_quality {
            if !(1.0..=100.0).contains(&q) {
                return Err(Error::Config("jpeg quality outside [1, 100]".into()));
            }
        }
        Ok(())
    }

    /// Kernel size this sample's blur needs.
    pub fn blur_kernel_size(&self) -> usize {
        match self.blur {
            BlurSample::Identity => 1,
            BlurSample::Motion { width, .. } => width,
            BlurSample::Defocus { sigma } => 2 * (3.0 * sigma).ceil() as usize + 1,
        }
    }
}

const STAGE_WARP: u64 = 0;
const STAGE_BLUR: u64 = 1;
const STAGE_COLOR: u64 = 2;
const STAGE_NOISE: u64 = 3;
const STAGE_JPEG: u64 = 4;

/// Splittable counter-based stream: every (seed, image, stage) triple gets an
/// independent ChaCha stream, so samples are reproducible in any order.
fn stage_rng(seed: u64, image_index: u64, stage: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&image_index.to_le_bytes());
    key[16..24].copy_from_slice(&stage.to_le_bytes());
    key[24..].copy_from_slice(b"stgchan\0");
    ChaCha8Rng::from_seed(key)
}

fn uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        lo
    } else {
        r.gen_range(lo..hi)
    }
}

/// Image frame corners in pixel-edge convention.
fn frame_corners(height: usize, width: usize) -> [[f64; 2]; 4] {
    let (w, h) = (width as f64 - 0.5, height as f64 - 0.5);
    [[-0.5, -0.5], [w, -0.5], [w, h], [-0.5, h]]
}

fn shifted_corners(
    corners: &[[f64; 2]; 4],
    shift: &[[f64; 2]; 4],
) -> [[f64; 2]; 4] {
    let mut out = [[0.0; 2]; 4];
    for i in 0..4 {
        out[i] = [corners[i][0] + shift[i][0], corners[i][1] + shift[i][1]];
    }
    out
}

/// Draws the concrete perturbation values for one image.
pub fn sample_perturb(
    cfg: &ChannelConfig,
    image_index: u64,
    height: usize,
    width: usize,
) -> Result<PerturbSample> {
    cfg.validate()?;
    let s = cfg.strengths();
    let side = height.min(width) as f64;

    // Perspective warp: jitter corners until the quad stays convex and the
    // homography solvable.
    let mut rng = stage_rng(cfg.rng_seed, image_index, STAGE_WARP);
    let d = cfg.corner_jitter_frac * side * s.warp;
    let mut corner_shift = [[0.0f64; 2]; 4];
    if d > 0.0 {
        let corners = frame_corners(height, width);
        let mut ok = false;
        for _ in 0..100 {
            for c in corner_shift.iter_mut() {
                c[0] = uniform(&mut rng, -d, d);
                c[1] = uniform(&mut rng, -d, d);
            }
            let jittered = shifted_corners(&corners, &corner_shift);
            let quad = crate::geom::Quad { corners: jittered };
            if quad.is_convex() && solve_homography(&corners, &jittered).is_ok() {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Numeric(
                "could not sample a non-degenerate warp quad".into(),
            ));
        }
    }

    // Blur: pick motion or defocus among the axes with nonzero strength.
    let mut rng = stage_rng(cfg.rng_seed, image_index, STAGE_BLUR);
    let pick_motion = match (s.motion_blur > 0.0, s.defocus_blur > 0.0) {
        (false, false) => None,
        (true, false) => Some(true),
        (false, true) => Some(false),
        (true, true) => Some(rng.gen_bool(0.5)),
    };
    let blur = match pick_motion {
        None => BlurSample::Identity,
        Some(true) => {
            let lo = 1.0 + (cfg.motion_blur_width.0 - 1.0) * s.motion_blur;
            let hi = 1.0 + (cfg.motion_blur_width.1 - 1.0) * s.motion_blur;
            let width = round_odd(uniform(&mut rng, lo, hi));
            let angle = uniform(&mut rng, 0.0, std::f64::consts::PI);
            if width <= 1 {
                BlurSample::Identity
            } else {
                BlurSample::Motion { width, angle }
            }
        }
        Some(false) => {
            let lo = cfg.defocus_sigma.0 * s.defocus_blur;
            let hi = cfg.defocus_sigma.1 * s.defocus_blur;
            let sigma = uniform(&mut rng, lo, hi);
            if sigma < 1e-6 {
                BlurSample::Identity
            } else {
                BlurSample::Defocus { sigma }
            }
        }
    };

    // Color: hue shift, desaturation, contrast, brightness (in that order).
    let mut rng = stage_rng(cfg.rng_seed, image_index, STAGE_COLOR);
    let hb = cfg.hue_offset * s.color;
    let hue = [
        uniform(&mut rng, -hb, hb),
        uniform(&mut rng, -hb, hb),
        uniform(&mut rng, -hb, hb),
    ];
    let desaturation = uniform(
        &mut rng,
        (cfg.desaturation.0 * s.color).min(1.0),
        (cfg.desaturation.1 * s.color).min(1.0),
    );
    let contrast = uniform(
        &mut rng,
        1.0 - (1.0 - cfg.contrast.0) * s.color,
        1.0 + (cfg.contrast.1 - 1.0) * s.color,
    );
    let brightness = uniform(
        &mut rng,
        -cfg.brightness * s.color,
        cfg.brightness * s.color,
    );

    let mut rng = stage_rng(cfg.rng_seed, image_index, STAGE_NOISE);
    let noise_sigma = uniform(&mut rng, 0.0, cfg.noise_sigma_max * s.noise);
    let noise_key = rng.next_u64();

    let mut rng = stage_rng(cfg.rng_seed, image_index, STAGE_JPEG);
    let jpeg_quality = if s.jpeg > 0.0 {
        let lo = (100.0 - (100.0 - cfg.jpeg_quality.0) * s.jpeg).max(10.0);
        let hi = cfg.jpeg_quality.1;
        Some(uniform(&mut rng, lo.min(hi), hi))
    } else {
        None
    };

    Ok(PerturbSample {
        corner_shift,
        blur,
        hue,
        desaturation,
        contrast,
        brightness,
        noise_sigma,
        noise_key,
        jpeg_quality,
    })
}

// --- JPEG quantization tables ---

/// Standard luminance base table (quality 50).
const LUMA_BASE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Standard chrominance base table (quality 50).
const CHROMA_BASE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Conventional quality scaling of the base tables, converted to the [0, 1]
/// pixel units used by the pipeline (divided by 255).
pub fn quant_divisors(quality: f64) -> ([f64; 64], [f64; 64]) {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let map = |base: &[u16; 64]| {
        let mut out = [0.0f64; 64];
        for (o, &b) in out.iter_mut().zip(base) {
            let t = ((b as f64 * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
            *o = t / 255.0;
        }
        out
    };
    (map(&LUMA_BASE), map(&CHROMA_BASE))
}

// --- graph construction ---

/// Node handles and metadata for one channel instance inside a graph.
pub struct ChannelNodes {
    pub input: NodeRef,
    pub output: NodeRef,
    pub blur_kernel_size: usize,
    prefix: String,
    batch: usize,
    height: usize,
    width: usize,
}

/// Appends the five corruption stages to `builder`, reading the per-image
/// stage parameters from input placeholders named `{prefix}.*`.
pub fn build_channel<F: Scalar>(
    builder: &mut GraphBuilder<F>,
    image: NodeRef,
    blur_kernel_size: usize,
    prefix: &str,
) -> Result<ChannelNodes> {
    let shape = builder.shape(image).to_vec();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::Config(format!(
            "channel input must be [N,H,W,3], got {:?}",
            shape
        )));
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    if blur_kernel_size % 2 == 0 {
        return Err(Error::Config("blur kernel size must be odd".into()));
    }
    let name = |field: &str| format!("{}.{}", prefix, field);

    // Perspective warp.
    let grid = builder.input(&name("grid"), &[n, h, w, 2])?;
    let warped = builder.bilinear_sample(image, grid)?;

    // Blur.
    let kernel = builder.input(
        &name("blur_kernel"),
        &[n, blur_kernel_size, blur_kernel_size],
    )?;
    let blurred = builder.depthwise_conv2d(warped, kernel)?;

    // Color transform: hue shift, desaturation toward 601 luma, contrast,
    // brightness, clip.
    let hue = builder.input(&name("hue"), &[n, 3])?;
    let desat = builder.input(&name("desat"), &[n])?;
    let contrast = builder.input(&name("contrast"), &[n])?;
    let brightness = builder.input(&name("brightness"), &[n])?;
    let hued = builder.add_channel_bias(blurred, hue)?;
    let luma = [F::from_f64(0.299), F::from_f64(0.587), F::from_f64(0.114)];
    let gray = builder.gray_luma(hued, luma)?;
    let desated = builder.lerp_rows(hued, gray, desat)?;
    let contrasted = builder.scale_rows(desated, contrast)?;
    let brightened = builder.offset_rows(contrasted, brightness)?;
    let colored = builder.clip_ste(brightened, F::zero(), F::one());

    // Additive Gaussian noise (field pre-scaled by sigma), clip.
    let noise = builder.input(&name("noise"), &[n, h, w, 3])?;
    let noised = builder.add(colored, noise)?;
    let noise_clipped = builder.clip_ste(noised, F::zero(), F::one());

    // JPEG: YCbCr, blockwise DCT, soft quantization against quality-scaled
    // tables, inverse; gated per image so strength 0 is the exact identity.
    let rgb2ycc = [
        [F::from_f64(0.299), F::from_f64(0.587), F::from_f64(0.114)],
        [
            F::from_f64(-0.168_736),
            F::from_f64(-0.331_264),
            F::from_f64(0.5),
        ],
        [
            F::from_f64(0.5),
            F::from_f64(-0.418_688),
            F::from_f64(-0.081_312),
        ],
    ];
    let ycc_off = [F::from_f64(-0.5), F::zero(), F::zero()];
    let ycc2rgb = [
        [F::one(), F::zero(), F::from_f64(1.402)],
        [F::one(), F::from_f64(-0.344_136), F::from_f64(-0.714_136)],
        [F::one(), F::from_f64(1.772), F::zero()],
    ];
    let rgb_off = [F::from_f64(0.5), F::from_f64(0.5), F::from_f64(0.5)];

    let quant = builder.input(&name("quant"), &[n, 8, 8, 3])?;
    let gate = builder.input(&name("jpeg_gate"), &[n])?;
    let ycc = builder.color_matrix(noise_clipped, rgb2ycc, ycc_off)?;
    let padded = builder.pad_reflect_to8(ycc)?;
    let freq = builder.dct8x8(padded, false)?;
    let divided = builder.block_scale(freq, quant, true)?;
    let quantized = builder.jpeg_quant_soft(divided);
    let scaled_back = builder.block_scale(quantized, quant, false)?;
    let spatial = builder.dct8x8(scaled_back, true)?;
    let cropped = builder.crop_spatial(spatial, h, w)?;
    let rgb = builder.color_matrix(cropped, ycc2rgb, rgb_off)?;
    let gated = builder.lerp_rows(noise_clipped, rgb, gate)?;
    let output = builder.clip_ste(gated, F::zero(), F::one());

    Ok(ChannelNodes {
        input: image,
        output,
        blur_kernel_size,
        prefix: prefix.to_string(),
        batch: n,
        height: h,
        width: w,
    })
}

/// Builds the warp grid for one sample: output pixel centers mapped through
/// the inverse of the corner-jitter homography.
fn fill_grid<F: Scalar>(
    grid: &mut [F],
    shift: &[[f64; 2]; 4],
    height: usize,
    width: usize,
) -> Result<()> {
    let identity = shift.iter().all(|c| c[0] == 0.0 && c[1] == 0.0);
    if identity {
        for y in 0..height {
            for x in 0..width {
                let gb = (y * width + x) * 2;
                grid[gb] = F::from_f64(x as f64);
                grid[gb + 1] = F::from_f64(y as f64);
            }
        }
        return Ok(());
    }
    let corners = frame_corners(height, width);
    let jittered = shifted_corners(&corners, shift);
    let h = solve_homography(&corners, &jittered)?;
    let hinv = h.inverse()?;
    for y in 0..height {
        for x in 0..width {
            let p = hinv.apply([x as f64, y as f64]);
            let gb = (y * width + x) * 2;
            grid[gb] = F::from_f64(p[0]);
            grid[gb + 1] = F::from_f64(p[1]);
        }
    }
    Ok(())
}

/// Rasterizes the blur into a `k x k` buffer (zero-embedded, unit sum).
pub fn blur_kernel(sample: &BlurSample, k: usize) -> Result<Vec<f64>> {
    let mut kern = vec![0.0f64; k * k];
    let r = (k / 2) as isize;
    match *sample {
        BlurSample::Identity => {
            kern[(r * k as isize + r) as usize] = 1.0;
        }
        BlurSample::Motion { width, angle } => {
            if width > k {
                return Err(Error::Config(format!(
                    "motion width {} exceeds kernel buffer {}",
                    width, k
                )));
            }
            let half = (width as f64 - 1.0) / 2.0;
            let (c, s) = (angle.cos(), angle.sin());
            let mut sum = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let dy = (i as isize - r) as f64;
                    let dx = (j as isize - r) as f64;
                    // Distance from the cell center to the segment of
                    // half-length `half` through the origin at `angle`.
                    let t = (dx * c + dy * s).clamp(-half, half);
                    let ex = dx - t * c;
                    let ey = dy - t * s;
                    let dist = (ex * ex + ey * ey).sqrt();
                    let wgt = (1.0 - dist).max(0.0);
                    kern[i * k + j] = wgt;
                    sum += wgt;
                }
            }
            for v in &mut kern {
                *v /= sum;
            }
        }
        BlurSample::Defocus { sigma } => {
            if sigma < 1e-9 {
                kern[(r * k as isize + r) as usize] = 1.0;
            } else {
                let rad = ((3.0 * sigma).ceil() as isize).min(r);
                let mut sum = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        let dy = i as isize - r;
                        let dx = j as isize - r;
                        if dy.abs() > rad || dx.abs() > rad {
                            continue;
                        }
                        let d2 = (dx * dx + dy * dy) as f64;
                        let wgt = (-d2 / (2.0 * sigma * sigma)).exp();
                        kern[i * k + j] = wgt;
                        sum += wgt;
                    }
                }
                for v in &mut kern {
                    *v /= sum;
                }
            }
        }
    }
    Ok(kern)
}

/// Fills every `{prefix}.*` placeholder of a channel instance, one sample per
/// batch image.
pub fn fill_channel_inputs<F: Scalar>(
    exec: &mut Executor<F>,
    nodes: &ChannelNodes,
    samples: &[PerturbSample],
) -> Result<()> {
    if samples.len() != nodes.batch {
        return Err(Error::Config(format!(
            "{} samples for batch of {}",
            samples.len(),
            nodes.batch
        )));
    }
    let (h, w, k) = (nodes.height, nodes.width, nodes.blur_kernel_size);
    let name = |field: &str| format!("{}.{}", nodes.prefix, field);

    {
        let grid = exec.input_mut(&name("grid"))?;
        for (ni, s) in samples.iter().enumerate() {
            let gslice = &mut grid.data_mut()[ni * h * w * 2..(ni + 1) * h * w * 2];
            fill_grid(gslice, &s.corner_shift, h, w)?;
        }
    }
    {
        let kern = exec.input_mut(&name("blur_kernel"))?;
        for (ni, s) in samples.iter().enumerate() {
            let kbuf = blur_kernel(&s.blur, k)?;
            for (o, &v) in kern.data_mut()[ni * k * k..(ni + 1) * k * k]
                .iter_mut()
                .zip(&kbuf)
            {
                *o = F::from_f64(v);
            }
        }
    }
    {
        let hue = exec.input_mut(&name("hue"))?;
        for (ni, s) in samples.iter().enumerate() {
            for c in 0..3 {
                hue.data_mut()[ni * 3 + c] = F::from_f64(s.hue[c]);
            }
        }
    }
    type Get = fn(&PerturbSample) -> f64;
    let fields: [(&str, Get); 3] = [
        ("desat", |s| s.desaturation),
        ("contrast", |s| s.contrast),
        ("brightness", |s| s.brightness),
    ];
    for (field, get) in fields {
        let t = exec.input_mut(&name(field))?;
        for (ni, s) in samples.iter().enumerate() {
            t.data_mut()[ni] = F::from_f64(get(s));
        }
    }
    {
        let noise = exec.input_mut(&name("noise"))?;
        for (ni, s) in samples.iter().enumerate() {
            let slice = &mut noise.data_mut()[ni * h * w * 3..(ni + 1) * h * w * 3];
            if s.noise_sigma == 0.0 {
                slice.fill(F::zero());
            } else {
                let mut rng = stage_rng(s.noise_key, 0, STAGE_NOISE);
                for v in slice.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = F::from_f64(z * s.noise_sigma);
                }
            }
        }
    }
    {
        let quant = exec.input_mut(&name("quant"))?;
        for (ni, s) in samples.iter().enumerate() {
            let qslice = &mut quant.data_mut()[ni * 64 * 3..(ni + 1) * 64 * 3];
            match s.jpeg_quality {
                None => qslice.fill(F::one()),
                Some(q) => {
                    let (luma, chroma) = quant_divisors(q);
                    for i in 0..64 {
                        qslice[i * 3] = F::from_f64(luma[i]);
                        qslice[i * 3 + 1] = F::from_f64(chroma[i]);
                        qslice[i * 3 + 2] = F::from_f64(chroma[i]);
                    }
                }
            }
        }
    }
    {
        let gate = exec.input_mut(&name("jpeg_gate"))?;
        for (ni, s) in samples.iter().enumerate() {
            gate.data_mut()[ni] = if s.jpeg_quality.is_some() {
                F::one()
            } else {
                F::zero()
            };
        }
    }
    Ok(())
}

/// A standalone channel for evaluation: one graph per (batch, height, width,
/// kernel budget), reusable across images.
pub struct ChannelGraph {
    nodes: ChannelNodes,
    exec: Executor<f32>,
    params: ParamStore<f32>,
}

impl ChannelGraph {
    pub fn new(batch: usize, height: usize, width: usize, blur_kernel_size: usize) -> Result<Self> {
        let mut b = GraphBuilder::<f32>::new();
        let image = b.input("image", &[batch, height, width, 3])?;
        let nodes = build_channel(&mut b, image, blur_kernel_size, "chan")?;
        let graph = b.finish();
        let exec = Executor::new(graph);
        Ok(ChannelGraph {
            nodes,
            exec,
            params: ParamStore::new(),
        })
    }

    pub fn apply(&mut self, image: &Tensor<f32>, samples: &[PerturbSample]) -> Result<Tensor<f32>> {
        for s in samples {
            s.validate()?;
            if s.blur_kernel_size() > self.nodes.blur_kernel_size {
                return Err(Error::Config(format!(
                    "sample needs a {} kernel, graph sized for {}",
                    s.blur_kernel_size(),
                    self.nodes.blur_kernel_size
                )));
            }
        }
        self.exec.set_input("image", image)?;
        fill_channel_inputs(&mut self.exec, &self.nodes, samples)?;
        self.exec.forward(&self.params)?;
        Ok(self.exec.value(self.nodes.output).clone())
    }
}

/// Applies the corruption pipeline to a single `[1,H,W,3]` image, drawing the
/// stage parameters from `cfg` (image index 0), and returns the corrupted
/// image together with the drawn sample for replay.
pub fn apply_channel(
    image: &Tensor<f32>,
    cfg: &ChannelConfig,
) -> Result<(Tensor<f32>, PerturbSample)> {
    apply_channel_indexed(image, cfg, 0)
}

/// [`apply_channel`] with an explicit image index in the sampling key.
pub fn apply_channel_indexed(
    image: &Tensor<f32>,
    cfg: &ChannelConfig,
    image_index: u64,
) -> Result<(Tensor<f32>, PerturbSample)> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[3] != 3 {
        return Err(Error::Config(format!(
            "apply_channel expects [1,H,W,3], got {:?}",
            s
        )));
    }
    let sample = sample_perturb(cfg, image_index, s[1], s[2])?;
    let out = apply_channel_with(image, &sample)?;
    Ok((out, sample))
}

/// Replays a recorded sample; byte-identical to the original application.
pub fn apply_channel_with(image: &Tensor<f32>, sample: &PerturbSample) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 4 || s[0] != 1 || s[3] != 3 {
        return Err(Error::Config(format!(
            "apply_channel expects [1,H,W,3], got {:?}",
            s
        )));
    }
    sample.validate()?;
    let k = sample.blur_kernel_size();
    let mut g = ChannelGraph::new(1, s[1], s[2], k)?;
    g.apply(image, std::slice::from_ref(sample))
}

/// Warps an image under an explicit homography with zero fill; used by the
/// warp round-trip checks.
pub fn warp_image(image: &Tensor<f32>, h: &Homography) -> Result<Tensor<f32>> {
    let s = image.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::Config("warp_image expects [N,H,W,C]".into()));
    }
    let hinv = h.inverse()?;
    let mut b = GraphBuilder::<f32>::new();
    let img = b.input("image", &s)?;
    let grid = b.input("grid", &[s[0], s[1], s[2], 2])?;
    let out = b.bilinear_sample(img, grid)?;
    let graph = b.finish();
    let mut exec = Executor::new(graph);
    exec.set_input("image", image)?;
    {
        let gt = exec.input_mut("grid")?;
        for n in 0..s[0] {
            for y in 0..s[1] {
                for x in 0..s[2] {
                    let p = hinv.apply([x as f64, y as f64]);
                    let gb = ((n * s[1] + y) * s[2] + x) * 2;
                    gt.data_mut()[gb] = p[0] as f32;
                    gt.data_mut()[gb + 1] = p[1] as f32;
                }
            }
        }
    }
    exec.forward(&ParamStore::new())?;
    Ok(exec.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Smooth photo-like gradients with mild texture.
    fn test_image(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut r = stage_rng(seed, 7, 7);
        let (fx, fy, ph): (f32, f32, f32) = (
            r.gen_range(0.05..0.2),
            r.gen_range(0.05..0.2),
            r.gen_range(0.0..3.0),
        );
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = 0.5
                        + 0.25 * (fx * x as f32 + ph + c as f32).sin()
                        + 0.2 * (fy * y as f32 - ph).cos()
                        + r.gen_range(-0.02..0.02);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        Tensor::from_vec(&[1, h, w, 3], data).unwrap()
    }

    #[test]
    fn zero_strength_is_exact_identity() {
        let img = test_image(32, 32, 1);
        let cfg = ChannelConfig::with_strength(0.0);
        let (out, sample) = apply_channel(&img, &cfg).unwrap();
        assert_eq!(out.data(), img.data(), "s=0 must be the exact identity");
        assert_eq!(sample.blur, BlurSample::Identity);
        assert_eq!(sample.jpeg_quality, None);
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let img = test_image(32, 32, 2);
        let cfg = ChannelConfig {
            rng_seed: 99,
            ..ChannelConfig::with_strength(1.0)
        };
        let (a, sa) = apply_channel(&img, &cfg).unwrap();
        let (b, sb) = apply_channel(&img, &cfg).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a.data(), b.data());
        // Replay from the serialized sample is also byte-identical.
        let json = serde_json::to_string(&sa).unwrap();
        let replay: PerturbSample = serde_json::from_str(&json).unwrap();
        let c = apply_channel_with(&img, &replay).unwrap();
        assert_eq!(a.data(), c.data());
    }

    #[test]
    fn warp_translation_shifts_with_zero_fill() {
        let img = test_image(16, 16, 3);
        let h = Homography::translation(2.0, 0.0);
        let out = warp_image(&img, &h).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let got = out.at(&[0, y, x, c]);
                    let want = if x < 2 { 0.0 } else { img.at(&[0, y, x - 2, c]) };
                    assert!(
                        (got - want).abs() < 1e-6,
                        "pixel ({},{},{}) {} vs {}",
                        y,
                        x,
                        c,
                        got,
                        want
                    );
                }
            }
        }
    }

    #[test]
    fn warp_round_trip_interior() {
        let img = test_image(64, 64, 4);
        let cfg = ChannelConfig::with_strength(1.0);
        let sample = sample_perturb(&cfg, 3, 64, 64).unwrap();
        let corners = frame_corners(64, 64);
        let jittered = shifted_corners(&corners, &sample.corner_shift);
        let h = solve_homography(&corners, &jittered).unwrap();
        let there = warp_image(&img, &h).unwrap();
        let back = warp_image(&there, &h.inverse().unwrap()).unwrap();
        let mut err = 0.0f64;
        let mut count = 0;
        for y in 4..60 {
            for x in 4..60 {
                for c in 0..3 {
                    err += (back.at(&[0, y, x, c]) - img.at(&[0, y, x, c])).abs() as f64;
                    count += 1;
                }
            }
        }
        let mae = err / count as f64;
        assert!(mae < 2e-2, "interior MAE {}", mae);
    }

    #[test]
    fn blur_preserves_constants_and_motion_box() {
        // A unit-sum kernel leaves a constant image unchanged away from the
        // zero-padded border.
        let img = Tensor::<f32>::filled(&[1, 16, 16, 3], 0.6);
        let sample = PerturbSample {
            blur: BlurSample::Motion {
                width: 5,
                angle: 0.7,
            },
            ..PerturbSample::identity()
        };
        let out = apply_channel_with(&img, &sample).unwrap();
        for (y, x) in (4..12).flat_map(|y| (4..12).map(move |x| (y, x))) {
            assert!((out.at(&[0, y, x, 0]) - 0.6).abs() < 1e-5);
        }

        // Horizontal width-3 kernel averages three columns.
        let kern = blur_kernel(
            &BlurSample::Motion {
                width: 3,
                angle: 0.0,
            },
            5,
        )
        .unwrap();
        let t = 1.0 / 3.0;
        let expect: Vec<f64> = vec![
            0.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, t, t, t, 0.0, //
            0.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 0.0,
        ];
        for (a, e) in kern.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "kernel {:?}", kern);
        }
    }

    #[test]
    fn defocus_kernel_matches_gaussian_formula() {
        let sigma = 2.0;
        let k = 2 * (3.0f64 * sigma).ceil() as usize + 1;
        let kern = blur_kernel(&BlurSample::Defocus { sigma }, k).unwrap();
        let r = (k / 2) as isize;
        let mut direct = vec![0.0f64; k * k];
        let mut sum = 0.0;
        for i in 0..k {
            for j in 0..k {
                let dy = (i as isize - r) as f64;
                let dx = (j as isize - r) as f64;
                let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                direct[i * k + j] = v;
                sum += v;
            }
        }
        for v in &mut direct {
            *v /= sum;
        }
        let total: f64 = kern.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (a, e) in kern.iter().zip(&direct) {
            assert!((a - e).abs() < 1e-6);
        }
    }

    #[test]
    fn color_transform_cases() {
        // Identity parameters change nothing.
        let img = test_image(16, 16, 5);
        let out = apply_channel_with(&img, &PerturbSample::identity()).unwrap();
        assert_eq!(out.data(), img.data());

        // Full desaturation of pure red lands on 601 luma.
        let red = Tensor::<f32>::from_vec(
            &[1, 8, 8, 3],
            (0..64).flat_map(|_| [1.0f32, 0.0, 0.0]).collect(),
        )
        .unwrap();
        let sample = PerturbSample {
            desaturation: 1.0,
            ..PerturbSample::identity()
        };
        let out = apply_channel_with(&red, &sample).unwrap();
        for c in 0..3 {
            assert!((out.at(&[0, 4, 4, c]) - 0.299).abs() < 1e-6);
        }

        // Contrast 2 on 0.8 clips to 1.
        let v = Tensor::<f32>::filled(&[1, 8, 8, 3], 0.8);
        let sample = PerturbSample {
            contrast: 2.0,
            ..PerturbSample::identity()
        };
        let out = apply_channel_with(&v, &sample).unwrap();
        assert_eq!(out.at(&[0, 4, 4, 0]), 1.0);
    }

    #[test]
    fn noise_stage_statistics_and_range() {
        // Field statistics before clipping.
        let sample = PerturbSample {
            noise_sigma: 0.1,
            noise_key: 1234,
            ..PerturbSample::identity()
        };
        let mut rng = stage_rng(sample.noise_key, 0, STAGE_NOISE);
        let n = 256 * 256;
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for _ in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = z * sample.noise_sigma;
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((0.095..=0.105).contains(&std), "std {}", std);

        // Output clipped to [0, 1].
        let img = test_image(32, 32, 6);
        let out = apply_channel_with(&img, &sample).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Sigma 0 is the identity.
        let out = apply_channel_with(&img, &PerturbSample::identity()).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn jpeg_quality_100_stays_close() {
        let img = test_image(64, 64, 8);
        let sample = PerturbSample {
            jpeg_quality: Some(100.0),
            ..PerturbSample::identity()
        };
        let out = apply_channel_with(&img, &sample).unwrap();
        let mae: f64 = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>()
            / out.numel() as f64;
        assert!(mae < 1e-2, "quality-100 MAE {}", mae);
    }

    #[test]
    fn jpeg_gradient_flows_to_input() {
        use crate::ndgrad::gradcheck::{check_gradient, spread_indices, Target};
        let img = test_image(16, 16, 9).cast::<f64>();
        let sample = PerturbSample {
            jpeg_quality: Some(60.0),
            ..PerturbSample::identity()
        };
        let mut b = GraphBuilder::<f64>::new();
        let image = b.input("image", &[1, 16, 16, 3]).unwrap();
        let nodes = build_channel(&mut b, image, 1, "chan").unwrap();
        let loss = b.mean_all(nodes.output);
        let graph = b.finish();
        let mut exec = Executor::new(std::sync::Arc::clone(&graph));
        exec.want_input_grads(&["image"]);
        exec.set_input("image", &img).unwrap();
        fill_channel_inputs(&mut exec, &nodes, std::slice::from_ref(&sample)).unwrap();
        exec.forward(&ParamStore::new()).unwrap();
        exec.backward(loss).unwrap();
        let g = exec.input_grad("image").unwrap();
        let nonzero = g.data().iter().filter(|v| **v != 0.0).count();
        assert!(
            nonzero * 10 >= g.numel() * 9,
            "gradient should be nonzero a.e.: {}/{}",
            nonzero,
            g.numel()
        );

        // The single-image pipeline gradient also matches finite differences.
        let inputs_snapshot: Vec<(String, Tensor<f64>)> = graph
            .input_names()
            .map(|n| (n.to_string(), exec.input_value(n).unwrap().clone()))
            .collect();
        let inputs_ref: Vec<(&str, Tensor<f64>)> = inputs_snapshot
            .iter()
            .map(|(n, t)| (n.as_str(), t.clone()))
            .collect();
        let rep = check_gradient(
            &graph,
            &ParamStore::new(),
            &inputs_ref,
            loss,
            Target::Input("image"),
            &spread_indices(img.numel(), 16),
            1e-6,
        )
        .unwrap();
        assert!(rep.rel_err < 1e-4, "jpeg chain fd rel err {}", rep.rel_err);
    }

    #[test]
    fn strength_one_draws_stay_in_paper_ranges() {
        let cfg = ChannelConfig {
            rng_seed: 5,
            ..ChannelConfig::with_strength(1.0)
        };
        for i in 0..1000 {
            let s = sample_perturb(&cfg, i, 64, 64).unwrap();
            for c in s.corner_shift.iter().flatten() {
                assert!(c.abs() <= 0.10 * 64.0 + 1e-9);
            }
            match s.blur {
                BlurSample::Identity => {}
                BlurSample::Motion { width, .. } => assert!((3..=7).contains(&width)),
                BlurSample::Defocus { sigma } => assert!((1.0..=3.0).contains(&sigma)),
            }
            for h in s.hue {
                assert!(h.abs() <= 0.1 + 1e-9);
            }
            assert!((0.0..=1.0).contains(&s.desaturation));
            assert!((0.5..=1.5).contains(&s.contrast));
            assert!(s.brightness.abs() <= 0.3 + 1e-9);
            assert!((0.0..=0.2).contains(&s.noise_sigma));
            let q = s.jpeg_quality.unwrap();
            assert!((50.0..=100.0).contains(&q));
        }
    }

    #[test]
    fn quant_tables_scale_with_quality() {
        let (l100, _) = quant_divisors(100.0);
        assert!(l100.iter().all(|&v| (v - 1.0 / 255.0).abs() < 1e-12));
        let (l50, c50) = quant_divisors(50.0);
        assert!((l50[0] - 16.0 / 255.0).abs() < 1e-12);
        assert!((c50[0] - 17.0 / 255.0).abs() < 1e-12);
        let (l10, _) = quant_divisors(10.0);
        assert!(l10[63] > l50[63], "lower quality divides harder");
    }

    #[test]
    fn config_validation() {
        assert!(ChannelConfig::with_strength(2.5).validate().is_err());
        assert!(ChannelConfig::with_strength(1.0).validate().is_ok());
        let cfg = ChannelConfig {
            jpeg_quality: (50.0, 120.0),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ChannelConfig {
            desaturation: (0.0, 1.5),
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
