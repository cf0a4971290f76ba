//! Loss assembly, ramp schedules, critic interleaving, and the Adam loop.
//!
//! One coordinator thread owns the parameters and optimizer state. Every
//! random draw is keyed by (seed, purpose, step), so a run is a pure function
//! of its config and resuming from a saved state reproduces the remaining
//! trajectory bit-exactly.

use std::collections::BTreeMap;
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    build_channel, fill_channel_inputs, sample_perturb, AxisStrengths, ChannelConfig,
    ChannelNodes, PerturbSample,
};
use crate::error::{Error, Result};
use crate::imgio;
use crate::ndgrad::{
    Executor, GraphBuilder, NodeRef, ParamStore, Tensor, TensorArchive,
};
use crate::nets::{
    build_critic, build_decoder, build_encoder, save_checkpoint, NetConfig, CRITIC_PREFIX,
    ENCDEC_PREFIXES,
};

/// Loss term weights (Eq. form: `L = l_R L_R + l_P L_P + l_C L_C + l_M L_M`).
///
/// `lambda_r` and `lambda_c` here are the ramp targets; the schedule produces
/// the per-step values. `lambda_p` is a hook for a perceptual term and must
/// stay 0 in this artifact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_p: f64,
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub edge_weight_max: f64,
    pub edge_band_frac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_r: 2.0,
            lambda_p: 0.0,
            lambda_c: 0.1,
            lambda_m: 1.0,
            edge_weight_max: 3.0,
            edge_band_frac: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_m <= 0.0 {
            return Err(Error::Config("lambda_m must be positive".into()));
        }
        if self.lambda_p != 0.0 {
            return Err(Error::Config(
                "lambda_p must be 0: the perceptual term is a hook without a backing network"
                    .into(),
            ));
        }
        if self.lambda_r < 0.0 || self.lambda_c < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.edge_weight_max < 1.0 {
            return Err(Error::Config("edge_weight_max must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&self.edge_band_frac) {
            return Err(Error::Config("edge_band_frac must be in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Per-pixel weight map: 1 in the interior, rising to `max_w` at the border
/// along a half-cosine over a band of `band_frac * side` pixels.
pub fn edge_weight_map(side: usize, max_w: f64, band_frac: f64) -> Vec<f64> {
    let band = (band_frac * side as f64).max(1e-9);
    let profile = |d: f64| {
        if d >= band {
            0.0
        } else {
            (std::f64::consts::PI * d / (2.0 * band)).cos()
        }
    };
    let mut map = vec![0.0f64; side * side];
    for y in 0..side {
        let dy = y.min(side - 1 - y) as f64;
        for x in 0..side {
            let dx = x.min(side - 1 - x) as f64;
            let p = profile(dx).max(profile(dy));
            map[y * side + x] = 1.0 + (max_w - 1.0) * p;
        }
    }
    map
}

/// Mean of `w(x,y) * r(x,y)^2` over a `[N,side,side,C]` residual.
pub fn edge_weighted_l2(residual: &Tensor<f32>, max_w: f64, band_frac: f64) -> Result<f64> {
    let s = residual.shape();
    if s.len() != 4 || s[1] != s[2] {
        return Err(Error::Config(format!(
            "edge_weighted_l2 expects [N,side,side,C], got {:?}",
            s
        )));
    }
    let side = s[1];
    let c = s[3];
    let map = edge_weight_map(side, max_w, band_frac);
    let mut sum = 0.0f64;
    for n in 0..s[0] {
        for y in 0..side {
            for x in 0..side {
                let w = map[y * side + x];
                for ch in 0..c {
                    let v = residual.data()[(((n * side) + y) * side + x) * c + ch] as f64;
                    sum += w * v * v;
                }
            }
        }
    }
    Ok(sum / residual.numel() as f64)
}

/// Piecewise-linear ramp, clamped outside [start_step, end_step].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub start_step: usize,
    pub end_step: usize,
    pub start_value: f64,
    pub end_value: f64,
}

impl Ramp {
    pub fn constant(v: f64) -> Self {
        Ramp {
            start_step: 0,
            end_step: 0,
            start_value: v,
            end_value: v,
        }
    }

    pub fn value_at(&self, step: usize) -> f64 {
        if step <= self.start_step || self.end_step <= self.start_step {
            return if step >= self.end_step {
                self.end_value
            } else {
                self.start_value
            };
        }
        if step >= self.end_step {
            return self.end_value;
        }
        let t = (step - self.start_step) as f64 / (self.end_step - self.start_step) as f64;
        self.start_value + t * (self.end_value - self.start_value)
    }

    /// Progress in [0, 1] between start and end.
    fn normalized_at(&self, step: usize) -> f64 {
        if self.end_step <= self.start_step {
            return if step >= self.end_step { 1.0 } else { 0.0 };
        }
        ((step.max(self.start_step) - self.start_step) as f64
            / (self.end_step - self.start_step) as f64)
            .min(1.0)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.end_step < self.start_step {
            return Err(Error::Config(format!(
                "{} ramp ends ({}) before it starts ({})",
                name, self.end_step, self.start_step
            )));
        }
        if !self.start_value.is_finite() || !self.end_value.is_finite() {
            return Err(Error::Config(format!("{} ramp has non-finite values", name)));
        }
        Ok(())
    }
}

/// Per-quantity ramps. Perturbation strengths ramp on absolute steps and all
/// start from zero; the loss-weight ramps are relative to the step at which
/// the decoder EMA accuracy first exceeds `ramp_trigger_acc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Schedule {
    pub ramp_trigger_acc: f64,
    /// Relative to the trigger step; values are the absolute lambda weights.
    pub lambda_r: Ramp,
    pub lambda_c: Ramp,
    pub warp: Ramp,
    pub motion_blur: Ramp,
    pub defocus_blur: Ramp,
    pub color: Ramp,
    pub noise: Ramp,
    pub jpeg: Ramp,
}

impl Default for Schedule {
    fn default() -> Self {
        let w = LossWeights::default();
        Schedule {
            ramp_trigger_acc: 0.90,
            lambda_r: Ramp {
                start_step: 0,
                end_step: 1500,
                start_value: 0.0,
                end_value: w.lambda_r,
            },
            lambda_c: Ramp {
                start_step: 0,
                end_step: 1500,
                start_value: 0.0,
                end_value: w.lambda_c,
            },
            warp: Ramp {
                start_step: 400,
                end_step: 4400,
                start_value: 0.0,
                end_value: 1.0,
            },
            motion_blur: Ramp {
                start_step: 400,
                end_step: 2400,
                start_value: 0.0,
                end_value: 1.0,
            },
            defocus_blur: Ramp {
                start_step: 400,
                end_step: 2400,
                start_value: 0.0,
                end_value: 1.0,
            },
            color: Ramp {
                start_step: 400,
                end_step: 2400,
                start_value: 0.0,
                end_value: 1.0,
            },
            noise: Ramp {
                start_step: 400,
                end_step: 2400,
                start_value: 0.0,
                end_value: 1.0,
            },
            jpeg: Ramp {
                start_step: 400,
                end_step: 2400,
                start_value: 0.0,
                end_value: 1.0,
            },
        }
    }
}

impl Schedule {
    fn strength_ramps(&self) -> [(&'static str, &Ramp); 6] {
        [
            ("warp", &self.warp),
            ("motion_blur", &self.motion_blur),
            ("defocus_blur", &self.defocus_blur),
            ("color", &self.color),
            ("noise", &self.noise),
            ("jpeg", &self.jpeg),
        ]
    }

    pub fn strengths_at(&self, step: usize) -> AxisStrengths {
        AxisStrengths {
            warp: self.warp.value_at(step),
            motion_blur: self.motion_blur.value_at(step),
            defocus_blur: self.defocus_blur.value_at(step),
            color: self.color.value_at(step),
            noise: self.noise.value_at(step),
            jpeg: self.jpeg.value_at(step),
        }
    }

    /// End values of the strength ramps (used to size blur kernels).
    pub fn max_strengths(&self) -> AxisStrengths {
        AxisStrengths {
            warp: self.warp.end_value.max(self.warp.start_value),
            motion_blur: self.motion_blur.end_value.max(self.motion_blur.start_value),
            defocus_blur: self
                .defocus_blur
                .end_value
                .max(self.defocus_blur.start_value),
            color: self.color.end_value.max(self.color.start_value),
            noise: self.noise.end_value.max(self.noise.start_value),
            jpeg: self.jpeg.end_value.max(self.jpeg.start_value),
        }
    }

    /// Loss weights at `step` given the trigger step (None while the decoder
    /// has not yet reached the trigger accuracy): image losses stay at zero
    /// until the trigger fires.
    pub fn lambdas_at(&self, step: usize, trigger_step: Option<usize>) -> (f64, f64) {
        match trigger_step {
            None => (0.0, 0.0),
            Some(t0) => {
                let rel = step.saturating_sub(t0);
                (self.lambda_r.value_at(rel), self.lambda_c.value_at(rel))
            }
        }
    }

    /// Zeroes the axes outside the training subset.
    pub fn apply_subset(&mut self, subset: Subset) {
        let keep = subset.axes();
        let zero = Ramp::constant(0.0);
        if !keep.warp {
            self.warp = zero;
        }
        if !keep.motion_blur {
            self.motion_blur = zero;
        }
        if !keep.defocus_blur {
            self.defocus_blur = zero;
        }
        if !keep.color {
            self.color = zero;
        }
        if !keep.noise {
            self.noise = zero;
        }
        if !keep.jpeg {
            self.jpeg = zero;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.ramp_trigger_acc) {
            return Err(Error::Config("ramp_trigger_acc must be in [0, 1)".into()));
        }
        self.lambda_r.validate("lambda_r")?;
        self.lambda_c.validate("lambda_c")?;
        let mut max_end = 0;
        for (name, r) in self.strength_ramps() {
            r.validate(name)?;
            if r.start_value != 0.0 {
                return Err(Error::Config(format!(
                    "{} strength ramp must start at 0 (got {})",
                    name, r.start_value
                )));
            }
            if !(0.0..=2.0).contains(&r.end_value) {
                return Err(Error::Config(format!(
                    "{} strength ramp end {} outside [0, 2]",
                    name, r.end_value
                )));
            }
            max_end = max_end.max(r.end_step);
        }
        if self.warp.end_value > 0.0 && self.warp.end_step < max_end {
            return Err(Error::Config(
                "perspective ramp must have the largest end_step".into(),
            ));
        }
        // During ramp-up the perspective strength may not outpace any other
        // active axis (normalized progress comparison).
        for step in 0..=max_end {
            let wn = self.warp.normalized_at(step);
            for (name, r) in self.strength_ramps() {
                if name == "warp" || r.end_value == 0.0 {
                    continue;
                }
                if self.warp.end_value > 0.0 && wn > r.normalized_at(step) + 1e-9 {
                    return Err(Error::Config(format!(
                        "perspective ramps faster than {} at step {}",
                        name, step
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Training perturbation subsets matching the ablation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    None,
    Pixelwise,
    Spatial,
    All,
}

pub(crate) struct SubsetAxes {
    pub warp: bool,
    pub motion_blur: bool,
    pub defocus_blur: bool,
    pub color: bool,
    pub noise: bool,
    pub jpeg: bool,
}

impl Subset {
    pub(crate) fn axes(self) -> SubsetAxes {
        // Pixelwise: noise, color, JPEG. Spatial: warp and blur.
        match self {
            Subset::None => SubsetAxes {
                warp: false,
                motion_blur: false,
                defocus_blur: false,
                color: false,
                noise: false,
                jpeg: false,
            },
            Subset::Pixelwise => SubsetAxes {
                warp: false,
                motion_blur: false,
                defocus_blur: false,
                color: true,
                noise: true,
                jpeg: true,
            },
            Subset::Spatial => SubsetAxes {
                warp: true,
                motion_blur: true,
                defocus_blur: true,
                color: false,
                noise: false,
                jpeg: false,
            },
            Subset::All => SubsetAxes {
                warp: true,
                motion_blur: true,
                defocus_blur: true,
                color: true,
                noise: true,
                jpeg: true,
            },
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Subset::None),
            "pixelwise" => Ok(Subset::Pixelwise),
            "spatial" => Ok(Subset::Spatial),
            "all" => Ok(Subset::All),
            other => Err(Error::Config(format!(
                "unknown subset '{}' (expected none|pixelwise|spatial|all)",
                other
            ))),
        }
    }
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Subset::None => "none",
            Subset::Pixelwise => "pixelwise",
            Subset::Spatial => "spatial",
            Subset::All => "all",
        };
        write!(f, "{}", s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub channel: ChannelConfig,
    pub weights: LossWeights,
    pub schedule: Schedule,
    pub subset: Subset,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    /// Critic updates interleaved per encoder/decoder step.
    pub critic_steps: usize,
    /// Wasserstein weight-clip bound.
    pub critic_clip: f64,
    pub checkpoint_every: usize,
    /// Minimum images required in the training folder.
    pub min_images: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            channel: ChannelConfig::default(),
            weights: LossWeights::default(),
            schedule: Schedule::default(),
            subset: Subset::All,
            steps: 20_000,
            batch_size: 4,
            learning_rate: 1e-4,
            critic_learning_rate: 1e-4,
            critic_steps: 1,
            critic_clip: 0.01,
            checkpoint_every: 1000,
            min_images: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Applies the subset to the schedule and validates everything.
    pub fn resolved(&self) -> Result<TrainConfig> {
        let mut cfg = self.clone();
        cfg.schedule.apply_subset(cfg.subset);
        cfg.net.validate()?;
        cfg.channel.validate()?;
        cfg.weights.validate()?;
        cfg.schedule.validate()?;
        if cfg.batch_size == 0 || cfg.steps == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if cfg.critic_clip <= 0.0 {
            return Err(Error::Config("critic_clip must be positive".into()));
        }
        Ok(cfg)
    }

    /// Channel config used to size the training graph's blur kernel.
    fn channel_at_max(&self) -> ChannelConfig {
        ChannelConfig {
            axis_strengths: Some(self.schedule.max_strengths()),
            rng_seed: self.seed,
            ..self.channel.clone()
        }
    }
}

// --- Adam ---

/// Adam with per-parameter moments; updates only names accepted by `filter`.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor<f32>>,
    v: BTreeMap<String, Tensor<f32>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step<'a>(
        &mut self,
        params: &mut ParamStore<f32>,
        grad_of: impl Fn(&str) -> Option<&'a Tensor<f32>>,
        filter: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f32).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f32).powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let lr = self.lr as f32;
        let eps = self.eps as f32;
        for (name, p) in params.iter_mut() {
            if !filter(name) {
                continue;
            }
            let Some(g) = grad_of(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    fn export_into(&self, archive: &mut TensorArchive, prefix: &str) {
        for (name, t) in &self.m {
            archive.insert(&format!("{}m/{}", prefix, name), t.clone());
        }
        for (name, t) in &self.v {
            archive.insert(&format!("{}v/{}", prefix, name), t.clone());
        }
    }

    fn import_from(&mut self, archive: &TensorArchive, prefix: &str) {
        self.m.clear();
        self.v.clear();
        let mp = format!("{}m/", prefix);
        let vp = format!("{}v/", prefix);
        for (name, t) in &archive.tensors {
            if let Some(rest) = name.strip_prefix(&mp) {
                self.m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix(&vp) {
                self.v.insert(rest.to_string(), t.clone());
            }
        }
    }
}

// --- dataset ---

/// Loads every readable image in `dir`, center-cropped and resized to
/// `side x side`. Undecodable files are a startup error listing the
/// offenders; fewer than `min_images` images is a startup error too.
pub fn load_dataset(dir: &Path, side: usize, min_images: usize) -> Result<Vec<Tensor<f32>>> {
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "dataset path {} is not a directory",
            dir.display()
        )));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    let mut bad = Vec::new();
    for p in &paths {
        match imgio::load_image_rgb(p).and_then(|t| imgio::center_crop_resize(&t, side)) {
            Ok(t) => images.push(t),
            Err(_) => bad.push(p.display().to_string()),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Data(format!(
            "undecodable images in {}: {}",
            dir.display(),
            bad.join(", ")
        )));
    }
    if images.len() < min_images {
        return Err(Error::Data(format!(
            "dataset {} holds {} images, need at least {}",
            dir.display(),
            images.len(),
            min_images
        )));
    }
    Ok(images)
}

// --- graphs ---

struct MainGraph {
    exec: Executor<f32>,
    chan: ChannelNodes,
    stego: NodeRef,
    residual: NodeRef,
    logits: NodeRef,
    loss_r: NodeRef,
    loss_c: NodeRef,
    loss_m: NodeRef,
    total: NodeRef,
}

fn build_main_graph(cfg: &TrainConfig) -> Result<MainGraph> {
    let side = cfg.net.image_side;
    let n = cfg.batch_size;
    let mut b = GraphBuilder::<f32>::new();
    let image = b.input("image", &[n, side, side, 3])?;
    let bits = b.input("bits", &[n, cfg.net.message_bits])?;
    let lambda_r = b.input("lambda_r", &[1])?;
    let lambda_c = b.input("lambda_c", &[1])?;
    let lambda_m = b.input("lambda_m", &[1])?;

    let enc = build_encoder(&mut b, &cfg.net, image, bits)?;
    let kmax = cfg.channel_at_max().max_blur_kernel();
    let chan = build_channel(&mut b, enc.stego, kmax, "chan")?;
    let dec = build_decoder(&mut b, &cfg.net, chan.output)?;
    let score = build_critic(&mut b, &cfg.net, enc.stego)?;

    // Edge-weighted residual penalty.
    let map = edge_weight_map(side, cfg.weights.edge_weight_max, cfg.weights.edge_band_frac);
    let mut wtile = Tensor::<f32>::zeros(&[n, side, side, 3]);
    for ni in 0..n {
        for (pix, &wv) in map.iter().enumerate() {
            for c in 0..3 {
                wtile.data_mut()[(ni * side * side + pix) * 3 + c] = wv as f32;
            }
        }
    }
    let wconst = b.constant(wtile);
    let r2 = b.mul(enc.residual, enc.residual)?;
    let wr2 = b.mul(r2, wconst)?;
    let loss_r = b.mean_all(wr2);

    let mean_score = b.mean_all(score);
    let loss_c = b.mul_const(mean_score, -1.0);
    let loss_m = b.bce_with_logits(dec.logits, bits)?;

    let tr = b.scale_by(loss_r, lambda_r)?;
    let tc = b.scale_by(loss_c, lambda_c)?;
    let tm = b.scale_by(loss_m, lambda_m)?;
    let t1 = b.add(tr, tc)?;
    let total = b.add(t1, tm)?;

    let exec = Executor::new(b.finish());
    Ok(MainGraph {
        exec,
        chan,
        stego: enc.stego,
        residual: enc.residual,
        logits: dec.logits,
        loss_r,
        loss_c,
        loss_m,
        total,
    })
}

struct CriticGraph {
    exec: Executor<f32>,
    loss: NodeRef,
    gap: NodeRef,
}

/// Critic objective: minimize `mean score(fake) - mean score(real)`;
/// the two towers share weights.
fn build_critic_graph(cfg: &TrainConfig) -> Result<CriticGraph> {
    let side = cfg.net.image_side;
    let n = cfg.batch_size;
    let mut b = GraphBuilder::<f32>::new();
    let real = b.input("real", &[n, side, side, 3])?;
    let fake = b.input("fake", &[n, side, side, 3])?;
    let score_real = build_critic(&mut b, &cfg.net, real)?;
    let score_fake = build_critic(&mut b, &cfg.net, fake)?;
    let mean_real = b.mean_all(score_real);
    let mean_fake = b.mean_all(score_fake);
    let loss = b.sub(mean_fake, mean_real)?;
    let gap = b.sub(mean_real, mean_fake)?;
    let exec = Executor::new(b.finish());
    Ok(CriticGraph { exec, loss, gap })
}

// --- keyed RNG streams ---

const TAG_BATCH: u64 = 1;
const TAG_BITS: u64 = 2;

fn keyed_rng(seed: u64, tag: u64, step: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&step.to_le_bytes());
    key[24..].copy_from_slice(b"stgtrain");
    ChaCha8Rng::from_seed(key)
}

// --- training state ---

const STATE_KIND: &str = "stegachan-train-state";

struct TrainState {
    params: ParamStore<f32>,
    encdec: Adam,
    critic: Adam,
    step: usize,
    ema_acc: f64,
    trigger_step: Option<usize>,
}

impl TrainState {
    fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": STATE_KIND,
            "step": self.step,
            "ema_acc": self.ema_acc,
            "trigger_step": self.trigger_step,
            "encdec_t": self.encdec.t,
            "critic_t": self.critic.t,
        });
        let mut archive = TensorArchive::new(header);
        for (name, t) in self.params.iter() {
            archive.insert(&format!("p/{}", name), t.clone());
        }
        self.encdec.export_into(&mut archive, "a/");
        self.critic.export_into(&mut archive, "c/");
        archive.save(path)
    }

    fn load(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
        let archive = TensorArchive::load(path)?;
        if archive.header["kind"] != STATE_KIND {
            return Err(Error::Data("not a training state archive".into()));
        }
        let mut params = ParamStore::new();
        for (name, t) in &archive.tensors {
            if let Some(rest) = name.strip_prefix("p/") {
                params.insert(rest, t.clone());
            }
        }
        let mut encdec = Adam::new(cfg.learning_rate);
        encdec.t = archive.header["encdec_t"].as_u64().unwrap_or(0);
        encdec.import_from(&archive, "a/");
        let mut critic = Adam::new(cfg.critic_learning_rate);
        critic.t = archive.header["critic_t"].as_u64().unwrap_or(0);
        critic.import_from(&archive, "c/");
        Ok(TrainState {
            params,
            encdec,
            critic,
            step: archive.header["step"].as_u64().unwrap_or(0) as usize,
            ema_acc: archive.header["ema_acc"].as_f64().unwrap_or(0.5),
            trigger_step: archive.header["trigger_step"].as_u64().map(|v| v as usize),
        })
    }
}

/// One CSV row per step.
pub const METRICS_HEADER: &str = "step,loss_r,loss_c,loss_m,bit_acc,bit_acc_ema,mean_abs_residual,lambda_r,lambda_c,lambda_m,s_warp,s_motion_blur,s_defocus_blur,s_color,s_noise,s_jpeg";

pub struct TrainOutcome {
    pub steps: usize,
    pub final_ema_acc: f64,
    pub final_checkpoint: PathBuf,
    pub state_path: PathBuf,
    pub metrics_csv: PathBuf,
}

const EMA_DECAY: f64 = 0.98;

/// Runs the optimization loop: per step, one encoder/decoder update through
/// the corruption pipeline followed by `critic_steps` interleaved critic
/// updates with weight clipping. Emits a per-step metrics CSV, periodic
/// checkpoints, and a resumable state file.
pub fn train_loop(
    cfg: &TrainConfig,
    dataset_dir: &Path,
    out_dir: &Path,
    resume_state: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = cfg.resolved()?;
    let images = load_dataset(dataset_dir, cfg.net.image_side, cfg.min_images)?;
    std::fs::create_dir_all(out_dir)?;

    let mut state = match resume_state {
        Some(p) => TrainState::load(p, &cfg)?,
        None => TrainState {
            params: crate::nets::init_params(&cfg.net, cfg.seed)?,
            encdec: Adam::new(cfg.learning_rate),
            critic: Adam::new(cfg.critic_learning_rate),
            step: 0,
            ema_acc: 0.5,
            trigger_step: None,
        },
    };

    let mut main = build_main_graph(&cfg)?;
    let mut critic = build_critic_graph(&cfg)?;
    let side = cfg.net.image_side;
    let n = cfg.batch_size;
    let m = cfg.net.message_bits;

    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics: Box<dyn IoWrite> = if state.step == 0 {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "# stegachan-train-metrics v1")?;
        writeln!(f, "{}", METRICS_HEADER)?;
        Box::new(std::io::BufWriter::new(f))
    } else {
        Box::new(std::io::BufWriter::new(
            std::fs::OpenOptions::new().append(true).open(&metrics_path)?,
        ))
    };

    let mut image_batch = Tensor::<f32>::zeros(&[n, side, side, 3]);
    let mut bits_batch = Tensor::<f32>::zeros(&[n, m]);
    let mut bit_targets = vec![0u8; n * m];
    let mut samples: Vec<PerturbSample> = Vec::with_capacity(n);

    let start = state.step;
    for step in start..cfg.steps {
        let strengths = cfg.schedule.strengths_at(step);
        let (lam_r, lam_c) = cfg.schedule.lambdas_at(step, state.trigger_step);
        let lam_m = cfg.weights.lambda_m;

        // Batch selection and message draw, both keyed by step.
        let mut brng = keyed_rng(cfg.seed, TAG_BATCH, step as u64);
        for i in 0..n {
            let idx = brng.gen_range(0..images.len());
            let src = images[idx].data();
            image_batch.data_mut()[i * side * side * 3..(i + 1) * side * side * 3]
                .copy_from_slice(src);
        }
        let mut mrng = keyed_rng(cfg.seed, TAG_BITS, step as u64);
        for i in 0..n * m {
            let bit = mrng.gen_range(0..2u8);
            bit_targets[i] = bit;
            bits_batch.data_mut()[i] = bit as f32;
        }

        // Per-image channel samples at the scheduled strengths.
        let chan_cfg = ChannelConfig {
            axis_strengths: Some(strengths),
            rng_seed: cfg.seed,
            ..cfg.channel.clone()
        };
        samples.clear();
        for i in 0..n {
            samples.push(sample_perturb(
                &chan_cfg,
                (step * n + i) as u64,
                side,
                side,
            )?);
        }

        main.exec.set_input("image", &image_batch)?;
        main.exec.set_input("bits", &bits_batch)?;
        main.exec.set_input("lambda_r", &Tensor::scalar(lam_r as f32))?;
        main.exec.set_input("lambda_c", &Tensor::scalar(lam_c as f32))?;
        main.exec.set_input("lambda_m", &Tensor::scalar(lam_m as f32))?;
        fill_channel_inputs(&mut main.exec, &main.chan, &samples)?;
        main.exec.forward(&state.params)?;

        let l_r = main.exec.value(main.loss_r).data()[0] as f64;
        let l_c = main.exec.value(main.loss_c).data()[0] as f64;
        let l_m = main.exec.value(main.loss_m).data()[0] as f64;
        for (name, v) in [("residual", l_r), ("critic", l_c), ("message", l_m)] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} loss became non-finite at step {}",
                    name, step
                )));
            }
        }

        let logits = main.exec.value(main.logits).data().to_vec();
        let stego = main.exec.value(main.stego).clone();
        let mean_abs_residual = main.exec.value(main.residual).mean_abs() as f64;

        main.exec.backward(main.total)?;
        {
            let exec = &main.exec;
            state.encdec.step(
                &mut state.params,
                |name| exec.param_grad(name),
                |name| ENCDEC_PREFIXES.iter().any(|p| name.starts_with(p)),
            );
        }

        // Interleaved critic updates on the detached stego batch.
        for _ in 0..cfg.critic_steps {
            critic.exec.set_input("real", &image_batch)?;
            critic.exec.set_input("fake", &stego)?;
            critic.exec.forward(&state.params)?;
            critic.exec.backward(critic.loss)?;
            {
                let exec = &critic.exec;
                state.critic.step(
                    &mut state.params,
                    |name| exec.param_grad(name),
                    |name| name.starts_with(CRITIC_PREFIX),
                );
            }
            let clip = cfg.critic_clip as f32;
            for (name, p) in state.params.iter_mut() {
                if name.starts_with(CRITIC_PREFIX) {
                    for v in p.data_mut() {
                        *v = v.clamp(-clip, clip);
                    }
                }
            }
        }

        // Post-channel training accuracy and its EMA drive the loss trigger.
        let mut correct = 0usize;
        for (i, &z) in logits.iter().enumerate() {
            if (z > 0.0) == (bit_targets[i] != 0) {
                correct += 1;
            }
        }
        let acc = correct as f64 / logits.len() as f64;
        state.ema_acc = EMA_DECAY * state.ema_acc + (1.0 - EMA_DECAY) * acc;
        if state.trigger_step.is_none() && state.ema_acc > cfg.schedule.ramp_trigger_acc {
            state.trigger_step = Some(step);
        }

        writeln!(
            metrics,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            step,
            l_r,
            l_c,
            l_m,
            acc,
            state.ema_acc,
            mean_abs_residual,
            lam_r,
            lam_c,
            lam_m,
            strengths.warp,
            strengths.motion_blur,
            strengths.defocus_blur,
            strengths.color,
            strengths.noise,
            strengths.jpeg
        )?;

        state.step = step + 1;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            save_checkpoint(
                &out_dir.join(format!("checkpoint_{:06}.ckpt", state.step)),
                &cfg.net,
                &state.params,
                state.step,
            )?;
            metrics.flush()?;
            state.save(&out_dir.join("train_state.bin"))?;
        }
    }
    metrics.flush()?;

    let final_checkpoint = out_dir.join("checkpoint_final.ckpt");
    save_checkpoint(&final_checkpoint, &cfg.net, &state.params, state.step)?;
    let state_path = out_dir.join("train_state.bin");
    state.save(&state_path)?;

    Ok(TrainOutcome {
        steps: state.step,
        final_ema_acc: state.ema_acc,
        final_checkpoint,
        state_path,
        metrics_csv: metrics_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_interpolates_and_clamps() {
        let r = Ramp {
            start_step: 100,
            end_step: 200,
            start_value: 0.0,
            end_value: 2.0,
        };
        assert_eq!(r.value_at(0), 0.0);
        assert_eq!(r.value_at(100), 0.0);
        assert_eq!(r.value_at(150), 1.0);
        assert_eq!(r.value_at(200), 2.0);
        assert_eq!(r.value_at(10_000), 2.0);
        let c = Ramp::constant(0.5);
        assert_eq!(c.value_at(0), 0.5);
        assert_eq!(c.value_at(999), 0.5);
    }

    #[test]
    fn schedule_defaults_validate_and_warp_is_slowest() {
        let s = Schedule::default();
        s.validate().unwrap();
        for step in [0, 500, 1000, 2000, 4000] {
            let st = s.strengths_at(step);
            let wn = s.warp.normalized_at(step);
            for other in [
                s.motion_blur.normalized_at(step),
                s.color.normalized_at(step),
                s.jpeg.normalized_at(step),
            ] {
                assert!(wn <= other + 1e-12, "warp outpaces another axis at {}", step);
            }
            assert!(st.warp <= 1.0 && st.jpeg <= 1.0);
        }
        // Strength ramps must start at zero.
        let mut bad = Schedule::default();
        bad.noise.start_value = 0.5;
        assert!(bad.validate().is_err());
        // Perspective must end last.
        let mut bad = Schedule::default();
        bad.warp.end_step = 1000;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lambda_ramps_wait_for_the_trigger() {
        let s = Schedule::default();
        assert_eq!(s.lambdas_at(5000, None), (0.0, 0.0));
        let (lr, lc) = s.lambdas_at(1000, Some(1000));
        assert_eq!((lr, lc), (0.0, 0.0), "ramp starts at the trigger step");
        let (lr, lc) = s.lambdas_at(1000 + 1500, Some(1000));
        assert!((lr - 2.0).abs() < 1e-12 && (lc - 0.1).abs() < 1e-12);
    }

    #[test]
    fn subsets_zero_the_right_axes() {
        let mut s = Schedule::default();
        s.apply_subset(Subset::Pixelwise);
        let st = s.strengths_at(10_000);
        assert_eq!(st.warp, 0.0);
        assert_eq!(st.motion_blur, 0.0);
        assert_eq!(st.defocus_blur, 0.0);
        assert!(st.color > 0.0 && st.noise > 0.0 && st.jpeg > 0.0);

        let mut s = Schedule::default();
        s.apply_subset(Subset::Spatial);
        let st = s.strengths_at(10_000);
        assert!(st.warp > 0.0 && st.motion_blur > 0.0 && st.defocus_blur > 0.0);
        assert_eq!(st.color, 0.0);
        assert_eq!(st.noise, 0.0);
        assert_eq!(st.jpeg, 0.0);
    }

    #[test]
    fn edge_weight_map_properties() {
        let side = 32;
        let map = edge_weight_map(side, 3.0, 0.1);
        // Border ring carries exactly the max weight; deep interior is 1.
        for i in 0..side {
            assert_eq!(map[i], 3.0);
            assert_eq!(map[(side - 1) * side + i], 3.0);
            assert_eq!(map[i * side], 3.0);
            assert_eq!(map[i * side + side - 1], 3.0);
        }
        assert_eq!(map[(side / 2) * side + side / 2], 1.0);
        // Symmetry under horizontal/vertical flips.
        for y in 0..side {
            for x in 0..side {
                assert_eq!(map[y * side + x], map[y * side + (side - 1 - x)]);
                assert_eq!(map[y * side + x], map[(side - 1 - y) * side + x]);
            }
        }
    }

    #[test]
    fn edge_weighted_l2_cases() {
        let side = 16;
        // max = 1 reduces to the plain mean square.
        let mut r = Tensor::<f32>::zeros(&[1, side, side, 3]);
        for (i, v) in r.data_mut().iter_mut().enumerate() {
            *v = ((i % 7) as f32 - 3.0) / 10.0;
        }
        let plain: f64 = r.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
            / r.numel() as f64;
        let got = edge_weighted_l2(&r, 1.0, 0.1).unwrap();
        assert!((got - plain).abs() < 1e-12);

        // Residual on the outermost ring only: exactly 3x the unweighted value.
        let mut ring = Tensor::<f32>::zeros(&[1, side, side, 3]);
        for y in 0..side {
            for x in 0..side {
                if y == 0 || y == side - 1 || x == 0 || x == side - 1 {
                    for c in 0..3 {
                        ring.data_mut()[(y * side + x) * 3 + c] = 0.25;
                    }
                }
            }
        }
        let unweighted: f64 = ring.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
            / ring.numel() as f64;
        let weighted = edge_weighted_l2(&ring, 3.0, 0.1).unwrap();
        assert!(
            (weighted - 3.0 * unweighted).abs() < 1e-12,
            "{} vs {}",
            weighted,
            3.0 * unweighted
        );
    }

    #[test]
    fn adam_moves_against_gradient_deterministically() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::from_vec(&[2], vec![1.0f32, -1.0]).unwrap());
        let grad = Tensor::from_vec(&[2], vec![0.5f32, -0.5]).unwrap();
        let mut opt = Adam::new(0.1);
        opt.step(&mut params, |_| Some(&grad), |_| true);
        let w = params.get("w").unwrap().data();
        assert!(w[0] < 1.0 && w[1] > -1.0);

        let mut params2 = ParamStore::new();
        params2.insert("w", Tensor::from_vec(&[2], vec![1.0f32, -1.0]).unwrap());
        let mut opt2 = Adam::new(0.1);
        opt2.step(&mut params2, |_| Some(&grad), |_| true);
        assert_eq!(params.get("w").unwrap().data(), params2.get("w").unwrap().data());
    }

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            lambda_p: 0.5,
            ..Default::default()
        };
        assert!(w.validate().is_err(), "perceptual hook must stay zero");
        let w = LossWeights {
            lambda_m: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
