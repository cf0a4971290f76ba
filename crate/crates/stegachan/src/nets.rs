//! Encoder, decoder, and critic network definitions.
//!
//! The encoder is a U-Net over the 6-channel concat of the cover image and
//! the preprocessed message plane; it emits an RGB residual that is added to
//! the cover and clipped. The decoder regresses an affine rectification with
//! a spatial-transformer front end, then predicts message logits from a conv
//! stack. The critic scores images for the Wasserstein objective.
//!
//! Channel widths follow the full-scale layer tables with every width halved
//! (base_channels 16 vs 32) and dense hidden width 128; all spatial shapes
//! derive from `NetConfig`, so any side divisible by 16 works.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{
    Executor, GraphBuilder, NodeRef, Padding, ParamStore, Scalar, Tensor, TensorArchive,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub image_side: usize,
    pub message_bits: usize,
    pub base_channels: usize,
    pub stn_enabled: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            image_side: 64,
            message_bits: 20,
            base_channels: 16,
            stn_enabled: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.image_side % 16 != 0 {
            return Err(Error::Config(format!(
                "image_side {} must be a positive multiple of 16",
                self.image_side
            )));
        }
        if self.message_bits == 0 {
            return Err(Error::Config("message_bits must be >= 1".into()));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels {} must be an even number >= 2",
                self.base_channels
            )));
        }
        Ok(())
    }

    /// Side of the coarse message plane (upsampled x8 to the image side).
    pub fn message_plane_side(&self) -> usize {
        self.image_side / 8
    }
}

pub struct EncoderNodes {
    pub message_plane: NodeRef,
    pub residual: NodeRef,
    pub stego: NodeRef,
}

pub struct DecoderNodes {
    pub theta: Option<NodeRef>,
    pub rectified: NodeRef,
    pub logits: NodeRef,
}

fn conv_block<F: Scalar>(
    b: &mut GraphBuilder<F>,
    x: NodeRef,
    name: &str,
    k: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    relu: bool,
) -> Result<NodeRef> {
    let w = b.param(&format!("{}.w", name), &[k, k, cin, cout])?;
    let bias = b.param(&format!("{}.b", name), &[cout])?;
    let c = b.conv2d(x, w, stride, Padding::Same)?;
    let cb = b.add_channel_bias(c, bias)?;
    Ok(if relu { b.relu(cb) } else { cb })
}

fn dense_block<F: Scalar>(
    b: &mut GraphBuilder<F>,
    x: NodeRef,
    name: &str,
    din: usize,
    dout: usize,
    relu: bool,
) -> Result<NodeRef> {
    let w = b.param(&format!("{}.w", name), &[din, dout])?;
    let bias = b.param(&format!("{}.b", name), &[dout])?;
    let d = b.dense(x, w, bias)?;
    Ok(if relu { b.relu(d) } else { d })
}

/// Message preprocessing: dense layer to a coarse (side/8)^2 x 3 plane, ReLU,
/// then three nearest-neighbor doublings up to the image side.
pub fn build_message_plane<F: Scalar>(
    b: &mut GraphBuilder<F>,
    cfg: &NetConfig,
    bits: NodeRef,
) -> Result<NodeRef> {
    let n = b.shape(bits)[0];
    let ps = cfg.message_plane_side();
    let d = dense_block(b, bits, "enc.msg_fc", cfg.message_bits, ps * ps * 3, true)?;
    let mut plane = b.reshape(d, &[n, ps, ps, 3])?;
    for _ in 0..3 {
        plane = b.upsample2x(plane)?;
    }
    Ok(plane)
}

/// U-Net encoder: 4 stride-2 levels at widths (b, b, 2b, 4b, 8b), skip
/// connections into each upsampling level, the final 1x1 residual conv left
/// linear, stego clipped to [0, 1].
pub fn build_encoder<F: Scalar>(
    b: &mut GraphBuilder<F>,
    cfg: &NetConfig,
    image: NodeRef,
    bits: NodeRef,
) -> Result<EncoderNodes> {
    cfg.validate()?;
    let bc = cfg.base_channels;
    let message_plane = build_message_plane(b, cfg, bits)?;
    let inputs6 = b.concat_channels(&[image, message_plane])?;

    let c1 = conv_block(b, inputs6, "enc.conv1", 3, 6, bc, 1, true)?;
    let c2 = conv_block(b, c1, "enc.conv2", 3, bc, bc, 2, true)?;
    let c3 = conv_block(b, c2, "enc.conv3", 3, bc, 2 * bc, 2, true)?;
    let c4 = conv_block(b, c3, "enc.conv4", 3, 2 * bc, 4 * bc, 2, true)?;
    let c5 = conv_block(b, c4, "enc.conv5", 3, 4 * bc, 8 * bc, 2, true)?;

    let up6 = {
        let u = b.upsample2x(c5)?;
        conv_block(b, u, "enc.up6", 2, 8 * bc, 4 * bc, 1, true)?
    };
    let c6 = {
        let cat = b.concat_channels(&[c4, up6])?;
        conv_block(b, cat, "enc.conv6", 3, 8 * bc, 4 * bc, 1, true)?
    };
    let up7 = {
        let u = b.upsample2x(c6)?;
        conv_block(b, u, "enc.up7", 2, 4 * bc, 2 * bc, 1, true)?
    };
    let c7 = {
        let cat = b.concat_channels(&[c3, up7])?;
        conv_block(b, cat, "enc.conv7", 3, 4 * bc, 2 * bc, 1, true)?
    };
    let up8 = {
        let u = b.upsample2x(c7)?;
        conv_block(b, u, "enc.up8", 2, 2 * bc, bc, 1, true)?
    };
    let c8 = {
        let cat = b.concat_channels(&[c2, up8])?;
        conv_block(b, cat, "enc.conv8", 3, 2 * bc, bc, 1, true)?
    };
    let up9 = {
        let u = b.upsample2x(c8)?;
        conv_block(b, u, "enc.up9", 2, bc, bc, 1, true)?
    };
    let c9 = {
        let cat = b.concat_channels(&[c1, up9, inputs6])?;
        conv_block(b, cat, "enc.conv9", 3, 2 * bc + 6, bc, 1, true)?
    };
    let c10 = conv_block(b, c9, "enc.conv10", 3, bc, bc, 1, true)?;
    // Zero-initialized linear head: training starts from a no-op encode.
    let residual = conv_block(b, c10, "enc.residual", 1, bc, 3, 1, false)?;

    let sum = b.add(image, residual)?;
    let stego = b.clip_ste(sum, F::zero(), F::one());
    Ok(EncoderNodes {
        message_plane,
        residual,
        stego,
    })
}

/// Decoder: spatial-transformer stage regressing 6 affine parameters
/// (zero-init head with identity bias), differentiable warp, then the
/// conv/dense trunk emitting message logits.
pub fn build_decoder<F: Scalar>(
    b: &mut GraphBuilder<F>,
    cfg: &NetConfig,
    image: NodeRef,
) -> Result<DecoderNodes> {
    cfg.validate()?;
    let bc = cfg.base_channels;
    let n = b.shape(image)[0];
    let side = cfg.image_side;

    let (theta, rectified) = if cfg.stn_enabled {
        let s1 = conv_block(b, image, "dec.stn_conv1", 3, 3, bc, 2, true)?;
        let s2 = conv_block(b, s1, "dec.stn_conv2", 3, bc, 2 * bc, 2, true)?;
        let s3 = conv_block(b, s2, "dec.stn_conv3", 3, 2 * bc, 4 * bc, 2, true)?;
        let flat_dim = (side / 8) * (side / 8) * 4 * bc;
        let flat = b.reshape(s3, &[n, flat_dim])?;
        let f1 = dense_block(b, flat, "dec.stn_fc1", flat_dim, 128, true)?;
        // No ReLU on the affine head (the last layer before the transformer).
        let theta = dense_block(b, f1, "dec.stn_fc2", 128, 6, false)?;
        let grid = b.affine_grid(theta, side, side, side, side)?;
        let rectified = b.bilinear_sample(image, grid)?;
        (Some(theta), rectified)
    } else {
        (None, image)
    };

    let t1 = conv_block(b, rectified, "dec.conv1", 3, 3, bc, 2, true)?;
    let t2 = conv_block(b, t1, "dec.conv2", 3, bc, bc, 1, true)?;
    let t3 = conv_block(b, t2, "dec.conv3", 3, bc, 2 * bc, 2, true)?;
    let t4 = conv_block(b, t3, "dec.conv4", 3, 2 * bc, 2 * bc, 1, true)?;
    let t5 = conv_block(b, t4, "dec.conv5", 3, 2 * bc, 2 * bc, 2, true)?;
    let t6 = conv_block(b, t5, "dec.conv6", 3, 2 * bc, 4 * bc, 2, true)?;
    let t7 = conv_block(b, t6, "dec.conv7", 3, 4 * bc, 4 * bc, 2, true)?;
    let shape = b.shape(t7).to_vec();
    let flat_dim = shape[1] * shape[2] * shape[3];
    let flat = b.reshape(t7, &[n, flat_dim])?;
    let f1 = dense_block(b, flat, "dec.fc1", flat_dim, 128, true)?;
    let logits = dense_block(b, f1, "dec.fc_out", 128, cfg.message_bits, false)?;

    Ok(DecoderNodes {
        theta,
        rectified,
        logits,
    })
}

/// Critic: three conv + maxpool stages, global spatial mean, linear score.
pub fn build_critic<F: Scalar>(
    b: &mut GraphBuilder<F>,
    cfg: &NetConfig,
    image: NodeRef,
) -> Result<NodeRef> {
    cfg.validate()?;
    let bc = cfg.base_channels;
    let k1 = conv_block(b, image, "critic.conv1", 3, 3, bc / 2, 1, true)?;
    let p1 = b.maxpool2x2(k1)?;
    let k2 = conv_block(b, p1, "critic.conv2", 3, bc / 2, bc, 1, true)?;
    let p2 = b.maxpool2x2(k2)?;
    let k3 = conv_block(b, p2, "critic.conv3", 3, bc, 2 * bc, 1, true)?;
    let p3 = b.maxpool2x2(k3)?;
    let pooled = b.spatial_mean(p3)?;
    dense_block(b, pooled, "critic.score", 2 * bc, 1, false)
}

/// Parameter prefixes updated by the encoder/decoder optimizer.
pub const ENCDEC_PREFIXES: [&str; 2] = ["enc.", "dec."];
/// Parameter prefix updated by the critic optimizer (and weight-clipped).
pub const CRITIC_PREFIX: &str = "critic.";

fn name_key(name: &str) -> u64 {
    // FNV-1a; initialization depends only on (seed, parameter name).
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// He-normal initialization for all three networks, deterministic in `seed`
/// and independent of parameter enumeration order.
///
/// Exceptions that make step 0 a no-op pipeline: the encoder residual head
/// is zero and the STN affine head is zero with an identity bias.
pub fn init_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut b = GraphBuilder::<f32>::new();
    let image = b.input("image", &[1, cfg.image_side, cfg.image_side, 3])?;
    let bits = b.input("bits", &[1, cfg.message_bits])?;
    build_encoder(&mut b, cfg, image, bits)?;
    build_decoder(&mut b, cfg, image)?;
    build_critic(&mut b, cfg, image)?;
    let graph = b.finish();

    let mut params = ParamStore::new();
    for name in graph.param_names() {
        let shape = graph.param_shape(name).unwrap().to_vec();
        let mut t = Tensor::<f32>::zeros(&shape);
        if name == "dec.stn_fc2.b" {
            t.data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        } else if name.ends_with(".b")
            || name.starts_with("enc.residual.")
            || name == "dec.stn_fc2.w"
        {
            // stays zero
        } else {
            let fan_in: usize = match shape.len() {
                4 => shape[0] * shape[1] * shape[2],
                2 => shape[0],
                _ => shape.iter().product(),
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let mut key = [0u8; 32];
            key[..8].copy_from_slice(&seed.to_le_bytes());
            key[8..16].copy_from_slice(&name_key(name).to_le_bytes());
            key[16..24].copy_from_slice(b"initwgt\0");
            let mut rng = ChaCha8Rng::from_seed(key);
            for v in t.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (z * std) as f32;
            }
        }
        params.insert(name, t);
    }
    Ok(params)
}

// --- checkpoints ---

const CHECKPOINT_KIND: &str = "stegachan-checkpoint";

/// Saves parameters with the net config and step embedded in the header.
pub fn save_checkpoint(
    path: &std::path::Path,
    cfg: &NetConfig,
    params: &ParamStore<f32>,
    step: usize,
) -> Result<()> {
    let header = serde_json::json!({
        "kind": CHECKPOINT_KIND,
        "net_config": cfg,
        "step": step,
    });
    TensorArchive::from_params(header, params).save(path)
}

pub struct Checkpoint {
    pub config: NetConfig,
    pub params: ParamStore<f32>,
    pub step: usize,
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Checkpoint> {
    let archive = TensorArchive::load(path)?;
    checkpoint_from_archive(archive)
}

pub fn checkpoint_from_archive(archive: TensorArchive) -> Result<Checkpoint> {
    if archive.header["kind"] != CHECKPOINT_KIND {
        return Err(Error::Data(format!(
            "archive is not a checkpoint (kind = {})",
            archive.header["kind"]
        )));
    }
    let config: NetConfig = serde_json::from_value(archive.header["net_config"].clone())
        .map_err(|e| Error::Data(format!("bad net_config in checkpoint: {}", e)))?;
    config.validate()?;
    let step = archive.header["step"].as_u64().unwrap_or(0) as usize;
    Ok(Checkpoint {
        config,
        params: archive.to_params(),
        step,
    })
}

// --- single-image runners for the CLI and evaluation paths ---

/// Message bits as a `[1, M]` tensor of 0.0/1.0.
pub fn bits_to_tensor(bits: &[u8]) -> Tensor<f32> {
    Tensor::from_vec(
        &[1, bits.len()],
        bits.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect(),
    )
    .expect("shape matches data")
}

/// Hard bit decisions from logits: sigmoid(z) > 0.5, i.e. z > 0.
pub fn logits_to_bits(logits: &[f32]) -> Vec<u8> {
    logits.iter().map(|&z| if z > 0.0 { 1 } else { 0 }).collect()
}

/// Batch-1 encoder executor reusable across images.
pub struct EncoderRunner {
    exec: Executor<f32>,
    nodes: EncoderNodes,
    cfg: NetConfig,
}

impl EncoderRunner {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = GraphBuilder::<f32>::new();
        let image = b.input("image", &[1, cfg.image_side, cfg.image_side, 3])?;
        let bits = b.input("bits", &[1, cfg.message_bits])?;
        let nodes = build_encoder(&mut b, cfg, image, bits)?;
        let exec = Executor::new(b.finish());
        Ok(EncoderRunner {
            exec,
            nodes,
            cfg: *cfg,
        })
    }

    /// Returns (stego, residual).
    pub fn encode(
        &mut self,
        params: &ParamStore<f32>,
        image: &Tensor<f32>,
        bits: &[u8],
    ) -> Result<(Tensor<f32>, Tensor<f32>)> {
        if bits.len() != self.cfg.message_bits {
            return Err(Error::Config(format!(
                "expected {} message bits, got {}",
                self.cfg.message_bits,
                bits.len()
            )));
        }
        self.exec.set_input("image", image)?;
        self.exec.set_input("bits", &bits_to_tensor(bits))?;
        self.exec.forward(params)?;
        Ok((
            self.exec.value(self.nodes.stego).clone(),
            self.exec.value(self.nodes.residual).clone(),
        ))
    }
}

/// Batch-1 decoder executor reusable across images.
pub struct DecoderRunner {
    exec: Executor<f32>,
    nodes: DecoderNodes,
}

impl DecoderRunner {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = GraphBuilder::<f32>::new();
        let image = b.input("image", &[1, cfg.image_side, cfg.image_side, 3])?;
        let nodes = build_decoder(&mut b, cfg, image)?;
        let exec = Executor::new(b.finish());
        Ok(DecoderRunner { exec, nodes })
    }

    pub fn decode_logits(
        &mut self,
        params: &ParamStore<f32>,
        image: &Tensor<f32>,
    ) -> Result<Vec<f32>> {
        self.exec.set_input("image", image)?;
        self.exec.forward(params)?;
        Ok(self.exec.value(self.nodes.logits).data().to_vec())
    }

    pub fn decode_bits(&mut self, params: &ParamStore<f32>, image: &Tensor<f32>) -> Result<Vec<u8>> {
        Ok(logits_to_bits(&self.decode_logits(params, image)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            image_side: 16,
            message_bits: 8,
            base_channels: 4,
            stn_enabled: true,
        }
    }

    fn rand_image(cfg: &NetConfig, seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.image_side * cfg.image_side * 3;
        Tensor::from_vec(
            &[1, cfg.image_side, cfg.image_side, 3],
            (0..n).map(|_| r.gen_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        assert!(NetConfig {
            image_side: 60,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NetConfig {
            message_bits: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(NetConfig {
            base_channels: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn message_plane_shape_and_zero_weights() {
        let cfg = tiny_cfg();
        let mut b = GraphBuilder::<f32>::new();
        let bits = b.input("bits", &[1, cfg.message_bits]).unwrap();
        let plane = build_message_plane(&mut b, &cfg, bits).unwrap();
        assert_eq!(
            b.shape(plane),
            &[1, cfg.image_side, cfg.image_side, 3],
            "message plane must upsample to the image side"
        );
        let graph = b.finish();
        let mut exec = Executor::new(graph);
        let mut params = ParamStore::new();
        let ps = cfg.message_plane_side();
        params.insert(
            "enc.msg_fc.w",
            Tensor::zeros(&[cfg.message_bits, ps * ps * 3]),
        );
        params.insert("enc.msg_fc.b", Tensor::zeros(&[ps * ps * 3]));
        exec.set_input("bits", &bits_to_tensor(&[1, 0, 1, 1, 0, 0, 1, 0]))
            .unwrap();
        exec.forward(&params).unwrap();
        assert!(exec.value(plane).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distinct_messages_give_distinct_planes() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 3).unwrap();
        let mut b = GraphBuilder::<f32>::new();
        let bits = b.input("bits", &[1, cfg.message_bits]).unwrap();
        let plane = build_message_plane(&mut b, &cfg, bits).unwrap();
        let graph = b.finish();
        let mut exec = Executor::new(graph);
        exec.set_input("bits", &bits_to_tensor(&[0, 0, 0, 0, 0, 0, 0, 1]))
            .unwrap();
        exec.forward(&params).unwrap();
        let a = exec.value(plane).clone();
        exec.set_input("bits", &bits_to_tensor(&[1, 0, 0, 0, 0, 0, 0, 1]))
            .unwrap();
        exec.forward(&params).unwrap();
        let gap = exec
            .value(plane)
            .data()
            .iter()
            .zip(a.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(gap > 0.0, "distinct messages must yield distinct planes");
    }

    #[test]
    fn step_zero_is_noop_encode_and_identity_stn() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 1).unwrap();
        let image = rand_image(&cfg, 2);

        let mut enc = EncoderRunner::new(&cfg).unwrap();
        let (stego, residual) = enc
            .encode(&params, &image, &[1, 0, 1, 0, 1, 0, 1, 0])
            .unwrap();
        assert_eq!(stego.data(), image.data(), "zero residual head at init");
        assert!(residual.data().iter().all(|&v| v == 0.0));

        // STN at init: identity affine, stage-2 input equals the input.
        let mut b = GraphBuilder::<f32>::new();
        let image_n = b
            .input("image", &[1, cfg.image_side, cfg.image_side, 3])
            .unwrap();
        let nodes = build_decoder(&mut b, &cfg, image_n).unwrap();
        let graph = b.finish();
        let mut exec = Executor::new(graph);
        exec.set_input("image", &image).unwrap();
        exec.forward(&params).unwrap();
        let theta = exec.value(nodes.theta.unwrap());
        assert_eq!(theta.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let warped = exec.value(nodes.rectified);
        let max_diff = warped
            .data()
            .iter()
            .zip(image.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 1e-5, "identity STN warp, max diff {}", max_diff);
        assert_eq!(
            exec.value(nodes.logits).shape(),
            &[1, cfg.message_bits],
            "logit vector matches the message length"
        );
    }

    #[test]
    fn stego_stays_in_unit_range() {
        let cfg = tiny_cfg();
        let mut params = init_params(&cfg, 4).unwrap();
        // Force a large residual through the head.
        let w = params.get_mut("enc.residual.w").unwrap();
        for v in w.data_mut() {
            *v = 0.5;
        }
        let image = rand_image(&cfg, 5);
        let mut enc = EncoderRunner::new(&cfg).unwrap();
        let (stego, _) = enc
            .encode(&params, &image, &[1, 1, 1, 1, 0, 0, 0, 0])
            .unwrap();
        assert!(stego.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn critic_zero_weights_score_zero() {
        let cfg = tiny_cfg();
        let mut b = GraphBuilder::<f32>::new();
        let image = b
            .input("image", &[2, cfg.image_side, cfg.image_side, 3])
            .unwrap();
        let score = build_critic(&mut b, &cfg, image).unwrap();
        let graph = b.finish();
        let mut params = ParamStore::new();
        for name in graph.param_names() {
            params.insert(name, Tensor::zeros(graph.param_shape(name).unwrap()));
        }
        let mut exec = Executor::new(graph);
        let img = Tensor::<f32>::filled(&[2, cfg.image_side, cfg.image_side, 3], 0.7);
        exec.set_input("image", &img).unwrap();
        exec.forward(&params).unwrap();
        assert_eq!(exec.value(score).data(), &[0.0, 0.0]);
        assert_eq!(exec.value(score).shape(), &[2, 1]);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_cfg();
        let a = init_params(&cfg, 7).unwrap();
        let b = init_params(&cfg, 7).unwrap();
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.get(name).unwrap().data(), "{}", name);
        }
        let c = init_params(&cfg, 8).unwrap();
        assert_ne!(
            a.get("enc.conv1.w").unwrap().data(),
            c.get("enc.conv1.w").unwrap().data()
        );
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &cfg, &params, 123).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        assert_eq!(loaded.step, 123);
        for (name, t) in params.iter() {
            let l = loaded.params.get(name).unwrap();
            assert_eq!(
                t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                l.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "bit-exact round trip for {}",
                name
            );
        }
        // Saving the loaded params again produces identical bytes.
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&path2, &cfg, &loaded.params, 123).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
