//! Command-line surface: dataset training, encoding, channel simulation,
//! decoding (with optional rectification and error correction), ECC
//! utilities, and evaluation sweeps.
//!
//! Every command echoes its fully-resolved configuration into the output
//! directory before doing any work, so runs are self-describing. Exit codes:
//! 0 success, 2 configuration error, 3 data error, 4 detection or ECC
//! failure (an expected outcome, distinct from a crash).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::channel::{apply_channel_indexed, apply_channel_with, ChannelConfig, PerturbSample};
use crate::ecc::{self, BchCode};
use crate::error::{Error, Result};
use crate::geom;
use crate::imgio;
use crate::metrics::{self, SweepSpec};
use crate::ndgrad::Tensor;
use crate::nets::{load_checkpoint, Checkpoint, DecoderRunner, EncoderRunner};
use crate::train::{self, Subset, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_OUTCOME: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "stegachan",
    about = "Learned image steganography through a simulated display-imaging channel",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train encoder/decoder/critic on a folder of photos.
    Train(TrainArgs),
    /// Embed a message into an image; writes stego and residual PNGs.
    Encode(EncodeArgs),
    /// Corrupt an image through the channel; writes the perturbation sample.
    Simulate(SimulateArgs),
    /// Recover a message from a scene, rectifying a detected quad if needed.
    Decode(DecodeArgs),
    /// Strength sweeps and the capacity table over trained checkpoints.
    Evaluate(EvaluateArgs),
    /// BCH codec utilities on hex payloads.
    #[command(subcommand)]
    Ecc(EccCommand),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Folder of training photos (PNG/JPEG).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, metrics CSV, and state.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON TrainConfig; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training perturbation subset: none|pixelwise|spatial|all.
    #[arg(long)]
    pub subset: Option<String>,
    /// Resume from a train_state.bin written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Raw message bits ('0'/'1', exactly message_bits long).
    #[arg(long)]
    pub bits: Option<String>,
    /// 56-bit payload as 14 hex chars; requires --ecc.
    #[arg(long)]
    pub payload_hex: Option<String>,
    /// Route the payload through the BCH encoder (needs message_bits >= 96).
    #[arg(long)]
    pub ecc: bool,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON ChannelConfig; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global strength in [0, 2].
    #[arg(long)]
    pub strength: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Replay a previously emitted perturbation sample instead of drawing.
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Ground-truth or externally produced mask PNG.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Decode the first 96 bits through the BCH decoder.
    #[arg(long)]
    pub ecc: bool,
    /// Optional output directory for the report and rectified stamp.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Luminance threshold for the classical detection path (no mask given,
    /// scene larger than the stamp).
    #[arg(long, default_value_t = 0.15)]
    pub threshold: f64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Repeatable `label=path` checkpoint references.
    #[arg(long = "checkpoint", value_name = "LABEL=PATH")]
    pub checkpoints: Vec<String>,
    /// Folder of evaluation photos.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// JSON SweepSpec; flags override file values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated strength grid, e.g. "0,0.5,1,1.5,2".
    #[arg(long)]
    pub strengths: Option<String>,
    /// Comma-separated axis subset (default: every axis).
    #[arg(long)]
    pub axes: Option<String>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum EccCommand {
    /// Encode a 56-bit hex payload into a 96-bit codeword.
    Encode {
        #[arg(long)]
        payload_hex: String,
    },
    /// Decode a 96-bit word ('0'/'1' string) back to the payload.
    Decode {
        #[arg(long)]
        bits: String,
    },
}

/// Runs a parsed command, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ecc(a) => cmd_ecc(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Config(_) => EXIT_CONFIG,
                _ => EXIT_DATA,
            }
        }
    }
}

fn load_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {}", path.display(), e)))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad config {}: {}", path.display(), e)))
}

/// Reproducibility record: the fully-resolved config is written before any
/// work starts.
fn echo_config(out_dir: &Path, command: &str, config: serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let echo = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    std::fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(&echo)? + "\n",
    )?;
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => load_json_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = &a.subset {
        cfg.subset = s.parse::<Subset>()?;
    }
    if !a.data.is_dir() {
        return Err(Error::Data(format!(
            "dataset path {} does not exist or is not a directory",
            a.data.display()
        )));
    }
    let resolved = cfg.resolved()?;
    echo_config(
        &a.out,
        "train",
        json!({
            "train": resolved,
            "data": a.data,
            "resume": a.resume,
        }),
    )?;
    let outcome = train::train_loop(&resolved, &a.data, &a.out, a.resume.as_deref())?;
    println!(
        "trained {} steps, final EMA bit accuracy {:.4}",
        outcome.steps, outcome.final_ema_acc
    );
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    println!("metrics:    {}", outcome.metrics_csv.display());
    Ok(EXIT_OK)
}

fn resolve_message_bits(a: &EncodeArgs, message_bits: usize) -> Result<(Vec<u8>, Option<String>)> {
    match (&a.bits, &a.payload_hex, a.ecc) {
        (Some(bits), None, false) => {
            let b = ecc::bits_from_str(bits)?;
            if b.len() != message_bits {
                return Err(Error::Config(format!(
                    "--bits must provide exactly {} bits, got {}",
                    message_bits,
                    b.len()
                )));
            }
            Ok((b, None))
        }
        (None, Some(hex), true) => {
            if message_bits < ecc::CODEWORD_BITS {
                return Err(Error::Config(format!(
                    "--ecc needs message_bits >= {}, model carries {}",
                    ecc::CODEWORD_BITS,
                    message_bits
                )));
            }
            let payload = ecc::payload_from_hex(hex)?;
            let cw = BchCode::new().encode(&payload);
            let mut bits = cw.to_vec();
            bits.resize(message_bits, 0);
            Ok((bits, Some(hex.clone())))
        }
        (None, Some(_), false) => Err(Error::Config(
            "--payload-hex requires --ecc (raw messages use --bits)".into(),
        )),
        (Some(_), Some(_), _) => Err(Error::Config(
            "--bits and --payload-hex are mutually exclusive".into(),
        )),
        (Some(_), None, true) => Err(Error::Config(
            "--ecc expects --payload-hex, not raw --bits".into(),
        )),
        (None, None, _) => Err(Error::Config(
            "provide a message via --bits or --payload-hex --ecc".into(),
        )),
    }
}

fn cmd_encode(a: EncodeArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let (bits, payload_hex) = resolve_message_bits(&a, ckpt.config.message_bits)?;
    echo_config(
        &a.out,
        "encode",
        json!({
            "checkpoint": a.checkpoint,
            "image": a.image,
            "net_config": ckpt.config,
            "bits": ecc::bits_to_str(&bits),
            "payload_hex": payload_hex,
            "ecc": a.ecc,
        }),
    )?;
    let raw = imgio::load_image_rgb(&a.image)?;
    let cover = imgio::center_crop_resize(&raw, ckpt.config.image_side)?;
    let mut encoder = EncoderRunner::new(&ckpt.config)?;
    let (stego, residual) = encoder.encode(&ckpt.params, &cover, &bits)?;
    imgio::save_image_rgb(&a.out.join("cover.png"), &cover)?;
    imgio::save_image_rgb(&a.out.join("stego.png"), &stego)?;
    imgio::save_image_rgb(&a.out.join("residual.png"), &imgio::amplify_residual(&residual))?;
    println!("stego:    {}", a.out.join("stego.png").display());
    println!("residual: {}", a.out.join("residual.png").display());
    Ok(EXIT_OK)
}

fn cmd_simulate(a: SimulateArgs) -> Result<i32> {
    let image = imgio::load_image_rgb(&a.image)?;
    let (corrupted, sample) = if let Some(replay) = &a.replay {
        let sample: PerturbSample = load_json_config(replay)?;
        echo_config(
            &a.out,
            "simulate",
            json!({"image": a.image, "replay": replay, "sample": sample}),
        )?;
        (apply_channel_with(&image, &sample)?, sample)
    } else {
        let mut cfg: ChannelConfig = match &a.config {
            Some(p) => load_json_config(p)?,
            None => ChannelConfig::default(),
        };
        if let Some(s) = a.strength {
            cfg.strength = s;
            cfg.axis_strengths = None;
        }
        if let Some(s) = a.seed {
            cfg.rng_seed = s;
        }
        cfg.validate()?;
        echo_config(
            &a.out,
            "simulate",
            json!({"image": a.image, "channel": cfg}),
        )?;
        apply_channel_indexed(&image, &cfg, 0)?
    };
    imgio::save_image_rgb(&a.out.join("corrupted.png"), &corrupted)?;
    std::fs::write(
        a.out.join("perturb_sample.json"),
        serde_json::to_string_pretty(&sample)? + "\n",
    )?;
    println!("corrupted: {}", a.out.join("corrupted.png").display());
    println!("sample:    {}", a.out.join("perturb_sample.json").display());
    Ok(EXIT_OK)
}

#[derive(Debug, serde::Serialize)]
struct DecodeReport {
    detection: String,
    quad: Option<[[f64; 2]; 4]>,
    bits: String,
    ecc: Option<EccReport>,
}

#[derive(Debug, serde::Serialize)]
struct EccReport {
    status: String,
    payload_hex: Option<String>,
    corrected: Option<usize>,
}

fn finish_decode(out: Option<&Path>, report: &DecodeReport, code: i32) -> Result<i32> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    print!("{}", text);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("decode_report.json"), &text)?;
    }
    Ok(code)
}

fn cmd_decode(a: DecodeArgs) -> Result<i32> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let side = ckpt.config.image_side;
    let scene = imgio::load_image_rgb(&a.scene)?;
    if let Some(dir) = &a.out {
        echo_config(
            dir,
            "decode",
            json!({
                "checkpoint": a.checkpoint,
                "scene": a.scene,
                "mask": a.mask,
                "ecc": a.ecc,
                "threshold": a.threshold,
                "net_config": ckpt.config,
            }),
        )?;
    }

    // Locate and rectify the stamp: mask path, direct decode for a
    // stamp-sized scene, or the classical luminance-threshold path.
    let (stamp, detection, quad) = if let Some(mask_path) = &a.mask {
        let mask = imgio::load_mask_png(mask_path)?;
        if mask.shape()[1] != scene.shape()[1] || mask.shape()[2] != scene.shape()[2] {
            return Err(Error::Data(format!(
                "mask {:?} does not match scene {:?}",
                &mask.shape()[1..3],
                &scene.shape()[1..3]
            )));
        }
        match geom::detect_quad(&mask) {
            Ok(q) => (geom::rectify(&scene, &q, side)?, "mask", Some(q)),
            Err(fail) => {
                let report = DecodeReport {
                    detection: format!("failure: {}", fail),
                    quad: None,
                    bits: String::new(),
                    ecc: None,
                };
                return finish_decode(a.out.as_deref(), &report, EXIT_OUTCOME);
            }
        }
    } else if scene.shape()[1] == side && scene.shape()[2] == side {
        (scene.clone(), "direct", None)
    } else {
        // Demo-quality detector: bright-region threshold on luma.
        let s = scene.shape();
        let mut mask = Tensor::<f32>::zeros(&[1, s[1], s[2], 1]);
        for pix in 0..s[1] * s[2] {
            let d = &scene.data()[pix * 3..pix * 3 + 3];
            let luma = 0.299 * d[0] + 0.587 * d[1] + 0.114 * d[2];
            if luma as f64 > a.threshold {
                mask.data_mut()[pix] = 1.0;
            }
        }
        match geom::detect_quad(&mask) {
            Ok(q) => (geom::rectify(&scene, &q, side)?, "threshold", Some(q)),
            Err(fail) => {
                let report = DecodeReport {
                    detection: format!("failure: {}", fail),
                    quad: None,
                    bits: String::new(),
                    ecc: None,
                };
                return finish_decode(a.out.as_deref(), &report, EXIT_OUTCOME);
            }
        }
    };

    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        imgio::save_image_rgb(&dir.join("rectified.png"), &stamp)?;
        if let Some(q) = &quad {
            std::fs::write(
                dir.join("quad.json"),
                serde_json::to_string_pretty(&q.corners)? + "\n",
            )?;
        }
    }

    let mut decoder = DecoderRunner::new(&ckpt.config)?;
    let bits = decoder.decode_bits(&ckpt.params, &stamp)?;

    let (ecc_report, code) = if a.ecc {
        if bits.len() < ecc::CODEWORD_BITS {
            return Err(Error::Config(format!(
                "--ecc needs at least {} decoded bits, model yields {}",
                ecc::CODEWORD_BITS,
                bits.len()
            )));
        }
        let mut word = [0u8; ecc::CODEWORD_BITS];
        word.copy_from_slice(&bits[..ecc::CODEWORD_BITS]);
        match BchCode::new().decode(&word) {
            Ok((payload, corrected)) => (
                Some(EccReport {
                    status: "ok".into(),
                    payload_hex: Some(ecc::payload_to_hex(&payload)),
                    corrected: Some(corrected),
                }),
                EXIT_OK,
            ),
            Err(fail) => (
                Some(EccReport {
                    status: format!("failure: {}", fail),
                    payload_hex: None,
                    corrected: None,
                }),
                EXIT_OUTCOME,
            ),
        }
    } else {
        (None, EXIT_OK)
    };

    let report = DecodeReport {
        detection: detection.to_string(),
        quad: quad.map(|q| q.corners),
        bits: ecc::bits_to_str(&bits),
        ecc: ecc_report,
    };
    finish_decode(a.out.as_deref(), &report, code)
}

fn parse_checkpoint_refs(refs: &[String]) -> Result<Vec<(String, PathBuf)>> {
    if refs.is_empty() {
        return Err(Error::Config(
            "at least one --checkpoint label=path is required".into(),
        ));
    }
    refs.iter()
        .map(|r| {
            r.split_once('=')
                .map(|(l, p)| (l.to_string(), PathBuf::from(p)))
                .ok_or_else(|| {
                    Error::Config(format!("--checkpoint '{}' is not label=path", r))
                })
        })
        .collect()
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<i32> {
    let refs = parse_checkpoint_refs(&a.checkpoints)?;
    let mut missing = Vec::new();
    for (_, p) in &refs {
        if !p.is_file() {
            missing.push(p.display().to_string());
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "missing checkpoints: {}",
            missing.join(", ")
        )));
    }
    let mut spec: SweepSpec = match &a.config {
        Some(p) => load_json_config(p)?,
        None => SweepSpec::default(),
    };
    if let Some(s) = &a.strengths {
        spec.strengths = s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad strength '{}'", v)))
            })
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(ax) = &a.axes {
        spec.axes = ax.split(',').map(|s| s.trim().to_string()).collect();
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }

    let loaded: Vec<(String, Checkpoint)> = refs
        .iter()
        .map(|(label, path)| load_checkpoint(path).map(|c| (label.clone(), c)))
        .collect::<Result<Vec<_>>>()?;
    let side = loaded
        .first()
        .map(|(_, c)| c.config.image_side)
        .unwrap_or(64);
    for (label, c) in &loaded {
        if c.config.image_side != side {
            return Err(Error::Config(format!(
                "checkpoint '{}' has side {}, expected {}",
                label, c.config.image_side, side
            )));
        }
    }
    let images = train::load_dataset(&a.images, side, 1)?;

    echo_config(
        &a.out,
        "evaluate",
        json!({
            "checkpoints": refs.iter().map(|(l, p)| format!("{}={}", l, p.display())).collect::<Vec<_>>(),
            "images": a.images,
            "sweep": spec,
        }),
    )?;

    let models: Vec<(String, &Checkpoint)> =
        loaded.iter().map(|(l, c)| (l.clone(), c)).collect();
    let (records, cells) = metrics::ablation_sweep(&models, &images, &spec)?;
    metrics::write_records_csv(&a.out.join("sweep_records.csv"), &records)?;
    metrics::write_summary_csv(&a.out.join("sweep_summary.csv"), &cells)?;
    let capacity = metrics::capacity_table(&models, &images, &spec.channel, spec.trials, spec.seed)?;
    metrics::write_capacity_csv(&a.out.join("capacity.csv"), &capacity)?;
    for row in &capacity {
        println!(
            "{}: mean accuracy {:.4}, {:.1} bits/MP",
            row.model, row.mean_accuracy, row.bits_per_megapixel
        );
    }
    println!("wrote {}", a.out.join("sweep_summary.csv").display());
    Ok(EXIT_OK)
}

fn cmd_ecc(cmd: EccCommand) -> Result<i32> {
    match cmd {
        EccCommand::Encode { payload_hex } => {
            let payload = ecc::payload_from_hex(&payload_hex)?;
            let cw = BchCode::new().encode(&payload);
            println!("{}", ecc::bits_to_str(&cw));
            Ok(EXIT_OK)
        }
        EccCommand::Decode { bits } => {
            let b = ecc::bits_from_str(&bits)?;
            if b.len() != ecc::CODEWORD_BITS {
                return Err(Error::Config(format!(
                    "expected {} bits, got {}",
                    ecc::CODEWORD_BITS,
                    b.len()
                )));
            }
            let mut word = [0u8; ecc::CODEWORD_BITS];
            word.copy_from_slice(&b);
            match BchCode::new().decode(&word) {
                Ok((payload, corrected)) => {
                    println!(
                        "{} corrected={}",
                        ecc::payload_to_hex(&payload),
                        corrected
                    );
                    Ok(EXIT_OK)
                }
                Err(fail) => {
                    eprintln!("ecc failure: {}", fail);
                    Ok(EXIT_OUTCOME)
                }
            }
        }
    }
}
