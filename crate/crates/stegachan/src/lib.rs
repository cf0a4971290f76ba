//! Learned image steganography robust to a simulated display-imaging channel.
//!
//! The crate trains a small encoder/decoder pair through a differentiable
//! corruption pipeline (perspective warp, blur, color shifts, noise, JPEG),
//! embeds error-corrected bitstrings into images, and provides the evaluation
//! tooling (quality metrics, strength sweeps, channel-capacity analysis) to
//! study how much data survives the round trip.
//!
//! Modules:
//! - [`ndgrad`]: fixed-topology reverse-mode autodiff engine (the only
//!   numerical substrate used by the networks and the channel).
//! - [`channel`]: the differentiable corruption pipeline with a global
//!   strength scale.
//! - [`nets`]: encoder (U-Net), decoder (spatial transformer + conv stack)
//!   and critic definitions.
//! - [`train`]: loss assembly, ramp schedules, critic interleaving, Adam loop.
//! - [`ecc`]: shortened binary BCH(91,56,t=5) codec with a 5-bit pad marker.
//! - [`geom`]: homographies, quadrilateral detection, rectification.
//! - [`metrics`]: bit accuracy, PSNR/SSIM, channel capacity, ablation sweeps.
//! - [`cli`]: the `stegachan` command-line surface.

pub mod channel;
pub mod cli;
pub mod ecc;
pub mod error;
pub mod geom;
pub mod imgio;
pub mod metrics;
pub mod ndgrad;
pub mod nets;
pub mod synth;
pub mod train;

pub use error::Error;

/// Scalar type used for training and inference.
pub type Real = f32;

/// Initializes the global rayon pool honoring `STEGACHAN_THREADS`.
///
/// Callable multiple times; only the first call takes effect. With the
/// variable unset rayon picks the machine default.
pub fn init_thread_pool() {
    if let Ok(v) = std::env::var("STEGACHAN_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}
