// Temporary: learning-rate probe, no perturbations.
use std::time::Instant;
use stegachan::train::{train_loop, Subset, TrainConfig};

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(800);
    let dir = std::env::temp_dir().join("stegachan_bench_data");
    if !dir.join("photo_0099.png").exists() {
        stegachan::synth::generate_photo_folder(&dir, 100, 64, 42).unwrap();
    }
    let out = std::env::temp_dir().join(format!("stegachan_bench_lr{}", lr));
    let _ = std::fs::remove_dir_all(&out);
    let cfg = TrainConfig {
        steps,
        checkpoint_every: 0,
        subset: Subset::None,
        learning_rate: lr,
        critic_learning_rate: lr,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let outcome = train_loop(&cfg, &dir, &out, None).unwrap();
    println!(
        "lr {}: {} steps in {:.1}s, ema acc {:.4}",
        lr, outcome.steps, t0.elapsed().as_secs_f64(), outcome.final_ema_acc
    );
    let csv = std::fs::read_to_string(&outcome.metrics_csv).unwrap();
    for (i, line) in csv.lines().enumerate() {
        if i >= 2 && (i - 2) % 100 == 0 {
            let f: Vec<&str> = line.split(',').collect();
            println!("step {:>4}  L_M {:>8}  ema {:.4}", f[0], &f[3][..f[3].len().min(8)], f[5].parse::<f64>().unwrap());
        }
    }
}
