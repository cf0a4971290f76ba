#![no_main]

use libfuzzer_sys::fuzz_target;
use stegachan::channel::{apply_channel_with, blur_kernel, PerturbSample};
use stegachan::ndgrad::Tensor;

fuzz_target!(|data: &[u8]| {
    let Ok(sample) = serde_json::from_slice::<PerturbSample>(data) else {
        return;
    };
    if sample.validate().is_err() {
        return;
    }
    let k = sample.blur_kernel_size();
    let kern = blur_kernel(&sample.blur, k).expect("validated blur rasterizes");
    let sum: f64 = kern.iter().sum();
    assert!((sum - 1.0).abs() < 1e-9, "kernel must stay normalized");

    // Replaying onto a small image must not panic and stays in range.
    let img = Tensor::<f32>::filled(&[1, 8, 8, 3], 0.5);
    if let Ok(out) = apply_channel_with(&img, &sample) {
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
