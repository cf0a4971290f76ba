#![no_main]

use libfuzzer_sys::fuzz_target;
use stegachan::channel::{sample_perturb, ChannelConfig};

fuzz_target!(|data: &[u8]| {
    let Ok(cfg) = serde_json::from_slice::<ChannelConfig>(data) else {
        return;
    };
    if cfg.validate().is_ok() {
        // Valid configs always yield valid samples.
        if let Ok(sample) = sample_perturb(&cfg, 0, 16, 16) {
            sample.validate().expect("drawn samples validate");
        }
    }
});
