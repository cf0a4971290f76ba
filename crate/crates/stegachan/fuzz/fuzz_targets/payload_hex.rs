#![no_main]

use libfuzzer_sys::fuzz_target;
use stegachan::ecc;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(payload) = ecc::payload_from_hex(&text) {
        let hex = ecc::payload_to_hex(&payload);
        assert_eq!(ecc::payload_from_hex(&hex).unwrap(), payload);
    }
    if let Ok(bits) = ecc::bits_from_str(&text) {
        let s = ecc::bits_to_str(&bits);
        assert_eq!(ecc::bits_from_str(&s).unwrap(), bits);
    }
});
